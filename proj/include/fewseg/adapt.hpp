#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "fewseg/tensor.hpp"

namespace fewseg {

struct LossConfig {
    Scalar temperature = 0.5;
    int epochs = 25;
    Scalar learning_rate = 0.01;
    Scalar momentum = 0.0;         // plain SGD by default
    int adapter_channels = 64;
    Scalar bn_momentum = 0.1;
    Scalar bn_eps = 1e-5;

    void validate() const;
};

// Per-level head: linear(C_in -> d) -> batch-norm -> relu -> linear(d -> d).
struct AdapterParams {
    Eigen::MatrixXd w1;  // C_in x d
    Eigen::RowVectorXd b1;
    Eigen::RowVectorXd bn_gamma, bn_beta;
    Eigen::RowVectorXd bn_run_mean, bn_run_var;
    Eigen::MatrixXd w2;  // d x d
    Eigen::RowVectorXd b2;
    Scalar bn_eps = 1e-5;
    bool proto_skipped = false;    // level mask had a one-sided class during fit

    int in_channels() const { return static_cast<int>(w1.rows()); }
    int out_channels() const { return static_cast<int>(w2.cols()); }

    static AdapterParams init(int c_in, int d, uint64_t seed, Scalar bn_eps = 1e-5);
};

enum class AdapterMode { kFit, kInfer };

struct AdapterCache {
    Eigen::MatrixXd x;      // N x C_in
    Eigen::RowVectorXd mu, var;
    Eigen::MatrixXd xhat;   // N x d
    Eigen::MatrixXd h;      // N x d, post-relu
    Eigen::MatrixXd y;      // N x d
};

struct AdapterGrads {
    Eigen::MatrixXd w1;
    Eigen::RowVectorXd b1, bn_gamma, bn_beta;
    Eigen::MatrixXd w2;
    Eigen::RowVectorXd b2;

    static AdapterGrads zeros(const AdapterParams& p);
    void add_scaled(const AdapterGrads& o, Scalar s);
};

// Row-wise forward. Fit mode normalizes with the batch statistics of `x`
// (the rows are the batch) and updates running statistics; infer mode uses
// the frozen running statistics.
Eigen::MatrixXd adapter_forward_rows(const Eigen::MatrixXd& x, AdapterParams& params,
                                     AdapterMode mode, Scalar bn_momentum = 0.1,
                                     AdapterCache* cache = nullptr);
Eigen::MatrixXd adapter_infer_rows(const Eigen::MatrixXd& x, const AdapterParams& params);

Volume adapter_forward(const Volume& features, AdapterParams& params, AdapterMode mode,
                       Scalar bn_momentum = 0.1);
Volume adapter_infer(const Volume& features, const AdapterParams& params);

// d(loss)/d(params) for a fit-mode forward recorded in `cache`, given dL/dy.
void adapter_backward(const AdapterParams& params, const AdapterCache& cache,
                      const Eigen::MatrixXd& dy, AdapterGrads& grads);

// ---- loss terms (matrix form: rows are valid positions) ----

struct PairGrads {
    Eigen::MatrixXd da, db;
};

// InfoNCE across paired rows; denominator runs over all rows of B
// (including the positive). Requires >= 2 rows.
Scalar loss_nce(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, Scalar tau,
                PairGrads* grads = nullptr);

// |mean_A - mean_B| + |var_A - var_B|, each averaged over channels.
Scalar loss_stat(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, PairGrads* grads = nullptr);

// Volume-level wrappers applying a validity map (1 = usable position).
Scalar loss_nce(const Volume& a, const Volume& b, const std::vector<uint8_t>& valid, Scalar tau);
Scalar loss_stat(const Volume& a, const Volume& b, const std::vector<uint8_t>& valid);

struct Prototypes {
    Eigen::VectorXd fg, bg;
    Scalar fg_weight = 0.0, bg_weight = 0.0;
    bool has_fg = false, has_bg = false;
};

// Mask-weighted global average pooling, all shots pooled jointly.
// weights[i] multiplies the mask (validity for backprojected views).
Prototypes masked_prototypes(const std::vector<const Eigen::MatrixXd*>& volumes,
                             const std::vector<const Eigen::VectorXd*>& masks,
                             const std::vector<const Eigen::VectorXd*>& weights = {});
Prototypes masked_prototypes(const Volume& features, const MapF& level_mask);

struct ProtoGrads {
    Eigen::VectorXd d_fg, d_fg_aug, d_bg_aug;
};

// -log( exp(c(p_f, p_f_aug)) / (exp(c(p_f, p_f_aug)) + exp(c(p_f, p_b_aug))) )
Scalar loss_proto(const Prototypes& orig, const Prototypes& aug, ProtoGrads* grads = nullptr);

// ---- combined per-level objective ----

struct LevelInputs {
    // Adapted feature rows (N x d). Views carry only their valid rows plus
    // the index of each row in the full H*W grid.
    Eigen::MatrixXd query;
    std::vector<Eigen::MatrixXd> query_views;
    std::vector<std::vector<int>> query_view_idx;
    std::vector<Eigen::MatrixXd> support;                    // per shot
    std::vector<std::vector<Eigen::MatrixXd>> support_views; // [shot][view]
    std::vector<std::vector<std::vector<int>>> support_view_idx;
    std::vector<Eigen::VectorXd> masks;                      // per shot, H*W in [0,1]
};

struct CombinedGrads {
    Eigen::MatrixXd d_query;
    std::vector<Eigen::MatrixXd> d_query_views;
    std::vector<Eigen::MatrixXd> d_support;
    std::vector<std::vector<Eigen::MatrixXd>> d_support_views;
};

struct LossBreakdown {
    Scalar total = 0.0;
    Scalar query_side = 0.0, support_side = 0.0, proto = 0.0;
    bool proto_skipped = false;
    int skipped_view_terms = 0;
};

// L = L^q + L^s + L_p with per-side view averaging; throws NumericError if
// every term is skipped.
LossBreakdown combined_loss(const LevelInputs& in, Scalar tau, CombinedGrads* grads = nullptr);

// ---- fitting ----

struct LevelFitData {
    Volume query;
    std::vector<Volume> query_views;                   // backprojected
    std::vector<std::vector<uint8_t>> query_view_valid;
    std::vector<Volume> support;                       // per shot
    std::vector<std::vector<Volume>> support_views;    // [shot][view]
    std::vector<std::vector<std::vector<uint8_t>>> support_view_valid;
    std::vector<MapF> masks;                           // per-shot level mask
};

struct AdapterStack {
    std::vector<AdapterParams> params;
    std::vector<Scalar> loss_trace;                 // per-epoch mean over levels
    std::vector<std::vector<Scalar>> level_traces;  // [level][epoch]
    LossConfig fit_config;
};

AdapterParams fit_single_level(const LevelFitData& level, const LossConfig& cfg, uint64_t seed,
                               std::vector<Scalar>* trace, int level_index = 0);

// Heads are fitted independently per level with seeds derived from
// (seed, level index); the per-level results do not depend on fit order.
AdapterStack fit_adapters(const std::vector<LevelFitData>& levels, const LossConfig& cfg,
                          uint64_t seed, int threads = 1);

// Bit-exact binary archive.
void save_adapter_stack(const AdapterStack& stack, const std::string& path);
AdapterStack load_adapter_stack(const std::string& path);

}  // namespace fewseg
