#pragma once

#include <functional>
#include <istream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fewseg/adapt.hpp"
#include "fewseg/episode.hpp"
#include "fewseg/metrics.hpp"
#include "fewseg/pyramid.hpp"
#include "fewseg/segment.hpp"

namespace fewseg {

enum class Refinement { kDynamic, kNever };

struct RunConfig {
    int input_size = 400;       // 0 = keep the episode's resolution
    int shots = 0;              // 0 = use all support shots
    int aug_count = 2;
    Scalar max_shear_deg = 20.0;
    LossConfig loss;
    CrfConfig crf;
    BackboneConfig backbone;
    Refinement refinement = Refinement::kDynamic;
    bool quick_infer = false;
    uint64_t seed = 0;
    int threads = 1;
    bool save_soft_maps = false;

    void validate() const;
};

// Flat key=value config file; '#' starts a comment. Unknown keys throw.
RunConfig parse_config(std::istream& in, RunConfig base = {});
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);
std::string dump_config(const RunConfig& cfg);

struct FittedLevel {
    Eigen::MatrixXd k;  // adapted support rows, shots stacked
    Eigen::VectorXd v;  // stacked level-mask values
    int h = 0, w = 0;   // level extent of a single shot
};

// Product of the per-episode fitting stage; reusable across queries.
struct FittedEpisode {
    AdapterStack stack;
    std::shared_ptr<BackboneProvider> backbone;
    std::vector<FittedLevel> support_levels;
    RefineDecision refine;
    int img_h = 0, img_w = 0;
    double fit_ms = 0.0;
};

struct QueryResult {
    MaskU8 mask;
    MapF fused;
    std::vector<MapF> per_level;  // upsampled to query resolution
    Scalar threshold = 0.0;
    bool refined = false;
    std::optional<PixelCounts> counts;  // present when the query has gt
    double infer_ms = 0.0;
};

struct EpisodeResult {
    std::string episode_id;
    int class_id = 0;
    std::vector<QueryResult> queries;
    RefineDecision refine;
    std::vector<Scalar> loss_trace;
    double fit_ms = 0.0;
};

// Resize to cfg.input_size (when nonzero) and validate against the backbone
// stride. Loading keeps episodes raw; this is the single resize point.
Episode prepare_episode(Episode ep, const RunConfig& cfg, const BackboneProvider& backbone);

// Adapt heads on (support, queries[query_index]) and precompute everything
// reusable: adapted support rows, level masks, refinement decision.
FittedEpisode fit_episode(const Episode& ep, int query_index, const RunConfig& cfg,
                          std::shared_ptr<BackboneProvider> backbone = nullptr);

// Forward passes + dense comparison + segmentation only; no further fitting.
QueryResult infer_query(const FittedEpisode& fit, const QuerySample& query, const RunConfig& cfg);

// Per-query task adaptation (the reference protocol); with cfg.quick_infer
// the heads are fitted once on the first query and reused for the rest.
EpisodeResult run_episode(const Episode& ep, const RunConfig& cfg);

std::vector<QueryResult> quick_infer(const FittedEpisode& fit,
                                     const std::vector<QuerySample>& queries,
                                     const RunConfig& cfg);

// ---- evaluation over an episode stream ----

enum class PredictorMode { kPipeline, kNaive, kRandom, kOracle };

struct EvalOptions {
    PredictorMode mode = PredictorMode::kPipeline;
    Scalar random_p = 0.5;
    bool with_naive_row = false;
};

struct EpisodeRecord {
    std::string episode_id;
    int class_id = 0;
    PixelCounts counts;
    Scalar pred_fg_ratio = 0.0;
    Scalar threshold = 0.0;
    bool refined = false;
    Scalar pseudo_iou_refined = -1.0, pseudo_iou_unrefined = -1.0;
    double fit_ms = 0.0, infer_ms = 0.0;
};

struct EvalSummary {
    int episodes = 0;
    IoUAccumulator acc;
    Scalar miou_aggregate = 0.0;      // from accumulated counts
    Scalar miou_episode_mean = 0.0;   // mean of per-episode IoU ratios
    Scalar fbiou = 0.0;
    Scalar mean_fg_pct = 0.0;         // mean predicted foreground percentage
    std::vector<EpisodeRecord> records;
};

struct EpisodeSource {
    int count = 0;
    std::function<Episode(int)> get;
};

EpisodeSource directory_source(const std::string& dataset_dir, int max_episodes = 0);
EpisodeSource synthetic_source(uint64_t seed, int count, const SynthSpec& spec);

EvalSummary evaluate(const EpisodeSource& source, const RunConfig& cfg, const EvalOptions& opt);

// Naive (all-foreground) summary derived from the ground-truth counts only.
EvalSummary naive_summary_from(const EvalSummary& s);

std::string records_jsonl(const EvalSummary& s);
std::string summary_csv(const EvalSummary& s, const std::string& label,
                        const EvalSummary* naive = nullptr);

}  // namespace fewseg
