#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "fewseg/tensor.hpp"

namespace fewseg {

// Foreground / background row partition of a feature volume under its
// bilinearly downsized mask (strictly > 0.5 is foreground).
struct ClassPartition {
    Eigen::MatrixXd fg, bg;  // rows are feature vectors
    bool fg_empty = false, bg_empty = false;
};

ClassPartition class_partition(const Volume& features, const MaskU8& full_res_mask);

struct LevelEmbeddingStats {
    int level = 0;
    // mean cosine over the full cross product; absent when a side is empty
    std::optional<Scalar> sim_ff_ss, sim_fb_ss, delta_ss;
    std::optional<Scalar> sim_ff_qs, sim_fb_qs, delta_qs;
    int zero_vectors_excluded = 0;
};

LevelEmbeddingStats class_similarities(const Volume& query_features, const Volume& support_features,
                                       const MaskU8& query_mask, const MaskU8& support_mask,
                                       int level = 0);

// Mean cosine similarity over A x B pairs (exact, via normalized-sum
// factorization); zero vectors are excluded and counted.
std::optional<Scalar> mean_cosine(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                                  int* zero_excluded = nullptr);

struct BlockStats {
    std::optional<Scalar> sim_ff_ss, sim_fb_ss, delta_ss;
    std::optional<Scalar> sim_ff_qs, sim_fb_qs, delta_qs;
};

struct BlockSummary {
    std::vector<BlockStats> blocks;  // one per split entry (L/M/H)
};

// Arithmetic mean of each statistic within the split blocks; split sizes
// must sum to the number of levels.
BlockSummary block_average(const std::vector<LevelEmbeddingStats>& per_level,
                           const std::vector<int>& split);

// CSV table: rows FG-FG / FG-BG / delta for intra-support and
// inter-query-support scopes, columns block x {before, after}.
std::string embedding_table_csv(const BlockSummary& before, const BlockSummary& after,
                                const std::vector<std::string>& block_names);

}  // namespace fewseg
