#include "fewseg/analysis.hpp"

#include <sstream>

#include "fewseg/geometry.hpp"

namespace fewseg {

ClassPartition class_partition(const Volume& features, const MaskU8& full_res_mask) {
    MapF soft = resize_bilinear(to_soft(full_res_mask), features.h, features.w);
    std::vector<int> fg_idx, bg_idx;
    for (int i = 0; i < features.positions(); ++i)
        (soft.data[i] > 0.5 ? fg_idx : bg_idx).push_back(i);  // exactly 0.5 -> background
    ClassPartition part;
    auto rows = features.rows();
    part.fg.resize(fg_idx.size(), features.c);
    part.bg.resize(bg_idx.size(), features.c);
    for (size_t r = 0; r < fg_idx.size(); ++r) part.fg.row(r) = rows.row(fg_idx[r]);
    for (size_t r = 0; r < bg_idx.size(); ++r) part.bg.row(r) = rows.row(bg_idx[r]);
    part.fg_empty = fg_idx.empty();
    part.bg_empty = bg_idx.empty();
    return part;
}

std::optional<Scalar> mean_cosine(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                                  int* zero_excluded) {
    // mean_ij cos(a_i, b_j) factorizes into (mean of unit a) . (mean of unit b)
    auto normalized_sum = [zero_excluded](const Eigen::MatrixXd& m, int& count) {
        Eigen::VectorXd sum = Eigen::VectorXd::Zero(m.cols());
        count = 0;
        for (int i = 0; i < m.rows(); ++i) {
            const Scalar n = m.row(i).norm();
            if (n < 1e-12) {
                if (zero_excluded) ++(*zero_excluded);
                continue;
            }
            sum += m.row(i).transpose() / n;
            ++count;
        }
        return sum;
    };
    int na = 0, nb = 0;
    Eigen::VectorXd sa = normalized_sum(a, na);
    Eigen::VectorXd sb = normalized_sum(b, nb);
    if (na == 0 || nb == 0) return std::nullopt;
    return sa.dot(sb) / (static_cast<Scalar>(na) * static_cast<Scalar>(nb));
}

LevelEmbeddingStats class_similarities(const Volume& query_features,
                                       const Volume& support_features, const MaskU8& query_mask,
                                       const MaskU8& support_mask, int level) {
    LevelEmbeddingStats st;
    st.level = level;
    ClassPartition ps = class_partition(support_features, support_mask);
    ClassPartition pq = class_partition(query_features, query_mask);

    if (!ps.fg_empty) st.sim_ff_ss = mean_cosine(ps.fg, ps.fg, &st.zero_vectors_excluded);
    if (!ps.fg_empty && !ps.bg_empty)
        st.sim_fb_ss = mean_cosine(ps.fg, ps.bg, &st.zero_vectors_excluded);
    if (st.sim_ff_ss && st.sim_fb_ss) st.delta_ss = *st.sim_ff_ss - *st.sim_fb_ss;

    if (!pq.fg_empty && !ps.fg_empty)
        st.sim_ff_qs = mean_cosine(pq.fg, ps.fg, &st.zero_vectors_excluded);
    if (!pq.fg_empty && !ps.bg_empty)
        st.sim_fb_qs = mean_cosine(pq.fg, ps.bg, &st.zero_vectors_excluded);
    if (st.sim_ff_qs && st.sim_fb_qs) st.delta_qs = *st.sim_ff_qs - *st.sim_fb_qs;
    return st;
}

BlockSummary block_average(const std::vector<LevelEmbeddingStats>& per_level,
                           const std::vector<int>& split) {
    int total = 0;
    for (int s : split) total += s;
    if (total != static_cast<int>(per_level.size()))
        throw ConfigError("block_average: split does not sum to the level count");

    BlockSummary out;
    int level = 0;
    for (int block_size : split) {
        BlockStats bs;
        auto fold = [&](auto member, std::optional<Scalar> BlockStats::*target) {
            Scalar sum = 0.0;
            int n = 0;
            for (int l = level; l < level + block_size; ++l) {
                const auto& v = per_level[l].*member;
                if (v) {
                    sum += *v;
                    ++n;
                }
            }
            if (n > 0) bs.*target = sum / n;
        };
        fold(&LevelEmbeddingStats::sim_ff_ss, &BlockStats::sim_ff_ss);
        fold(&LevelEmbeddingStats::sim_fb_ss, &BlockStats::sim_fb_ss);
        fold(&LevelEmbeddingStats::delta_ss, &BlockStats::delta_ss);
        fold(&LevelEmbeddingStats::sim_ff_qs, &BlockStats::sim_ff_qs);
        fold(&LevelEmbeddingStats::sim_fb_qs, &BlockStats::sim_fb_qs);
        fold(&LevelEmbeddingStats::delta_qs, &BlockStats::delta_qs);
        out.blocks.push_back(bs);
        level += block_size;
    }
    return out;
}

std::string embedding_table_csv(const BlockSummary& before, const BlockSummary& after,
                                const std::vector<std::string>& block_names) {
    std::ostringstream os;
    os.precision(4);
    os << std::fixed;
    auto cell = [&os](const std::optional<Scalar>& v) {
        os << ",";
        if (v)
            os << *v;
        else
            os << "n/a";
    };
    os << "scope,measure";
    for (const auto& n : block_names) os << "," << n << "_before";
    for (const auto& n : block_names) os << "," << n << "_after";
    os << "\n";

    auto row = [&](const char* scope, const char* name,
                   std::optional<Scalar> BlockStats::*member) {
        os << scope << "," << name;
        for (const auto& b : before.blocks) cell(b.*member);
        for (const auto& b : after.blocks) cell(b.*member);
        os << "\n";
    };
    row("intra_support", "fg_fg", &BlockStats::sim_ff_ss);
    row("intra_support", "fg_bg", &BlockStats::sim_fb_ss);
    row("intra_support", "delta", &BlockStats::delta_ss);
    row("inter_query_support", "fg_fg", &BlockStats::sim_ff_qs);
    row("inter_query_support", "fg_bg", &BlockStats::sim_fb_qs);
    row("inter_query_support", "delta", &BlockStats::delta_qs);
    return os.str();
}

}  // namespace fewseg
