#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fewseg/analysis.hpp"
#include "fewseg/geometry.hpp"
#include "oracles.hpp"

using namespace fewseg;

namespace {

Volume random_volume(int h, int w, int c, uint64_t seed) {
    Rng rng(seed);
    Volume v(h, w, c);
    for (auto& x : v.data) x = rng.normal();
    return v;
}

}  // namespace

TEST_CASE("class_partition: all-foreground mask puts every vector in fg") {
    Volume f = random_volume(4, 4, 3, 1);
    MaskU8 mask(8, 8, 1);
    ClassPartition p = class_partition(f, mask);
    CHECK(p.fg.rows() == 16);
    CHECK(p.bg.rows() == 0);
    CHECK(!p.fg_empty);
    CHECK(p.bg_empty);
}

TEST_CASE("class_partition: checkerboard split sizes match the threshold count") {
    Volume f = random_volume(4, 4, 2, 2);
    // full-res checkerboard with 2x2 cells aligned to the level grid
    MaskU8 mask(8, 8, 0);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) mask.at(y, x) = (((y / 2) + (x / 2)) % 2 == 0) ? 1 : 0;
    // independent count: downsize and threshold by hand
    MapF soft = resize_bilinear(to_soft(mask), 4, 4);
    int fg_expect = 0;
    for (Scalar v : soft.data) fg_expect += (v > 0.5);
    ClassPartition p = class_partition(f, mask);
    CHECK(p.fg.rows() == fg_expect);
    CHECK(p.bg.rows() == 16 - fg_expect);
}

TEST_CASE("class_partition: exactly 0.5 after downsizing goes to background") {
    Volume f = random_volume(1, 1, 2, 3);
    MaskU8 mask(2, 2, 0);
    mask.at(0, 0) = 1;
    mask.at(0, 1) = 1;  // downsizes to exactly 0.5
    ClassPartition p = class_partition(f, mask);
    CHECK(p.fg.rows() == 0);
    CHECK(p.bg.rows() == 1);
}

TEST_CASE("class_similarities: identical vectors give sim 1, delta 0") {
    Volume q(4, 4, 3), s(4, 4, 3);
    for (int i = 0; i < 48; ++i) {
        q.data[i] = (i % 3 == 0) ? 2.0 : 1.0;
        s.data[i] = q.data[i];
    }
    MaskU8 mask(8, 8, 0);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 4; ++x) mask.at(y, x) = 1;  // left half fg
    LevelEmbeddingStats st = class_similarities(q, s, mask, mask);
    REQUIRE(st.sim_ff_ss.has_value());
    REQUIRE(st.sim_fb_ss.has_value());
    CHECK(*st.sim_ff_ss == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(*st.sim_fb_ss == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(*st.delta_ss == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(*st.delta_qs == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("class_similarities: orthonormal fg/bg gives delta 1") {
    const int h = 2, w = 2;
    Volume q(h, w, 2), s(h, w, 2);
    MaskU8 mask(4, 4, 0);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 2; ++x) mask.at(y, x) = 1;
    // fg vectors = e1, bg vectors = e2
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const bool fg = x < 1;
            q.at(y, x, 0) = fg ? 1.0 : 0.0;
            q.at(y, x, 1) = fg ? 0.0 : 1.0;
            s.at(y, x, 0) = fg ? 1.0 : 0.0;
            s.at(y, x, 1) = fg ? 0.0 : 1.0;
        }
    LevelEmbeddingStats st = class_similarities(q, s, mask, mask);
    CHECK(*st.sim_ff_ss == doctest::Approx(1.0));
    CHECK(*st.sim_fb_ss == doctest::Approx(0.0));
    CHECK(*st.delta_ss == doctest::Approx(1.0));
    CHECK(*st.sim_ff_qs == doctest::Approx(1.0));
    CHECK(*st.sim_fb_qs == doctest::Approx(0.0));
    CHECK(*st.delta_qs == doctest::Approx(1.0));
}

TEST_CASE("mean_cosine equals the quadratic-loop oracle") {
    Rng rng(9);
    for (int trial = 0; trial < 6; ++trial) {
        Eigen::MatrixXd a(7, 5), b(9, 5);
        for (int i = 0; i < a.rows(); ++i)
            for (int j = 0; j < 5; ++j) a(i, j) = rng.normal();
        for (int i = 0; i < b.rows(); ++i)
            for (int j = 0; j < 5; ++j) b(i, j) = rng.normal();
        auto fast = mean_cosine(a, b);
        auto slow = oracles::mean_cosine_quadratic(a, b);
        REQUIRE(fast.has_value());
        REQUIRE(slow.has_value());
        CHECK(*fast == doctest::Approx(*slow).epsilon(1e-6));
        CHECK(*fast >= -1.0 - 1e-12);
        CHECK(*fast <= 1.0 + 1e-12);
    }
}

TEST_CASE("mean_cosine excludes zero vectors and flags them") {
    Eigen::MatrixXd a(3, 3);
    a.setZero();
    a.row(0) = Eigen::Vector3d(1, 0, 0);
    a.row(2) = Eigen::Vector3d(0, 1, 0);
    Eigen::MatrixXd b = a;
    int excluded = 0;
    auto v = mean_cosine(a, b, &excluded);
    REQUIRE(v.has_value());
    CHECK(excluded == 2);  // one zero row per side
    auto oracle = oracles::mean_cosine_quadratic(a, b);
    CHECK(*v == doctest::Approx(*oracle).epsilon(1e-12));

    Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(2, 3);
    CHECK(!mean_cosine(zero, b).has_value());
}

TEST_CASE("sim_ff_ss is invariant to swapping the support copies") {
    // the formula is symmetric in its two (identical) vector sets by
    // construction; verify against the quadratic oracle evaluated both ways
    Rng rng(10);
    Eigen::MatrixXd a(6, 4);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 4; ++j) a(i, j) = rng.normal();
    auto fwd = oracles::mean_cosine_quadratic(a, a);
    auto fast = mean_cosine(a, a);
    CHECK(*fast == doctest::Approx(*fwd).epsilon(1e-9));
}

TEST_CASE("block_average: constant stats collapse to the constant") {
    std::vector<LevelEmbeddingStats> per_level(13);
    for (int l = 0; l < 13; ++l) {
        per_level[l].level = l;
        per_level[l].sim_ff_ss = 0.25;
        per_level[l].sim_fb_ss = 0.1;
        per_level[l].delta_ss = 0.15;
        per_level[l].sim_ff_qs = 0.2;
        per_level[l].sim_fb_qs = 0.05;
        per_level[l].delta_qs = 0.15;
    }
    BlockSummary bs = block_average(per_level, {4, 6, 3});
    REQUIRE(bs.blocks.size() == 3);
    for (const auto& b : bs.blocks) {
        CHECK(*b.sim_ff_ss == doctest::Approx(0.25));
        CHECK(*b.delta_qs == doctest::Approx(0.15));
    }
}

TEST_CASE("block_average: L=3 split (1,1,1) reproduces the levels") {
    std::vector<LevelEmbeddingStats> per_level(3);
    for (int l = 0; l < 3; ++l) {
        per_level[l].delta_qs = 0.1 * (l + 1);
    }
    BlockSummary bs = block_average(per_level, {1, 1, 1});
    for (int l = 0; l < 3; ++l) CHECK(*bs.blocks[l].delta_qs == doctest::Approx(0.1 * (l + 1)));
}

TEST_CASE("block_average: random stats match the mean oracle; bad split throws") {
    Rng rng(11);
    std::vector<LevelEmbeddingStats> per_level(5);
    std::vector<double> vals;
    for (int l = 0; l < 5; ++l) {
        const double v = rng.uniform(-1.0, 1.0);
        vals.push_back(v);
        per_level[l].delta_qs = v;
    }
    BlockSummary bs = block_average(per_level, {2, 3});
    CHECK(*bs.blocks[0].delta_qs == doctest::Approx((vals[0] + vals[1]) / 2));
    CHECK(*bs.blocks[1].delta_qs == doctest::Approx((vals[2] + vals[3] + vals[4]) / 3));
    CHECK_THROWS_AS(block_average(per_level, {2, 2}), ConfigError);
}

TEST_CASE("block_average skips absent stats rather than poisoning the mean") {
    std::vector<LevelEmbeddingStats> per_level(2);
    per_level[0].delta_qs = 0.5;
    // level 1 has no delta (absent class)
    BlockSummary bs = block_average(per_level, {2});
    CHECK(*bs.blocks[0].delta_qs == doctest::Approx(0.5));
}

TEST_CASE("embedding_table_csv renders the two-scope table") {
    std::vector<LevelEmbeddingStats> per_level(3);
    for (int l = 0; l < 3; ++l) {
        per_level[l].sim_ff_ss = 0.5;
        per_level[l].sim_fb_ss = 0.2;
        per_level[l].delta_ss = 0.3;
        per_level[l].sim_ff_qs = 0.4;
        per_level[l].sim_fb_qs = 0.3;
        per_level[l].delta_qs = 0.1;
    }
    BlockSummary before = block_average(per_level, {1, 1, 1});
    const std::string csv = embedding_table_csv(before, before, {"L", "M", "H"});
    CHECK(csv.find("intra_support,fg_fg") != std::string::npos);
    CHECK(csv.find("inter_query_support,delta") != std::string::npos);
    CHECK(csv.find("L_before") != std::string::npos);
    CHECK(csv.find("H_after") != std::string::npos);
}
