#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fewseg/pyramid.hpp"

using namespace fewseg;

namespace {

ImageF random_image(int h, int w, uint64_t seed) {
    Rng rng(seed);
    ImageF img(h, w, 3);
    for (auto& v : img.data) v = rng.uniform();
    return img;
}

// channels affine in (x, y): exactly representable by bilinear interpolation
Volume ramp_volume(int h, int w, int c) {
    Volume v(h, w, c);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch)
                v.at(y, x, ch) = 0.3 * x + 0.7 * y + 0.05 * ch * (x - y) + ch;
    return v;
}

}  // namespace

TEST_CASE("toy provider: level shapes for a 32x32 image") {
    auto bb = make_backbone({"toy", 5, ""});
    FeaturePyramid pyr = extract_pyramid(random_image(32, 32, 1), *bb);
    REQUIRE(pyr.level_count() == 3);
    CHECK(pyr.levels[0].h == 16);
    CHECK(pyr.levels[0].w == 16);
    CHECK(pyr.levels[0].c == 4);
    CHECK(pyr.levels[1].h == 8);
    CHECK(pyr.levels[1].w == 8);
    CHECK(pyr.levels[1].c == 8);
    CHECK(pyr.levels[2].h == 4);
    CHECK(pyr.levels[2].w == 4);
    CHECK(pyr.levels[2].c == 16);
}

TEST_CASE("extract_pyramid is bitwise deterministic") {
    auto bb = make_backbone({"toy", 5, ""});
    ImageF img = random_image(32, 32, 2);
    FeaturePyramid a = extract_pyramid(img, *bb);
    FeaturePyramid b = extract_pyramid(img, *bb);
    for (int l = 0; l < a.level_count(); ++l) CHECK(a.levels[l].data == b.levels[l].data);
}

TEST_CASE("unknown provider and stride divisibility are configuration errors") {
    CHECK_THROWS_AS(make_backbone({"vgg", 0, ""}), ConfigError);
    auto bb = make_backbone({"toy", 5, ""});
    CHECK_THROWS_AS(extract_pyramid(random_image(30, 32, 3), *bb), ConfigError);
}

TEST_CASE("residual provider: 13 bottleneck taps with the declared layout") {
    // random-weight instance; the layer geometry is what is under test
    auto bb = make_backbone({"residual", 17, ""});
    const BackboneSpec& spec = bb->spec();
    REQUIRE(spec.level_count() == 13);
    CHECK(spec.block_split == std::vector<int>{4, 6, 3});
    std::vector<std::pair<int, int>> expect;
    for (int i = 0; i < 4; ++i) expect.push_back({8, 512});
    for (int i = 0; i < 6; ++i) expect.push_back({16, 1024});
    for (int i = 0; i < 3; ++i) expect.push_back({32, 2048});
    for (int l = 0; l < 13; ++l) {
        CHECK(spec.levels[l].stride == expect[l].first);
        CHECK(spec.levels[l].channels == expect[l].second);
    }
    FeaturePyramid pyr = extract_pyramid(random_image(224, 224, 4), *bb);
    REQUIRE(pyr.level_count() == 13);
    for (int l = 0; l < 13; ++l) {
        CHECK(pyr.levels[l].h == 224 / expect[l].first);
        CHECK(pyr.levels[l].w == 224 / expect[l].first);
        CHECK(pyr.levels[l].c == expect[l].second);
    }
}

TEST_CASE("make_views: zero shear reproduces the input") {
    ImageF img = random_image(24, 24, 6);
    ViewSet vs = make_views(img, nullptr, 3, 0.0, 42);
    REQUIRE(vs.views.size() == 3);
    for (const View& v : vs.views) {
        CHECK(v.affine.is_identity());
        CHECK(v.shear_deg == 0.0);
        CHECK(v.image.data == img.data);
        for (Scalar f : v.validity.data) CHECK(f == 1.0);
    }
}

TEST_CASE("make_views: deterministic per seed, angles within the bound") {
    ImageF img = random_image(24, 24, 7);
    ViewSet a = make_views(img, nullptr, 2, 20.0, 7);
    ViewSet b = make_views(img, nullptr, 2, 20.0, 7);
    REQUIRE(a.views.size() == 2);
    for (size_t i = 0; i < a.views.size(); ++i) {
        CHECK(a.views[i].shear_deg == b.views[i].shear_deg);
        CHECK(a.views[i].image.data == b.views[i].image.data);
        CHECK(std::abs(a.views[i].shear_deg) <= 20.0);
    }
    ViewSet c = make_views(img, nullptr, 2, 20.0, 1);
    for (const View& v : c.views) CHECK(std::abs(v.shear_deg) <= 20.0);
    CHECK(a.views[0].shear_deg != c.views[0].shear_deg);
}

TEST_CASE("backproject: identity affine is exact") {
    Volume feat = ramp_volume(9, 7, 3);
    Backprojected bp = backproject(feat, Affine2::identity(), 18, 14);
    CHECK(bp.features.data == feat.data);
    for (uint8_t v : bp.valid) CHECK(v == 1);
}

TEST_CASE("backproject: degenerate affine rejected") {
    Affine2 degenerate;
    degenerate.a = 0;
    degenerate.d = 0;
    Volume feat = ramp_volume(4, 4, 1);
    CHECK_THROWS_AS(backproject(feat, degenerate, 8, 8), NumericError);
}

TEST_CASE("backproject round trip on an affine ramp") {
    // forward-warp the ramp analytically (a linear map of a linear field is
    // linear, which bilinear interpolation reproduces), then backproject
    const int img_h = 32, img_w = 32, fh = 16, fw = 16;
    Affine2 shear = Affine2::shear_x_deg(9.0, (img_h - 1) * 0.5);
    const Affine2 inv = shear.inverse();

    Volume orig = ramp_volume(fh, fw, 3);
    auto analytic = [&](Scalar gx, Scalar gy, int ch) {
        return 0.3 * gx + 0.7 * gy + 0.05 * ch * (gx - gy) + ch;
    };
    Volume view(fh, fw, 3);
    const Scalar sx = static_cast<Scalar>(img_w) / fw;
    const Scalar sy = static_cast<Scalar>(img_h) / fh;
    for (int y = 0; y < fh; ++y)
        for (int x = 0; x < fw; ++x) {
            const Scalar ix = (x + 0.5) * sx - 0.5;
            const Scalar iy = (y + 0.5) * sy - 0.5;
            Scalar ox, oy;
            inv.apply(ix, iy, ox, oy);
            const Scalar gx = (ox + 0.5) / sx - 0.5;
            const Scalar gy = (oy + 0.5) / sy - 0.5;
            for (int ch = 0; ch < 3; ++ch) view.at(y, x, ch) = analytic(gx, gy, ch);
        }

    Backprojected bp = backproject(view, shear, img_h, img_w);
    int valid_count = 0;
    Scalar max_err = 0.0;
    for (int y = 0; y < fh; ++y)
        for (int x = 0; x < fw; ++x) {
            if (!bp.valid[y * fw + x]) continue;
            ++valid_count;
            for (int ch = 0; ch < 3; ++ch)
                max_err = std::max(max_err,
                                   std::abs(bp.features.at(y, x, ch) - orig.at(y, x, ch)));
        }
    CHECK(valid_count > fh * fw / 2);
    CHECK(max_err < 1e-5);
}

TEST_CASE("backproject validity soundness: all taps inside the view") {
    Rng rng(99);
    for (int trial = 0; trial < 10; ++trial) {
        const int fh = 8, fw = 10, img_h = 32, img_w = 40;
        Affine2 m = Affine2::shear_x_deg(rng.uniform(-25.0, 25.0), (img_h - 1) * 0.5);
        Volume feat = ramp_volume(fh, fw, 1);
        Backprojected bp = backproject(feat, m, img_h, img_w);
        const Scalar sx = static_cast<Scalar>(img_w) / fw;
        const Scalar sy = static_cast<Scalar>(img_h) / fh;
        for (int y = 0; y < fh; ++y)
            for (int x = 0; x < fw; ++x) {
                if (!bp.valid[y * fw + x]) continue;
                Scalar vx, vy;
                m.apply((x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5, vx, vy);
                const Scalar gx = (vx + 0.5) / sx - 0.5;
                const Scalar gy = (vy + 0.5) / sy - 0.5;
                CHECK(gx >= 0.0);
                CHECK(gy >= 0.0);
                CHECK(gx <= fw - 1.0);
                CHECK(gy <= fh - 1.0);
            }
    }
}

TEST_CASE("backproject marks out-of-view positions invalid") {
    const int fh = 8, fw = 8, img = 32;
    Affine2 m = Affine2::shear_x_deg(20.0, (img - 1) * 0.5);
    Volume feat = ramp_volume(fh, fw, 2);
    Backprojected bp = backproject(feat, m, img, img);
    int invalid = 0;
    for (uint8_t v : bp.valid) invalid += (v == 0);
    CHECK(invalid > 0);
    // shear pushes opposite corners out on opposite sides
    CHECK(bp.valid[0 * fw + 0] + bp.valid[(fh - 1) * fw + (fw - 1)] < 2);
}

TEST_CASE("downsample_mask: constant masks and range") {
    auto bb = make_backbone({"toy", 5, ""});
    MaskU8 ones(16, 16, 1);
    MaskPyramid mp = downsample_mask(ones, bb->spec());
    REQUIRE(mp.levels.size() == 3);
    for (const MapF& lvl : mp.levels)
        for (Scalar v : lvl.data) CHECK(v == 1.0);
    MaskU8 zeros(16, 16, 0);
    mp = downsample_mask(zeros, bb->spec());
    for (const MapF& lvl : mp.levels)
        for (Scalar v : lvl.data) CHECK(v == 0.0);
}

TEST_CASE("downsample_mask: 4x4 left half to 2x2 under the centered grid") {
    BackboneSpec spec;
    spec.provider_id = "test";
    spec.levels = {{2, 1}};
    MaskU8 mask(4, 4, 0);
    for (int y = 0; y < 4; ++y) {
        mask.at(y, 0) = 1;
        mask.at(y, 1) = 1;
    }
    MaskPyramid mp = downsample_mask(mask, spec);
    REQUIRE(mp.levels.size() == 1);
    const MapF& lvl = mp.levels[0];
    REQUIRE(lvl.h == 2);
    REQUIRE(lvl.w == 2);
    CHECK(lvl.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(lvl.at(0, 1) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(lvl.at(1, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(lvl.at(1, 1) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("downsample_mask output stays in [0,1] for random masks") {
    auto bb = make_backbone({"toy", 5, ""});
    Rng rng(123);
    MaskU8 mask(24, 24);
    for (auto& v : mask.data) v = rng.uniform() < 0.37 ? 1 : 0;
    MaskPyramid mp = downsample_mask(mask, bb->spec());
    for (const MapF& lvl : mp.levels)
        for (Scalar v : lvl.data) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    const Scalar orig_mean = static_cast<Scalar>(mask.count_fg()) / mask.size();
    CHECK(std::abs(mp.levels[0].mean() - orig_mean) < 0.08);
}

TEST_CASE("warped views expose their validity") {
    ImageF img = random_image(32, 32, 8);
    ViewSet vs = make_views(img, nullptr, 2, 20.0, 3);
    for (const View& v : vs.views) {
        if (v.affine.is_identity()) continue;
        int invalid = 0;
        for (Scalar f : v.validity.data) invalid += (f == 0.0);
        CHECK(invalid > 0);
    }
}
