#include "fewseg/pyramid.hpp"

#include <Eigen/Dense>

namespace fewseg {

void BackboneSpec::validate() const {
    if (levels.empty()) throw ConfigError("backbone spec needs at least one level");
    for (size_t i = 1; i < levels.size(); ++i)
        if (levels[i].stride < levels[i - 1].stride)
            throw ConfigError("backbone strides must be non-decreasing");
    int total = 0;
    for (int b : block_split) total += b;
    if (!block_split.empty() && total != level_count())
        throw ConfigError("block split does not sum to the level count");
}

FeaturePyramid extract_pyramid(const ImageF& image, const BackboneProvider& provider) {
    const BackboneSpec& spec = provider.spec();
    if (image.c != 3) throw ShapeError("extract_pyramid expects an RGB image");
    const int s = spec.max_stride();
    if (image.h % s != 0 || image.w % s != 0)
        throw ConfigError("image dimensions " + std::to_string(image.h) + "x" +
                          std::to_string(image.w) + " not divisible by backbone stride " +
                          std::to_string(s));
    FeaturePyramid pyr = provider.extract(image);
    if (pyr.level_count() != spec.level_count())
        throw ShapeError("provider returned wrong level count");
    for (int l = 0; l < pyr.level_count(); ++l) {
        const Volume& v = pyr.levels[l];
        const int eh = level_extent(image.h, spec.levels[l].stride);
        const int ew = level_extent(image.w, spec.levels[l].stride);
        if (v.h != eh || v.w != ew || v.c != spec.levels[l].channels)
            throw ShapeError("level " + std::to_string(l) + " shape mismatch");
        if (!all_finite(v)) throw NumericError("level " + std::to_string(l) + " has NaN/Inf");
    }
    return pyr;
}

// ---- toy backbone: seeded random 3x3 stride-2 convolutions + tanh ----

namespace {

class ToyBackbone final : public BackboneProvider {
public:
    explicit ToyBackbone(uint64_t seed) {
        spec_.provider_id = "toy";
        spec_.levels = {{2, 4}, {4, 8}, {8, 16}};
        spec_.block_split = {1, 1, 1};
        int in_c = 3;
        for (size_t l = 0; l < spec_.levels.size(); ++l) {
            const int out_c = spec_.levels[l].channels;
            Rng rng(derive_seed(seed, 0x70B0 + l));
            weights_.emplace_back(make_kernel(in_c, out_c, rng));
            in_c = out_c;
        }
    }

    const BackboneSpec& spec() const override { return spec_; }
    bool reentrant() const override { return true; }

    FeaturePyramid extract(const ImageF& image) const override {
        FeaturePyramid pyr;
        Volume x(image.h, image.w, 3);
        for (size_t i = 0; i < image.data.size(); ++i) x.data[i] = 2.0 * image.data[i] - 1.0;
        for (size_t l = 0; l < weights_.size(); ++l) {
            x = conv3x3_s2_tanh(x, weights_[l], spec_.levels[l].channels);
            pyr.levels.push_back(x);
        }
        return pyr;
    }

private:
    // kernel layout: [out_c][in_c][3][3], then out_c channel biases.
    // The biases give every feature vector a shared per-channel component,
    // matching the mean structure of pretrained-backbone activations.
    static std::vector<Scalar> make_kernel(int in_c, int out_c, Rng& rng) {
        std::vector<Scalar> k(static_cast<size_t>(out_c) * in_c * 9 + out_c);
        const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(in_c) * 9.0);
        for (size_t i = 0; i < k.size() - out_c; ++i) k[i] = rng.normal() * scale;
        for (size_t i = k.size() - out_c; i < k.size(); ++i) k[i] = rng.normal() * 0.7;
        return k;
    }

    static Volume conv3x3_s2_tanh(const Volume& in, const std::vector<Scalar>& k, int out_c) {
        const int oh = (in.h + 1) / 2;
        const int ow = (in.w + 1) / 2;
        Volume out(oh, ow, out_c);
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const Scalar* bias = &k[k.size() - out_c];
                for (int oc = 0; oc < out_c; ++oc) {
                    Scalar acc = bias[oc];
                    const Scalar* kw = &k[static_cast<size_t>(oc) * in.c * 9];
                    for (int ic = 0; ic < in.c; ++ic) {
                        for (int ky = 0; ky < 3; ++ky) {
                            const int iy = 2 * oy + ky - 1;
                            if (iy < 0 || iy >= in.h) continue;
                            for (int kx = 0; kx < 3; ++kx) {
                                const int ix = 2 * ox + kx - 1;
                                if (ix < 0 || ix >= in.w) continue;
                                acc += kw[ic * 9 + ky * 3 + kx] * in.at(iy, ix, ic);
                            }
                        }
                    }
                    out.at(oy, ox, oc) = std::tanh(acc);
                }
            }
        }
        return out;
    }

    BackboneSpec spec_;
    std::vector<std::vector<Scalar>> weights_;
};

}  // namespace

std::shared_ptr<BackboneProvider> make_residual_backbone(const BackboneConfig& cfg);  // backbone_residual.cpp

std::shared_ptr<BackboneProvider> make_backbone(const BackboneConfig& cfg) {
    if (cfg.provider_id == "toy") return std::make_shared<ToyBackbone>(cfg.seed);
    if (cfg.provider_id == "residual") return make_residual_backbone(cfg);
    throw ConfigError("unknown backbone provider: " + cfg.provider_id);
}

// ---- views ----

ViewSet make_views(const ImageF& image, const MaskU8* mask, int count, Scalar max_shear_deg,
                   uint64_t rng_seed) {
    if (count < 1) throw ConfigError("make_views: count must be >= 1");
    if (max_shear_deg < 0) throw ConfigError("make_views: max_shear_deg must be >= 0");
    ViewSet vs;
    vs.views.reserve(count);
    Rng rng(derive_seed(rng_seed, 0xA46));
    const Scalar cy = (image.h - 1) * 0.5;
    for (int a = 0; a < count; ++a) {
        Scalar deg = 0.0;
        Affine2 m = Affine2::identity();
        for (int attempt = 0; attempt < 64; ++attempt) {
            deg = max_shear_deg > 0 ? rng.uniform(-max_shear_deg, max_shear_deg) : 0.0;
            m = Affine2::shear_x_deg(deg, cy);
            if (m.invertible()) break;
        }
        if (!m.invertible()) throw NumericError("make_views: could not sample invertible affine");
        View view;
        view.affine = m;
        view.shear_deg = deg;
        if (m.is_identity()) {
            view.image = image;
            view.validity = MapF(image.h, image.w, 1.0);
        } else {
            view.image = warp_image(image, m, &view.validity);
        }
        if (mask) view.mask = m.is_identity() ? *mask : warp_mask(*mask, m);
        vs.views.push_back(std::move(view));
    }
    return vs;
}

// ---- backprojection ----

std::vector<uint8_t> view_feature_validity(const Affine2& affine, int fh, int fw, int img_h,
                                           int img_w) {
    const Affine2 inv = affine.inverse();
    std::vector<uint8_t> valid(static_cast<size_t>(fh) * fw, 0);
    const Scalar sy = static_cast<Scalar>(img_h) / fh;
    const Scalar sx = static_cast<Scalar>(img_w) / fw;
    for (int y = 0; y < fh; ++y) {
        for (int x = 0; x < fw; ++x) {
            // feature cell center in image coordinates
            const Scalar ix = (x + 0.5) * sx - 0.5;
            const Scalar iy = (y + 0.5) * sy - 0.5;
            Scalar ox, oy;
            inv.apply(ix, iy, ox, oy);
            if (ox >= 0.0 && oy >= 0.0 && ox <= img_w - 1.0 && oy <= img_h - 1.0)
                valid[static_cast<size_t>(y) * fw + x] = 1;
        }
    }
    return valid;
}

Backprojected backproject(const Volume& view_features, const Affine2& affine, int img_h, int img_w,
                          const std::vector<uint8_t>* view_valid) {
    if (!affine.invertible())
        throw NumericError("backproject: degenerate affine, |det| = " +
                           std::to_string(std::abs(affine.det())));
    const int fh = view_features.h, fw = view_features.w;
    if (view_valid && view_valid->size() != static_cast<size_t>(fh) * fw)
        throw ShapeError("backproject: validity map shape mismatch");
    Backprojected out;
    out.features = Volume(fh, fw, view_features.c);
    out.valid.assign(static_cast<size_t>(fh) * fw, 0);

    if (affine.is_identity() && !view_valid) {
        out.features = view_features;
        out.valid.assign(out.valid.size(), 1);
        return out;
    }

    // Tap index setup: g exactly on the last cell uses the two interior taps
    // with fractional weight 1, so boundary positions stay exact and valid.
    auto tap_setup = [](Scalar g, int n, int& i0, Scalar& f) {
        if (!(g >= 0.0 && g <= n - 1.0)) return false;
        if (n == 1) {
            i0 = 0;
            f = 0.0;
            return true;
        }
        i0 = static_cast<int>(std::floor(g));
        if (i0 >= n - 1) i0 = n - 2;
        f = g - i0;
        return true;
    };

    const Scalar sy = static_cast<Scalar>(img_h) / fh;
    const Scalar sx = static_cast<Scalar>(img_w) / fw;
    for (int y = 0; y < fh; ++y) {
        for (int x = 0; x < fw; ++x) {
            // original-grid cell center -> image coords -> view coords -> view grid
            const Scalar ix = (x + 0.5) * sx - 0.5;
            const Scalar iy = (y + 0.5) * sy - 0.5;
            Scalar vx, vy;
            affine.apply(ix, iy, vx, vy);
            const Scalar gx = (vx + 0.5) / sx - 0.5;
            const Scalar gy = (vy + 0.5) / sy - 0.5;
            int x0, y0;
            Scalar fxw, fyw;
            if (!tap_setup(gx, fw, x0, fxw) || !tap_setup(gy, fh, y0, fyw)) continue;
            const int x1 = std::min(x0 + 1, fw - 1);
            const int y1 = std::min(y0 + 1, fh - 1);
            if (view_valid) {
                const auto& vv = *view_valid;
                const bool ok = vv[static_cast<size_t>(y0) * fw + x0] &&
                                vv[static_cast<size_t>(y0) * fw + x1] &&
                                vv[static_cast<size_t>(y1) * fw + x0] &&
                                vv[static_cast<size_t>(y1) * fw + x1];
                if (!ok) continue;
            }
            for (int ch = 0; ch < view_features.c; ++ch) {
                out.features.at(y, x, ch) =
                    (1 - fyw) * ((1 - fxw) * view_features.at(y0, x0, ch) +
                                 fxw * view_features.at(y0, x1, ch)) +
                    fyw * ((1 - fxw) * view_features.at(y1, x0, ch) +
                           fxw * view_features.at(y1, x1, ch));
            }
            out.valid[static_cast<size_t>(y) * fw + x] = 1;
        }
    }
    return out;
}

MaskPyramid downsample_mask(const MaskU8& mask, const BackboneSpec& spec) {
    MaskPyramid out;
    MapF soft = to_soft(mask);
    for (const auto& lvl : spec.levels) {
        const int lh = level_extent(mask.h, lvl.stride);
        const int lw = level_extent(mask.w, lvl.stride);
        MapF m = resize_bilinear(soft, lh, lw);
        for (auto& v : m.data) v = std::clamp(v, 0.0, 1.0);
        out.levels.push_back(std::move(m));
    }
    return out;
}

}  // namespace fewseg
