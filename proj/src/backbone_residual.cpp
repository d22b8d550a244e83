#include <Eigen/Dense>
#include <cstring>
#include <fstream>

#include "fewseg/pyramid.hpp"

namespace fewseg {

// 50-layer residual network, taps at the end of every bottleneck of the
// stride-8/16/32 stages (4 + 6 + 3 = 13 levels), taken before the block's
// final rectifier. Weights are either loaded from a flat binary archive or
// seeded at random (shape tests, no-weights runs).

namespace {

struct ConvBN {
    int in_c = 0, out_c = 0, k = 1, stride = 1, pad = 0;
    Eigen::MatrixXd w;  // out_c x (in_c*k*k)
    Eigen::VectorXd gamma, beta, mean, var;
};

constexpr Scalar kBnEps = 1e-5;
constexpr char kMagic[8] = {'F', 'S', 'R', 'E', 'S', '5', '0', '\n'};

Volume conv_bn(const Volume& in, const ConvBN& c, bool relu_after, Volume* pre_relu = nullptr) {
    const int oh = (in.h + 2 * c.pad - c.k) / c.stride + 1;
    const int ow = (in.w + 2 * c.pad - c.k) / c.stride + 1;
    const int patch = c.in_c * c.k * c.k;
    MatrixRM cols(oh * ow, patch);
    cols.setZero();
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            Scalar* dst = cols.data() + (static_cast<size_t>(oy) * ow + ox) * patch;
            for (int ky = 0; ky < c.k; ++ky) {
                const int iy = oy * c.stride + ky - c.pad;
                if (iy < 0 || iy >= in.h) continue;
                for (int kx = 0; kx < c.k; ++kx) {
                    const int ix = ox * c.stride + kx - c.pad;
                    if (ix < 0 || ix >= in.w) continue;
                    const Scalar* src = &in.data[(static_cast<size_t>(iy) * in.w + ix) * in.c];
                    for (int ic = 0; ic < c.in_c; ++ic)
                        dst[(ic * c.k + ky) * c.k + kx] = src[ic];
                }
            }
        }
    }
    MatrixRM z = cols * c.w.transpose();  // (oh*ow) x out_c
    Volume out(oh, ow, c.out_c);
    for (int p = 0; p < oh * ow; ++p) {
        for (int oc = 0; oc < c.out_c; ++oc) {
            Scalar v = (z(p, oc) - c.mean(oc)) / std::sqrt(c.var(oc) + kBnEps) * c.gamma(oc) +
                       c.beta(oc);
            if (pre_relu) pre_relu->data[static_cast<size_t>(p) * c.out_c + oc] = v;
            out.data[static_cast<size_t>(p) * c.out_c + oc] = relu_after ? std::max(v, 0.0) : v;
        }
    }
    return out;
}

Volume maxpool3x3_s2(const Volume& in) {
    const int oh = (in.h + 2 - 3) / 2 + 1;
    const int ow = (in.w + 2 - 3) / 2 + 1;
    Volume out(oh, ow, in.c);
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            for (int ch = 0; ch < in.c; ++ch) {
                Scalar m = -1e300;
                for (int ky = 0; ky < 3; ++ky) {
                    const int iy = oy * 2 + ky - 1;
                    if (iy < 0 || iy >= in.h) continue;
                    for (int kx = 0; kx < 3; ++kx) {
                        const int ix = ox * 2 + kx - 1;
                        if (ix < 0 || ix >= in.w) continue;
                        m = std::max(m, in.at(iy, ix, ch));
                    }
                }
                out.at(oy, ox, ch) = m;
            }
        }
    }
    return out;
}

struct Bottleneck {
    ConvBN reduce, conv3, expand;
    bool has_down = false;
    ConvBN down;
};

class ResidualBackbone final : public BackboneProvider {
public:
    ResidualBackbone(uint64_t seed, const std::string& weights_path) {
        spec_.provider_id = "residual";
        for (int i = 0; i < 4; ++i) spec_.levels.push_back({8, 512});
        for (int i = 0; i < 6; ++i) spec_.levels.push_back({16, 1024});
        for (int i = 0; i < 3; ++i) spec_.levels.push_back({32, 2048});
        spec_.block_split = {4, 6, 3};
        build(seed);
        if (!weights_path.empty()) load(weights_path);
    }

    const BackboneSpec& spec() const override { return spec_; }
    bool reentrant() const override { return true; }

    FeaturePyramid extract(const ImageF& image) const override {
        Volume x(image.h, image.w, 3);
        static const Scalar mean[3] = {0.485, 0.456, 0.406};
        static const Scalar stdv[3] = {0.229, 0.224, 0.225};
        for (int p = 0; p < image.positions(); ++p)
            for (int ch = 0; ch < 3; ++ch)
                x.data[p * 3 + ch] = (image.data[p * 3 + ch] - mean[ch]) / stdv[ch];

        x = conv_bn(x, stem_, true);
        x = maxpool3x3_s2(x);

        FeaturePyramid pyr;
        for (size_t s = 0; s < stages_.size(); ++s) {
            for (const Bottleneck& b : stages_[s]) {
                Volume y = conv_bn(x, b.reduce, true);
                y = conv_bn(y, b.conv3, true);
                y = conv_bn(y, b.expand, false);
                Volume sc = b.has_down ? conv_bn(x, b.down, false) : x;
                Volume pre(y.h, y.w, y.c);
                for (size_t i = 0; i < y.data.size(); ++i) pre.data[i] = y.data[i] + sc.data[i];
                if (s >= 1) pyr.levels.push_back(pre);  // tap before the final relu
                Volume nxt(y.h, y.w, y.c);
                for (size_t i = 0; i < pre.data.size(); ++i)
                    nxt.data[i] = std::max(pre.data[i], 0.0);
                x = std::move(nxt);
            }
        }
        return pyr;
    }

private:
    void build(uint64_t seed) {
        Rng rng(derive_seed(seed, 0x5E50));
        auto mk = [&rng](int in_c, int out_c, int k, int stride, int pad) {
            ConvBN c;
            c.in_c = in_c;
            c.out_c = out_c;
            c.k = k;
            c.stride = stride;
            c.pad = pad;
            c.w.resize(out_c, in_c * k * k);
            const Scalar scale = std::sqrt(2.0 / (in_c * k * k));
            for (int i = 0; i < c.w.rows(); ++i)
                for (int j = 0; j < c.w.cols(); ++j) c.w(i, j) = rng.normal() * scale;
            c.gamma = Eigen::VectorXd::Ones(out_c);
            c.beta = Eigen::VectorXd::Zero(out_c);
            c.mean = Eigen::VectorXd::Zero(out_c);
            c.var = Eigen::VectorXd::Ones(out_c);
            return c;
        };
        stem_ = mk(3, 64, 7, 2, 3);
        const int block_counts[4] = {3, 4, 6, 3};
        const int widths[4] = {64, 128, 256, 512};
        int in_c = 64;
        for (int s = 0; s < 4; ++s) {
            std::vector<Bottleneck> stage;
            const int w = widths[s];
            const int out_c = w * 4;
            for (int bidx = 0; bidx < block_counts[s]; ++bidx) {
                const int stride = (s > 0 && bidx == 0) ? 2 : 1;
                Bottleneck b;
                b.reduce = mk(in_c, w, 1, 1, 0);
                b.conv3 = mk(w, w, 3, stride, 1);
                b.expand = mk(w, out_c, 1, 1, 0);
                if (stride != 1 || in_c != out_c) {
                    b.has_down = true;
                    b.down = mk(in_c, out_c, 1, stride, 0);
                }
                stage.push_back(std::move(b));
                in_c = out_c;
            }
            stages_.push_back(std::move(stage));
        }
    }

    // Archive: magic, then per tensor int32 rank, int64 dims, float32 data.
    // Tensor order: stem conv + bn, then per bottleneck reduce/conv3/expand
    // (conv then gamma/beta/mean/var) and downsample conv + bn when present.
    void load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw ConfigError("cannot open backbone weights: " + path);
        char magic[8];
        f.read(magic, 8);
        if (!f || std::memcmp(magic, kMagic, 8) != 0)
            throw ConfigError("bad backbone weights magic in " + path);
        auto read_tensor = [&f, &path](std::vector<int64_t> want) {
            int32_t rank = 0;
            f.read(reinterpret_cast<char*>(&rank), 4);
            if (!f || rank != static_cast<int32_t>(want.size()))
                throw ConfigError("backbone weights rank mismatch in " + path);
            int64_t n = 1;
            for (size_t i = 0; i < want.size(); ++i) {
                int64_t d = 0;
                f.read(reinterpret_cast<char*>(&d), 8);
                if (!f || d != want[i])
                    throw ConfigError("backbone weights shape mismatch in " + path);
                n *= d;
            }
            std::vector<float> buf(static_cast<size_t>(n));
            f.read(reinterpret_cast<char*>(buf.data()), n * 4);
            if (!f) throw ConfigError("backbone weights truncated: " + path);
            return buf;
        };
        auto load_conv_bn = [&read_tensor](ConvBN& c) {
            auto w = read_tensor({c.out_c, c.in_c, c.k, c.k});
            for (int oc = 0; oc < c.out_c; ++oc)
                for (int j = 0; j < c.in_c * c.k * c.k; ++j)
                    c.w(oc, j) = static_cast<Scalar>(w[static_cast<size_t>(oc) * c.in_c * c.k * c.k + j]);
            auto g = read_tensor({c.out_c});
            auto b = read_tensor({c.out_c});
            auto m = read_tensor({c.out_c});
            auto v = read_tensor({c.out_c});
            for (int i = 0; i < c.out_c; ++i) {
                c.gamma(i) = g[i];
                c.beta(i) = b[i];
                c.mean(i) = m[i];
                c.var(i) = v[i];
            }
        };
        load_conv_bn(stem_);
        for (auto& stage : stages_) {
            for (auto& b : stage) {
                load_conv_bn(b.reduce);
                load_conv_bn(b.conv3);
                load_conv_bn(b.expand);
                if (b.has_down) load_conv_bn(b.down);
            }
        }
        f.peek();
        if (!f.eof()) throw ConfigError("trailing data in backbone weights: " + path);
    }

    BackboneSpec spec_;
    ConvBN stem_;
    std::vector<std::vector<Bottleneck>> stages_;
};

}  // namespace

std::shared_ptr<BackboneProvider> make_residual_backbone(const BackboneConfig& cfg) {
    return std::make_shared<ResidualBackbone>(cfg.seed, cfg.weights_path);
}

}  // namespace fewseg
