#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "fewseg/common.hpp"

namespace fewseg {

using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Dense H x W x C volume, row-major with the channel index fastest.
// Position index p = y*w + x matches row p of the flattened (H*W) x C matrix.
struct Volume {
    int h = 0, w = 0, c = 0;
    std::vector<Scalar> data;

    Volume() = default;
    Volume(int h_, int w_, int c_, Scalar fill = 0.0)
        : h(h_), w(w_), c(c_), data(static_cast<size_t>(h_) * w_ * c_, fill) {}

    Scalar& at(int y, int x, int ch) { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }
    Scalar at(int y, int x, int ch) const { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }

    int positions() const { return h * w; }
    bool empty() const { return data.empty(); }

    Eigen::Map<MatrixRM> rows() { return {data.data(), h * w, c}; }
    Eigen::Map<const MatrixRM> rows() const { return {data.data(), h * w, c}; }
};

// Real-valued H x W map (score maps, soft masks).
struct MapF {
    int h = 0, w = 0;
    std::vector<Scalar> data;

    MapF() = default;
    MapF(int h_, int w_, Scalar fill = 0.0)
        : h(h_), w(w_), data(static_cast<size_t>(h_) * w_, fill) {}

    Scalar& at(int y, int x) { return data[static_cast<size_t>(y) * w + x]; }
    Scalar at(int y, int x) const { return data[static_cast<size_t>(y) * w + x]; }

    int size() const { return h * w; }
    bool empty() const { return data.empty(); }

    Scalar mean() const {
        Scalar s = 0.0;
        for (Scalar v : data) s += v;
        return data.empty() ? 0.0 : s / static_cast<Scalar>(data.size());
    }
    Scalar min() const {
        Scalar m = data.empty() ? 0.0 : data[0];
        for (Scalar v : data) m = std::min(m, v);
        return m;
    }
    Scalar max() const {
        Scalar m = data.empty() ? 0.0 : data[0];
        for (Scalar v : data) m = std::max(m, v);
        return m;
    }
};

// Binary H x W mask, 0 = background, 1 = foreground.
struct MaskU8 {
    int h = 0, w = 0;
    std::vector<uint8_t> data;

    MaskU8() = default;
    MaskU8(int h_, int w_, uint8_t fill = 0)
        : h(h_), w(w_), data(static_cast<size_t>(h_) * w_, fill) {}

    uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * w + x]; }
    uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * w + x]; }

    int size() const { return h * w; }
    bool empty() const { return data.empty(); }

    uint64_t count_fg() const {
        uint64_t n = 0;
        for (uint8_t v : data) n += (v != 0);
        return n;
    }

    bool operator==(const MaskU8& o) const { return h == o.h && w == o.w && data == o.data; }
};

// 8-bit RGB image, H x W x 3 interleaved.
struct ImageU8 {
    int h = 0, w = 0;
    std::vector<uint8_t> data;

    ImageU8() = default;
    ImageU8(int h_, int w_, uint8_t fill = 0)
        : h(h_), w(w_), data(static_cast<size_t>(h_) * w_ * 3, fill) {}

    uint8_t& at(int y, int x, int ch) { return data[(static_cast<size_t>(y) * w + x) * 3 + ch]; }
    uint8_t at(int y, int x, int ch) const { return data[(static_cast<size_t>(y) * w + x) * 3 + ch]; }

    bool empty() const { return data.empty(); }
};

// Floating RGB image in [0,1]; used as backbone input and for warped views.
using ImageF = Volume;

inline ImageF to_float(const ImageU8& img) {
    ImageF out(img.h, img.w, 3);
    for (size_t i = 0; i < img.data.size(); ++i)
        out.data[i] = static_cast<Scalar>(img.data[i]) / 255.0;
    return out;
}

inline ImageU8 to_u8(const ImageF& img) {
    ImageU8 out(img.h, img.w);
    for (size_t i = 0; i < img.data.size(); ++i) {
        Scalar v = std::clamp(img.data[i], 0.0, 1.0);
        out.data[i] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
    return out;
}

inline MapF to_soft(const MaskU8& m) {
    MapF out(m.h, m.w);
    for (int i = 0; i < m.size(); ++i) out.data[i] = m.data[i] ? 1.0 : 0.0;
    return out;
}

inline bool all_finite(const Volume& v) {
    for (Scalar x : v.data)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace fewseg
