#pragma once

#include "fewseg/tensor.hpp"

namespace fewseg {

constexpr double kAffineDetEps = 1e-8;

// 2x3 affine in image pixel coordinates: maps original -> view.
struct Affine2 {
    // x' = a*x + b*y + tx ; y' = c*x + d*y + ty
    Scalar a = 1, b = 0, tx = 0;
    Scalar c = 0, d = 1, ty = 0;

    static Affine2 identity() { return {}; }

    Scalar det() const { return a * d - b * c; }

    bool invertible() const { return std::abs(det()) > kAffineDetEps; }

    Affine2 inverse() const {
        const Scalar dt = det();
        if (std::abs(dt) <= kAffineDetEps)
            throw NumericError("degenerate affine: |det| = " + std::to_string(std::abs(dt)));
        Affine2 inv;
        inv.a = d / dt;
        inv.b = -b / dt;
        inv.c = -c / dt;
        inv.d = a / dt;
        inv.tx = (b * ty - d * tx) / dt;
        inv.ty = (c * tx - a * ty) / dt;
        return inv;
    }

    void apply(Scalar x, Scalar y, Scalar& ox, Scalar& oy) const {
        ox = a * x + b * y + tx;
        oy = c * x + d * y + ty;
    }

    bool is_identity(Scalar eps = 0.0) const {
        return std::abs(a - 1) <= eps && std::abs(b) <= eps && std::abs(tx) <= eps &&
               std::abs(c) <= eps && std::abs(d - 1) <= eps && std::abs(ty) <= eps;
    }

    // Horizontal shear by `deg` degrees about the row y = cy:
    // x' = x + tan(deg) * (y - cy), y' = y.
    static Affine2 shear_x_deg(Scalar deg, Scalar cy) {
        const Scalar s = std::tan(deg * M_PI / 180.0);
        Affine2 m;
        m.b = s;
        m.tx = -s * cy;
        return m;
    }
};

// Sampling grid convention used everywhere: pixel centers at integer
// coordinates, size mapping x_in = (x_out + 0.5) * (W_in / W_out) - 0.5
// (align-corners-false). Taps outside the input are clamped to the border.
inline Scalar bilinear_clamp(const MapF& m, Scalar x, Scalar y) {
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const Scalar fx = x - x0;
    const Scalar fy = y - y0;
    auto cl = [](int v, int n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); };
    const int xa = cl(x0, m.w), xb = cl(x0 + 1, m.w);
    const int ya = cl(y0, m.h), yb = cl(y0 + 1, m.h);
    return (1 - fy) * ((1 - fx) * m.at(ya, xa) + fx * m.at(ya, xb)) +
           fy * ((1 - fx) * m.at(yb, xa) + fx * m.at(yb, xb));
}

// True iff all four bilinear taps for (x,y) lie inside an h x w grid.
inline bool taps_inside(Scalar x, Scalar y, int h, int w) {
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    return x0 >= 0 && y0 >= 0 && x0 + 1 <= w - 1 && y0 + 1 <= h - 1;
}

MapF resize_bilinear(const MapF& in, int oh, int ow);
Volume resize_bilinear(const Volume& in, int oh, int ow);

// view(p) = img(A^{-1} p); pixels whose source lies outside are zero-filled
// and marked 0 in `validity` (1 elsewhere) when validity != nullptr.
ImageF warp_image(const ImageF& img, const Affine2& fwd, MapF* validity);

// Binary-mask warp via bilinear warp of the 0/1 map, thresholded at 0.5.
MaskU8 warp_mask(const MaskU8& mask, const Affine2& fwd);

}  // namespace fewseg
