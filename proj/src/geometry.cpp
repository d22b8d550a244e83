#include "fewseg/geometry.hpp"

namespace fewseg {

namespace {

inline Scalar src_coord(int out_idx, int out_n, int in_n) {
    return (static_cast<Scalar>(out_idx) + 0.5) * static_cast<Scalar>(in_n) /
               static_cast<Scalar>(out_n) -
           0.5;
}

}  // namespace

MapF resize_bilinear(const MapF& in, int oh, int ow) {
    if (in.empty()) throw ShapeError("resize_bilinear: empty input");
    MapF out(oh, ow);
    for (int y = 0; y < oh; ++y) {
        const Scalar sy = src_coord(y, oh, in.h);
        for (int x = 0; x < ow; ++x) {
            const Scalar sx = src_coord(x, ow, in.w);
            out.at(y, x) = bilinear_clamp(in, sx, sy);
        }
    }
    return out;
}

Volume resize_bilinear(const Volume& in, int oh, int ow) {
    if (in.empty()) throw ShapeError("resize_bilinear: empty input");
    Volume out(oh, ow, in.c);
    auto cl = [](int v, int n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); };
    for (int y = 0; y < oh; ++y) {
        const Scalar sy = src_coord(y, oh, in.h);
        const int y0 = static_cast<int>(std::floor(sy));
        const Scalar fy = sy - y0;
        const int ya = cl(y0, in.h), yb = cl(y0 + 1, in.h);
        for (int x = 0; x < ow; ++x) {
            const Scalar sx = src_coord(x, ow, in.w);
            const int x0 = static_cast<int>(std::floor(sx));
            const Scalar fx = sx - x0;
            const int xa = cl(x0, in.w), xb = cl(x0 + 1, in.w);
            for (int ch = 0; ch < in.c; ++ch) {
                out.at(y, x, ch) =
                    (1 - fy) * ((1 - fx) * in.at(ya, xa, ch) + fx * in.at(ya, xb, ch)) +
                    fy * ((1 - fx) * in.at(yb, xa, ch) + fx * in.at(yb, xb, ch));
            }
        }
    }
    return out;
}

ImageF warp_image(const ImageF& img, const Affine2& fwd, MapF* validity) {
    const Affine2 inv = fwd.inverse();
    ImageF out(img.h, img.w, img.c);
    if (validity) *validity = MapF(img.h, img.w, 0.0);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            Scalar sx, sy;
            inv.apply(static_cast<Scalar>(x), static_cast<Scalar>(y), sx, sy);
            const bool inside = sx >= 0.0 && sy >= 0.0 && sx <= img.w - 1.0 && sy <= img.h - 1.0;
            if (!inside) continue;  // zero-filled
            const int x0 = static_cast<int>(std::floor(sx));
            const int y0 = static_cast<int>(std::floor(sy));
            const Scalar fx = sx - x0;
            const Scalar fy = sy - y0;
            auto cl = [](int v, int n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); };
            const int xa = cl(x0, img.w), xb = cl(x0 + 1, img.w);
            const int ya = cl(y0, img.h), yb = cl(y0 + 1, img.h);
            for (int ch = 0; ch < img.c; ++ch) {
                out.at(y, x, ch) =
                    (1 - fy) * ((1 - fx) * img.at(ya, xa, ch) + fx * img.at(ya, xb, ch)) +
                    fy * ((1 - fx) * img.at(yb, xa, ch) + fx * img.at(yb, xb, ch));
            }
            if (validity) validity->at(y, x) = 1.0;
        }
    }
    return out;
}

MaskU8 warp_mask(const MaskU8& mask, const Affine2& fwd) {
    MapF soft = to_soft(mask);
    const Affine2 inv = fwd.inverse();
    MaskU8 out(mask.h, mask.w, 0);
    for (int y = 0; y < mask.h; ++y) {
        for (int x = 0; x < mask.w; ++x) {
            Scalar sx, sy;
            inv.apply(static_cast<Scalar>(x), static_cast<Scalar>(y), sx, sy);
            if (sx < 0.0 || sy < 0.0 || sx > mask.w - 1.0 || sy > mask.h - 1.0) continue;
            out.at(y, x) = bilinear_clamp(soft, sx, sy) > 0.5 ? 1 : 0;
        }
    }
    return out;
}

}  // namespace fewseg
