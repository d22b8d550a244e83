#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fewseg/geometry.hpp"
#include "fewseg/tensor.hpp"

namespace fewseg {

struct LevelShape {
    int stride = 1;
    int channels = 1;
};

struct BackboneSpec {
    std::string provider_id;
    std::vector<LevelShape> levels;           // strides non-decreasing
    std::vector<int> block_split;             // L/M/H level counts, sums to L

    int level_count() const { return static_cast<int>(levels.size()); }
    int max_stride() const {
        int s = 1;
        for (const auto& l : levels) s = std::max(s, l.stride);
        return s;
    }
    void validate() const;
};

struct FeaturePyramid {
    std::vector<Volume> levels;

    int level_count() const { return static_cast<int>(levels.size()); }
};

// Frozen feature provider. extract() consumes an RGB image in [0,1] and
// returns one volume per level, deterministically.
class BackboneProvider {
public:
    virtual ~BackboneProvider() = default;
    virtual const BackboneSpec& spec() const = 0;
    // Whether extract() may be called concurrently from several threads.
    virtual bool reentrant() const = 0;
    virtual FeaturePyramid extract(const ImageF& image) const = 0;
};

struct BackboneConfig {
    std::string provider_id = "toy";
    uint64_t seed = 1337;          // weight seed for weight-free providers
    std::string weights_path;      // residual provider, optional
};

// Throws ConfigError for unknown provider ids.
std::shared_ptr<BackboneProvider> make_backbone(const BackboneConfig& cfg);

FeaturePyramid extract_pyramid(const ImageF& image, const BackboneProvider& provider);

struct View {
    ImageF image;             // warped copy of the input
    Affine2 affine;           // original -> view, pixel coordinates
    Scalar shear_deg = 0.0;   // sampled parameter, kept for inspection
    MapF validity;            // full-res: 1 where the view pixel has a real source
    std::optional<MaskU8> mask;  // warped mask when one was supplied
};

struct ViewSet {
    std::vector<View> views;
};

// `count` independently sheared views; resamples internally if a sampled
// affine is degenerate (cannot happen for |deg| < 90 but guarded anyway).
ViewSet make_views(const ImageF& image, const MaskU8* mask, int count, Scalar max_shear_deg,
                   uint64_t rng_seed);

struct Backprojected {
    Volume features;               // resampled into original coordinates
    std::vector<uint8_t> valid;    // H*W flags; invalid positions are zero-filled
};

// Validity of view feature positions at (fh, fw) resolution: 1 where the
// position's image-space source lies inside the original image.
std::vector<uint8_t> view_feature_validity(const Affine2& affine, int fh, int fw, int img_h,
                                           int img_w);

// Resample a view-level feature volume back to original coordinates with the
// inverse affine. A position is valid when all four bilinear taps fall inside
// the view and (if view_valid is non-null) on view pixels with a real source.
Backprojected backproject(const Volume& view_features, const Affine2& affine, int img_h, int img_w,
                          const std::vector<uint8_t>* view_valid = nullptr);

struct MaskPyramid {
    std::vector<MapF> levels;  // values in [0,1]
};

MaskPyramid downsample_mask(const MaskU8& mask, const BackboneSpec& spec);

inline int level_extent(int image_extent, int stride) {
    return (image_extent + stride - 1) / stride;
}

}  // namespace fewseg
