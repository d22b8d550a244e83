#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fewseg/tensor.hpp"

namespace fewseg {

struct SupportShot {
    ImageU8 image;
    MaskU8 mask;
};

struct QuerySample {
    ImageU8 image;
    std::optional<MaskU8> gt;
};

struct Episode {
    std::string episode_id;
    int class_id = 0;
    uint64_t seed = 0;
    std::vector<SupportShot> support;
    std::vector<QuerySample> queries;

    int shots() const { return static_cast<int>(support.size()); }
    void validate() const;
};

// Directory layout: support/img_<i>.png + support/mask_<i>.png,
// query/img_<j>.png (+ optional query/mask_<j>.png), meta.txt with
// class_id=<int> and seed=<int> lines. Shots and queries ordered by index.
Episode load_episode(const std::string& dir);
void save_episode(const Episode& ep, const std::string& dir);

struct SynthSpec {
    int height = 48, width = 48;
    int shots = 1;
    int queries = 1;
    Scalar separation = 1.0;       // 0 = statistically identical fg/bg
    int n_classes = 4;
    Scalar noise = 0.24;           // class-agnostic luminance-texture amplitude
    Scalar fg_lo = 0.18, fg_hi = 0.45;  // target foreground-ratio band
    std::optional<Scalar> fixed_fg_ratio;  // exact per-mask ratio when set
    int blob_cells = 5;            // coarse noise grid for shapes

    void validate() const;
};

// Procedural episode: foreground and background textures differ by a
// separation-controlled color offset; ground truth is exact by construction.
Episode synthesize_episode(uint64_t seed, const SynthSpec& spec);

}  // namespace fewseg
