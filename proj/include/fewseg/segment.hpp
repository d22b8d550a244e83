#pragma once

#include <Eigen/Dense>
#include <optional>
#include <utility>
#include <vector>

#include "fewseg/tensor.hpp"

namespace fewseg {

struct CrfConfig {
    Scalar sxy_gaussian = 1.0;
    Scalar compat_gaussian = 2.0;
    Scalar sxy_bilateral = 35.0;
    Scalar srgb = 13.0;
    Scalar compat_bilateral = 1.0;
    int iterations = 10;
    Scalar temperature = 1.0;

    void validate() const;
};

struct FusedPrediction {
    MapF fused;                  // mean of the upsampled per-level maps
    std::vector<MapF> per_level; // upsampled to query resolution
    Scalar threshold = 0.0;
    bool refined = false;
    Scalar pseudo_iou_refined = -1.0;
    Scalar pseudo_iou_unrefined = -1.0;
    MaskU8 mask;
};

// Elementwise mean of the maps after bilinear upsampling to (th, tw).
MapF fuse(const std::vector<MapF>& per_level, int th, int tw);
MapF fuse(const std::vector<MapF>& per_level, int th, int tw, std::vector<MapF>* upsampled);

// 256-bin Otsu over [min, max]; nullopt when the histogram is degenerate
// (single occupied bin). Plateau ties resolve to the highest bin edge.
std::optional<Scalar> otsu_threshold(const MapF& values);

// max(mean, otsu); falls back to the mean when Otsu is degenerate or below it.
Scalar threshold(const MapF& fused);

// Strict comparison against threshold(fused).
MaskU8 binarize(const MapF& fused);
MaskU8 binarize(const MapF& fused, Scalar thresh);

// Two-class fully-connected CRF, mean-field inference. Unary foreground
// probability is sigmoid(T * (soft - tau)).
MaskU8 crf_refine(const ImageU8& image, const MapF& soft, Scalar tau, const CrfConfig& cfg);

// Single-episode foreground IoU = TP / (TP + FP + FN); 0/0 -> 0.
Scalar mask_iou(const MaskU8& pred, const MaskU8& gt);

// Pseudoepisode for the dynamic refinement decision: the support plays the
// query role against its own first-view features.
struct PseudoEpisode {
    // per level, shots stacked along the row axis in shot order
    std::vector<Eigen::MatrixXd> q;   // original adapted support features
    std::vector<Eigen::MatrixXd> k;   // backprojected first-view adapted features
    std::vector<Eigen::VectorXd> v;   // level masks
    std::vector<std::pair<int, int>> level_hw;  // per level (H_l, W_l) of one shot
    std::vector<ImageU8> support_images;        // per shot
    std::vector<MaskU8> support_masks;          // per shot, full resolution
};

struct RefineDecision {
    bool refine = false;
    Scalar pseudo_iou_refined = 0.0;
    Scalar pseudo_iou_unrefined = 0.0;
};

// Runs the dense comparison + fusion + thresholding on the pseudoepisode and
// compares the IoU of the CRF-refined vs unrefined pseudo-prediction against
// the support masks; refine iff strictly better.
RefineDecision refine_decision(const PseudoEpisode& pe, const CrfConfig& cfg);

}  // namespace fewseg
