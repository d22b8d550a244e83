#pragma once

#include <string>
#include <vector>

#include "fewseg/tensor.hpp"

namespace fewseg {

struct HistogramPlot {
    std::vector<int> counts;   // 64 bins over [lo, hi]
    Scalar lo = 0.0, hi = 1.0;
    Scalar mean_value = 0.0;
    Scalar threshold_value = 0.0;
    int occupied_bins = 0;
};

// Histogram of a fused score map with mean (blue) and threshold (green)
// verticals; returns the layout so callers can assert on it.
HistogramPlot plot_fused_histogram(const MapF& fused, const std::string& out_png);

// One grayscale panel per level plus the fused map and the binarized mask.
void plot_level_grid(const std::vector<MapF>& per_level, const MapF& fused, const MaskU8& mask,
                     const std::string& out_png);

struct SurfaceData {
    int n = 0;
    std::vector<Scalar> miou;   // n x n, r_y rows, r_yhat columns
    std::vector<Scalar> fbiou;
};

// Expected random-predictor mIoU / FB-IoU over an n x n ratio grid,
// rendered side by side as heatmaps.
SurfaceData plot_random_surface(int n, const std::string& out_png);

// Histograms of per-episode IoU and predicted foreground ratio.
void plot_report(const std::vector<Scalar>& episode_ious, const std::vector<Scalar>& fg_ratios,
                 const std::string& out_png);

}  // namespace fewseg
