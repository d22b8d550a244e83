#pragma once

#include <cstdint>
#include <vector>

#include "fewseg/tensor.hpp"

namespace fewseg {

struct PixelCounts {
    uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

    uint64_t total() const { return tp + fp + fn + tn; }
};

PixelCounts count_pixels(const MaskU8& pred, const MaskU8& gt);

// 2 x C intersection and union count matrices; row 0 accumulates the
// not-c (background) counts, row 1 the class counts. Background is not a
// class of its own, so C excludes it.
struct IoUAccumulator {
    int classes = 0;
    std::vector<uint64_t> inter;  // 2*C, row-major
    std::vector<uint64_t> uni;

    IoUAccumulator() = default;
    explicit IoUAccumulator(int c) : classes(c), inter(2 * c, 0), uni(2 * c, 0) {}

    uint64_t& i(int row, int cls) { return inter[static_cast<size_t>(row) * classes + cls]; }
    uint64_t i(int row, int cls) const { return inter[static_cast<size_t>(row) * classes + cls]; }
    uint64_t& u(int row, int cls) { return uni[static_cast<size_t>(row) * classes + cls]; }
    uint64_t u(int row, int cls) const { return uni[static_cast<size_t>(row) * classes + cls]; }

    void merge(const IoUAccumulator& o);
};

void accumulate(const MaskU8& pred, const MaskU8& gt, int class_id, IoUAccumulator& acc);
void accumulate(const PixelCounts& counts, int class_id, IoUAccumulator& acc);

// Classes with zero union are excluded from the mean (their ids reported via
// `skipped`); throws NumericError if every class is empty.
Scalar miou(const IoUAccumulator& acc, std::vector<int>* skipped = nullptr);

// Mean of aggregate foreground IoU (row-1 sums) and background IoU (row-0 sums).
Scalar fbiou(const IoUAccumulator& acc);

struct RatioPair {
    Scalar r_y = 0.0;     // true foreground ratio
    Scalar r_yhat = 0.0;  // predicted foreground ratio
};

struct RandomIoU {
    Scalar miou = 0.0;
    Scalar fbiou = 0.0;
};

// Closed-form expectations for a Bernoulli(r_yhat) predictor; 0/0 -> 0.
RandomIoU expected_random_iou(const RatioPair& r);

struct RandomIoUGradients {
    Scalar dmiou = 0.0;
    Scalar dfbiou = 0.0;
    bool singular = false;
};

RandomIoUGradients random_iou_gradients(const RatioPair& r);

}  // namespace fewseg
