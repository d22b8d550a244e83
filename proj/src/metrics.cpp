#include "fewseg/metrics.hpp"

namespace fewseg {

PixelCounts count_pixels(const MaskU8& pred, const MaskU8& gt) {
    if (pred.h != gt.h || pred.w != gt.w) throw ShapeError("count_pixels: shape mismatch");
    PixelCounts c;
    for (int i = 0; i < pred.size(); ++i) {
        const bool p = pred.data[i] != 0;
        const bool g = gt.data[i] != 0;
        c.tp += (p && g);
        c.fp += (p && !g);
        c.fn += (!p && g);
        c.tn += (!p && !g);
    }
    return c;
}

void IoUAccumulator::merge(const IoUAccumulator& o) {
    if (o.classes != classes) throw ShapeError("accumulator merge: class counts differ");
    for (size_t i = 0; i < inter.size(); ++i) inter[i] += o.inter[i];
    for (size_t i = 0; i < uni.size(); ++i) uni[i] += o.uni[i];
}

void accumulate(const PixelCounts& c, int class_id, IoUAccumulator& acc) {
    if (class_id < 0 || class_id >= acc.classes)
        throw ConfigError("accumulate: class id " + std::to_string(class_id) + " out of range");
    acc.i(1, class_id) += c.tp;
    acc.u(1, class_id) += c.tp + c.fp + c.fn;
    acc.i(0, class_id) += c.tn;
    acc.u(0, class_id) += c.tn + c.fn + c.fp;
}

void accumulate(const MaskU8& pred, const MaskU8& gt, int class_id, IoUAccumulator& acc) {
    accumulate(count_pixels(pred, gt), class_id, acc);
}

Scalar miou(const IoUAccumulator& acc, std::vector<int>* skipped) {
    if (skipped) skipped->clear();
    Scalar sum = 0.0;
    int used = 0;
    for (int c = 0; c < acc.classes; ++c) {
        if (acc.u(1, c) == 0) {
            if (skipped) skipped->push_back(c);
            continue;
        }
        sum += static_cast<Scalar>(acc.i(1, c)) / static_cast<Scalar>(acc.u(1, c));
        ++used;
    }
    if (used == 0) throw NumericError("miou: every class has zero union");
    return sum / used;
}

Scalar fbiou(const IoUAccumulator& acc) {
    uint64_t i_f = 0, u_f = 0, i_b = 0, u_b = 0;
    for (int c = 0; c < acc.classes; ++c) {
        i_f += acc.i(1, c);
        u_f += acc.u(1, c);
        i_b += acc.i(0, c);
        u_b += acc.u(0, c);
    }
    if (u_f == 0 && u_b == 0) throw NumericError("fbiou: both unions are zero");
    const Scalar iou_f = u_f ? static_cast<Scalar>(i_f) / u_f : 0.0;
    const Scalar iou_b = u_b ? static_cast<Scalar>(i_b) / u_b : 0.0;
    return 0.5 * (iou_f + iou_b);
}

namespace {

// IoU of a Bernoulli(rp) prediction against ratio-rt ground truth;
// rt*rp / (rt*rp + rt(1-rp) + (1-rt)rp), with 0/0 -> 0.
Scalar bernoulli_iou(Scalar rt, Scalar rp) {
    const Scalar num = rt * rp;
    const Scalar den = rt + rp - rt * rp;
    return den > 0.0 ? num / den : 0.0;
}

}  // namespace

RandomIoU expected_random_iou(const RatioPair& r) {
    RandomIoU out;
    out.miou = bernoulli_iou(r.r_y, r.r_yhat);
    const Scalar iou_b = bernoulli_iou(1.0 - r.r_y, 1.0 - r.r_yhat);
    out.fbiou = 0.5 * (out.miou + iou_b);
    return out;
}

RandomIoUGradients random_iou_gradients(const RatioPair& r) {
    RandomIoUGradients g;
    const Scalar den_f = r.r_y + r.r_yhat - r.r_y * r.r_yhat;
    const Scalar den_b = 1.0 - r.r_y * r.r_yhat;
    if (den_f == 0.0 || den_b == 0.0) {
        g.singular = true;
        return g;
    }
    g.dmiou = r.r_y * r.r_y / (den_f * den_f);
    const Scalar one_minus = 1.0 - r.r_y;
    // d/dr_yhat of 0.5 * (IoU_f + IoU_b)
    g.dfbiou = 0.5 * (g.dmiou - one_minus * one_minus / (den_b * den_b));
    return g;
}

}  // namespace fewseg
