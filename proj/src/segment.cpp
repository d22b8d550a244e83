#include "fewseg/segment.hpp"

#include "fewseg/compare.hpp"
#include "fewseg/crf.hpp"
#include "fewseg/geometry.hpp"

namespace fewseg {

void CrfConfig::validate() const {
    if (sxy_gaussian <= 0 || sxy_bilateral <= 0 || srgb <= 0)
        throw ConfigError("CRF standard deviations must be positive");
    if (iterations < 1) throw ConfigError("CRF iterations must be >= 1");
}

MapF fuse(const std::vector<MapF>& per_level, int th, int tw, std::vector<MapF>* upsampled) {
    if (per_level.empty()) throw ShapeError("fuse: no score maps");
    MapF acc(th, tw, 0.0);
    if (upsampled) upsampled->clear();
    for (const MapF& lvl : per_level) {
        MapF up = (lvl.h == th && lvl.w == tw) ? lvl : resize_bilinear(lvl, th, tw);
        for (int i = 0; i < acc.size(); ++i) acc.data[i] += up.data[i];
        if (upsampled) upsampled->push_back(std::move(up));
    }
    const Scalar inv = 1.0 / static_cast<Scalar>(per_level.size());
    for (auto& v : acc.data) v *= inv;
    return acc;
}

MapF fuse(const std::vector<MapF>& per_level, int th, int tw) {
    return fuse(per_level, th, tw, nullptr);
}

std::optional<Scalar> otsu_threshold(const MapF& values) {
    if (values.empty()) throw ShapeError("otsu_threshold: empty map");
    constexpr int kBins = 256;
    const Scalar lo = values.min();
    const Scalar hi = values.max();
    if (!(hi > lo)) return std::nullopt;
    const Scalar width = (hi - lo) / kBins;

    uint64_t hist[kBins] = {0};
    for (Scalar v : values.data) {
        int b = static_cast<int>((v - lo) / (hi - lo) * kBins);
        if (b >= kBins) b = kBins - 1;
        ++hist[b];
    }
    int occupied = 0;
    for (uint64_t c : hist) occupied += (c > 0);
    if (occupied < 2) return std::nullopt;

    // cumulative count and first moment over bin centers
    Scalar total_w = 0.0, total_m = 0.0;
    for (int b = 0; b < kBins; ++b) {
        total_w += static_cast<Scalar>(hist[b]);
        total_m += static_cast<Scalar>(hist[b]) * (b + 0.5);
    }
    Scalar w0 = 0.0, m0 = 0.0;
    Scalar best = -1.0;
    int best_t = -1;
    for (int t = 0; t < kBins - 1; ++t) {
        w0 += static_cast<Scalar>(hist[t]);
        m0 += static_cast<Scalar>(hist[t]) * (t + 0.5);
        const Scalar w1 = total_w - w0;
        if (w0 == 0.0 || w1 == 0.0) continue;
        const Scalar mu0 = m0 / w0;
        const Scalar mu1 = (total_m - m0) / w1;
        const Scalar sigma_b = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        // plateau ties resolve to the highest edge
        if (sigma_b >= best) {
            best = sigma_b;
            best_t = t;
        }
    }
    if (best_t < 0) return std::nullopt;
    return lo + (best_t + 1) * width;
}

Scalar threshold(const MapF& fused) {
    if (fused.empty()) throw ShapeError("threshold: empty map");
    const Scalar mean = fused.mean();
    const std::optional<Scalar> otsu = otsu_threshold(fused);
    if (otsu && *otsu > mean) return *otsu;
    return mean;
}

MaskU8 binarize(const MapF& fused, Scalar thresh) {
    MaskU8 out(fused.h, fused.w);
    for (int i = 0; i < fused.size(); ++i) out.data[i] = fused.data[i] > thresh ? 1 : 0;
    return out;
}

MaskU8 binarize(const MapF& fused) { return binarize(fused, threshold(fused)); }

MaskU8 crf_refine(const ImageU8& image, const MapF& soft, Scalar tau, const CrfConfig& cfg) {
    cfg.validate();
    if (image.h != soft.h || image.w != soft.w)
        throw ShapeError("crf_refine: image and score map sizes differ");
    const Eigen::Index n = static_cast<Eigen::Index>(soft.h) * soft.w;

    Eigen::MatrixXd log_unary(n, 2);
    Eigen::MatrixXd q(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
        Scalar pf = 1.0 / (1.0 + std::exp(-cfg.temperature * (soft.data[i] - tau)));
        pf = std::clamp(pf, 1e-8, 1.0 - 1e-8);
        q(i, 0) = 1.0 - pf;
        q(i, 1) = pf;
        log_unary(i, 0) = std::log(1.0 - pf);
        log_unary(i, 1) = std::log(pf);
    }

    PairwiseKernel gaussian(PairwiseKernel::Kind::kGaussianSpatial, soft.h, soft.w, nullptr,
                            cfg.sxy_gaussian, 0.0, cfg.compat_gaussian);
    PairwiseKernel bilateral(PairwiseKernel::Kind::kBilateral, soft.h, soft.w, &image,
                             cfg.sxy_bilateral, cfg.srgb, cfg.compat_bilateral);

    for (int it = 0; it < cfg.iterations; ++it) {
        Eigen::MatrixXd msg = gaussian.message(q) + bilateral.message(q);
        // Potts: label l is penalized by the opposite label's message mass
        for (Eigen::Index i = 0; i < n; ++i) {
            const Scalar lf = log_unary(i, 1) - msg(i, 0);
            const Scalar lb = log_unary(i, 0) - msg(i, 1);
            const Scalar m = std::max(lf, lb);
            const Scalar ef = std::exp(lf - m);
            const Scalar eb = std::exp(lb - m);
            q(i, 1) = ef / (ef + eb);
            q(i, 0) = eb / (ef + eb);
        }
    }

    MaskU8 out(soft.h, soft.w);
    for (Eigen::Index i = 0; i < n; ++i) out.data[i] = q(i, 1) > q(i, 0) ? 1 : 0;
    return out;
}

Scalar mask_iou(const MaskU8& pred, const MaskU8& gt) {
    if (pred.h != gt.h || pred.w != gt.w) throw ShapeError("mask_iou: shape mismatch");
    uint64_t inter = 0, uni = 0;
    for (int i = 0; i < pred.size(); ++i) {
        const bool p = pred.data[i] != 0;
        const bool g = gt.data[i] != 0;
        inter += (p && g);
        uni += (p || g);
    }
    return uni == 0 ? 0.0 : static_cast<Scalar>(inter) / static_cast<Scalar>(uni);
}

RefineDecision refine_decision(const PseudoEpisode& pe, const CrfConfig& cfg) {
    const int levels = static_cast<int>(pe.q.size());
    const int shots = static_cast<int>(pe.support_images.size());
    if (levels == 0 || shots == 0) throw ShapeError("refine_decision: empty pseudoepisode");
    const int img_h = pe.support_images[0].h;
    const int img_w = pe.support_images[0].w;

    // per-shot fused maps (Eq. 6-7 on the pseudoepisode, shots sliced apart)
    std::vector<std::vector<MapF>> shot_levels(shots);
    for (int l = 0; l < levels; ++l) {
        const auto [lh, lw] = pe.level_hw[l];
        CorrelationInputs ci;
        ci.q = pe.q[l];
        ci.k = pe.k[l];
        ci.v = pe.v[l];
        ci.out_h = lh * shots;
        ci.out_w = lw;
        MapF stacked = correlation_map(ci);
        for (int s = 0; s < shots; ++s) {
            MapF slice(lh, lw);
            for (int y = 0; y < lh; ++y)
                for (int x = 0; x < lw; ++x) slice.at(y, x) = stacked.at(s * lh + y, x);
            shot_levels[s].push_back(std::move(slice));
        }
    }
    std::vector<MapF> fused_per_shot(shots);
    for (int s = 0; s < shots; ++s) fused_per_shot[s] = fuse(shot_levels[s], img_h, img_w);

    // one threshold over the concatenated pseudo prediction
    MapF all(shots * img_h, img_w);
    for (int s = 0; s < shots; ++s)
        for (int i = 0; i < img_h * img_w; ++i)
            all.data[static_cast<size_t>(s) * img_h * img_w + i] = fused_per_shot[s].data[i];
    const Scalar tau = threshold(all);

    uint64_t inter_u = 0, uni_u = 0, inter_r = 0, uni_r = 0;
    for (int s = 0; s < shots; ++s) {
        MaskU8 plain = binarize(fused_per_shot[s], tau);
        MaskU8 refined = crf_refine(pe.support_images[s], fused_per_shot[s], tau, cfg);
        const MaskU8& gt = pe.support_masks[s];
        if (gt.h != img_h || gt.w != img_w)
            throw ShapeError("refine_decision: support mask size mismatch");
        for (int i = 0; i < gt.size(); ++i) {
            const bool g = gt.data[i] != 0;
            inter_u += (plain.data[i] && g);
            uni_u += (plain.data[i] || g);
            inter_r += (refined.data[i] && g);
            uni_r += (refined.data[i] || g);
        }
    }
    RefineDecision rd;
    rd.pseudo_iou_unrefined = uni_u ? static_cast<Scalar>(inter_u) / uni_u : 0.0;
    rd.pseudo_iou_refined = uni_r ? static_cast<Scalar>(inter_r) / uni_r : 0.0;
    rd.refine = rd.pseudo_iou_refined > rd.pseudo_iou_unrefined;  // ties: do not refine
    return rd;
}

}  // namespace fewseg
