#include "fewseg/plot.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "fewseg/metrics.hpp"
#include "fewseg/segment.hpp"

namespace fewseg {

namespace {

constexpr int kPanelW = 640, kPanelH = 420, kMargin = 40;

void draw_bars(cv::Mat& canvas, const std::vector<int>& counts, Scalar lo, Scalar hi,
               int max_count) {
    const int n = static_cast<int>(counts.size());
    const int plot_w = canvas.cols - 2 * kMargin;
    const int plot_h = canvas.rows - 2 * kMargin;
    for (int b = 0; b < n; ++b) {
        if (counts[b] == 0) continue;
        const int x0 = kMargin + b * plot_w / n;
        const int x1 = kMargin + (b + 1) * plot_w / n;
        const int bh = static_cast<int>(static_cast<double>(counts[b]) / max_count * plot_h);
        cv::rectangle(canvas, cv::Point(x0, canvas.rows - kMargin - bh),
                      cv::Point(std::max(x0 + 1, x1 - 1), canvas.rows - kMargin),
                      cv::Scalar(90, 90, 90), cv::FILLED);
    }
    cv::rectangle(canvas, cv::Point(kMargin, kMargin),
                  cv::Point(canvas.cols - kMargin, canvas.rows - kMargin),
                  cv::Scalar(0, 0, 0), 1);
    (void)lo;
    (void)hi;
}

int value_to_x(Scalar v, Scalar lo, Scalar hi, int width) {
    const Scalar t = hi > lo ? (v - lo) / (hi - lo) : 0.5;
    return kMargin + static_cast<int>(std::clamp(t, 0.0, 1.0) * (width - 2 * kMargin));
}

cv::Mat map_to_gray(const MapF& m, Scalar lo, Scalar hi) {
    cv::Mat out(m.h, m.w, CV_8UC1);
    const Scalar span = hi > lo ? hi - lo : 1.0;
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x)
            out.at<uint8_t>(y, x) = static_cast<uint8_t>(
                std::lround(std::clamp((m.at(y, x) - lo) / span, 0.0, 1.0) * 255.0));
    return out;
}

}  // namespace

HistogramPlot plot_fused_histogram(const MapF& fused, const std::string& out_png) {
    HistogramPlot hp;
    hp.lo = fused.min();
    hp.hi = fused.max();
    hp.mean_value = fused.mean();
    hp.threshold_value = threshold(fused);
    hp.counts.assign(64, 0);
    for (Scalar v : fused.data) {
        int b = hp.hi > hp.lo
                    ? static_cast<int>((v - hp.lo) / (hp.hi - hp.lo) * hp.counts.size())
                    : 0;
        b = std::clamp(b, 0, static_cast<int>(hp.counts.size()) - 1);
        ++hp.counts[b];
    }
    for (int c : hp.counts) hp.occupied_bins += (c > 0);

    cv::Mat canvas(kPanelH, kPanelW, CV_8UC3, cv::Scalar(255, 255, 255));
    int max_count = 1;
    for (int c : hp.counts) max_count = std::max(max_count, c);
    draw_bars(canvas, hp.counts, hp.lo, hp.hi, max_count);
    const int mx = value_to_x(hp.mean_value, hp.lo, hp.hi, kPanelW);
    const int tx = value_to_x(hp.threshold_value, hp.lo, hp.hi, kPanelW);
    cv::line(canvas, {mx, kMargin}, {mx, kPanelH - kMargin}, cv::Scalar(200, 80, 0), 2);  // mean
    cv::line(canvas, {tx, kMargin}, {tx, kPanelH - kMargin}, cv::Scalar(0, 160, 0), 2);
    cv::putText(canvas, "mean", {mx + 4, kMargin + 16}, cv::FONT_HERSHEY_SIMPLEX, 0.45,
                cv::Scalar(200, 80, 0));
    cv::putText(canvas, "thresh", {tx + 4, kMargin + 34}, cv::FONT_HERSHEY_SIMPLEX, 0.45,
                cv::Scalar(0, 160, 0));
    if (!cv::imwrite(out_png, canvas)) throw IngestError("cannot write plot: " + out_png);
    return hp;
}

void plot_level_grid(const std::vector<MapF>& per_level, const MapF& fused, const MaskU8& mask,
                     const std::string& out_png) {
    if (per_level.empty()) throw ShapeError("plot_level_grid: no level maps");
    const int h = fused.h, w = fused.w;
    const int panels = static_cast<int>(per_level.size()) + 2;
    const int pad = 6;
    cv::Mat canvas(h + 2 * pad + 18, panels * (w + pad) + pad, CV_8UC1, cv::Scalar(255));
    int x_at = pad;
    auto blit = [&](const cv::Mat& m, const std::string& label) {
        m.copyTo(canvas(cv::Rect(x_at, pad + 18, w, h)));
        cv::putText(canvas, label, {x_at, pad + 12}, cv::FONT_HERSHEY_SIMPLEX, 0.4,
                    cv::Scalar(0));
        x_at += w + pad;
    };
    for (size_t l = 0; l < per_level.size(); ++l) {
        MapF up = per_level[l];
        cv::Mat g = map_to_gray(up.h == h && up.w == w ? up : MapF(), 0, 1);
        if (up.h != h || up.w != w) {
            // upsample with nearest for display
            cv::Mat small = map_to_gray(up, up.min(), up.max());
            cv::resize(small, g, cv::Size(w, h), 0, 0, cv::INTER_NEAREST);
        } else {
            g = map_to_gray(up, up.min(), up.max());
        }
        blit(g, "L" + std::to_string(l));
    }
    blit(map_to_gray(fused, fused.min(), fused.max()), "fused");
    cv::Mat mg(h, w, CV_8UC1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) mg.at<uint8_t>(y, x) = mask.at(y, x) ? 255 : 0;
    blit(mg, "mask");
    if (!cv::imwrite(out_png, canvas)) throw IngestError("cannot write plot: " + out_png);
}

SurfaceData plot_random_surface(int n, const std::string& out_png) {
    SurfaceData sd;
    sd.n = n;
    sd.miou.resize(static_cast<size_t>(n) * n);
    sd.fbiou.resize(static_cast<size_t>(n) * n);
    for (int iy = 0; iy < n; ++iy) {
        for (int ix = 0; ix < n; ++ix) {
            RatioPair r;
            r.r_y = (iy + 0.5) / n;
            r.r_yhat = (ix + 0.5) / n;
            RandomIoU e = expected_random_iou(r);
            sd.miou[static_cast<size_t>(iy) * n + ix] = e.miou;
            sd.fbiou[static_cast<size_t>(iy) * n + ix] = e.fbiou;
        }
    }
    const int cell = std::max(1, 256 / n);
    cv::Mat canvas(n * cell + 24, 2 * n * cell + 12, CV_8UC3, cv::Scalar(255, 255, 255));
    auto render = [&](const std::vector<Scalar>& grid, int x_off, const std::string& label) {
        cv::Mat gray(n, n, CV_8UC1);
        for (int iy = 0; iy < n; ++iy)
            for (int ix = 0; ix < n; ++ix)
                gray.at<uint8_t>(n - 1 - iy, ix) = static_cast<uint8_t>(
                    std::lround(std::clamp(grid[static_cast<size_t>(iy) * n + ix], 0.0, 1.0) *
                                255.0));
        cv::Mat big, color;
        cv::resize(gray, big, cv::Size(n * cell, n * cell), 0, 0, cv::INTER_NEAREST);
        cv::applyColorMap(big, color, cv::COLORMAP_VIRIDIS);
        color.copyTo(canvas(cv::Rect(x_off, 20, n * cell, n * cell)));
        cv::putText(canvas, label, {x_off, 14}, cv::FONT_HERSHEY_SIMPLEX, 0.45, cv::Scalar(0));
    };
    render(sd.miou, 4, "mIoU");
    render(sd.fbiou, n * cell + 8, "FB-IoU");
    if (!cv::imwrite(out_png, canvas)) throw IngestError("cannot write plot: " + out_png);
    return sd;
}

void plot_report(const std::vector<Scalar>& episode_ious, const std::vector<Scalar>& fg_ratios,
                 const std::string& out_png) {
    cv::Mat canvas(kPanelH, 2 * kPanelW, CV_8UC3, cv::Scalar(255, 255, 255));
    auto hist_panel = [&](const std::vector<Scalar>& vals, int x_off, const std::string& label) {
        std::vector<int> counts(32, 0);
        for (Scalar v : vals) {
            int b = static_cast<int>(std::clamp(v, 0.0, 1.0) * counts.size());
            b = std::clamp(b, 0, static_cast<int>(counts.size()) - 1);
            ++counts[b];
        }
        int max_count = 1;
        for (int c : counts) max_count = std::max(max_count, c);
        cv::Mat panel = canvas(cv::Rect(x_off, 0, kPanelW, kPanelH));
        draw_bars(panel, counts, 0.0, 1.0, max_count);
        cv::putText(panel, label, {kMargin, kMargin - 8}, cv::FONT_HERSHEY_SIMPLEX, 0.5,
                    cv::Scalar(0, 0, 0));
    };
    hist_panel(episode_ious, 0, "per-episode IoU");
    hist_panel(fg_ratios, kPanelW, "predicted FG ratio");
    if (!cv::imwrite(out_png, canvas)) throw IngestError("cannot write plot: " + out_png);
}

}  // namespace fewseg
