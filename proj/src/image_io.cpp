#include "fewseg/image_io.hpp"

#include <fstream>

#include "fewseg/geometry.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace fewseg {

ImageU8 read_image_rgb(const std::string& path) {
    cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
    if (bgr.empty()) throw IngestError("cannot read image: " + path);
    ImageU8 out(bgr.rows, bgr.cols);
    for (int y = 0; y < bgr.rows; ++y) {
        const cv::Vec3b* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < bgr.cols; ++x) {
            out.at(y, x, 0) = row[x][2];
            out.at(y, x, 1) = row[x][1];
            out.at(y, x, 2) = row[x][0];
        }
    }
    return out;
}

void write_image_rgb(const std::string& path, const ImageU8& img) {
    cv::Mat bgr(img.h, img.w, CV_8UC3);
    for (int y = 0; y < img.h; ++y) {
        cv::Vec3b* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < img.w; ++x) {
            row[x][0] = img.at(y, x, 2);
            row[x][1] = img.at(y, x, 1);
            row[x][2] = img.at(y, x, 0);
        }
    }
    if (!cv::imwrite(path, bgr)) throw IngestError("cannot write image: " + path);
}

MaskU8 read_mask(const std::string& path) {
    cv::Mat raw = cv::imread(path, cv::IMREAD_UNCHANGED);
    if (raw.empty()) throw IngestError("cannot read mask: " + path);
    if (raw.channels() != 1 || raw.depth() != CV_8U)
        throw IngestError("mask must be 8-bit single-channel grayscale: " + path);
    MaskU8 out(raw.rows, raw.cols);
    for (int y = 0; y < raw.rows; ++y) {
        const uint8_t* row = raw.ptr<uint8_t>(y);
        for (int x = 0; x < raw.cols; ++x) out.at(y, x) = row[x] > 127 ? 1 : 0;
    }
    return out;
}

void write_mask(const std::string& path, const MaskU8& mask) {
    cv::Mat gray(mask.h, mask.w, CV_8UC1);
    for (int y = 0; y < mask.h; ++y) {
        uint8_t* row = gray.ptr<uint8_t>(y);
        for (int x = 0; x < mask.w; ++x) row[x] = mask.at(y, x) ? 255 : 0;
    }
    if (!cv::imwrite(path, gray)) throw IngestError("cannot write mask: " + path);
}

void write_soft_map(const std::string& path, const MapF& map) {
    const Scalar lo = map.min();
    const Scalar hi = map.max();
    const Scalar span = hi > lo ? hi - lo : 1.0;
    cv::Mat gray(map.h, map.w, CV_16UC1);
    for (int y = 0; y < map.h; ++y) {
        uint16_t* row = gray.ptr<uint16_t>(y);
        for (int x = 0; x < map.w; ++x) {
            const Scalar v = (map.at(y, x) - lo) / span;
            row[x] = static_cast<uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
        }
    }
    if (!cv::imwrite(path, gray)) throw IngestError("cannot write soft map: " + path);
    std::ofstream side(path + ".range.txt");
    if (!side) throw IngestError("cannot write sidecar for: " + path);
    side.precision(17);
    side << lo << " " << hi << "\n";
}

MapF read_soft_map(const std::string& path) {
    cv::Mat raw = cv::imread(path, cv::IMREAD_UNCHANGED);
    if (raw.empty()) throw IngestError("cannot read soft map: " + path);
    if (raw.channels() != 1 || raw.depth() != CV_16U)
        throw IngestError("soft map must be 16-bit single-channel: " + path);
    std::ifstream side(path + ".range.txt");
    Scalar lo = 0.0, hi = 1.0;
    if (side) side >> lo >> hi;
    MapF out(raw.rows, raw.cols);
    for (int y = 0; y < raw.rows; ++y) {
        const uint16_t* row = raw.ptr<uint16_t>(y);
        for (int x = 0; x < raw.cols; ++x)
            out.at(y, x) = lo + (hi - lo) * (static_cast<Scalar>(row[x]) / 65535.0);
    }
    return out;
}

void write_gray8(const std::string& path, const MapF& map, Scalar lo, Scalar hi) {
    const Scalar span = hi > lo ? hi - lo : 1.0;
    cv::Mat gray(map.h, map.w, CV_8UC1);
    for (int y = 0; y < map.h; ++y) {
        uint8_t* row = gray.ptr<uint8_t>(y);
        for (int x = 0; x < map.w; ++x) {
            const Scalar v = std::clamp((map.at(y, x) - lo) / span, 0.0, 1.0);
            row[x] = static_cast<uint8_t>(std::lround(v * 255.0));
        }
    }
    if (!cv::imwrite(path, gray)) throw IngestError("cannot write raster: " + path);
}

ImageU8 resize_image(const ImageU8& img, int oh, int ow) {
    if (img.h == oh && img.w == ow) return img;
    Volume f = to_float(img);
    return to_u8(resize_bilinear(f, oh, ow));
}

MaskU8 resize_mask(const MaskU8& mask, int oh, int ow) {
    if (mask.h == oh && mask.w == ow) return mask;
    MapF soft = resize_bilinear(to_soft(mask), oh, ow);
    MaskU8 out(oh, ow);
    for (int i = 0; i < out.size(); ++i) out.data[i] = soft.data[i] > 0.5 ? 1 : 0;
    return out;
}

}  // namespace fewseg
