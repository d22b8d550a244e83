#pragma once

#include <string>

#include "fewseg/tensor.hpp"

namespace fewseg {

ImageU8 read_image_rgb(const std::string& path);
void write_image_rgb(const std::string& path, const ImageU8& img);

// 8-bit grayscale; loading applies the > 127 foreground rule. Multi-channel
// or 16-bit mask files are rejected.
MaskU8 read_mask(const std::string& path);
void write_mask(const std::string& path, const MaskU8& mask);  // 0/255

// 16-bit grayscale raster scaled over [min,max], plus a "<path>.range.txt"
// sidecar holding "min max" for reconstruction.
void write_soft_map(const std::string& path, const MapF& map);
MapF read_soft_map(const std::string& path);

void write_gray8(const std::string& path, const MapF& map, Scalar lo, Scalar hi);

ImageU8 resize_image(const ImageU8& img, int oh, int ow);
MaskU8 resize_mask(const MaskU8& mask, int oh, int ow);  // bilinear then > 0.5

}  // namespace fewseg
