#pragma once

#include <algorithm>

#include "segdistill/common.hpp"

namespace segdistill {

/// Nearest-neighbor resize of a class map; label values pass through
/// unchanged (no interpolation can invent classes). Source coordinates are
/// sampled at destination pixel centers.
inline LabelMap resize_mask_nearest(const LabelMap& src, int out_height, int out_width) {
  if (src.width <= 0 || src.height <= 0) throw DataError("cannot resize an empty mask");
  if (out_height == src.height && out_width == src.width) return src;
  LabelMap dst = make_label_map(out_height, out_width);
  for (int r = 0; r < out_height; ++r) {
    int sr = static_cast<int>((r + 0.5) * src.height / out_height);
    sr = std::min(sr, src.height - 1);
    for (int c = 0; c < out_width; ++c) {
      int sc = static_cast<int>((c + 0.5) * src.width / out_width);
      sc = std::min(sc, src.width - 1);
      dst.at(r, c) = src.at(sr, sc);
    }
  }
  return dst;
}

/// Deterministic image encoding of a class map: class id c maps to the
/// value 2c/(K-1) - 1 in [-1, 1], ignored pixels map to 0, and the single
/// plane is replicated across the requested channels. Used as the
/// desk-scale stand-in for a real image paired with the mask.
inline Image encode_mask_image(const LabelMap& mask, int num_classes, Shape3 shape,
                               std::int32_t ignore_index) {
  if (num_classes <= 0) throw ConfigError("num_classes must be positive");
  if (shape.channels <= 0 || shape.height <= 0 || shape.width <= 0)
    throw ConfigError("target image shape must be positive");
  const LabelMap resized = resize_mask_nearest(mask, shape.height, shape.width);
  const double denom = std::max(num_classes - 1, 1);
  Image img;
  img.shape = shape;
  img.data.resize(shape.size());
  const std::int64_t plane = static_cast<std::int64_t>(shape.height) * shape.width;
  for (int r = 0; r < shape.height; ++r) {
    for (int c = 0; c < shape.width; ++c) {
      const std::int32_t v = resized.at(r, c);
      double x = 0.0;
      if (v != ignore_index) {
        if (v < 0 || v >= num_classes)
          throw DataError("mask value " + std::to_string(v) + " outside [0, " + std::to_string(num_classes) +
                          ") and not the ignore index");
        x = 2.0 * v / denom - 1.0;
      }
      for (int ch = 0; ch < shape.channels; ++ch)
        img.data[ch * plane + static_cast<std::int64_t>(r) * shape.width + c] = x;
    }
  }
  return img;
}

}  // namespace segdistill
