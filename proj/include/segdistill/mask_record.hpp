#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "segdistill/common.hpp"

namespace segdistill {

/// One annotation mask reduced to its per-class pixel histogram. The class
/// set of the mask is exactly the key set of `histogram`; classes with zero
/// pixels are never stored. Keys are ordered, so iteration over a record's
/// classes is always ascending.
struct MaskRecord {
  std::string id;
  int width = 0;
  int height = 0;
  std::map<std::int32_t, std::int64_t> histogram;
  std::int64_t ignored_pixels = 0;

  std::int64_t total_pixels() const { return static_cast<std::int64_t>(width) * height; }
  bool contains(std::int32_t class_id) const { return histogram.count(class_id) != 0; }
  std::int64_t count(std::int32_t class_id) const {
    auto it = histogram.find(class_id);
    return it == histogram.end() ? 0 : it->second;
  }
};

/// Histograms a dense label map. Every pixel must be the ignore index or a
/// class id in [0, num_classes); anything else is rejected with its value
/// and position.
inline MaskRecord ingest_label_map(const LabelMap& map, std::string id, int num_classes,
                                   std::int32_t ignore_index) {
  if (num_classes <= 0) throw ConfigError("num_classes must be positive");
  if (ignore_index >= 0 && ignore_index < num_classes)
    throw ConfigError("ignore index " + std::to_string(ignore_index) + " collides with class range [0, " +
                      std::to_string(num_classes) + ")");
  MaskRecord rec;
  rec.id = std::move(id);
  rec.width = map.width;
  rec.height = map.height;
  for (int r = 0; r < map.height; ++r) {
    for (int c = 0; c < map.width; ++c) {
      const std::int32_t v = map.at(r, c);
      if (v == ignore_index) {
        ++rec.ignored_pixels;
      } else if (v >= 0 && v < num_classes) {
        ++rec.histogram[v];
      } else {
        throw DataError("mask '" + rec.id + "': pixel value " + std::to_string(v) + " at (row " +
                        std::to_string(r) + ", col " + std::to_string(c) + ") is outside [0, " +
                        std::to_string(num_classes) + ") and is not the ignore index " +
                        std::to_string(ignore_index));
      }
    }
  }
  return rec;
}

}  // namespace segdistill
