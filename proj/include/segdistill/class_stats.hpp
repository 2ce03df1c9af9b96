#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "segdistill/mask_record.hpp"

namespace segdistill {

enum class FrequencyMode { image, pixel };

inline const char* to_string(FrequencyMode m) { return m == FrequencyMode::image ? "image" : "pixel"; }

inline FrequencyMode frequency_mode_from_string(const std::string& s) {
  if (s == "image") return FrequencyMode::image;
  if (s == "pixel") return FrequencyMode::pixel;
  throw ConfigError("unknown frequency mode '" + s + "' (expected 'image' or 'pixel')");
}

/// Dataset-level class frequencies and the derived selection weights.
/// Weights are the reciprocal of the active-mode frequency; classes absent
/// from the dataset get weight 0 because no selection can ever cover them.
struct ClassStats {
  int num_classes = 0;
  FrequencyMode mode = FrequencyMode::image;
  std::vector<std::int64_t> image_freq;
  std::vector<std::int64_t> pixel_freq;
  std::vector<double> weights;

  const std::vector<std::int64_t>& freq() const {
    return mode == FrequencyMode::image ? image_freq : pixel_freq;
  }
};

inline ClassStats compute_class_stats(std::span<const MaskRecord> records, int num_classes,
                                      FrequencyMode mode = FrequencyMode::image) {
  if (records.empty()) throw DataError("cannot compute class statistics of an empty dataset");
  if (num_classes <= 0) throw ConfigError("num_classes must be positive");
  ClassStats stats;
  stats.num_classes = num_classes;
  stats.mode = mode;
  stats.image_freq.assign(num_classes, 0);
  stats.pixel_freq.assign(num_classes, 0);
  for (const MaskRecord& rec : records) {
    for (const auto& [c, n] : rec.histogram) {
      if (c >= num_classes)
        throw DataError("record '" + rec.id + "' references class " + std::to_string(c) +
                        " outside [0, " + std::to_string(num_classes) + ")");
      stats.image_freq[c] += 1;
      stats.pixel_freq[c] += n;
    }
  }
  stats.weights.assign(num_classes, 0.0);
  const auto& freq = stats.freq();
  for (int c = 0; c < num_classes; ++c)
    if (freq[c] > 0) stats.weights[c] = 1.0 / static_cast<double>(freq[c]);
  return stats;
}

/// Ratio of the most- to least-covered class. With `restrict_to_present`
/// only classes with nonzero coverage are considered (the ratio is then
/// always finite); otherwise any zero-coverage class makes it infinite.
inline double imbalance_factor(std::span<const std::int64_t> coverage, bool restrict_to_present = false) {
  std::int64_t max_c = 0;
  std::int64_t min_c = std::numeric_limits<std::int64_t>::max();
  bool any_positive = false;
  for (std::int64_t n : coverage) {
    if (n < 0) throw DataError("negative class coverage");
    if (n == 0 && restrict_to_present) continue;
    any_positive = any_positive || n > 0;
    max_c = std::max(max_c, n);
    min_c = std::min(min_c, n);
  }
  if (!any_positive) throw DataError("imbalance factor undefined: all class coverages are zero");
  if (min_c == 0) return std::numeric_limits<double>::infinity();
  return static_cast<double>(max_c) / static_cast<double>(min_c);
}

/// Coverage summary of a class set: per-class counts, min/max, the
/// imbalance factor, and which considered classes are missing entirely.
struct DistributionReport {
  std::vector<std::int64_t> coverage;
  double imbalance = 0.0;
  std::int64_t min_coverage = 0;
  std::int64_t max_coverage = 0;
  std::vector<int> classes_missing;
};

/// Builds a report over `coverage`. When `considered` is non-empty it marks
/// which classes participate (e.g. only classes present in the source
/// dataset); others are reported as zero but excluded from min/max/IF.
inline DistributionReport make_distribution_report(std::span<const std::int64_t> coverage,
                                                   const std::vector<bool>& considered = {}) {
  if (!considered.empty() && considered.size() != coverage.size())
    throw DataError("considered-class mask size does not match coverage size");
  DistributionReport rep;
  rep.coverage.assign(coverage.begin(), coverage.end());
  rep.min_coverage = std::numeric_limits<std::int64_t>::max();
  std::vector<std::int64_t> active;
  for (std::size_t c = 0; c < coverage.size(); ++c) {
    if (!considered.empty() && !considered[c]) continue;
    active.push_back(coverage[c]);
    rep.min_coverage = std::min(rep.min_coverage, coverage[c]);
    rep.max_coverage = std::max(rep.max_coverage, coverage[c]);
    if (coverage[c] == 0) rep.classes_missing.push_back(static_cast<int>(c));
  }
  if (active.empty()) throw DataError("distribution report over an empty class set");
  // All-zero coverage (an empty selection) reports the limiting value
  // rather than failing; imbalance_factor itself stays strict.
  const bool any_positive = std::any_of(active.begin(), active.end(), [](std::int64_t n) { return n > 0; });
  rep.imbalance = any_positive ? imbalance_factor(active) : std::numeric_limits<double>::infinity();
  return rep;
}

}  // namespace segdistill
