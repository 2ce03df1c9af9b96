#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "segdistill/mask_record.hpp"

namespace segdistill {

/// Histogram cache file contents: the class count plus every record.
struct HistogramCache {
  int num_classes = 0;
  std::vector<MaskRecord> records;
};

namespace detail {

inline nlohmann::json record_to_json(const MaskRecord& rec) {
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& [c, n] : rec.histogram) hist.push_back({c, n});
  return nlohmann::json{{"id", rec.id},
                        {"width", rec.width},
                        {"height", rec.height},
                        {"ignored", rec.ignored_pixels},
                        {"hist", std::move(hist)}};
}

}  // namespace detail

/// Serializes records as newline-delimited JSON: one header line with the
/// format tag and class count, then one line per record. The byte output is
/// a pure function of the records, so rewriting a cache is byte-stable.
inline std::string histogram_cache_to_string(std::span<const MaskRecord> records, int num_classes) {
  if (num_classes <= 0) throw ConfigError("num_classes must be positive");
  std::ostringstream out;
  out << nlohmann::json{{"format", "segdistill-histcache"}, {"version", 1}, {"num_classes", num_classes}}.dump()
      << '\n';
  for (const MaskRecord& rec : records) out << detail::record_to_json(rec).dump() << '\n';
  return out.str();
}

inline void write_histogram_cache(const std::filesystem::path& path, std::span<const MaskRecord> records,
                                  int num_classes) {
  atomic_write_file(path, histogram_cache_to_string(records, num_classes));
}

inline HistogramCache parse_histogram_cache(const std::string& content, const std::string& origin) {
  HistogramCache cache;
  std::istringstream in(content);
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  auto fail = [&](const std::string& what) -> ParseError {
    return ParseError(origin + ": line " + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw fail(std::string("invalid JSON: ") + e.what());
    }
    if (!header_seen) {
      try {
        if (j.at("format").get<std::string>() != "segdistill-histcache") throw fail("unrecognized format tag");
        cache.num_classes = j.at("num_classes").get<int>();
      } catch (const nlohmann::json::exception& e) {
        throw fail(std::string("bad header: ") + e.what());
      }
      if (cache.num_classes <= 0) throw fail("num_classes must be positive");
      header_seen = true;
      continue;
    }
    MaskRecord rec;
    try {
      rec.id = j.at("id").get<std::string>();
      rec.width = j.at("width").get<int>();
      rec.height = j.at("height").get<int>();
      rec.ignored_pixels = j.at("ignored").get<std::int64_t>();
      if (rec.width <= 0 || rec.height <= 0) throw fail("non-positive dimensions");
      if (rec.ignored_pixels < 0) throw fail("negative ignored count");
      std::int64_t total = rec.ignored_pixels;
      for (const auto& entry : j.at("hist")) {
        const auto c = entry.at(0).get<std::int32_t>();
        const auto n = entry.at(1).get<std::int64_t>();
        if (c < 0 || c >= cache.num_classes) throw fail("class id " + std::to_string(c) + " out of range");
        if (n <= 0) throw fail("non-positive pixel count for class " + std::to_string(c));
        if (!rec.histogram.emplace(c, n).second) throw fail("duplicate class id " + std::to_string(c));
        total += n;
      }
      if (total != rec.total_pixels())
        throw fail("histogram total " + std::to_string(total) + " does not equal width*height for record '" +
                   rec.id + "'");
    } catch (const nlohmann::json::exception& e) {
      throw fail(std::string("bad record structure: ") + e.what());
    }
    cache.records.push_back(std::move(rec));
  }
  if (!header_seen) throw ParseError(origin + ": line 1: empty cache file (missing header)");
  return cache;
}

inline HistogramCache read_histogram_cache(const std::filesystem::path& path) {
  return parse_histogram_cache(read_file(path), path.string());
}

}  // namespace segdistill
