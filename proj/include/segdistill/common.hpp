#pragma once

#include <Eigen/Core>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

namespace segdistill {

/// Bad configuration, command usage, or malformed input file. CLI maps this
/// to exit code 2; every other exception maps to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed structured input (cache, config, bank, feature table).
class ParseError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Invalid data encountered at runtime (out-of-range labels, geometry
/// mismatches, non-finite values).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Vec = Eigen::VectorXd;

/// Dense single-channel class-index map. `data` is row-major, height rows of
/// width entries; values are class ids or an ignore index.
struct LabelMap {
  int width = 0;
  int height = 0;
  std::vector<std::int32_t> data;

  std::int32_t at(int row, int col) const { return data[static_cast<std::size_t>(row) * width + col]; }
  std::int32_t& at(int row, int col) { return data[static_cast<std::size_t>(row) * width + col]; }
  std::size_t size() const { return data.size(); }
};

inline LabelMap make_label_map(int height, int width, std::int32_t fill = 0) {
  if (height <= 0 || width <= 0) throw DataError("label map dimensions must be positive");
  LabelMap m;
  m.width = width;
  m.height = height;
  m.data.assign(static_cast<std::size_t>(width) * height, fill);
  return m;
}

/// (channels, height, width) geometry carried alongside flat vectors.
struct Shape3 {
  int channels = 0;
  int height = 0;
  int width = 0;

  std::int64_t size() const { return static_cast<std::int64_t>(channels) * height * width; }
  bool operator==(const Shape3&) const = default;
};

/// Flat image vector plus its geometry. Layout: c * H * W + row * W + col.
struct Image {
  Shape3 shape;
  Vec data;

  double at(int c, int row, int col) const {
    return data[(static_cast<std::int64_t>(c) * shape.height + row) * shape.width + col];
  }
};

inline bool all_finite(const Vec& v) { return v.allFinite(); }

/// Shortest round-trip decimal form of a double.
inline std::string format_double(double x) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double x = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), x);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ParseError("invalid floating-point value: '" + std::string(s) + "'");
  return x;
}

inline std::int64_t parse_int(std::string_view s) {
  std::int64_t x = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), x);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ParseError("invalid integer value: '" + std::string(s) + "'");
  return x;
}

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream iss(line);
  std::string tok;
  while (iss >> tok) out.push_back(tok);
  return out;
}

/// Writes a file atomically: content goes to `<path>.tmp`, then a rename.
inline void atomic_write_file(const std::filesystem::path& path, const std::string& content) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace segdistill
