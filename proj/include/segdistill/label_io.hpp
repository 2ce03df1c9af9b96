#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "segdistill/common.hpp"

namespace segdistill {

namespace detail {

// Reads one PGM header token, skipping whitespace and '#' comments.
inline std::string pgm_token(std::istream& in, const std::string& path) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) continue;
    tok.push_back(static_cast<char>(c));
    while ((c = in.peek()) != EOF && !std::isspace(c) && c != '#') tok.push_back(static_cast<char>(in.get()));
    return tok;
  }
  throw ParseError(path + ": truncated header");
}

struct PngReadCloser {
  png_structp png = nullptr;
  png_infop info = nullptr;
  std::FILE* fp = nullptr;
  ~PngReadCloser() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    if (fp) std::fclose(fp);
  }
};

}  // namespace detail

/// Loads a PGM (P2 or P5, maxval up to 65535) as a label map.
inline LabelMap load_label_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file: " + path.string());
  const std::string name = path.string();
  const std::string magic = detail::pgm_token(in, name);
  if (magic != "P2" && magic != "P5") throw ParseError(name + ": not a PGM file (magic '" + magic + "')");
  const std::int64_t width = parse_int(detail::pgm_token(in, name));
  const std::int64_t height = parse_int(detail::pgm_token(in, name));
  const std::int64_t maxval = parse_int(detail::pgm_token(in, name));
  if (width <= 0 || height <= 0) throw ParseError(name + ": non-positive dimensions");
  if (maxval <= 0 || maxval > 65535) throw ParseError(name + ": unsupported maxval " + std::to_string(maxval));

  LabelMap m = make_label_map(static_cast<int>(height), static_cast<int>(width));
  const std::size_t n = m.size();
  if (magic == "P2") {
    for (std::size_t i = 0; i < n; ++i) {
      std::int64_t v = 0;
      if (!(in >> v)) throw ParseError(name + ": truncated pixel data");
      if (v < 0 || v > maxval) throw ParseError(name + ": pixel value " + std::to_string(v) + " exceeds maxval");
      m.data[i] = static_cast<std::int32_t>(v);
    }
  } else {
    // One whitespace byte separates the header from binary samples.
    in.get();
    const int bytes = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> raw(n * bytes);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw ParseError(name + ": truncated pixel data");
    for (std::size_t i = 0; i < n; ++i) {
      // Multi-byte samples are most-significant-byte first.
      m.data[i] = bytes == 1 ? raw[i] : static_cast<std::int32_t>(raw[2 * i]) << 8 | raw[2 * i + 1];
    }
  }
  return m;
}

/// Loads a PNG as a label map. Accepts grayscale (any bit depth) and
/// palette images, whose raw palette indices are the labels. Color images
/// are rejected: RGB-coded annotations need a palette or grayscale export.
inline LabelMap load_label_png(const std::filesystem::path& path) {
  const std::string name = path.string();
  detail::PngReadCloser ctx;
  ctx.fp = std::fopen(path.string().c_str(), "rb");
  if (!ctx.fp) throw ConfigError("cannot open file: " + name);

  unsigned char sig[8];
  if (std::fread(sig, 1, 8, ctx.fp) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw ParseError(name + ": not a PNG file");

  ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!ctx.png) throw std::runtime_error("png_create_read_struct failed");
  ctx.info = png_create_info_struct(ctx.png);
  if (!ctx.info) throw std::runtime_error("png_create_info_struct failed");
  if (setjmp(png_jmpbuf(ctx.png))) throw ParseError(name + ": corrupt PNG data");

  png_init_io(ctx.png, ctx.fp);
  png_set_sig_bytes(ctx.png, 8);
  png_read_info(ctx.png, ctx.info);

  const png_uint_32 width = png_get_image_width(ctx.png, ctx.info);
  const png_uint_32 height = png_get_image_height(ctx.png, ctx.info);
  const int color_type = png_get_color_type(ctx.png, ctx.info);
  const int bit_depth = png_get_bit_depth(ctx.png, ctx.info);

  if (color_type != PNG_COLOR_TYPE_GRAY && color_type != PNG_COLOR_TYPE_PALETTE)
    throw DataError(name + ": color PNGs carry no class indices; expected grayscale or palette");

  // Sub-byte samples unpack to one byte each; 8/16-bit stay as stored.
  if (bit_depth < 8) png_set_packing(ctx.png);
  png_read_update_info(ctx.png, ctx.info);

  const std::size_t rowbytes = png_get_rowbytes(ctx.png, ctx.info);
  std::vector<unsigned char> raw(rowbytes * height);
  std::vector<png_bytep> rows(height);
  for (png_uint_32 r = 0; r < height; ++r) rows[r] = raw.data() + r * rowbytes;
  png_read_image(ctx.png, rows.data());
  png_read_end(ctx.png, nullptr);

  LabelMap m = make_label_map(static_cast<int>(height), static_cast<int>(width));
  const bool wide = bit_depth == 16;
  for (png_uint_32 r = 0; r < height; ++r) {
    const unsigned char* row = rows[r];
    for (png_uint_32 c = 0; c < width; ++c) {
      m.at(static_cast<int>(r), static_cast<int>(c)) =
          wide ? static_cast<std::int32_t>(row[2 * c]) << 8 | row[2 * c + 1] : row[c];
    }
  }
  return m;
}

/// Dispatches on file extension (.pgm / .png).
inline LabelMap load_label_map(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".pgm") return load_label_pgm(path);
  if (ext == ".png") return load_label_png(path);
  throw ConfigError("unsupported label image extension '" + ext + "': " + path.string());
}

/// Writes a label map as binary PGM (P5). Maxval is 255 when every value
/// fits a byte, 65535 otherwise.
inline void save_label_pgm(const std::filesystem::path& path, const LabelMap& m) {
  std::int32_t maxv = 0;
  for (std::int32_t v : m.data) {
    if (v < 0) throw DataError("negative label value cannot be written to PGM");
    maxv = std::max(maxv, v);
  }
  if (maxv > 65535) throw DataError("label value exceeds 16-bit PGM range");
  const int maxval = maxv > 255 ? 65535 : 255;
  std::string out = "P5\n" + std::to_string(m.width) + " " + std::to_string(m.height) + "\n" +
                    std::to_string(maxval) + "\n";
  out.reserve(out.size() + m.size() * (maxval > 255 ? 2 : 1));
  for (std::int32_t v : m.data) {
    if (maxval > 255) out.push_back(static_cast<char>(v >> 8 & 0xff));
    out.push_back(static_cast<char>(v & 0xff));
  }
  atomic_write_file(path, out);
}

/// Writes one channel-averaged 8-bit PGM preview of an image, min/max scaled.
inline void save_image_preview_pgm(const std::filesystem::path& path, const Image& img) {
  const auto [C, H, W] = img.shape;
  if (C <= 0 || H <= 0 || W <= 0) throw DataError("empty image cannot be previewed");
  std::vector<double> gray(static_cast<std::size_t>(H) * W, 0.0);
  for (int c = 0; c < C; ++c)
    for (int r = 0; r < H; ++r)
      for (int col = 0; col < W; ++col) gray[static_cast<std::size_t>(r) * W + col] += img.at(c, r, col) / C;
  const auto [lo_it, hi_it] = std::minmax_element(gray.begin(), gray.end());
  const double lo = *lo_it, hi = *hi_it;
  const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
  LabelMap m = make_label_map(H, W);
  for (std::size_t i = 0; i < gray.size(); ++i)
    m.data[i] = static_cast<std::int32_t>(std::lround((gray[i] - lo) * scale));
  save_label_pgm(path, m);
}

/// Lists `<id>.png` / `<id>.pgm` files under a directory, sorted by id.
inline std::vector<std::pair<std::string, std::filesystem::path>> list_label_files(
    const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ConfigError("not a directory: " + dir.string());
  std::vector<std::pair<std::string, fs::path>> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext != ".png" && ext != ".pgm") continue;
    out.emplace_back(entry.path().stem().string(), entry.path());
  }
  std::sort(out.begin(), out.end());
  for (std::size_t i = 1; i < out.size(); ++i)
    if (out[i].first == out[i - 1].first)
      throw ConfigError("duplicate mask id '" + out[i].first + "' in " + dir.string());
  return out;
}

}  // namespace segdistill
