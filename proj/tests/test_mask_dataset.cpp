#include <catch2/catch_amalgamated.hpp>

#include <png.h>

#include <cstdio>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "segdistill/class_stats.hpp"
#include "segdistill/histogram_cache.hpp"
#include "segdistill/label_io.hpp"
#include "segdistill/mask_record.hpp"
#include "test_util.hpp"

namespace sd = segdistill;
using Catch::Matchers::ContainsSubstring;
using testutil::TempDir;
using testutil::map_from;

namespace {

bool records_equal(const sd::MaskRecord& a, const sd::MaskRecord& b) {
  return a.id == b.id && a.width == b.width && a.height == b.height && a.histogram == b.histogram &&
         a.ignored_pixels == b.ignored_pixels;
}

// Minimal libpng writer so the reader can be tested against real files.
void write_png(const std::filesystem::path& path, const sd::LabelMap& m, int bit_depth, int color_type,
               int palette_size = 0) {
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  REQUIRE(fp != nullptr);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  REQUIRE(setjmp(png_jmpbuf(png)) == 0);
  png_init_io(png, fp);
  png_set_IHDR(png, info, m.width, m.height, bit_depth, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_color> palette(palette_size);
  for (int i = 0; i < palette_size; ++i)
    palette[i] = png_color{static_cast<png_byte>(17 * i), static_cast<png_byte>(31 * i),
                           static_cast<png_byte>(47 * i)};
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_PLTE(png, info, palette.data(), palette_size);
  png_write_info(png, info);
  if (bit_depth < 8) png_set_packing(png);

  const int samples = color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
  const int bytes = bit_depth == 16 ? 2 : 1;
  std::vector<unsigned char> row(static_cast<std::size_t>(m.width) * samples * bytes);
  for (int r = 0; r < m.height; ++r) {
    for (int c = 0; c < m.width; ++c) {
      const std::int32_t v = m.at(r, c);
      if (bit_depth == 16) {
        row[2 * c] = static_cast<unsigned char>(v >> 8 & 0xff);
        row[2 * c + 1] = static_cast<unsigned char>(v & 0xff);
      } else {
        for (int s = 0; s < samples; ++s) row[c * samples + s] = static_cast<unsigned char>(v & 0xff);
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

void write_text(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
}

}  // namespace

TEST_CASE("ingest tallies every pixel into its class bucket") {
  sd::LabelMap m = map_from({{0, 1, 2}, {3, 4, 5}, {6, 7, 8}});
  const sd::MaskRecord rec = sd::ingest_label_map(m, "grid", 9, 255);
  REQUIRE(rec.id == "grid");
  REQUIRE(rec.width == 3);
  REQUIRE(rec.height == 3);
  REQUIRE(rec.total_pixels() == 9);
  REQUIRE(rec.ignored_pixels == 0);
  REQUIRE(rec.histogram.size() == 9);
  for (std::int32_t c = 0; c < 9; ++c) {
    REQUIRE(rec.contains(c));
    REQUIRE(rec.count(c) == 1);
  }
  REQUIRE_FALSE(rec.contains(9));
  REQUIRE(rec.count(9) == 0);
}

TEST_CASE("ingest separates ignore pixels from class counts") {
  sd::LabelMap m = map_from({{0, 255, 1}, {255, 1, 1}});
  const sd::MaskRecord rec = sd::ingest_label_map(m, "x", 3, 255);
  REQUIRE(rec.ignored_pixels == 2);
  REQUIRE(rec.count(0) == 1);
  REQUIRE(rec.count(1) == 3);
  REQUIRE_FALSE(rec.contains(2));
  REQUIRE(rec.count(0) + rec.count(1) + rec.ignored_pixels == rec.total_pixels());
}

TEST_CASE("ingest of an all-ignored mask yields an empty histogram") {
  sd::LabelMap m = map_from({{255, 255}, {255, 255}});
  const sd::MaskRecord rec = sd::ingest_label_map(m, "void", 4, 255);
  REQUIRE(rec.histogram.empty());
  REQUIRE(rec.ignored_pixels == 4);
}

TEST_CASE("ingest accepts a negative ignore index") {
  sd::LabelMap m = map_from({{-1, 0}});
  const sd::MaskRecord rec = sd::ingest_label_map(m, "neg", 2, -1);
  REQUIRE(rec.ignored_pixels == 1);
  REQUIRE(rec.count(0) == 1);
}

TEST_CASE("ingest rejects bad configuration and bad pixels") {
  sd::LabelMap m = map_from({{0, 1}});
  SECTION("non-positive class count") {
    REQUIRE_THROWS_AS(sd::ingest_label_map(m, "x", 0, 255), sd::ConfigError);
  }
  SECTION("ignore index inside the class range") {
    REQUIRE_THROWS_AS(sd::ingest_label_map(m, "x", 3, 1), sd::ConfigError);
  }
  SECTION("out-of-range pixel reports value and position") {
    sd::LabelMap bad = map_from({{0, 1, 0}, {0, 0, 7}});
    REQUIRE_THROWS_MATCHES(sd::ingest_label_map(bad, "pos", 3, 255), sd::DataError,
                           Catch::Matchers::MessageMatches(ContainsSubstring("(row 1, col 2)") &&
                                                           ContainsSubstring("pixel value 7") &&
                                                           ContainsSubstring("pos")));
  }
  SECTION("negative pixel that is not the ignore index") {
    sd::LabelMap bad = map_from({{-3}});
    REQUIRE_THROWS_AS(sd::ingest_label_map(bad, "x", 3, 255), sd::DataError);
  }
}

TEST_CASE("class statistics count images and pixels per class") {
  std::vector<sd::MaskRecord> recs(3);
  recs[0].id = "a";
  recs[0].width = 4;
  recs[0].height = 1;
  recs[0].histogram = {{0, 4}};
  recs[1].id = "b";
  recs[1].width = 4;
  recs[1].height = 1;
  recs[1].histogram = {{0, 1}, {1, 3}};
  recs[2].id = "c";
  recs[2].width = 8;
  recs[2].height = 1;
  recs[2].histogram = {{1, 2}, {2, 6}};

  SECTION("image mode weights are reciprocal image counts") {
    const sd::ClassStats st = sd::compute_class_stats(recs, 4, sd::FrequencyMode::image);
    REQUIRE(st.image_freq == std::vector<std::int64_t>{2, 2, 1, 0});
    REQUIRE(st.pixel_freq == std::vector<std::int64_t>{5, 5, 6, 0});
    REQUIRE(st.freq() == st.image_freq);
    REQUIRE(st.weights[0] == 0.5);
    REQUIRE(st.weights[1] == 0.5);
    REQUIRE(st.weights[2] == 1.0);
    REQUIRE(st.weights[3] == 0.0);
  }
  SECTION("pixel mode weights are reciprocal pixel counts") {
    const sd::ClassStats st = sd::compute_class_stats(recs, 4, sd::FrequencyMode::pixel);
    REQUIRE(st.freq() == st.pixel_freq);
    REQUIRE(st.weights[0] == 0.2);
    REQUIRE(st.weights[1] == 0.2);
    REQUIRE(st.weights[2] == 1.0 / 6.0);
    REQUIRE(st.weights[3] == 0.0);
  }
  SECTION("record referencing a class beyond the range is rejected") {
    recs[2].histogram[9] = 1;
    REQUIRE_THROWS_MATCHES(sd::compute_class_stats(recs, 4), sd::DataError,
                           Catch::Matchers::MessageMatches(ContainsSubstring("'c'") &&
                                                           ContainsSubstring("class 9")));
  }
  SECTION("empty dataset is rejected") {
    REQUIRE_THROWS_AS(sd::compute_class_stats(std::vector<sd::MaskRecord>{}, 4), sd::DataError);
  }
  SECTION("non-positive class count is rejected") {
    REQUIRE_THROWS_AS(sd::compute_class_stats(recs, 0), sd::ConfigError);
  }
}

TEST_CASE("frequency mode round-trips through its name") {
  REQUIRE(sd::frequency_mode_from_string("image") == sd::FrequencyMode::image);
  REQUIRE(sd::frequency_mode_from_string("pixel") == sd::FrequencyMode::pixel);
  REQUIRE(std::string(sd::to_string(sd::FrequencyMode::pixel)) == "pixel");
  REQUIRE_THROWS_AS(sd::frequency_mode_from_string("images"), sd::ConfigError);
}

TEST_CASE("imbalance factor is the max-to-min coverage ratio") {
  REQUIRE(sd::imbalance_factor(std::vector<std::int64_t>{10, 5, 2}) == 5.0);
  REQUIRE(sd::imbalance_factor(std::vector<std::int64_t>{7, 7, 7}) == 1.0);
  REQUIRE(std::isinf(sd::imbalance_factor(std::vector<std::int64_t>{3, 0, 6})));
  SECTION("restricting to present classes drops the zeros") {
    REQUIRE(sd::imbalance_factor(std::vector<std::int64_t>{3, 0, 6}, true) == 2.0);
  }
  SECTION("all-zero coverage is undefined in both modes") {
    REQUIRE_THROWS_AS(sd::imbalance_factor(std::vector<std::int64_t>{0, 0}), sd::DataError);
    REQUIRE_THROWS_AS(sd::imbalance_factor(std::vector<std::int64_t>{0, 0}, true), sd::DataError);
  }
  SECTION("negative coverage is rejected") {
    REQUIRE_THROWS_AS(sd::imbalance_factor(std::vector<std::int64_t>{1, -1}), sd::DataError);
  }
}

TEST_CASE("distribution report summarizes coverage") {
  const std::vector<std::int64_t> cov{3, 0, 6};
  SECTION("over all classes") {
    const sd::DistributionReport rep = sd::make_distribution_report(cov);
    REQUIRE(rep.coverage == cov);
    REQUIRE(std::isinf(rep.imbalance));
    REQUIRE(rep.min_coverage == 0);
    REQUIRE(rep.max_coverage == 6);
    REQUIRE(rep.classes_missing == std::vector<int>{1});
  }
  SECTION("a considered-class mask excludes the rest from the summary") {
    const sd::DistributionReport rep = sd::make_distribution_report(cov, {true, false, true});
    REQUIRE(rep.imbalance == 2.0);
    REQUIRE(rep.min_coverage == 3);
    REQUIRE(rep.max_coverage == 6);
    REQUIRE(rep.classes_missing.empty());
  }
  SECTION("all-zero coverage reports infinite imbalance instead of failing") {
    const sd::DistributionReport rep = sd::make_distribution_report(std::vector<std::int64_t>{0, 0});
    REQUIRE(std::isinf(rep.imbalance));
    REQUIRE(rep.classes_missing == std::vector<int>{0, 1});
  }
  SECTION("mask size mismatch is rejected") {
    REQUIRE_THROWS_AS(sd::make_distribution_report(cov, {true, false}), sd::DataError);
  }
  SECTION("an empty considered set is rejected") {
    REQUIRE_THROWS_AS(sd::make_distribution_report(cov, {false, false, false}), sd::DataError);
  }
}

TEST_CASE("histogram cache round-trips records exactly") {
  std::vector<sd::MaskRecord> recs;
  recs.push_back(testutil::record_with_classes("m1", {0}));
  recs.push_back(testutil::record_with_classes("m2", {0, 1}));
  sd::MaskRecord big;
  big.id = "big";
  big.width = 10;
  big.height = 3;
  big.histogram = {{0, 12}, {4, 11}};
  big.ignored_pixels = 7;
  recs.push_back(big);

  const std::string text = sd::histogram_cache_to_string(recs, 5);
  const sd::HistogramCache cache = sd::parse_histogram_cache(text, "mem");
  REQUIRE(cache.num_classes == 5);
  REQUIRE(cache.records.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) REQUIRE(records_equal(cache.records[i], recs[i]));

  SECTION("serialization is byte-stable across a parse") {
    REQUIRE(sd::histogram_cache_to_string(cache.records, cache.num_classes) == text);
  }
  SECTION("file write and read are lossless") {
    TempDir tmp;
    sd::write_histogram_cache(tmp.file("cache.jsonl"), recs, 5);
    const sd::HistogramCache loaded = sd::read_histogram_cache(tmp.file("cache.jsonl"));
    REQUIRE(loaded.num_classes == 5);
    REQUIRE(loaded.records.size() == recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) REQUIRE(records_equal(loaded.records[i], recs[i]));
  }
}

TEST_CASE("histogram cache with no records is a valid empty dataset") {
  const std::string text = sd::histogram_cache_to_string(std::vector<sd::MaskRecord>{}, 3);
  const sd::HistogramCache cache = sd::parse_histogram_cache(text, "mem");
  REQUIRE(cache.num_classes == 3);
  REQUIRE(cache.records.empty());
}

TEST_CASE("histogram cache survives a large synthetic dataset") {
  std::mt19937_64 gen(20260817);
  std::uniform_int_distribution<int> n_classes(1, 10);
  std::uniform_int_distribution<std::int64_t> count(1, 5000);
  std::vector<sd::MaskRecord> recs(10000);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    sd::MaskRecord& rec = recs[i];
    rec.id = "r" + std::to_string(i);
    std::int64_t total = 0;
    const int k = n_classes(gen);
    for (int c = 0; c < k; ++c) {
      const std::int64_t n = count(gen);
      rec.histogram[c * 3] = n;
      total += n;
    }
    rec.ignored_pixels = count(gen) % 17;
    total += rec.ignored_pixels;
    rec.width = static_cast<int>(total);
    rec.height = 1;
  }
  const std::string text = sd::histogram_cache_to_string(recs, 30);
  const sd::HistogramCache cache = sd::parse_histogram_cache(text, "mem");
  REQUIRE(cache.records.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) REQUIRE(records_equal(cache.records[i], recs[i]));
  REQUIRE(sd::histogram_cache_to_string(cache.records, 30) == text);
}

TEST_CASE("histogram cache parse errors carry the line number") {
  const std::string header = R"({"format":"segdistill-histcache","version":1,"num_classes":3})";
  const std::string good = R"({"id":"a","width":2,"height":1,"ignored":0,"hist":[[0,2]]})";
  auto parse = [](const std::string& text) { return sd::parse_histogram_cache(text, "t.jsonl"); };

  SECTION("empty input") {
    REQUIRE_THROWS_MATCHES(parse(""), sd::ParseError,
                           Catch::Matchers::MessageMatches(ContainsSubstring("line 1")));
  }
  SECTION("invalid JSON on a record line") {
    REQUIRE_THROWS_MATCHES(parse(header + "\n" + good + "\n{not json\n"), sd::ParseError,
                           Catch::Matchers::MessageMatches(ContainsSubstring("t.jsonl: line 3") &&
                                                           ContainsSubstring("invalid JSON")));
  }
  SECTION("blank lines are skipped but still counted") {
    REQUIRE_THROWS_MATCHES(parse(header + "\n\n \t\n{bad\n"), sd::ParseError,
                           Catch::Matchers::MessageMatches(ContainsSubstring("line 4")));
    const sd::HistogramCache cache = parse(header + "\n\n" + good + "\n\n");
    REQUIRE(cache.records.size() == 1);
  }
  SECTION("unrecognized format tag") {
    REQUIRE_THROWS_MATCHES(parse(R"({"format":"other","num_classes":3})"), sd::ParseError,
                           Catch::Matchers::MessageMatches(ContainsSubstring("line 1")));
  }
  SECTION("header missing the class count") {
    REQUIRE_THROWS_AS(parse(R"({"format":"segdistill-histcache"})"), sd::ParseError);
  }
  SECTION("non-positive class count in header") {
    REQUIRE_THROWS_AS(parse(R"({"format":"segdistill-histcache","num_classes":0})"), sd::ParseError);
  }
  SECTION("class id out of range") {
    const std::string bad = R"({"id":"a","width":2,"height":1,"ignored":0,"hist":[[3,2]]})";
    REQUIRE_THROWS_MATCHES(parse(header + "\n" + bad + "\n"), sd::ParseError,
                           Catch::Matchers::MessageMatches(ContainsSubstring("line 2") &&
                                                           ContainsSubstring("class id 3")));
  }
  SECTION("duplicate class id") {
    const std::string bad = R"({"id":"a","width":4,"height":1,"ignored":0,"hist":[[0,2],[0,2]]})";
    REQUIRE_THROWS_MATCHES(parse(header + "\n" + bad + "\n"), sd::ParseError,
                           Catch::Matchers::MessageMatches(ContainsSubstring("duplicate class id 0")));
  }
  SECTION("non-positive pixel count") {
    const std::string bad = R"({"id":"a","width":2,"height":1,"ignored":0,"hist":[[0,0]]})";
    REQUIRE_THROWS_AS(parse(header + "\n" + bad + "\n"), sd::ParseError);
  }
  SECTION("histogram total must match the dimensions") {
    const std::string bad = R"({"id":"a","width":5,"height":1,"ignored":1,"hist":[[0,2]]})";
    REQUIRE_THROWS_MATCHES(parse(header + "\n" + bad + "\n"), sd::ParseError,
                           Catch::Matchers::MessageMatches(ContainsSubstring("line 2") &&
                                                           ContainsSubstring("total 3")));
  }
  SECTION("non-positive dimensions") {
    const std::string bad = R"({"id":"a","width":0,"height":1,"ignored":0,"hist":[]})";
    REQUIRE_THROWS_AS(parse(header + "\n" + bad + "\n"), sd::ParseError);
  }
  SECTION("negative ignored count") {
    const std::string bad = R"({"id":"a","width":2,"height":1,"ignored":-1,"hist":[[0,3]]})";
    REQUIRE_THROWS_AS(parse(header + "\n" + bad + "\n"), sd::ParseError);
  }
  SECTION("missing record field") {
    const std::string bad = R"({"id":"a","width":2,"height":1,"hist":[[0,2]]})";
    REQUIRE_THROWS_AS(parse(header + "\n" + bad + "\n"), sd::ParseError);
  }
}

TEST_CASE("PGM files round-trip label values") {
  TempDir tmp;
  SECTION("8-bit binary") {
    sd::LabelMap m = map_from({{0, 1, 255}, {7, 128, 9}});
    sd::save_label_pgm(tmp.file("m.pgm"), m);
    REQUIRE(sd::read_file(tmp.file("m.pgm")).substr(0, 11) == "P5\n3 2\n255\n");
    const sd::LabelMap back = sd::load_label_pgm(tmp.file("m.pgm"));
    REQUIRE(back.width == 3);
    REQUIRE(back.height == 2);
    REQUIRE(back.data == m.data);
  }
  SECTION("values beyond one byte switch to 16-bit samples") {
    sd::LabelMap m = map_from({{0, 256}, {65535, 300}});
    sd::save_label_pgm(tmp.file("m.pgm"), m);
    REQUIRE(sd::read_file(tmp.file("m.pgm")).substr(0, 13) == "P5\n2 2\n65535\n");
    REQUIRE(sd::load_label_pgm(tmp.file("m.pgm")).data == m.data);
  }
  SECTION("plain-text P2 with comments") {
    write_text(tmp.file("t.pgm"), "P2\n# a comment\n3 2\n255\n0 1 2\n3 4 5\n");
    const sd::LabelMap m = sd::load_label_pgm(tmp.file("t.pgm"));
    REQUIRE(m.width == 3);
    REQUIRE(m.height == 2);
    REQUIRE(m.data == std::vector<std::int32_t>{0, 1, 2, 3, 4, 5});
  }
  SECTION("hand-written 16-bit binary samples are most significant byte first") {
    std::string raw = "P5\n2 1\n65535\n";
    raw += '\x01';
    raw += '\x00';
    raw += '\x00';
    raw += '\xff';
    write_text(tmp.file("t.pgm"), raw);
    REQUIRE(sd::load_label_pgm(tmp.file("t.pgm")).data == std::vector<std::int32_t>{256, 255});
  }
}

TEST_CASE("PGM loader rejects malformed files") {
  TempDir tmp;
  auto expect_parse_error = [&](const std::string& content) {
    write_text(tmp.file("bad.pgm"), content);
    REQUIRE_THROWS_AS(sd::load_label_pgm(tmp.file("bad.pgm")), sd::ParseError);
  };
  SECTION("missing file") {
    REQUIRE_THROWS_AS(sd::load_label_pgm(tmp.file("absent.pgm")), sd::ConfigError);
  }
  SECTION("wrong magic") { expect_parse_error("P6\n1 1\n255\n\0"); }
  SECTION("truncated header") { expect_parse_error("P5\n3"); }
  SECTION("non-positive dimensions") { expect_parse_error("P5\n0 2\n255\n"); }
  SECTION("unsupported maxval") { expect_parse_error("P5\n1 1\n70000\n"); }
  SECTION("text value above maxval") { expect_parse_error("P2\n1 1\n255\n300\n"); }
  SECTION("truncated binary data") { expect_parse_error("P5\n2 2\n255\nab"); }
  SECTION("truncated text data") { expect_parse_error("P2\n2 2\n255\n1 2 3"); }
}

TEST_CASE("PGM writer rejects out-of-range labels") {
  TempDir tmp;
  REQUIRE_THROWS_AS(sd::save_label_pgm(tmp.file("x.pgm"), map_from({{-1}})), sd::DataError);
  REQUIRE_THROWS_AS(sd::save_label_pgm(tmp.file("x.pgm"), map_from({{70000}})), sd::DataError);
}

TEST_CASE("PNG labels load from grayscale and palette files") {
  TempDir tmp;
  SECTION("8-bit grayscale") {
    sd::LabelMap m = map_from({{0, 1, 2}, {254, 255, 3}});
    write_png(tmp.file("m.png"), m, 8, PNG_COLOR_TYPE_GRAY);
    REQUIRE(sd::load_label_png(tmp.file("m.png")).data == m.data);
  }
  SECTION("16-bit grayscale") {
    sd::LabelMap m = map_from({{0, 256}, {65535, 1000}});
    write_png(tmp.file("m.png"), m, 16, PNG_COLOR_TYPE_GRAY);
    REQUIRE(sd::load_label_png(tmp.file("m.png")).data == m.data);
  }
  SECTION("palette indices are the labels, colors are irrelevant") {
    sd::LabelMap m = map_from({{0, 3, 1}, {2, 2, 0}});
    write_png(tmp.file("m.png"), m, 8, PNG_COLOR_TYPE_PALETTE, 4);
    REQUIRE(sd::load_label_png(tmp.file("m.png")).data == m.data);
  }
  SECTION("sub-byte palette samples unpack to one label per pixel") {
    sd::LabelMap m = map_from({{0, 3, 1, 2, 2}, {1, 0, 3, 3, 0}});
    write_png(tmp.file("m.png"), m, 4, PNG_COLOR_TYPE_PALETTE, 4);
    REQUIRE(sd::load_label_png(tmp.file("m.png")).data == m.data);
  }
  SECTION("extension dispatch is case-insensitive") {
    sd::LabelMap m = map_from({{5}});
    write_png(tmp.file("m.PNG"), m, 8, PNG_COLOR_TYPE_GRAY);
    REQUIRE(sd::load_label_map(tmp.file("m.PNG")).data == m.data);
  }
}

TEST_CASE("PNG loader rejects color images and garbage") {
  TempDir tmp;
  SECTION("RGB-coded annotations are refused") {
    write_png(tmp.file("rgb.png"), map_from({{10, 20}}), 8, PNG_COLOR_TYPE_RGB);
    REQUIRE_THROWS_AS(sd::load_label_png(tmp.file("rgb.png")), sd::DataError);
  }
  SECTION("not a PNG") {
    write_text(tmp.file("fake.png"), "P5\n1 1\n255\nx");
    REQUIRE_THROWS_AS(sd::load_label_png(tmp.file("fake.png")), sd::ParseError);
  }
  SECTION("missing file") {
    REQUIRE_THROWS_AS(sd::load_label_png(tmp.file("absent.png")), sd::ConfigError);
  }
  SECTION("unknown extension") {
    write_text(tmp.file("m.txt"), "");
    REQUIRE_THROWS_AS(sd::load_label_map(tmp.file("m.txt")), sd::ConfigError);
  }
}

TEST_CASE("image previews scale the channel mean to the full byte range") {
  TempDir tmp;
  sd::Image img;
  img.shape = {2, 1, 3};
  // Channel means per column: 0.0, 0.5, 1.0.
  img.data.resize(6);
  img.data << 0.0, 0.5, 1.0, 0.0, 0.5, 1.0;
  sd::save_image_preview_pgm(tmp.file("p.pgm"), img);
  REQUIRE(sd::load_label_pgm(tmp.file("p.pgm")).data == std::vector<std::int32_t>{0, 128, 255});

  SECTION("a constant image maps to zero everywhere") {
    img.data.setConstant(2.5);
    sd::save_image_preview_pgm(tmp.file("c.pgm"), img);
    REQUIRE(sd::load_label_pgm(tmp.file("c.pgm")).data == std::vector<std::int32_t>{0, 0, 0});
  }
}

TEST_CASE("label directory listing is sorted and rejects ambiguous ids") {
  TempDir tmp;
  write_text(tmp.file("notes.txt"), "skip me");
  sd::save_label_pgm(tmp.file("b.pgm"), map_from({{0}}));
  write_png(tmp.file("a.png"), map_from({{1}}), 8, PNG_COLOR_TYPE_GRAY);
  sd::save_label_pgm(tmp.file("c.pgm"), map_from({{2}}));

  const auto files = sd::list_label_files(tmp.path);
  REQUIRE(files.size() == 3);
  REQUIRE(files[0].first == "a");
  REQUIRE(files[1].first == "b");
  REQUIRE(files[2].first == "c");
  REQUIRE(sd::load_label_map(files[0].second).data == std::vector<std::int32_t>{1});

  SECTION("the same id with two extensions is ambiguous") {
    write_png(tmp.file("b.png"), map_from({{0}}), 8, PNG_COLOR_TYPE_GRAY);
    REQUIRE_THROWS_MATCHES(sd::list_label_files(tmp.path), sd::ConfigError,
                           Catch::Matchers::MessageMatches(ContainsSubstring("'b'")));
  }
  SECTION("a non-directory path is rejected") {
    REQUIRE_THROWS_AS(sd::list_label_files(tmp.file("notes.txt")), sd::ConfigError);
  }
}

TEST_CASE("random masks ingest and round-trip through the cache") {
  std::mt19937_64 gen(7);
  std::vector<sd::MaskRecord> recs;
  TempDir tmp;
  for (int i = 0; i < 40; ++i) {
    const sd::LabelMap m = testutil::random_map(gen, 12, 6, 255);
    sd::MaskRecord rec = sd::ingest_label_map(m, "r" + std::to_string(i), 6, 255);
    std::int64_t total = rec.ignored_pixels;
    for (const auto& [c, n] : rec.histogram) total += n;
    REQUIRE(total == rec.total_pixels());

    // PGM round-trip preserves the exact histogram.
    sd::save_label_pgm(tmp.file("m.pgm"), m);
    const sd::MaskRecord again =
        sd::ingest_label_map(sd::load_label_pgm(tmp.file("m.pgm")), rec.id, 6, 255);
    REQUIRE(records_equal(rec, again));
    recs.push_back(std::move(rec));
  }
  const std::string text = sd::histogram_cache_to_string(recs, 6);
  const sd::HistogramCache cache = sd::parse_histogram_cache(text, "mem");
  for (std::size_t i = 0; i < recs.size(); ++i) REQUIRE(records_equal(cache.records[i], recs[i]));
}
