#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "segdistill/contracts.hpp"
#include "segdistill/mask_ops.hpp"
#include "segdistill/parallel.hpp"

namespace segdistill {

/// Channel-wise mean of a feature map over the region where the (already
/// resized) mask equals `class_id`. Absent when the region is empty at this
/// resolution, which is distinct from a zero mean.
inline std::optional<Vec> class_region_mean(const FeatureMap& fm, const LabelMap& mask, int class_id) {
  if (mask.height != fm.shape.height || mask.width != fm.shape.width)
    throw DataError("mask resolution " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                    " does not match feature map " + std::to_string(fm.shape.height) + "x" +
                    std::to_string(fm.shape.width));
  const std::int64_t plane = static_cast<std::int64_t>(fm.shape.height) * fm.shape.width;
  Vec sum = Vec::Zero(fm.shape.channels);
  std::int64_t count = 0;
  for (int r = 0; r < fm.shape.height; ++r)
    for (int c = 0; c < fm.shape.width; ++c) {
      if (mask.at(r, c) != class_id) continue;
      ++count;
      const std::int64_t p = static_cast<std::int64_t>(r) * fm.shape.width + c;
      for (int ch = 0; ch < fm.shape.channels; ++ch) sum[ch] += fm.data[ch * plane + p];
    }
  if (count == 0) return std::nullopt;
  return Vec(sum / static_cast<double>(count));
}

/// Dataset-level mean feature vector for one (stage, class) pair, plus the
/// number of images that contributed a non-empty region.
struct BankEntry {
  Vec mean;
  std::int64_t count = 0;
};

/// Per-stage, per-class mean features over a dataset. Only pairs with at
/// least one contributing image are stored.
struct ClassFeatureBank {
  int num_classes = 0;
  std::vector<FeatureExtractor::StageInfo> stages;
  std::map<std::pair<int, int>, BankEntry> entries;  // key: (stage, class)

  const BankEntry* find(int stage, int class_id) const {
    auto it = entries.find({stage, class_id});
    return it == entries.end() ? nullptr : &it->second;
  }
};

inline bool bank_equal(const ClassFeatureBank& a, const ClassFeatureBank& b) {
  if (a.num_classes != b.num_classes || a.stages.size() != b.stages.size()) return false;
  for (std::size_t l = 0; l < a.stages.size(); ++l)
    if (a.stages[l].channels != b.stages[l].channels || a.stages[l].factor != b.stages[l].factor) return false;
  if (a.entries.size() != b.entries.size()) return false;
  for (auto ita = a.entries.begin(), itb = b.entries.begin(); ita != a.entries.end(); ++ita, ++itb) {
    if (ita->first != itb->first || ita->second.count != itb->second.count) return false;
    if (ita->second.mean.size() != itb->second.mean.size()) return false;
    for (Eigen::Index i = 0; i < ita->second.mean.size(); ++i)
      if (ita->second.mean[i] != itb->second.mean[i]) return false;
  }
  return true;
}

/// One image paired with its full-resolution class map.
struct TrainingExample {
  std::string id;
  Image image;
  LabelMap mask;
};

/// Per-image contribution to the bank: region means for every stage/class.
struct BankContribution {
  std::string id;
  std::map<std::pair<int, int>, Vec> means;
};

inline BankContribution bank_contribution(const TrainingExample& ex, const FeatureExtractor& extractor,
                                          int num_classes) {
  const Shape3 in = extractor.input_shape();
  if (ex.image.shape != in)
    throw DataError("example '" + ex.id + "': image geometry does not match extractor input");
  if (ex.mask.height != in.height || ex.mask.width != in.width)
    throw DataError("example '" + ex.id + "': mask geometry does not match extractor input");
  BankContribution contrib;
  contrib.id = ex.id;
  const std::vector<FeatureMap> maps = extractor.extract(ex.image);
  for (std::size_t l = 0; l < maps.size(); ++l) {
    const LabelMap resized = resize_mask_nearest(ex.mask, maps[l].shape.height, maps[l].shape.width);
    for (int c = 0; c < num_classes; ++c) {
      auto mean = class_region_mean(maps[l], resized, c);
      if (mean.has_value()) contrib.means.emplace(std::make_pair(static_cast<int>(l), c), std::move(*mean));
    }
  }
  return contrib;
}

/// Averages per-image region means over the dataset. Images whose region is
/// empty at a stage are skipped for that (stage, class) pair and do not
/// count toward it. Contributions are accumulated in ascending id order, so
/// the result is bit-identical under input permutation and independent of
/// the worker count.
inline ClassFeatureBank build_feature_bank(std::span<const TrainingExample> examples,
                                           const FeatureExtractor& extractor, int num_classes, int jobs = 1) {
  if (num_classes <= 0) throw ConfigError("num_classes must be positive");
  ClassFeatureBank bank;
  bank.num_classes = num_classes;
  bank.stages = extractor.stages();

  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return examples[a].id < examples[b].id; });
  for (std::size_t i = 1; i < order.size(); ++i)
    if (examples[order[i]].id == examples[order[i - 1]].id)
      throw DataError("duplicate example id '" + examples[order[i]].id + "'");

  std::vector<BankContribution> contribs(examples.size());
  parallel_for(examples.size(), jobs,
               [&](std::size_t i) { contribs[i] = bank_contribution(examples[i], extractor, num_classes); });

  std::map<std::pair<int, int>, std::pair<Vec, std::int64_t>> acc;
  for (std::size_t idx : order) {
    for (const auto& [key, mean] : contribs[idx].means) {
      auto it = acc.find(key);
      if (it == acc.end()) {
        acc.emplace(key, std::make_pair(mean, std::int64_t{1}));
      } else {
        it->second.first += mean;
        it->second.second += 1;
      }
    }
  }
  for (const auto& [key, sum_count] : acc)
    bank.entries.emplace(key, BankEntry{sum_count.first / static_cast<double>(sum_count.second),
                                        sum_count.second});
  return bank;
}

/// Text bank format: a header with class count and stage table, then one
/// `entry <stage> <class> <count> <C_l values>` line per stored pair.
inline std::string feature_bank_to_string(const ClassFeatureBank& bank) {
  std::ostringstream out;
  out << "feature-bank 1\n";
  out << "num_classes " << bank.num_classes << '\n';
  out << "stages " << bank.stages.size() << '\n';
  for (std::size_t l = 0; l < bank.stages.size(); ++l)
    out << "stage " << l << ' ' << bank.stages[l].channels << ' ' << bank.stages[l].factor << '\n';
  for (const auto& [key, entry] : bank.entries) {
    out << "entry " << key.first << ' ' << key.second << ' ' << entry.count;
    for (Eigen::Index i = 0; i < entry.mean.size(); ++i) out << ' ' << format_double(entry.mean[i]);
    out << '\n';
  }
  return out.str();
}

inline void write_feature_bank(const std::filesystem::path& path, const ClassFeatureBank& bank) {
  atomic_write_file(path, feature_bank_to_string(bank));
}

inline ClassFeatureBank parse_feature_bank(const std::string& content, const std::string& origin) {
  std::istringstream in(content);
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) -> ParseError {
    return ParseError(origin + ": line " + std::to_string(line_no) + ": " + what);
  };
  auto next_line = [&]() -> std::vector<std::string> {
    while (std::getline(in, line)) {
      ++line_no;
      auto tokens = split_ws(line);
      if (!tokens.empty()) return tokens;
    }
    ++line_no;
    throw fail("unexpected end of file");
  };

  ClassFeatureBank bank;
  auto magic = next_line();
  if (magic.size() != 2 || magic[0] != "feature-bank" || magic[1] != "1")
    throw fail("expected 'feature-bank 1' header");
  auto nc = next_line();
  if (nc.size() != 2 || nc[0] != "num_classes") throw fail("expected 'num_classes K'");
  bank.num_classes = static_cast<int>(parse_int(nc[1]));
  if (bank.num_classes <= 0) throw fail("num_classes must be positive");
  auto st = next_line();
  if (st.size() != 2 || st[0] != "stages") throw fail("expected 'stages L'");
  const std::int64_t stages = parse_int(st[1]);
  if (stages <= 0) throw fail("stage count must be positive");
  for (std::int64_t l = 0; l < stages; ++l) {
    auto row = next_line();
    if (row.size() != 4 || row[0] != "stage") throw fail("expected 'stage l channels factor'");
    if (parse_int(row[1]) != l) throw fail("stage rows must be in order");
    FeatureExtractor::StageInfo info;
    info.channels = static_cast<int>(parse_int(row[2]));
    info.factor = static_cast<int>(parse_int(row[3]));
    if (info.channels <= 0 || info.factor <= 0) throw fail("stage geometry must be positive");
    bank.stages.push_back(info);
  }
  while (std::getline(in, line)) {
    ++line_no;
    auto tokens = split_ws(line);
    if (tokens.empty()) continue;
    if (tokens[0] != "entry" || tokens.size() < 4) throw fail("expected 'entry stage class count values...'");
    const std::int64_t stage = parse_int(tokens[1]);
    const std::int64_t cls = parse_int(tokens[2]);
    const std::int64_t count = parse_int(tokens[3]);
    if (stage < 0 || stage >= static_cast<std::int64_t>(bank.stages.size())) throw fail("stage index out of range");
    if (cls < 0 || cls >= bank.num_classes) throw fail("class id out of range");
    if (count < 1) throw fail("entry count must be at least 1");
    const int dim = bank.stages[static_cast<std::size_t>(stage)].channels;
    if (tokens.size() != static_cast<std::size_t>(dim) + 4)
      throw fail("expected " + std::to_string(dim) + " mean values, got " + std::to_string(tokens.size() - 4));
    BankEntry entry;
    entry.count = count;
    entry.mean.resize(dim);
    for (int i = 0; i < dim; ++i) {
      try {
        entry.mean[i] = parse_double(tokens[static_cast<std::size_t>(i) + 4]);
      } catch (const ParseError& e) {
        throw fail(e.what());
      }
    }
    if (!entry.mean.allFinite()) throw fail("non-finite mean value");
    if (!bank.entries.emplace(std::make_pair(static_cast<int>(stage), static_cast<int>(cls)), std::move(entry))
             .second)
      throw fail("duplicate bank entry");
  }
  return bank;
}

inline ClassFeatureBank read_feature_bank(const std::filesystem::path& path) {
  return parse_feature_bank(read_file(path), path.string());
}

}  // namespace segdistill
