#pragma once

#include <Eigen/Core>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "segdistill/class_stats.hpp"
#include "segdistill/mask_record.hpp"
#include "segdistill/rng.hpp"

namespace segdistill {

/// Bookkeeping of one budgeted selection: the ordered chosen ids, the
/// per-class coverage counts n_c they induce, and the run parameters.
struct SelectionState {
  std::vector<std::string> selected;
  std::vector<std::int64_t> coverage;
  double temperature = 0.5;
  std::int64_t budget = 0;
};

namespace detail {

inline void check_budget(std::int64_t budget, std::size_t dataset_size) {
  // Budget 0 is a valid degenerate request (empty selection).
  if (budget < 0) throw ConfigError("selection budget must be non-negative");
  if (static_cast<std::size_t>(budget) > dataset_size)
    throw ConfigError("selection budget " + std::to_string(budget) + " exceeds dataset size " +
                      std::to_string(dataset_size));
}

inline void check_unique_ids(std::span<const MaskRecord> records) {
  std::unordered_set<std::string> seen;
  for (const MaskRecord& rec : records)
    if (!seen.insert(rec.id).second) throw DataError("duplicate record id '" + rec.id + "'");
}

}  // namespace detail

/// Score of a candidate record under the class-balanced objective:
/// sum over the record's classes of w_c * exp(-n_c / T). Rare classes pull
/// weight up, already-covered classes decay away.
inline double greedy_score(const MaskRecord& record, const ClassStats& stats, const SelectionState& state) {
  if (state.temperature <= 0) throw ConfigError("selection temperature must be positive");
  if (state.coverage.size() != static_cast<std::size_t>(stats.num_classes))
    throw DataError("coverage size does not match num_classes");
  double score = 0.0;
  for (const auto& [c, n] : record.histogram) {
    (void)n;
    score += stats.weights[c] * std::exp(-static_cast<double>(state.coverage[c]) / state.temperature);
  }
  return score;
}

/// Recomputes coverage counts from the selected id list.
inline void rebuild_coverage(SelectionState& state, std::span<const MaskRecord> records, int num_classes) {
  std::unordered_map<std::string, const MaskRecord*> by_id;
  for (const MaskRecord& rec : records) by_id.emplace(rec.id, &rec);
  state.coverage.assign(num_classes, 0);
  for (const std::string& id : state.selected) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("selected id '" + id + "' is not in the dataset");
    for (const auto& [c, n] : it->second->histogram) {
      (void)n;
      state.coverage[c] += 1;
    }
  }
}

/// Class-balanced greedy selection: B rounds of exact argmax over
/// greedy_score, ties broken by lowest id. Scores are cached and only
/// candidates sharing a class with the previous pick are rescored; the
/// shared per-class decay table makes this bit-identical to rescoring
/// everything each round.
inline SelectionState select_greedy(std::span<const MaskRecord> records, const ClassStats& stats,
                                    std::int64_t budget, double temperature) {
  if (records.empty()) throw DataError("cannot select from an empty dataset");
  if (temperature <= 0) throw ConfigError("selection temperature must be positive");
  detail::check_budget(budget, records.size());
  detail::check_unique_ids(records);
  const int K = stats.num_classes;
  const std::size_t n = records.size();

  SelectionState state;
  state.temperature = temperature;
  state.budget = budget;
  state.coverage.assign(K, 0);

  std::vector<double> decay(K, 1.0);
  std::vector<std::vector<std::size_t>> by_class(K);
  for (std::size_t i = 0; i < n; ++i)
    for (const auto& [c, cnt] : records[i].histogram) {
      (void)cnt;
      by_class[c].push_back(i);
    }

  auto score_of = [&](std::size_t i) {
    double s = 0.0;
    for (const auto& [c, cnt] : records[i].histogram) {
      (void)cnt;
      s += stats.weights[c] * decay[c];
    }
    return s;
  };

  std::vector<double> score(n);
  std::vector<char> taken(n, 0);
  for (std::size_t i = 0; i < n; ++i) score[i] = score_of(i);

  for (std::int64_t step = 0; step < budget; ++step) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      if (best == n || score[i] > score[best] ||
          (score[i] == score[best] && records[i].id < records[best].id))
        best = i;
    }
    taken[best] = 1;
    state.selected.push_back(records[best].id);
    for (const auto& [c, cnt] : records[best].histogram) {
      (void)cnt;
      state.coverage[c] += 1;
      decay[c] = std::exp(-static_cast<double>(state.coverage[c]) / temperature);
    }
    if (step + 1 == budget) break;
    std::unordered_set<std::size_t> touched;
    for (const auto& [c, cnt] : records[best].histogram) {
      (void)cnt;
      for (std::size_t i : by_class[c]) touched.insert(i);
    }
    for (std::size_t i : touched)
      if (!taken[i]) score[i] = score_of(i);
  }
  return state;
}

/// Uniform sampling without replacement via a partial Fisher-Yates shuffle.
inline SelectionState select_random(std::span<const MaskRecord> records, int num_classes,
                                    std::int64_t budget, std::uint64_t seed) {
  if (records.empty()) throw DataError("cannot select from an empty dataset");
  detail::check_budget(budget, records.size());
  detail::check_unique_ids(records);
  std::vector<std::size_t> idx(records.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  SelectionState state;
  state.budget = budget;
  for (std::int64_t k = 0; k < budget; ++k) {
    const std::size_t j = k + rng.below(idx.size() - k);
    std::swap(idx[k], idx[j]);
    state.selected.push_back(records[idx[k]].id);
  }
  rebuild_coverage(state, records, num_classes);
  return state;
}

/// Round-robin over classes ordered rarest first (by the stats' active
/// frequency mode, ties by class id): each class contributes its lowest-id
/// unselected record, cycling until the budget is filled. Classes with no
/// remaining record are skipped; if a whole cycle yields nothing (all
/// class-bearing records taken), the rest is filled with lowest ids.
inline SelectionState select_uniform(std::span<const MaskRecord> records, const ClassStats& stats,
                                     std::int64_t budget) {
  if (records.empty()) throw DataError("cannot select from an empty dataset");
  detail::check_budget(budget, records.size());
  detail::check_unique_ids(records);
  const int K = stats.num_classes;

  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return records[a].id < records[b].id; });

  std::vector<int> classes;
  for (int c = 0; c < K; ++c)
    if (stats.freq()[c] > 0) classes.push_back(c);
  std::sort(classes.begin(), classes.end(), [&](int a, int b) {
    if (stats.freq()[a] != stats.freq()[b]) return stats.freq()[a] < stats.freq()[b];
    return a < b;
  });

  SelectionState state;
  state.budget = budget;
  std::vector<char> taken(records.size(), 0);
  while (static_cast<std::int64_t>(state.selected.size()) < budget) {
    bool picked_any = false;
    for (int c : classes) {
      if (static_cast<std::int64_t>(state.selected.size()) >= budget) break;
      for (std::size_t i : order) {
        if (taken[i] || !records[i].contains(c)) continue;
        taken[i] = 1;
        state.selected.push_back(records[i].id);
        picked_any = true;
        break;
      }
    }
    if (!picked_any) {
      for (std::size_t i : order) {
        if (static_cast<std::int64_t>(state.selected.size()) >= budget) break;
        if (taken[i]) continue;
        taken[i] = 1;
        state.selected.push_back(records[i].id);
      }
      break;
    }
  }
  rebuild_coverage(state, records, K);
  return state;
}

/// Precomputed global embedding per record, one fixed-dimension row each.
struct FeatureTable {
  int dim = 0;
  std::vector<std::string> ids;
  Eigen::MatrixXd features;  // rows align with ids

  std::size_t size() const { return ids.size(); }
};

namespace detail {

inline void check_feature_table(const FeatureTable& table) {
  if (table.ids.empty()) throw DataError("feature table is empty");
  if (table.features.rows() != static_cast<Eigen::Index>(table.ids.size()) || table.features.cols() != table.dim)
    throw DataError("feature table geometry mismatch");
  if (!table.features.allFinite()) throw DataError("feature table contains non-finite entries");
  std::unordered_set<std::string> seen;
  for (const std::string& id : table.ids)
    if (!seen.insert(id).second) throw DataError("duplicate record id '" + id + "' in feature table");
}

}  // namespace detail

/// Farthest-point traversal under the Euclidean metric. Starts at the
/// lowest id unless a seed is given (the seed draws the start uniformly);
/// each round adds the point maximizing its distance to the chosen set,
/// ties broken by lowest id.
inline SelectionState select_kcenter(const FeatureTable& table, std::int64_t budget,
                                     std::optional<std::uint64_t> seed = std::nullopt) {
  detail::check_feature_table(table);
  detail::check_budget(budget, table.size());
  const std::size_t n = table.size();
  if (budget == 0) {
    SelectionState empty;
    return empty;
  }

  std::size_t start = 0;
  if (seed.has_value()) {
    Rng rng(*seed);
    start = static_cast<std::size_t>(rng.below(n));
  } else {
    for (std::size_t i = 1; i < n; ++i)
      if (table.ids[i] < table.ids[start]) start = i;
  }

  SelectionState state;
  state.budget = budget;
  std::vector<char> taken(n, 0);
  std::vector<double> dist2(n, std::numeric_limits<double>::infinity());
  std::size_t last = start;
  taken[start] = 1;
  state.selected.push_back(table.ids[start]);
  for (std::int64_t k = 1; k < budget; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      dist2[i] = std::min(dist2[i], (table.features.row(i) - table.features.row(last)).squaredNorm());
    }
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      if (best == n || dist2[i] > dist2[best] || (dist2[i] == dist2[best] && table.ids[i] < table.ids[best]))
        best = i;
    }
    taken[best] = 1;
    last = best;
    state.selected.push_back(table.ids[best]);
  }
  return state;
}

/// Greedy mean matching: each round adds the point whose inclusion brings
/// the running selected mean closest (L2) to the global mean, ties broken
/// by lowest id.
inline SelectionState select_herding(const FeatureTable& table, std::int64_t budget) {
  detail::check_feature_table(table);
  detail::check_budget(budget, table.size());
  const std::size_t n = table.size();
  const Eigen::RowVectorXd mean = table.features.colwise().mean();

  SelectionState state;
  state.budget = budget;
  std::vector<char> taken(n, 0);
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(table.dim);
  for (std::int64_t k = 0; k < budget; ++k) {
    std::size_t best = n;
    double best_obj = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      const double obj = (mean - (sum + table.features.row(i)) / static_cast<double>(k + 1)).squaredNorm();
      if (best == n || obj < best_obj || (obj == best_obj && table.ids[i] < table.ids[best])) {
        best = i;
        best_obj = obj;
      }
    }
    taken[best] = 1;
    sum += table.features.row(best);
    state.selected.push_back(table.ids[best]);
  }
  return state;
}

/// Text feature-table format: `dim D` header, then one `id v1 .. vD` row
/// per record.
inline std::string feature_table_to_string(const FeatureTable& table) {
  std::ostringstream out;
  out << "dim " << table.dim << '\n';
  for (std::size_t i = 0; i < table.ids.size(); ++i) {
    out << table.ids[i];
    for (int j = 0; j < table.dim; ++j) out << ' ' << format_double(table.features(static_cast<Eigen::Index>(i), j));
    out << '\n';
  }
  return out.str();
}

inline void write_feature_table(const std::filesystem::path& path, const FeatureTable& table) {
  detail::check_feature_table(table);
  atomic_write_file(path, feature_table_to_string(table));
}

inline FeatureTable parse_feature_table(const std::string& content, const std::string& origin) {
  std::istringstream in(content);
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) -> ParseError {
    return ParseError(origin + ": line " + std::to_string(line_no) + ": " + what);
  };
  FeatureTable table;
  std::vector<std::vector<double>> rows;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    const auto tokens = split_ws(line);
    if (tokens.empty()) continue;
    if (!header_seen) {
      if (tokens.size() != 2 || tokens[0] != "dim") throw fail("expected header 'dim D'");
      const std::int64_t d = parse_int(tokens[1]);
      if (d <= 0) throw fail("feature dimension must be positive");
      table.dim = static_cast<int>(d);
      header_seen = true;
      continue;
    }
    if (tokens.size() != static_cast<std::size_t>(table.dim) + 1)
      throw fail("expected id plus " + std::to_string(table.dim) + " values, got " +
                 std::to_string(tokens.size() - 1));
    table.ids.push_back(tokens[0]);
    std::vector<double> row(table.dim);
    for (int j = 0; j < table.dim; ++j) {
      try {
        row[j] = parse_double(tokens[j + 1]);
      } catch (const ParseError& e) {
        throw fail(e.what());
      }
    }
    rows.push_back(std::move(row));
  }
  if (!header_seen) throw ParseError(origin + ": line 1: missing 'dim D' header");
  table.features.resize(static_cast<Eigen::Index>(rows.size()), table.dim);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int j = 0; j < table.dim; ++j) table.features(static_cast<Eigen::Index>(i), j) = rows[i][j];
  detail::check_feature_table(table);
  return table;
}

inline FeatureTable read_feature_table(const std::filesystem::path& path) {
  return parse_feature_table(read_file(path), path.string());
}

/// JSON value for a possibly-infinite imbalance factor ("inf" when infinite).
inline nlohmann::json imbalance_to_json(double x) {
  if (std::isinf(x)) return "inf";
  return x;
}

/// Machine-readable selection manifest: strategy, parameters, the ordered
/// ids, coverage counts, and the imbalance factor of the covered classes.
inline nlohmann::json selection_manifest_json(const SelectionState& state, const std::string& strategy,
                                              std::optional<std::uint64_t> seed = std::nullopt) {
  nlohmann::json j{{"format", "segdistill-selection"},
                   {"version", 1},
                   {"strategy", strategy},
                   {"budget", state.budget},
                   {"selected", state.selected},
                   {"coverage", state.coverage}};
  if (strategy == "greedy") j["temperature"] = state.temperature;
  if (seed.has_value()) j["seed"] = *seed;
  const bool any_covered =
      std::any_of(state.coverage.begin(), state.coverage.end(), [](std::int64_t n) { return n > 0; });
  if (any_covered) j["imbalance_factor"] = imbalance_to_json(imbalance_factor(state.coverage));
  return j;
}

inline void write_selection_manifest(const std::filesystem::path& path, const SelectionState& state,
                                     const std::string& strategy,
                                     std::optional<std::uint64_t> seed = std::nullopt) {
  atomic_write_file(path, selection_manifest_json(state, strategy, seed).dump(2) + "\n");
}

}  // namespace segdistill
