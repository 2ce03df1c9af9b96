#pragma once

#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "segdistill/class_stats.hpp"
#include "segdistill/config.hpp"
#include "segdistill/contracts.hpp"
#include "segdistill/ddim.hpp"
#include "segdistill/feature_bank.hpp"
#include "segdistill/guidance.hpp"
#include "segdistill/histogram_cache.hpp"
#include "segdistill/label_io.hpp"
#include "segdistill/mask_ops.hpp"
#include "segdistill/parallel.hpp"
#include "segdistill/selection.hpp"

namespace segdistill {

/// Condition for one mask: its class set in ascending id order.
inline Condition build_condition(const MaskRecord& record) {
  if (record.histogram.empty())
    throw DataError("mask '" + record.id + "' has an empty class set and cannot condition sampling");
  Condition cond;
  for (const auto& [c, n] : record.histogram) {
    (void)n;
    cond.class_list.push_back(c);
  }
  return cond;
}

/// Per-pixel argmax over the segmenter's logits, ties to the lowest class.
inline LabelMap relabel(const Image& image, const Segmenter& segmenter) {
  const Logits logits = segmenter.segment(image);
  const auto [K, H, W] = logits.shape;
  if (!all_finite(logits.data)) throw DataError("relabel: segmenter produced non-finite logits");
  LabelMap out = make_label_map(H, W);
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const std::int64_t p = static_cast<std::int64_t>(r) * W + c;
      int best = 0;
      for (int k = 1; k < K; ++k)
        if (logits.data[k * plane + p] > logits.data[best * plane + p]) best = k;
      out.at(r, c) = best;
    }
  }
  return out;
}

/// Concrete contract instances bound from a config.
struct BoundContracts {
  std::shared_ptr<NoisePredictor> predictor;
  std::shared_ptr<Decoder> decoder;
  std::shared_ptr<Segmenter> segmenter;
  std::shared_ptr<FeatureExtractor> extractor;  // null when unconfigured
};

inline BoundContracts bind_contracts(const PipelineConfig& cfg, const NoiseSchedule& schedule) {
  BoundContracts b;
  const int latent_dim = static_cast<int>(cfg.latent_shape.size());
  const Shape3 image_shape = cfg.decoded_shape();

  if (cfg.predictor.type == "zero") {
    b.predictor = std::make_shared<ZeroPredictor>();
  } else {
    b.predictor = make_linear_gaussian_predictor(Vec::Constant(latent_dim, cfg.predictor.mean),
                                                 cfg.predictor.variance, schedule);
  }
  if (cfg.decoder.type == "identity") {
    b.decoder = std::make_shared<IdentityDecoder>(cfg.latent_shape);
  } else {
    b.decoder = std::make_shared<AffineDecoder>(latent_dim, image_shape, mix_seed(cfg.seed, "decoder"));
  }
  if (cfg.segmenter.type == "prototype") {
    b.segmenter = std::make_shared<PrototypeSegmenter>(cfg.num_classes, image_shape);
  } else {
    b.segmenter = std::make_shared<LinearSegmenter>(cfg.num_classes, image_shape, mix_seed(cfg.seed, "segmenter"));
  }
  if (cfg.extractor.type == "pooling")
    b.extractor =
        std::make_shared<PoolingExtractor>(image_shape, cfg.extractor.stage_channels, mix_seed(cfg.seed, "extractor"));
  return b;
}

/// In-memory dataset handed to the pipeline: histogram records plus the
/// dense maps needed for conditioning, guidance, and bank building.
struct DistillInput {
  std::vector<MaskRecord> records;
  std::map<std::string, std::shared_ptr<const LabelMap>> masks;
};

struct StepTrace {
  int t = 0;
  std::optional<double> seg_loss;
  std::optional<double> feat_loss;
};

struct DistilledSample {
  std::string id;
  std::string source_mask_id;
  Image image;
  LabelMap relabeled;
  std::uint64_t seed = 0;
  int steps = 0;
  double lambda_seg = 0.0;
  double lambda_feat = 0.0;
  std::vector<StepTrace> trace;
};

struct SampleFailure {
  std::string id;
  std::string diagnostic;
};

struct RunTimings {
  double selection_ms = 0.0;
  double bank_ms = 0.0;
  double synthesis_ms = 0.0;
};

struct DistillResult {
  ClassStats stats;
  SelectionState selection;
  std::string strategy;
  ClassFeatureBank bank;
  bool bank_built = false;
  std::vector<DistilledSample> samples;
  std::vector<SampleFailure> failures;
  RunTimings timings;
};

inline std::int64_t resolve_budget(const SelectionSpec& spec, std::size_t dataset_size) {
  if (spec.budget.has_value()) return *spec.budget;
  if (spec.ratio.has_value())
    return static_cast<std::int64_t>(*spec.ratio * static_cast<double>(dataset_size));
  throw ConfigError("selection needs either a budget or a ratio");
}

inline SelectionState run_selection(std::span<const MaskRecord> records, const ClassStats& stats,
                                    const PipelineConfig& cfg) {
  const std::int64_t budget = resolve_budget(cfg.selection, records.size());
  const std::string& strat = cfg.selection.strategy;
  if (strat == "greedy") return select_greedy(records, stats, budget, cfg.selection.temperature);
  if (strat == "random")
    return select_random(records, cfg.num_classes, budget, mix_seed(cfg.seed, "select-random"));
  if (strat == "uniform") return select_uniform(records, stats, budget);
  if (!cfg.selection.features_path.has_value())
    throw ConfigError("strategy '" + strat + "' needs a feature table ('features')");
  const FeatureTable table = read_feature_table(*cfg.selection.features_path);
  SelectionState state = strat == "kcenter"
                             ? select_kcenter(table, budget, mix_seed(cfg.seed, "select-kcenter"))
                             : select_herding(table, budget);
  rebuild_coverage(state, records, cfg.num_classes);
  return state;
}

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace detail

/// Synthesizes one sample: encode the mask to an anchor latent, invert it
/// to the noise end of the schedule, run the guided denoising loop, decode,
/// and relabel.
inline DistilledSample synthesize_sample(const MaskRecord& record, const LabelMap& mask,
                                         const PipelineConfig& cfg, const NoiseSchedule& schedule,
                                         const BoundContracts& contracts, const ClassFeatureBank* bank) {
  Condition cond = build_condition(record);
  cond.mask = std::make_shared<const LabelMap>(mask);

  const Shape3 image_shape = contracts.decoder->image_shape();
  const LabelMap image_res_mask = resize_mask_nearest(mask, image_shape.height, image_shape.width);

  const Image anchor = encode_mask_image(mask, cfg.num_classes, cfg.latent_shape, cfg.ignore_index);
  LatentState state{anchor.data, 0};

  const CfgPredictor invert_pred(*contracts.predictor, cfg.inversion_scale);
  state = run_inversion(state, make_noise_fn(invert_pred, cond, 1.0), schedule, schedule.steps);

  const CfgPredictor sample_pred(*contracts.predictor, cfg.cfg_scale);
  const GuidanceConfig& g = cfg.guidance;
  const bool any_guidance = g.lambda_seg > 0 || g.lambda_feat > 0;

  ImageLossFn seg_loss;
  if (g.lambda_seg > 0) {
    seg_loss = [&](const Image& img) {
      return segmentation_consistency_loss(img, image_res_mask, *contracts.segmenter, cfg.ignore_index);
    };
  }
  ImageLossFn feat_loss;
  if (g.lambda_feat > 0) {
    if (!contracts.extractor || !bank)
      throw ConfigError("feature guidance requires an extractor contract and a feature bank");
    feat_loss = [&](const Image& img) {
      return feature_matching_loss(img, image_res_mask, *contracts.extractor, *bank, cfg.ignore_index);
    };
  }

  DistilledSample sample;
  sample.id = record.id;
  sample.source_mask_id = record.id;
  sample.seed = mix_seed(cfg.seed, record.id);
  sample.steps = schedule.steps;
  sample.lambda_seg = g.lambda_seg;
  sample.lambda_feat = g.lambda_feat;

  while (state.t > 0) {
    const int t = state.t;
    Vec eps = sample_pred.predict(state, cond);
    if (any_guidance && g.active_steps.contains(t)) {
      Vec grad_seg, grad_feat;
      StepTrace trace{t, std::nullopt, std::nullopt};
      if (g.lambda_seg > 0) {
        auto r = latent_loss_gradient(state, cond, sample_pred, *contracts.decoder, seg_loss, schedule,
                                      g.differentiate_through_predictor, g.allow_fd_fallback);
        grad_seg = std::move(r.gradient);
        trace.seg_loss = r.loss;
      }
      if (g.lambda_feat > 0) {
        auto r = latent_loss_gradient(state, cond, sample_pred, *contracts.decoder, feat_loss, schedule,
                                      g.differentiate_through_predictor, g.allow_fd_fallback);
        grad_feat = std::move(r.gradient);
        trace.feat_loss = r.loss;
      }
      const GuidanceScales scales = guidance_scales(eps, grad_seg, grad_feat, schedule.at(t), g);
      eps = guided_noise(eps, grad_seg, grad_feat, scales);
      sample.trace.push_back(std::move(trace));
    }
    state = ddim_step(state, eps, schedule, t - 1);
  }

  if (!all_finite(state.z)) throw DataError("sample '" + record.id + "': non-finite latent after sampling");
  sample.image = contracts.decoder->decode(state.z);
  if (!all_finite(sample.image.data)) throw DataError("sample '" + record.id + "': non-finite decoded image");
  sample.relabeled = relabel(sample.image, *contracts.segmenter);
  return sample;
}

/// Runs the whole distillation: statistics, selection, bank construction,
/// and the guided synthesis loop over the selected masks (fail-soft per
/// sample). Deterministic for a fixed config; worker count never changes
/// results.
inline DistillResult distill(const DistillInput& input, const PipelineConfig& cfg) {
  DistillResult result;
  const auto t_select = std::chrono::steady_clock::now();
  result.stats = compute_class_stats(input.records, cfg.num_classes, cfg.selection.frequency_mode);
  result.selection = run_selection(input.records, result.stats, cfg);
  result.strategy = cfg.selection.strategy;
  result.timings.selection_ms = detail::elapsed_ms(t_select);

  const NoiseSchedule schedule =
      build_schedule(cfg.schedule.kind, cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end);
  const BoundContracts contracts = bind_contracts(cfg, schedule);

  std::map<std::string, const MaskRecord*> records_by_id;
  for (const MaskRecord& rec : input.records) records_by_id.emplace(rec.id, &rec);

  if (cfg.guidance.lambda_feat > 0) {
    const auto t_bank = std::chrono::steady_clock::now();
    if (!contracts.extractor) throw ConfigError("feature guidance requires an extractor contract");
    const Shape3 in_shape = contracts.extractor->input_shape();
    std::vector<TrainingExample> examples;
    examples.reserve(input.records.size());
    for (const MaskRecord& rec : input.records) {
      auto it = input.masks.find(rec.id);
      if (it == input.masks.end())
        throw ConfigError("record '" + rec.id + "' has no dense mask; bank building needs masks");
      TrainingExample ex;
      ex.id = rec.id;
      ex.mask = resize_mask_nearest(*it->second, in_shape.height, in_shape.width);
      ex.image = encode_mask_image(*it->second, cfg.num_classes, in_shape, cfg.ignore_index);
      examples.push_back(std::move(ex));
    }
    result.bank = build_feature_bank(examples, *contracts.extractor, cfg.num_classes, cfg.jobs);
    result.bank_built = true;
    result.timings.bank_ms = detail::elapsed_ms(t_bank);
  }

  const auto t_synth = std::chrono::steady_clock::now();
  const std::size_t n = result.selection.selected.size();
  std::vector<std::optional<DistilledSample>> ok(n);
  std::vector<std::optional<SampleFailure>> bad(n);
  parallel_for(n, cfg.jobs, [&](std::size_t i) {
    const std::string& id = result.selection.selected[i];
    try {
      auto rec_it = records_by_id.find(id);
      if (rec_it == records_by_id.end()) throw DataError("selected id '" + id + "' is not in the dataset");
      auto mask_it = input.masks.find(id);
      if (mask_it == input.masks.end())
        throw DataError("selected id '" + id + "' has no dense mask; synthesis needs the label map");
      ok[i] = synthesize_sample(*rec_it->second, *mask_it->second, cfg, schedule, contracts,
                                result.bank_built ? &result.bank : nullptr);
    } catch (const std::exception& e) {
      bad[i] = SampleFailure{id, e.what()};
    }
  });
  for (std::size_t i = 0; i < n; ++i) {
    if (ok[i].has_value()) result.samples.push_back(std::move(*ok[i]));
    if (bad[i].has_value()) result.failures.push_back(std::move(*bad[i]));
  }
  result.timings.synthesis_ms = detail::elapsed_ms(t_synth);
  return result;
}

/// Flat text image format: a `C H W` header line, then C*H rows of W
/// values, each serialized with shortest-round-trip precision.
inline std::string image_to_string(const Image& img) {
  std::ostringstream out;
  out << img.shape.channels << ' ' << img.shape.height << ' ' << img.shape.width << '\n';
  for (int c = 0; c < img.shape.channels; ++c)
    for (int r = 0; r < img.shape.height; ++r) {
      for (int col = 0; col < img.shape.width; ++col) {
        if (col) out << ' ';
        out << format_double(img.at(c, r, col));
      }
      out << '\n';
    }
  return out.str();
}

inline void write_image_txt(const std::filesystem::path& path, const Image& img) {
  atomic_write_file(path, image_to_string(img));
}

inline Image parse_image_txt(const std::string& content, const std::string& origin) {
  std::istringstream in(content);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(origin + ": line 1: empty image file");
  const auto header = split_ws(line);
  if (header.size() != 3) throw ParseError(origin + ": line 1: expected 'C H W' header");
  Image img;
  img.shape = {static_cast<int>(parse_int(header[0])), static_cast<int>(parse_int(header[1])),
               static_cast<int>(parse_int(header[2]))};
  if (img.shape.size() <= 0) throw ParseError(origin + ": line 1: non-positive image dimensions");
  img.data.resize(img.shape.size());
  std::size_t line_no = 1;
  Eigen::Index filled = 0;
  while (std::getline(in, line)) {
    ++line_no;
    for (const std::string& tok : split_ws(line)) {
      if (filled >= img.data.size())
        throw ParseError(origin + ": line " + std::to_string(line_no) + ": more values than the header declares");
      try {
        img.data[filled++] = parse_double(tok);
      } catch (const ParseError& e) {
        throw ParseError(origin + ": line " + std::to_string(line_no) + ": " + e.what());
      }
    }
  }
  if (filled != img.data.size())
    throw ParseError(origin + ": expected " + std::to_string(img.data.size()) + " values, got " +
                     std::to_string(filled));
  return img;
}

inline Image read_image_txt(const std::filesystem::path& path) {
  return parse_image_txt(read_file(path), path.string());
}

inline nlohmann::json distribution_report_json(const DistributionReport& rep) {
  return nlohmann::json{{"coverage", rep.coverage},
                        {"imbalance_factor", imbalance_to_json(rep.imbalance)},
                        {"min_coverage", rep.min_coverage},
                        {"max_coverage", rep.max_coverage},
                        {"classes_missing", rep.classes_missing}};
}

/// Coverage reports over the selected set and the relabeled outputs. Only
/// classes present in the source dataset are considered, so the imbalance
/// factor blames the selection, not the dataset.
struct RunReport {
  DistributionReport selected;
  std::optional<DistributionReport> relabeled;
  std::size_t num_selected = 0;
  std::size_t num_samples = 0;
  std::size_t num_failures = 0;
  RunTimings timings;
};

inline RunReport make_run_report(const DistillResult& result, std::int32_t ignore_index) {
  RunReport rep;
  rep.num_selected = result.selection.selected.size();
  rep.num_samples = result.samples.size();
  rep.num_failures = result.failures.size();
  rep.timings = result.timings;
  const int K = result.stats.num_classes;
  std::vector<bool> considered(static_cast<std::size_t>(K));
  for (int c = 0; c < K; ++c) considered[static_cast<std::size_t>(c)] = result.stats.image_freq[c] > 0;
  rep.selected = make_distribution_report(result.selection.coverage, considered);
  if (!result.samples.empty()) {
    std::vector<std::int64_t> coverage(static_cast<std::size_t>(K), 0);
    for (const DistilledSample& s : result.samples) {
      const MaskRecord rec = ingest_label_map(s.relabeled, s.id, K, ignore_index);
      for (const auto& [c, n] : rec.histogram) {
        (void)n;
        coverage[static_cast<std::size_t>(c)] += 1;
      }
    }
    rep.relabeled = make_distribution_report(coverage, considered);
  }
  return rep;
}

inline nlohmann::json run_report_json(const RunReport& rep) {
  nlohmann::json j{{"format", "segdistill-report"},
                   {"version", 1},
                   {"num_selected", rep.num_selected},
                   {"num_samples", rep.num_samples},
                   {"num_failures", rep.num_failures},
                   {"selected", distribution_report_json(rep.selected)},
                   {"timings_ms",
                    {{"selection", rep.timings.selection_ms},
                     {"bank", rep.timings.bank_ms},
                     {"synthesis", rep.timings.synthesis_ms}}}};
  j["relabeled"] = rep.relabeled.has_value() ? distribution_report_json(*rep.relabeled) : nlohmann::json();
  return j;
}

/// Deterministic per-run manifest: configuration echo, ordered selection,
/// per-sample loss traces, and failure diagnostics. Contains no timings or
/// other run-varying data, so identical runs produce identical bytes.
inline nlohmann::json run_manifest_json(const DistillResult& result, const PipelineConfig& cfg) {
  nlohmann::json samples = nlohmann::json::array();
  for (const DistilledSample& s : result.samples) {
    nlohmann::json trace = nlohmann::json::array();
    for (const StepTrace& st : s.trace) {
      nlohmann::json entry{{"t", st.t}};
      if (st.seg_loss.has_value()) entry["seg_loss"] = *st.seg_loss;
      if (st.feat_loss.has_value()) entry["feat_loss"] = *st.feat_loss;
      trace.push_back(std::move(entry));
    }
    samples.push_back(nlohmann::json{{"id", s.id},
                                     {"source_mask", s.source_mask_id},
                                     {"seed", s.seed},
                                     {"steps", s.steps},
                                     {"lambda_seg", s.lambda_seg},
                                     {"lambda_feat", s.lambda_feat},
                                     {"trace", std::move(trace)}});
  }
  nlohmann::json failures = nlohmann::json::array();
  for (const SampleFailure& f : result.failures)
    failures.push_back(nlohmann::json{{"id", f.id}, {"diagnostic", f.diagnostic}});
  return nlohmann::json{{"format", "segdistill-run"},
                        {"version", 1},
                        {"seed", cfg.seed},
                        {"num_classes", cfg.num_classes},
                        {"strategy", result.strategy},
                        {"schedule",
                         {{"kind", to_string(cfg.schedule.kind)},
                          {"steps", cfg.schedule.steps},
                          {"beta_start", cfg.schedule.beta_start},
                          {"beta_end", cfg.schedule.beta_end}}},
                        {"cfg_scale", cfg.cfg_scale},
                        {"inversion_scale", cfg.inversion_scale},
                        {"lambda_seg", cfg.guidance.lambda_seg},
                        {"lambda_feat", cfg.guidance.lambda_feat},
                        {"selected", result.selection.selected},
                        {"samples", std::move(samples)},
                        {"failures", std::move(failures)}};
}

/// Writes every run artifact under `dir`: per-sample image/mask/preview
/// files, the selection manifest, the run manifest, the feature bank (when
/// built), and the run report.
inline void write_distill_outputs(const std::filesystem::path& dir, const DistillResult& result,
                                  const PipelineConfig& cfg) {
  std::filesystem::create_directories(dir);
  for (const DistilledSample& s : result.samples) {
    write_image_txt(dir / (s.id + ".img.txt"), s.image);
    save_label_pgm(dir / (s.id + ".mask.pgm"), s.relabeled);
    save_image_preview_pgm(dir / (s.id + ".preview.pgm"), s.image);
  }
  write_selection_manifest(dir / "selection.json", result.selection, result.strategy,
                           result.strategy == "random" || result.strategy == "kcenter"
                               ? std::optional<std::uint64_t>(cfg.seed)
                               : std::nullopt);
  atomic_write_file(dir / "manifest.json", run_manifest_json(result, cfg).dump(2) + "\n");
  if (result.bank_built) write_feature_bank(dir / "bank.txt", result.bank);
  atomic_write_file(dir / "report.json", run_report_json(make_run_report(result, cfg.ignore_index)).dump(2) + "\n");
}

/// Loads records and dense masks per the config's dataset block: dense maps
/// from `masks_dir` (ingested and validated), or histogram records from a
/// cache (no dense maps; enough for stats and selection only).
inline DistillInput load_distill_input(const PipelineConfig& cfg) {
  DistillInput input;
  if (cfg.masks_dir.has_value()) {
    for (const auto& [id, path] : list_label_files(*cfg.masks_dir)) {
      auto map = std::make_shared<LabelMap>(load_label_map(path));
      input.records.push_back(ingest_label_map(*map, id, cfg.num_classes, cfg.ignore_index));
      input.masks.emplace(id, std::move(map));
    }
  } else if (cfg.cache_path.has_value()) {
    HistogramCache cache = read_histogram_cache(*cfg.cache_path);
    if (cache.num_classes != cfg.num_classes)
      throw ConfigError("cache declares " + std::to_string(cache.num_classes) + " classes but the config says " +
                        std::to_string(cfg.num_classes));
    input.records = std::move(cache.records);
  } else {
    throw ConfigError("config needs dataset.masks_dir or dataset.cache");
  }
  if (input.records.empty()) throw DataError("dataset is empty");
  return input;
}

}  // namespace segdistill
