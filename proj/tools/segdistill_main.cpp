// Command-line front end: dataset statistics, coreset selection, feature
// bank construction, and the full distillation pipeline.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "segdistill/pipeline.hpp"

namespace sd = segdistill;
namespace fs = std::filesystem;

namespace {

struct DatasetArgs {
  std::string dataset_dir;
  std::string cache_path;
  int num_classes = 0;
  std::int32_t ignore_index = 255;
};

void add_dataset_flags(CLI::App* cmd, DatasetArgs& args) {
  cmd->add_option("--dataset", args.dataset_dir, "Directory of <id>.png / <id>.pgm label maps");
  cmd->add_option("--cache", args.cache_path, "Histogram cache file (alternative to --dataset)");
  cmd->add_option("--num-classes", args.num_classes, "Number of classes K (required with --dataset)");
  cmd->add_option("--ignore", args.ignore_index, "Ignore index in label maps")->default_val(255);
}

/// Loads histogram records from either source. Dense maps are kept only
/// when ingesting a directory.
sd::DistillInput load_dataset(const DatasetArgs& args, bool keep_masks) {
  sd::DistillInput input;
  if (!args.dataset_dir.empty() && !args.cache_path.empty())
    throw sd::ConfigError("give either --dataset or --cache, not both");
  if (!args.dataset_dir.empty()) {
    if (args.num_classes <= 0) throw sd::ConfigError("--dataset requires --num-classes");
    for (const auto& [id, path] : sd::list_label_files(args.dataset_dir)) {
      auto map = std::make_shared<sd::LabelMap>(sd::load_label_map(path));
      input.records.push_back(sd::ingest_label_map(*map, id, args.num_classes, args.ignore_index));
      if (keep_masks) input.masks.emplace(id, std::move(map));
    }
  } else if (!args.cache_path.empty()) {
    sd::HistogramCache cache = sd::read_histogram_cache(args.cache_path);
    if (args.num_classes > 0 && args.num_classes != cache.num_classes)
      throw sd::ConfigError("--num-classes " + std::to_string(args.num_classes) +
                            " contradicts the cache header (" + std::to_string(cache.num_classes) + ")");
    input.records = std::move(cache.records);
  } else {
    throw sd::ConfigError("one of --dataset or --cache is required");
  }
  if (input.records.empty()) throw sd::DataError("dataset is empty");
  return input;
}

int effective_classes(const DatasetArgs& args) {
  if (args.num_classes > 0) return args.num_classes;
  sd::HistogramCache cache = sd::read_histogram_cache(args.cache_path);
  return cache.num_classes;
}

std::string imbalance_text(double x) {
  return std::isinf(x) ? "inf" : sd::format_double(x);
}

int run_stats(const DatasetArgs& data, const std::string& mode, const std::string& out_path,
              const std::string& write_cache) {
  const sd::DistillInput input = load_dataset(data, false);
  const int num_classes = data.num_classes > 0 ? data.num_classes : effective_classes(data);
  const sd::FrequencyMode fmode = sd::frequency_mode_from_string(mode);
  const sd::ClassStats stats = sd::compute_class_stats(input.records, num_classes, fmode);
  const sd::DistributionReport rep = sd::make_distribution_report(stats.freq());

  std::cout << "records: " << input.records.size() << "\n"
            << "classes: " << num_classes << "\n"
            << "mode: " << sd::to_string(fmode) << "\n"
            << "imbalance factor: " << imbalance_text(rep.imbalance) << "\n"
            << "coverage min/max: " << rep.min_coverage << "/" << rep.max_coverage << "\n"
            << "classes missing: " << rep.classes_missing.size() << "\n";

  if (!out_path.empty()) {
    nlohmann::json j{{"format", "segdistill-stats"},
                     {"version", 1},
                     {"num_records", input.records.size()},
                     {"num_classes", num_classes},
                     {"mode", sd::to_string(fmode)},
                     {"image_freq", stats.image_freq},
                     {"pixel_freq", stats.pixel_freq},
                     {"weights", stats.weights},
                     {"report", sd::distribution_report_json(rep)}};
    sd::atomic_write_file(out_path, j.dump(2) + "\n");
    std::cout << "report written to " << out_path << "\n";
  }
  if (!write_cache.empty()) {
    if (data.dataset_dir.empty()) throw sd::ConfigError("--write-cache needs --dataset");
    sd::write_histogram_cache(write_cache, input.records, num_classes);
    std::cout << "cache written to " << write_cache << "\n";
  }
  return 0;
}

int run_select(const DatasetArgs& data, const std::string& strategy, std::int64_t budget, double ratio,
               double temperature, const std::string& mode, const std::string& features_path,
               std::optional<std::uint64_t> seed, const std::string& out_path) {
  const sd::DistillInput input = load_dataset(data, false);
  const int num_classes = data.num_classes > 0 ? data.num_classes : effective_classes(data);
  const sd::FrequencyMode fmode = sd::frequency_mode_from_string(mode);

  std::int64_t b = budget;
  if (b == 0 && ratio > 0)
    b = static_cast<std::int64_t>(ratio * static_cast<double>(input.records.size()));
  if (budget != 0 && ratio > 0) throw sd::ConfigError("give either --budget or --ratio, not both");
  if (b <= 0) throw sd::ConfigError("selection budget must be positive (use --budget or --ratio)");

  sd::SelectionState state;
  if (strategy == "greedy") {
    const sd::ClassStats stats = sd::compute_class_stats(input.records, num_classes, fmode);
    state = sd::select_greedy(input.records, stats, b, temperature);
  } else if (strategy == "random") {
    state = sd::select_random(input.records, num_classes, b, seed.value_or(0));
  } else if (strategy == "uniform") {
    const sd::ClassStats stats = sd::compute_class_stats(input.records, num_classes, fmode);
    state = sd::select_uniform(input.records, stats, b);
  } else if (strategy == "kcenter" || strategy == "herding") {
    if (features_path.empty()) throw sd::ConfigError("--strategy " + strategy + " requires --features");
    const sd::FeatureTable table = sd::read_feature_table(features_path);
    state = strategy == "kcenter" ? sd::select_kcenter(table, b, seed) : sd::select_herding(table, b);
    sd::rebuild_coverage(state, input.records, num_classes);
  } else {
    throw sd::ConfigError("unknown strategy '" + strategy + "'");
  }

  sd::write_selection_manifest(out_path, state, strategy, seed);
  std::cout << "selected " << state.selected.size() << " of " << input.records.size() << " records\n";
  const bool any_covered =
      std::any_of(state.coverage.begin(), state.coverage.end(), [](std::int64_t n) { return n > 0; });
  if (any_covered)
    std::cout << "imbalance factor: " << imbalance_text(sd::imbalance_factor(state.coverage)) << "\n";
  std::cout << "manifest written to " << out_path << "\n";
  return 0;
}

sd::PipelineConfig load_config_with_overrides(const std::string& config_path, const DatasetArgs& data,
                                              const std::string& out_dir, std::optional<std::uint64_t> seed,
                                              std::optional<int> jobs) {
  sd::PipelineConfig cfg = sd::load_pipeline_config(config_path);
  if (!data.dataset_dir.empty()) {
    cfg.masks_dir = data.dataset_dir;
    cfg.cache_path.reset();
  }
  if (!data.cache_path.empty()) {
    cfg.cache_path = data.cache_path;
    cfg.masks_dir.reset();
  }
  if (data.num_classes > 0) cfg.num_classes = data.num_classes;
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  if (seed.has_value()) cfg.seed = *seed;
  if (jobs.has_value()) cfg.jobs = *jobs;
  return cfg;
}

int run_distill(const std::string& config_path, const DatasetArgs& data, const std::string& out_dir,
                std::optional<std::uint64_t> seed, std::optional<int> jobs, bool dry_run) {
  const sd::PipelineConfig cfg = load_config_with_overrides(config_path, data, out_dir, seed, jobs);
  const sd::NoiseSchedule schedule =
      sd::build_schedule(cfg.schedule.kind, cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end);
  (void)sd::bind_contracts(cfg, schedule);
  if (dry_run) {
    std::cout << "config ok: " << config_path << " (dry run, nothing written)\n";
    return 0;
  }
  const sd::DistillInput input = sd::load_distill_input(cfg);
  const sd::DistillResult result = sd::distill(input, cfg);
  sd::write_distill_outputs(cfg.output_dir, result, cfg);
  for (const sd::DistilledSample& s : result.samples) std::cout << "sample " << s.id << ": ok\n";
  for (const sd::SampleFailure& f : result.failures)
    std::cout << "sample " << f.id << ": FAILED (" << f.diagnostic << ")\n";
  std::cout << "distilled " << result.samples.size() << " samples (" << result.failures.size()
            << " failures) into " << cfg.output_dir << "\n";
  return 0;
}

int run_bank(const std::string& config_path, const DatasetArgs& data, const std::string& out_path,
             std::optional<int> jobs) {
  sd::PipelineConfig cfg = load_config_with_overrides(config_path, data, "", std::nullopt, jobs);
  if (cfg.extractor.type == "none")
    throw sd::ConfigError("bank building needs contracts.extractor in the config");
  const sd::NoiseSchedule schedule =
      sd::build_schedule(cfg.schedule.kind, cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end);
  const sd::BoundContracts contracts = sd::bind_contracts(cfg, schedule);
  if (!cfg.masks_dir.has_value()) throw sd::ConfigError("bank building needs dense masks (--dataset)");

  sd::DistillInput input;
  for (const auto& [id, path] : sd::list_label_files(*cfg.masks_dir)) {
    auto map = std::make_shared<sd::LabelMap>(sd::load_label_map(path));
    input.records.push_back(sd::ingest_label_map(*map, id, cfg.num_classes, cfg.ignore_index));
    input.masks.emplace(id, std::move(map));
  }
  if (input.records.empty()) throw sd::DataError("dataset is empty");

  const sd::Shape3 in_shape = contracts.extractor->input_shape();
  std::vector<sd::TrainingExample> examples;
  examples.reserve(input.records.size());
  for (const sd::MaskRecord& rec : input.records) {
    sd::TrainingExample ex;
    ex.id = rec.id;
    const sd::LabelMap& mask = *input.masks.at(rec.id);
    ex.mask = sd::resize_mask_nearest(mask, in_shape.height, in_shape.width);
    ex.image = sd::encode_mask_image(mask, cfg.num_classes, in_shape, cfg.ignore_index);
    examples.push_back(std::move(ex));
  }
  const sd::ClassFeatureBank bank =
      sd::build_feature_bank(examples, *contracts.extractor, cfg.num_classes, cfg.jobs);
  sd::write_feature_bank(out_path, bank);
  std::cout << "bank with " << bank.entries.size() << " entries written to " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-balanced mask selection and guided deterministic-diffusion dataset distillation"};
  app.require_subcommand(1);

  DatasetArgs stats_data;
  std::string stats_mode = "image", stats_out, stats_cache_out;
  CLI::App* stats = app.add_subcommand("stats", "Dataset class statistics and imbalance report");
  add_dataset_flags(stats, stats_data);
  stats->add_option("--mode", stats_mode, "Frequency mode: image | pixel")->default_val("image");
  stats->add_option("--out", stats_out, "Write the machine-readable report here");
  stats->add_option("--write-cache", stats_cache_out, "Also write a histogram cache of the ingested dataset");

  DatasetArgs select_data;
  std::string select_strategy = "greedy", select_mode = "image", select_features, select_out = "selection.json";
  std::int64_t select_budget = 0;
  double select_ratio = 0.0, select_temperature = 0.5;
  std::optional<std::uint64_t> select_seed;
  CLI::App* select = app.add_subcommand("select", "Budgeted coreset selection over mask records");
  add_dataset_flags(select, select_data);
  select->add_option("--strategy", select_strategy, "greedy | random | uniform | kcenter | herding")
      ->default_val("greedy");
  select->add_option("--budget", select_budget, "Absolute budget B");
  select->add_option("--ratio", select_ratio, "Budget as a fraction of the dataset (floor)");
  select->add_option("--temperature", select_temperature, "Greedy temperature T")->default_val(0.5);
  select->add_option("--mode", select_mode, "Frequency mode: image | pixel")->default_val("image");
  select->add_option("--features", select_features, "Feature table (required for kcenter/herding)");
  select->add_option("--seed", select_seed, "Seed for stochastic strategies");
  select->add_option("--out", select_out, "Selection manifest path")->default_val("selection.json");

  DatasetArgs distill_data;
  std::string distill_config, distill_out;
  std::optional<std::uint64_t> distill_seed;
  std::optional<int> distill_jobs;
  bool distill_dry = false;
  CLI::App* distill = app.add_subcommand("distill", "Run the full selection + guided synthesis pipeline");
  distill->add_option("--config", distill_config, "Pipeline config file (JSON)")->required();
  add_dataset_flags(distill, distill_data);
  distill->add_option("--out", distill_out, "Output directory (overrides the config)");
  distill->add_option("--seed", distill_seed, "Master seed (overrides the config)");
  distill->add_option("--jobs", distill_jobs, "Worker count, 0 = hardware default (overrides the config)");
  distill->add_flag("--dry-run", distill_dry, "Validate the config and exit without writing");

  DatasetArgs bank_data;
  std::string bank_config, bank_out = "bank.txt";
  std::optional<int> bank_jobs;
  CLI::App* bank = app.add_subcommand("bank", "Build the per-class per-stage feature bank");
  bank->add_option("--config", bank_config, "Pipeline config file with the extractor contract")->required();
  add_dataset_flags(bank, bank_data);
  bank->add_option("--out", bank_out, "Bank file path")->default_val("bank.txt");
  bank->add_option("--jobs", bank_jobs, "Worker count, 0 = hardware default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (stats->parsed()) return run_stats(stats_data, stats_mode, stats_out, stats_cache_out);
    if (select->parsed())
      return run_select(select_data, select_strategy, select_budget, select_ratio, select_temperature,
                        select_mode, select_features, select_seed, select_out);
    if (distill->parsed())
      return run_distill(distill_config, distill_data, distill_out, distill_seed, distill_jobs, distill_dry);
    if (bank->parsed()) return run_bank(bank_config, bank_data, bank_out, bank_jobs);
  } catch (const sd::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
