#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

#include "segdistill/class_stats.hpp"
#include "segdistill/guidance.hpp"
#include "segdistill/schedule.hpp"

namespace segdistill {

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::linear_beta;
  int steps = 50;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
};

struct SelectionSpec {
  std::string strategy = "greedy";
  std::optional<std::int64_t> budget;
  std::optional<double> ratio;
  double temperature = 0.5;
  FrequencyMode frequency_mode = FrequencyMode::image;
  std::optional<std::string> features_path;
};

struct PredictorSpec {
  std::string type = "zero";  // zero | linear-gaussian
  double mean = 0.0;
  double variance = 1.0;
};

struct DecoderSpec {
  std::string type = "identity";  // identity | affine
};

struct SegmenterSpec {
  std::string type = "prototype";  // prototype | linear
};

struct ExtractorSpec {
  std::string type = "none";  // none | pooling
  std::vector<int> stage_channels;
};

/// Everything a distillation run needs, parsed from one strict JSON file.
struct PipelineConfig {
  int num_classes = 0;
  std::int32_t ignore_index = 255;
  std::optional<std::string> masks_dir;
  std::optional<std::string> cache_path;
  SelectionSpec selection;
  ScheduleSpec schedule;
  double cfg_scale = 2.0;
  double inversion_scale = 1.0;
  GuidanceConfig guidance;
  Shape3 latent_shape{1, 8, 8};
  std::optional<Shape3> image_shape;
  PredictorSpec predictor;
  DecoderSpec decoder;
  SegmenterSpec segmenter;
  ExtractorSpec extractor;
  std::uint64_t seed = 0;
  int jobs = 1;
  std::string output_dir = "distill-out";

  Shape3 decoded_shape() const { return image_shape.value_or(latent_shape); }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ConfigError("config section '" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown config key '" + key + "' in " + where);
  }
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config key '" + std::string(key) + "': " + e.what());
  }
}

inline Shape3 parse_shape(const nlohmann::json& j, const std::string& where) {
  check_keys(j, {"channels", "height", "width"}, where);
  Shape3 s;
  s.channels = get_or<int>(j, "channels", 1);
  s.height = get_or<int>(j, "height", 0);
  s.width = get_or<int>(j, "width", 0);
  if (s.channels <= 0 || s.height <= 0 || s.width <= 0)
    throw ConfigError(where + ": all dimensions must be positive");
  return s;
}

inline StepRange parse_step_range(const nlohmann::json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() == "all") return StepRange{};
    throw ConfigError("guidance.active_steps: expected \"all\" or {\"from\": t0, \"to\": t1}");
  }
  check_keys(j, {"from", "to"}, "guidance.active_steps");
  StepRange r;
  r.from = get_or<int>(j, "from", 0);
  r.to = get_or<int>(j, "to", std::numeric_limits<int>::max());
  if (r.from > r.to) throw ConfigError("guidance.active_steps: 'from' exceeds 'to'");
  return r;
}

}  // namespace detail

inline PipelineConfig parse_pipeline_config(const nlohmann::json& j) {
  using detail::check_keys;
  using detail::get_or;
  check_keys(j,
             {"num_classes", "ignore_index", "dataset", "selection", "schedule", "sampler", "guidance",
              "latent_shape", "image_shape", "contracts", "seed", "jobs", "output_dir"},
             "the top level");
  PipelineConfig cfg;
  if (!j.contains("num_classes")) throw ConfigError("config is missing required key 'num_classes'");
  cfg.num_classes = get_or<int>(j, "num_classes", 0);
  if (cfg.num_classes <= 0) throw ConfigError("num_classes must be positive");
  cfg.ignore_index = get_or<std::int32_t>(j, "ignore_index", 255);
  if (cfg.ignore_index >= 0 && cfg.ignore_index < cfg.num_classes)
    throw ConfigError("ignore_index collides with the class range");

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    check_keys(d, {"masks_dir", "cache"}, "dataset");
    if (d.contains("masks_dir")) cfg.masks_dir = d.at("masks_dir").get<std::string>();
    if (d.contains("cache")) cfg.cache_path = d.at("cache").get<std::string>();
  }

  if (j.contains("selection")) {
    const auto& s = j.at("selection");
    check_keys(s, {"strategy", "budget", "ratio", "temperature", "frequency_mode", "features"}, "selection");
    cfg.selection.strategy = get_or<std::string>(s, "strategy", "greedy");
    if (s.contains("budget")) cfg.selection.budget = s.at("budget").get<std::int64_t>();
    if (s.contains("ratio")) cfg.selection.ratio = s.at("ratio").get<double>();
    cfg.selection.temperature = get_or<double>(s, "temperature", 0.5);
    cfg.selection.frequency_mode =
        frequency_mode_from_string(get_or<std::string>(s, "frequency_mode", "image"));
    if (s.contains("features")) cfg.selection.features_path = s.at("features").get<std::string>();
  }
  const auto& strat = cfg.selection.strategy;
  if (strat != "greedy" && strat != "random" && strat != "uniform" && strat != "kcenter" && strat != "herding")
    throw ConfigError("unknown selection strategy '" + strat + "'");
  if (cfg.selection.budget.has_value() && cfg.selection.ratio.has_value())
    throw ConfigError("selection: give either 'budget' or 'ratio', not both");
  if (cfg.selection.ratio.has_value() && !(*cfg.selection.ratio > 0.0 && *cfg.selection.ratio <= 1.0))
    throw ConfigError("selection.ratio must lie in (0, 1]");
  if (!(cfg.selection.temperature > 0)) throw ConfigError("selection.temperature must be positive");

  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    check_keys(s, {"kind", "steps", "beta_start", "beta_end"}, "schedule");
    cfg.schedule.kind = schedule_kind_from_string(get_or<std::string>(s, "kind", "linear-beta"));
    cfg.schedule.steps = get_or<int>(s, "steps", 50);
    cfg.schedule.beta_start = get_or<double>(s, "beta_start", 1e-4);
    cfg.schedule.beta_end = get_or<double>(s, "beta_end", 2e-2);
    if (cfg.schedule.steps < 1) throw ConfigError("schedule.steps must be at least 1");
  }

  if (j.contains("sampler")) {
    const auto& s = j.at("sampler");
    check_keys(s, {"cfg_scale", "inversion_scale"}, "sampler");
    cfg.cfg_scale = get_or<double>(s, "cfg_scale", 2.0);
    cfg.inversion_scale = get_or<double>(s, "inversion_scale", 1.0);
    if (!std::isfinite(cfg.cfg_scale) || !std::isfinite(cfg.inversion_scale))
      throw ConfigError("sampler scales must be finite");
  }

  if (j.contains("guidance")) {
    const auto& g = j.at("guidance");
    check_keys(g,
               {"lambda_seg", "lambda_feat", "grad_norm_floor", "active_steps",
                "differentiate_through_predictor", "allow_fd_fallback"},
               "guidance");
    cfg.guidance.lambda_seg = get_or<double>(g, "lambda_seg", 0.05);
    cfg.guidance.lambda_feat = get_or<double>(g, "lambda_feat", 0.2);
    cfg.guidance.grad_norm_floor = get_or<double>(g, "grad_norm_floor", 1e-12);
    if (g.contains("active_steps")) cfg.guidance.active_steps = detail::parse_step_range(g.at("active_steps"));
    cfg.guidance.differentiate_through_predictor = get_or<bool>(g, "differentiate_through_predictor", false);
    cfg.guidance.allow_fd_fallback = get_or<bool>(g, "allow_fd_fallback", true);
    validate(cfg.guidance);
  }

  if (j.contains("latent_shape")) cfg.latent_shape = detail::parse_shape(j.at("latent_shape"), "latent_shape");
  if (j.contains("image_shape")) cfg.image_shape = detail::parse_shape(j.at("image_shape"), "image_shape");

  if (j.contains("contracts")) {
    const auto& c = j.at("contracts");
    check_keys(c, {"predictor", "decoder", "segmenter", "extractor"}, "contracts");
    if (c.contains("predictor")) {
      const auto& p = c.at("predictor");
      check_keys(p, {"type", "mean", "variance"}, "contracts.predictor");
      cfg.predictor.type = get_or<std::string>(p, "type", "zero");
      cfg.predictor.mean = get_or<double>(p, "mean", 0.0);
      cfg.predictor.variance = get_or<double>(p, "variance", 1.0);
      if (cfg.predictor.type != "zero" && cfg.predictor.type != "linear-gaussian")
        throw ConfigError("unknown predictor type '" + cfg.predictor.type + "'");
      if (!(cfg.predictor.variance > 0)) throw ConfigError("predictor variance must be positive");
    }
    if (c.contains("decoder")) {
      const auto& d = c.at("decoder");
      check_keys(d, {"type"}, "contracts.decoder");
      cfg.decoder.type = get_or<std::string>(d, "type", "identity");
      if (cfg.decoder.type != "identity" && cfg.decoder.type != "affine")
        throw ConfigError("unknown decoder type '" + cfg.decoder.type + "'");
    }
    if (c.contains("segmenter")) {
      const auto& s = c.at("segmenter");
      check_keys(s, {"type"}, "contracts.segmenter");
      cfg.segmenter.type = get_or<std::string>(s, "type", "prototype");
      if (cfg.segmenter.type != "prototype" && cfg.segmenter.type != "linear")
        throw ConfigError("unknown segmenter type '" + cfg.segmenter.type + "'");
    }
    if (c.contains("extractor")) {
      const auto& e = c.at("extractor");
      check_keys(e, {"type", "stage_channels"}, "contracts.extractor");
      cfg.extractor.type = get_or<std::string>(e, "type", "none");
      if (cfg.extractor.type != "none" && cfg.extractor.type != "pooling")
        throw ConfigError("unknown extractor type '" + cfg.extractor.type + "'");
      if (e.contains("stage_channels")) cfg.extractor.stage_channels = e.at("stage_channels").get<std::vector<int>>();
      if (cfg.extractor.type == "pooling" && cfg.extractor.stage_channels.empty())
        cfg.extractor.stage_channels = {2, 2};
    }
  }

  cfg.seed = get_or<std::uint64_t>(j, "seed", 0);
  cfg.jobs = get_or<int>(j, "jobs", 1);
  if (cfg.jobs < 0) throw ConfigError("jobs must be non-negative (0 selects the hardware default)");
  cfg.output_dir = get_or<std::string>(j, "output_dir", "distill-out");

  if (cfg.guidance.lambda_feat > 0 && cfg.extractor.type == "none")
    throw ConfigError("guidance.lambda_feat > 0 requires a feature extractor contract");
  if (cfg.decoder.type == "identity" && !(cfg.decoded_shape() == cfg.latent_shape))
    throw ConfigError("identity decoder requires image_shape to equal latent_shape");
  return cfg;
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": invalid JSON: " + e.what());
  }
  return parse_pipeline_config(j);
}

}  // namespace segdistill
