#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "segdistill/predictor.hpp"
#include "segdistill/schedule.hpp"

namespace segdistill {

/// One-shot estimate of the clean latent from z_t and the predicted noise:
/// (z_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t).
inline Vec predict_clean(const LatentState& state, const Vec& eps, const NoiseSchedule& schedule) {
  if (state.t < 1) throw DataError("predict_clean needs t >= 1");
  if (eps.size() != state.z.size()) throw DataError("noise dimension does not match latent");
  const double ab = schedule.at(state.t);
  if (!(ab > 0.0)) throw DataError("singular schedule: alpha_bar = 0 at t = " + std::to_string(state.t));
  return (state.z - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
}

/// One deterministic denoising step t -> t-1: re-noises the predicted clean
/// latent to the target noise level with the same predicted noise.
inline LatentState ddim_step(const LatentState& state, const Vec& eps, const NoiseSchedule& schedule,
                             int target_t) {
  if (state.t < 1) throw DataError("ddim_step needs t >= 1");
  if (target_t != state.t - 1)
    throw DataError("ddim_step target must be the adjacent grid point t - 1 (got " + std::to_string(target_t) +
                    " from t = " + std::to_string(state.t) + ")");
  const double ab_prev = schedule.at(target_t);
  const Vec clean = predict_clean(state, eps, schedule);
  return LatentState{std::sqrt(ab_prev) * clean + std::sqrt(1.0 - ab_prev) * eps, target_t};
}

/// One deterministic inversion step t -> t+1, the mirror image of
/// ddim_step along the same trajectory.
inline LatentState ddim_invert(const LatentState& state, const Vec& eps, const NoiseSchedule& schedule,
                               int target_t) {
  if (state.t > schedule.steps - 1) throw DataError("ddim_invert needs t <= S - 1");
  if (target_t != state.t + 1)
    throw DataError("ddim_invert target must be the adjacent grid point t + 1 (got " +
                    std::to_string(target_t) + " from t = " + std::to_string(state.t) + ")");
  if (eps.size() != state.z.size()) throw DataError("noise dimension does not match latent");
  const double ab_next = schedule.at(target_t);
  // At t = 0 the clean estimate is z itself (alpha_bar = 1).
  const Vec clean = state.t == 0 ? state.z : predict_clean(state, eps, schedule);
  return LatentState{std::sqrt(ab_next) * clean + std::sqrt(1.0 - ab_next) * eps, target_t};
}

/// Classifier-free combination: eps_uncond + s * (eps_cond - eps_uncond).
/// The endpoints s = 0 and s = 1 return the inputs unchanged so they are
/// exact rather than rounded.
inline Vec cfg_combine(const Vec& eps_cond, const Vec& eps_uncond, double scale) {
  if (eps_cond.size() != eps_uncond.size()) throw DataError("CFG noise dimensions differ");
  if (scale == 0.0) return eps_uncond;
  if (scale == 1.0) return eps_cond;
  return eps_uncond + scale * (eps_cond - eps_uncond);
}

/// Classifier-free view of a base predictor: conditional and unconditional
/// predictions combined at a fixed scale. Both maps stay affine, so the
/// gradient contract combines the base contracts the same way. Non-owning;
/// the base predictor must outlive the wrapper.
class CfgPredictor final : public NoisePredictor {
 public:
  CfgPredictor(const NoisePredictor& base, double scale) : base_(&base), scale_(scale) {}

  Vec predict(const LatentState& state, const Condition& cond) const override {
    if (scale_ == 1.0) return base_->predict(state, cond);
    return cfg_combine(base_->predict(state, cond), base_->predict(state, cond.as_unconditional()), scale_);
  }
  bool has_gradient() const override { return base_->has_gradient(); }
  Vec gradient(const LatentState& state, const Condition& cond, const Vec& cotangent) const override {
    if (scale_ == 1.0) return base_->gradient(state, cond, cotangent);
    return cfg_combine(base_->gradient(state, cond, cotangent),
                       base_->gradient(state, cond.as_unconditional(), cotangent), scale_);
  }

 private:
  const NoisePredictor* base_;
  double scale_;
};

/// Per-visited-step trajectory record for debugging dumps.
struct TrajectoryPoint {
  int t = 0;
  double alpha_bar = 0.0;
  double latent_norm = 0.0;
};

using NoiseFn = std::function<Vec(const LatentState&)>;

/// Binds a predictor, condition, and CFG scale into a plain noise source.
inline NoiseFn make_noise_fn(const NoisePredictor& predictor, Condition condition, double cfg_scale) {
  return [&predictor, condition = std::move(condition), cfg_scale](const LatentState& state) {
    return CfgPredictor(predictor, cfg_scale).predict(state, condition);
  };
}

/// Runs the deterministic sampling loop from the state's timestep down to 0.
inline LatentState run_sampling(LatentState state, const NoiseFn& noise, const NoiseSchedule& schedule,
                                std::vector<TrajectoryPoint>* log = nullptr) {
  while (state.t > 0) {
    if (log) log->push_back({state.t, schedule.at(state.t), state.z.norm()});
    const Vec eps = noise(state);
    state = ddim_step(state, eps, schedule, state.t - 1);
  }
  if (log) log->push_back({0, schedule.at(0), state.z.norm()});
  return state;
}

/// Runs the deterministic inversion loop from the state's timestep up to
/// `to_t` (typically S).
inline LatentState run_inversion(LatentState state, const NoiseFn& noise, const NoiseSchedule& schedule,
                                 int to_t, std::vector<TrajectoryPoint>* log = nullptr) {
  if (to_t > schedule.steps || to_t < state.t)
    throw DataError("inversion target " + std::to_string(to_t) + " outside [t, S]");
  while (state.t < to_t) {
    if (log) log->push_back({state.t, schedule.at(state.t), state.z.norm()});
    const Vec eps = noise(state);
    state = ddim_invert(state, eps, schedule, state.t + 1);
  }
  if (log) log->push_back({state.t, schedule.at(state.t), state.z.norm()});
  return state;
}

inline std::string trajectory_log_to_string(const std::vector<TrajectoryPoint>& points) {
  std::ostringstream out;
  out << "# t alpha_bar latent_norm\n";
  for (const TrajectoryPoint& p : points)
    out << p.t << ' ' << format_double(p.alpha_bar) << ' ' << format_double(p.latent_norm) << '\n';
  return out.str();
}

inline void write_trajectory_log(const std::filesystem::path& path, const std::vector<TrajectoryPoint>& points) {
  atomic_write_file(path, trajectory_log_to_string(points));
}

}  // namespace segdistill
