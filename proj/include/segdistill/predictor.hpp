#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "segdistill/common.hpp"
#include "segdistill/schedule.hpp"

namespace segdistill {

/// A latent vector together with its timestep index.
struct LatentState {
  Vec z;
  int t = 0;
};

/// Conditioning input for the noise predictor: the class ids present in the
/// source mask (ascending), an optional dense mask, and an unconditional
/// flag for classifier-free combination.
struct Condition {
  std::vector<std::int32_t> class_list;
  std::shared_ptr<const LabelMap> mask;
  bool unconditional = false;

  Condition as_unconditional() const {
    Condition c = *this;
    c.unconditional = true;
    return c;
  }
};

/// Pluggable noise-prediction contract. `gradient` is the vector-Jacobian
/// product of the predicted noise w.r.t. z applied to a cotangent; it is
/// optional (guard with has_gradient), and consumers without it fall back
/// to finite differences.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual Vec predict(const LatentState& state, const Condition& cond) const = 0;
  virtual bool has_gradient() const { return false; }
  virtual Vec gradient(const LatentState& state, const Condition& cond, const Vec& cotangent) const {
    (void)state;
    (void)cond;
    (void)cotangent;
    throw std::runtime_error("noise predictor has no gradient contract");
  }
};

/// Predicts zero noise at every step; DDIM trajectories become closed-form
/// rescalings, which makes exact round-trip identities testable.
class ZeroPredictor final : public NoisePredictor {
 public:
  Vec predict(const LatentState& state, const Condition&) const override { return Vec::Zero(state.z.size()); }
  bool has_gradient() const override { return true; }
  Vec gradient(const LatentState&, const Condition&, const Vec& cotangent) const override {
    return Vec::Zero(cotangent.size());
  }
};

/// Bayes-optimal noise predictor when the data distribution is
/// Normal(mu, sigma2 * I). The posterior mean of z0 given z_t is
///   E[z0|z_t] = mu + k_t (z_t - sqrt(ab_t) mu),
///   k_t = sqrt(ab_t) sigma2 / (ab_t sigma2 + 1 - ab_t),
/// and the implied noise estimate is
///   eps = (z_t - sqrt(ab_t) E[z0|z_t]) / sqrt(1 - ab_t)
///       = sqrt(1 - ab_t) (z_t - sqrt(ab_t) mu) / (ab_t sigma2 + 1 - ab_t),
/// which at ab_t = 1 is 0 by the limit. Both maps are affine in z_t, so the
/// gradient contract is exact.
class LinearGaussianPredictor final : public NoisePredictor {
 public:
  LinearGaussianPredictor(Vec mean, double variance, NoiseSchedule schedule)
      : mean_(std::move(mean)), variance_(variance), schedule_(std::move(schedule)) {
    if (!(variance_ > 0)) throw ConfigError("data variance must be positive");
  }

  Vec predict(const LatentState& state, const Condition&) const override {
    if (state.z.size() != mean_.size()) throw DataError("latent dimension does not match predictor");
    return eps_slope(state.t) * (state.z - std::sqrt(schedule_.at(state.t)) * mean_);
  }

  bool has_gradient() const override { return true; }

  Vec gradient(const LatentState& state, const Condition&, const Vec& cotangent) const override {
    return eps_slope(state.t) * cotangent;
  }

  /// Posterior mean E[z0 | z_t]; exposed for oracle-style tests.
  Vec posterior_mean(const LatentState& state) const {
    const double ab = schedule_.at(state.t);
    const double k = std::sqrt(ab) * variance_ / (ab * variance_ + 1.0 - ab);
    return mean_ + k * (state.z - std::sqrt(ab) * mean_);
  }

 private:
  double eps_slope(int t) const {
    const double ab = schedule_.at(t);
    if (ab == 1.0) return 0.0;
    return std::sqrt(1.0 - ab) / (ab * variance_ + 1.0 - ab);
  }

  Vec mean_;
  double variance_;
  NoiseSchedule schedule_;
};

inline std::shared_ptr<NoisePredictor> make_linear_gaussian_predictor(Vec mean, double variance,
                                                                      NoiseSchedule schedule) {
  return std::make_shared<LinearGaussianPredictor>(std::move(mean), variance, std::move(schedule));
}

/// Test helper wrapping an arbitrary callable as a predictor.
class CallablePredictor final : public NoisePredictor {
 public:
  using Fn = std::function<Vec(const LatentState&, const Condition&)>;
  explicit CallablePredictor(Fn fn) : fn_(std::move(fn)) {}
  Vec predict(const LatentState& state, const Condition& cond) const override { return fn_(state, cond); }

 private:
  Fn fn_;
};

}  // namespace segdistill
