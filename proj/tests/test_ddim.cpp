#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "segdistill/ddim.hpp"
#include "segdistill/predictor.hpp"
#include "segdistill/schedule.hpp"
#include "test_util.hpp"

namespace sd = segdistill;
using testutil::TempDir;

namespace {

sd::Vec random_vec(std::mt19937_64& gen, int d) {
  std::normal_distribution<double> normal;
  sd::Vec v(d);
  for (int i = 0; i < d; ++i) v[i] = normal(gen);
  return v;
}

double max_rel_err(const sd::Vec& got, const sd::Vec& want) {
  double worst = 0.0;
  for (int i = 0; i < got.size(); ++i)
    worst = std::max(worst, std::abs(got[i] - want[i]) / std::max(1.0, std::abs(want[i])));
  return worst;
}

}  // namespace

TEST_CASE("predict_clean recovers the clean latent from forward noising") {
  std::mt19937_64 gen(101);
  const sd::NoiseSchedule schedule = sd::build_schedule(sd::ScheduleKind::linear_beta, 50);
  std::uniform_int_distribution<int> d_dist(1, 16);
  std::uniform_int_distribution<int> t_dist(1, 50);
  for (int trial = 0; trial < 1000; ++trial) {
    const int d = d_dist(gen);
    const int t = t_dist(gen);
    const sd::Vec z0 = random_vec(gen, d);
    const sd::Vec eps = random_vec(gen, d);
    const double ab = schedule.at(t);
    const sd::Vec zt = std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
    const sd::Vec back = sd::predict_clean({zt, t}, eps, schedule);
    INFO("trial " << trial << " d=" << d << " t=" << t);
    REQUIRE(max_rel_err(back, z0) < 1e-12);
  }
}

TEST_CASE("predict_clean at one quarter signal") {
  const sd::NoiseSchedule schedule = sd::schedule_from_alpha_bar({0.25});
  sd::Vec z(2), eps(2);
  z << 1.0, 0.0;
  eps << 1.0, 1.0;
  const sd::Vec clean = sd::predict_clean({z, 1}, eps, schedule);
  REQUIRE(clean[0] == Catch::Approx(0.2679).margin(1e-4));
  REQUIRE(clean[1] == Catch::Approx(-1.7321).margin(1e-4));
  // The exact arithmetic: (z - sqrt(0.75) * eps) / sqrt(0.25).
  REQUIRE(clean[0] == (1.0 - std::sqrt(0.75)) / 0.5);
  REQUIRE(clean[1] == -std::sqrt(0.75) / 0.5);
}

TEST_CASE("predict_clean with zero noise is a pure rescale") {
  const sd::NoiseSchedule schedule = sd::build_schedule(sd::ScheduleKind::linear_beta, 10);
  std::mt19937_64 gen(7);
  const sd::Vec z = random_vec(gen, 5);
  for (int t = 1; t <= 10; ++t) {
    const sd::Vec clean = sd::predict_clean({z, t}, sd::Vec::Zero(5), schedule);
    REQUIRE(clean == z / std::sqrt(schedule.at(t)));
  }
}

TEST_CASE("predict_clean validates its inputs") {
  const sd::NoiseSchedule schedule = sd::build_schedule(sd::ScheduleKind::linear_beta, 5);
  const sd::Vec z = sd::Vec::Ones(3);
  REQUIRE_THROWS_AS(sd::predict_clean({z, 0}, sd::Vec::Zero(3), schedule), sd::DataError);
  REQUIRE_THROWS_AS(sd::predict_clean({z, 1}, sd::Vec::Zero(2), schedule), sd::DataError);
  REQUIRE_THROWS_AS(sd::predict_clean({z, 6}, sd::Vec::Zero(3), schedule), sd::DataError);
}

TEST_CASE("a denoising step re-noises the clean estimate to the target level") {
  const sd::NoiseSchedule schedule = sd::build_schedule(sd::ScheduleKind::linear_beta, 20);
  std::mt19937_64 gen(13);
  const sd::Vec z = random_vec(gen, 4);
  const sd::Vec eps = random_vec(gen, 4);
  const sd::LatentState next = sd::ddim_step({z, 5}, eps, schedule, 4);
  REQUIRE(next.t == 4);
  const sd::Vec clean = sd::predict_clean({z, 5}, eps, schedule);
  const double ab = schedule.at(4);
  REQUIRE(next.z == std::sqrt(ab) * clean + std::sqrt(1.0 - ab) * eps);

  SECTION("only the adjacent grid point is a valid target") {
    REQUIRE_THROWS_AS(sd::ddim_step({z, 5}, eps, schedule, 3), sd::DataError);
    REQUIRE_THROWS_AS(sd::ddim_step({z, 5}, eps, schedule, 5), sd::DataError);
    REQUIRE_THROWS_AS(sd::ddim_step({z, 0}, eps, schedule, -1), sd::DataError);
  }
}

TEST_CASE("inversion mirrors the denoising step at every grid pair") {
  const sd::NoiseSchedule schedule = sd::build_schedule(sd::ScheduleKind::linear_beta, 50);
  std::mt19937_64 gen(29);
  const sd::Vec zero = sd::Vec::Zero(6);
  for (int t = 1; t <= 50; ++t) {
    const sd::Vec z = random_vec(gen, 6);
    // With zero predicted noise both maps are rescalings, so a step down
    // followed by a step up lands on the start to machine precision.
    const sd::LatentState down = sd::ddim_step({z, t}, zero, schedule, t - 1);
    const sd::LatentState up = sd::ddim_invert(down, zero, schedule, t);
    INFO("t = " << t);
    REQUIRE(up.t == t);
    REQUIRE(max_rel_err(up.z, z) < 1e-14);

    if (t <= 49) {
      const sd::LatentState over = sd::ddim_invert({z, t}, zero, schedule, t + 1);
      const sd::LatentState back = sd::ddim_step(over, zero, schedule, t);
      REQUIRE(max_rel_err(back.z, z) < 1e-14);
    }
  }
}

TEST_CASE("inversion from the clean end uses the latent as its own estimate") {
  const sd::NoiseSchedule schedule = sd::schedule_from_alpha_bar({0.81, 0.49});
  std::mt19937_64 gen(31);
  const sd::Vec z = random_vec(gen, 3);
  const sd::Vec eps = random_vec(gen, 3);
  const sd::LatentState up = sd::ddim_invert({z, 0}, eps, schedule, 1);
  REQUIRE(up.t == 1);
  REQUIRE(up.z == std::sqrt(0.81) * z + std::sqrt(1.0 - 0.81) * eps);

  SECTION("inversion beyond the last grid point is rejected") {
    REQUIRE_THROWS_AS(sd::ddim_invert({z, 2}, eps, schedule, 3), sd::DataError);
    REQUIRE_THROWS_AS(sd::ddim_invert({z, 0}, eps, schedule, 2), sd::DataError);
    REQUIRE_THROWS_AS(sd::ddim_invert({z, 0}, sd::Vec::Zero(2), schedule, 1), sd::DataError);
  }
}

TEST_CASE("classifier-free combination interpolates past the conditional") {
  sd::Vec c(2), u(2);
  c << 1.0, 0.0;
  u << 0.0, 0.0;
  const sd::Vec out = sd::cfg_combine(c, u, 2.0);
  REQUIRE(out[0] == 2.0);
  REQUIRE(out[1] == 0.0);

  SECTION("the endpoints return the inputs bit for bit") {
    std::mt19937_64 gen(37);
    const sd::Vec a = random_vec(gen, 8);
    const sd::Vec b = random_vec(gen, 8);
    REQUIRE(sd::cfg_combine(a, b, 0.0) == b);
    REQUIRE(sd::cfg_combine(a, b, 1.0) == a);
  }
  SECTION("general scales follow the affine formula") {
    std::mt19937_64 gen(41);
    const sd::Vec a = random_vec(gen, 8);
    const sd::Vec b = random_vec(gen, 8);
    REQUIRE(sd::cfg_combine(a, b, 0.3) == b + 0.3 * (a - b));
  }
  SECTION("dimension mismatch is rejected") {
    REQUIRE_THROWS_AS(sd::cfg_combine(sd::Vec::Zero(2), sd::Vec::Zero(3), 0.5), sd::DataError);
  }
}

TEST_CASE("the CFG predictor view combines conditional and unconditional calls") {
  int calls = 0;
  const sd::CallablePredictor base([&calls](const sd::LatentState& state, const sd::Condition& cond) {
    ++calls;
    return cond.unconditional ? sd::Vec::Zero(state.z.size()) : sd::Vec::Ones(state.z.size()).eval();
  });
  const sd::Condition cond{{0, 1}, nullptr, false};
  const sd::LatentState state{sd::Vec::Zero(3), 1};

  SECTION("scale one short-circuits to a single conditional call") {
    const sd::CfgPredictor cfg(base, 1.0);
    REQUIRE(cfg.predict(state, cond) == sd::Vec::Ones(3));
    REQUIRE(calls == 1);
  }
  SECTION("other scales evaluate both branches") {
    const sd::CfgPredictor cfg(base, 2.0);
    REQUIRE(cfg.predict(state, cond) == 2.0 * sd::Vec::Ones(3));
    REQUIRE(calls == 2);
  }
  SECTION("the gradient contract is forwarded") {
    REQUIRE_FALSE(sd::CfgPredictor(base, 2.0).has_gradient());
    const sd::ZeroPredictor zero;
    const sd::CfgPredictor cfg(zero, 2.0);
    REQUIRE(cfg.has_gradient());
    REQUIRE(cfg.gradient(state, cond, sd::Vec::Ones(3)) == sd::Vec::Zero(3));
  }
  SECTION("a bound noise function reproduces the wrapped prediction") {
    const sd::NoiseFn fn = sd::make_noise_fn(base, cond, 2.0);
    REQUIRE(fn(state) == sd::CfgPredictor(base, 2.0).predict(state, cond));
  }
}

TEST_CASE("zero-noise sampling telescopes to an exact rescale on a dyadic schedule") {
  // A constant rate of 0.75 makes every sqrt(alpha_bar) a power of two, so
  // the whole trajectory stays exact in floating point.
  const int steps = 6;
  const sd::NoiseSchedule schedule = sd::build_schedule(sd::ScheduleKind::linear_beta, steps, 0.75, 0.75);
  std::mt19937_64 gen(43);
  const sd::Vec z_top = random_vec(gen, 4);
  const sd::ZeroPredictor zero;
  const sd::NoiseFn fn = sd::make_noise_fn(zero, sd::Condition{}, 1.0);

  std::vector<sd::TrajectoryPoint> log;
  const sd::LatentState out = sd::run_sampling({z_top, steps}, fn, schedule, &log);
  REQUIRE(out.t == 0);
  REQUIRE(out.z == z_top * std::ldexp(1.0, steps));
  REQUIRE(log.size() == static_cast<std::size_t>(steps) + 1);
  REQUIRE(log.front().t == steps);
  REQUIRE(log.back().t == 0);

  SECTION("inversion telescopes back down exactly") {
    const sd::LatentState top = sd::run_inversion(out, fn, schedule, steps);
    REQUIRE(top.t == steps);
    REQUIRE(top.z == z_top);
  }
  SECTION("partial inversion stops at the requested level") {
    const sd::LatentState mid = sd::run_inversion(out, fn, schedule, 3);
    REQUIRE(mid.t == 3);
    REQUIRE(mid.z == z_top * std::ldexp(1.0, steps - 3));
  }
  SECTION("inversion target bounds are enforced") {
    REQUIRE_THROWS_AS(sd::run_inversion(out, fn, schedule, steps + 1), sd::DataError);
    REQUIRE_THROWS_AS(sd::run_inversion({z_top, 4}, fn, schedule, 3), sd::DataError);
  }
}

TEST_CASE("the linear-Gaussian predictor matches its posterior algebra") {
  const sd::NoiseSchedule schedule = sd::build_schedule(sd::ScheduleKind::cosine, 40);
  sd::Vec mu(3);
  mu << 1.0, -2.0, 0.5;
  const double var = 1.7;
  const sd::LinearGaussianPredictor pred(mu, var, schedule);
  std::mt19937_64 gen(47);

  SECTION("at the prior mean trajectory the noise estimate vanishes") {
    for (int t = 1; t <= 40; t += 7) {
      const sd::Vec z = std::sqrt(schedule.at(t)) * mu;
      REQUIRE(pred.predict({z, t}, sd::Condition{}) == sd::Vec::Zero(3));
      REQUIRE(pred.posterior_mean({z, t}) == mu);
    }
  }
  SECTION("noise estimate and posterior mean describe the same decomposition") {
    for (int trial = 0; trial < 50; ++trial) {
      const int t = std::uniform_int_distribution<int>(1, 40)(gen);
      const sd::Vec z = random_vec(gen, 3);
      const double ab = schedule.at(t);
      const sd::Vec eps = pred.predict({z, t}, sd::Condition{});
      const sd::Vec want = (z - std::sqrt(ab) * pred.posterior_mean({z, t})) / std::sqrt(1.0 - ab);
      REQUIRE(max_rel_err(eps, want) < 1e-12);
    }
  }
  SECTION("the gradient contract matches the map's linearity") {
    const int t = 11;
    const sd::Vec z = random_vec(gen, 3);
    sd::Vec dz = sd::Vec::Zero(3);
    dz[1] = 1.0;
    // The map is affine with a scalar slope, so a finite step along one
    // axis exposes the slope and the VJP must scale the cotangent by it.
    const sd::Vec jvp = pred.predict({z + dz, t}, sd::Condition{}) - pred.predict({z, t}, sd::Condition{});
    const double slope = jvp[1];
    const sd::Vec cot = random_vec(gen, 3);
    const sd::Vec vjp = pred.gradient({z, t}, sd::Condition{}, cot);
    REQUIRE(max_rel_err(vjp, slope * cot) < 1e-10);
    REQUIRE(pred.has_gradient());
  }
  SECTION("dimension and variance validation") {
    REQUIRE_THROWS_AS(pred.predict({sd::Vec::Zero(2), 1}, sd::Condition{}), sd::DataError);
    REQUIRE_THROWS_AS(sd::LinearGaussianPredictor(mu, 0.0, schedule), sd::ConfigError);
  }
}

TEST_CASE("the linear-Gaussian posterior mean is the regression of clean on noisy") {
  const sd::NoiseSchedule schedule = sd::schedule_from_alpha_bar({0.6});
  sd::Vec mu(1);
  mu << 1.7;
  const double var = 2.3;
  const sd::LinearGaussianPredictor pred(mu, var, schedule);

  std::mt19937_64 gen(53);
  std::normal_distribution<double> normal;
  const int n = 100000;
  double resid_sum = 0.0, resid_sq = 0.0, cross_sum = 0.0, cross_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z0 = mu[0] + std::sqrt(var) * normal(gen);
    const double eps = normal(gen);
    const double zt = std::sqrt(0.6) * z0 + std::sqrt(0.4) * eps;
    sd::Vec z(1);
    z << zt;
    const double resid = z0 - pred.posterior_mean({z, 1})[0];
    const double cross = resid * zt;
    resid_sum += resid;
    resid_sq += resid * resid;
    cross_sum += cross;
    cross_sq += cross * cross;
  }
  // The posterior mean is the L2-optimal estimate, so residuals have zero
  // mean and are orthogonal to the observation. Four-sigma windows.
  const double mean_r = resid_sum / n;
  const double sd_r = std::sqrt(resid_sq / n - mean_r * mean_r);
  REQUIRE(std::abs(mean_r) < 4.0 * sd_r / std::sqrt(static_cast<double>(n)));
  const double mean_c = cross_sum / n;
  const double sd_c = std::sqrt(cross_sq / n - mean_c * mean_c);
  REQUIRE(std::abs(mean_c) < 4.0 * sd_c / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("round trips through inversion and sampling converge with refinement") {
  sd::Vec mu = sd::Vec::Constant(8, 2.0);
  std::mt19937_64 gen(59);
  const sd::Vec z0 = mu + random_vec(gen, 8);

  auto round_trip_err = [&](int steps) {
    const sd::NoiseSchedule schedule = sd::build_schedule(sd::ScheduleKind::cosine, steps);
    const sd::LinearGaussianPredictor pred(mu, 1.0, schedule);
    const sd::NoiseFn fn = sd::make_noise_fn(pred, sd::Condition{}, 1.0);
    const sd::LatentState top = sd::run_inversion({z0, 0}, fn, schedule, steps);
    const sd::LatentState back = sd::run_sampling(top, fn, schedule);
    return (back.z - z0).norm() / z0.norm();
  };

  const double e25 = round_trip_err(25);
  const double e50 = round_trip_err(50);
  const double e200 = round_trip_err(200);
  INFO("errors " << e25 << " " << e50 << " " << e200);
  REQUIRE(e50 < e25);
  REQUIRE(e200 < e50);
  REQUIRE(e200 < 1e-2);
}

TEST_CASE("trajectory logs print one grid point per line") {
  const sd::NoiseSchedule schedule = sd::build_schedule(sd::ScheduleKind::linear_beta, 3);
  const sd::ZeroPredictor zero;
  const sd::NoiseFn fn = sd::make_noise_fn(zero, sd::Condition{}, 1.0);
  std::vector<sd::TrajectoryPoint> log;
  sd::run_sampling({sd::Vec::Ones(2), 3}, fn, schedule, &log);

  const std::string text = sd::trajectory_log_to_string(log);
  REQUIRE(text.substr(0, 26) == "# t alpha_bar latent_norm\n");
  REQUIRE(std::count(text.begin(), text.end(), '\n') == 5);
  REQUIRE(text.find("\n3 ") != std::string::npos);
  REQUIRE(text.find("\n0 1 ") != std::string::npos);

  TempDir tmp;
  sd::write_trajectory_log(tmp.file("traj.txt"), log);
  REQUIRE(sd::read_file(tmp.file("traj.txt")) == text);
}
