#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>

#include "segdistill/contracts.hpp"
#include "segdistill/ddim.hpp"
#include "segdistill/feature_bank.hpp"
#include "segdistill/mask_ops.hpp"
#include "segdistill/predictor.hpp"

namespace segdistill {

/// Inclusive timestep range; the default covers every step.
struct StepRange {
  int from = 0;
  int to = std::numeric_limits<int>::max();

  bool contains(int t) const { return t >= from && t <= to; }
  bool is_all() const { return from <= 0 && to == std::numeric_limits<int>::max(); }
};

struct GuidanceConfig {
  double lambda_seg = 0.05;
  double lambda_feat = 0.2;
  double grad_norm_floor = 1e-12;
  StepRange active_steps{};
  bool differentiate_through_predictor = false;
  bool allow_fd_fallback = true;
};

inline void validate(const GuidanceConfig& cfg) {
  if (cfg.lambda_seg < 0 || cfg.lambda_feat < 0) throw ConfigError("guidance lambdas must be non-negative");
  if (!(cfg.grad_norm_floor > 0)) throw ConfigError("gradient norm floor must be positive");
}

/// A scalar loss on an image plus, when the contracts can provide it, the
/// loss cotangent w.r.t. the image.
struct LossResult {
  double loss = 0.0;
  std::optional<Vec> image_cotangent;
};

/// Mean per-pixel cross-entropy between the segmenter's logits on `image`
/// and the target mask, over non-ignored pixels. The cotangent chains
/// (softmax - onehot) / #valid through the segmenter's gradient contract
/// when available.
inline LossResult segmentation_consistency_loss(const Image& image, const LabelMap& mask,
                                                const Segmenter& segmenter, std::int32_t ignore_index) {
  const Logits logits = segmenter.segment(image);
  const int K = logits.shape.channels;
  if (mask.height != logits.shape.height || mask.width != logits.shape.width)
    throw DataError("mask resolution does not match segmenter output");
  if (!all_finite(logits.data)) throw DataError("segmenter produced non-finite logits");

  const std::int64_t plane = static_cast<std::int64_t>(logits.shape.height) * logits.shape.width;
  Vec logits_cot = Vec::Zero(logits.data.size());
  double loss_sum = 0.0;
  std::int64_t valid = 0;
  for (int r = 0; r < logits.shape.height; ++r)
    for (int c = 0; c < logits.shape.width; ++c)
      if (mask.at(r, c) != ignore_index) ++valid;
  if (valid == 0) throw DataError("segmentation loss undefined: every pixel is ignored");

  for (int r = 0; r < logits.shape.height; ++r) {
    for (int c = 0; c < logits.shape.width; ++c) {
      const std::int32_t target = mask.at(r, c);
      if (target == ignore_index) continue;
      if (target < 0 || target >= K)
        throw DataError("mask class " + std::to_string(target) + " outside segmenter range [0, " +
                        std::to_string(K) + ")");
      const std::int64_t p = static_cast<std::int64_t>(r) * logits.shape.width + c;
      double mx = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < K; ++k) mx = std::max(mx, logits.data[k * plane + p]);
      double denom = 0.0;
      for (int k = 0; k < K; ++k) denom += std::exp(logits.data[k * plane + p] - mx);
      const double log_denom = std::log(denom) + mx;
      loss_sum += log_denom - logits.data[target * plane + p];
      for (int k = 0; k < K; ++k) {
        const double soft = std::exp(logits.data[k * plane + p] - log_denom);
        logits_cot[k * plane + p] = (soft - (k == target ? 1.0 : 0.0)) / static_cast<double>(valid);
      }
    }
  }
  LossResult out;
  out.loss = loss_sum / static_cast<double>(valid);
  if (segmenter.has_gradient()) out.image_cotangent = segmenter.gradient(image, logits_cot);
  return out;
}

namespace detail {

/// 1 - cosine similarity plus its gradient in the first argument. A
/// zero-norm vector on either side pins the term to 1 with zero gradient.
inline std::pair<double, Vec> cosine_distance_term(const Vec& generated, const Vec& reference) {
  const double gn = generated.norm();
  const double rn = reference.norm();
  if (gn == 0.0 || rn == 0.0) return {1.0, Vec::Zero(generated.size())};
  const double dot = generated.dot(reference);
  const double cos_sim = dot / (gn * rn);
  Vec grad = -(reference / (gn * rn) - (dot / (gn * gn * gn * rn)) * generated);
  return {1.0 - cos_sim, std::move(grad)};
}

}  // namespace detail

/// Class-wise multi-stage feature alignment: for every class present in the
/// mask and every extractor stage, 1 - cos similarity between the image's
/// region mean and the bank mean. Pairs missing from the bank or with an
/// empty region after downsampling are skipped; no matched pair at all
/// yields loss 0.
inline LossResult feature_matching_loss(const Image& image, const LabelMap& mask,
                                        const FeatureExtractor& extractor, const ClassFeatureBank& bank,
                                        std::int32_t ignore_index) {
  const Shape3 in = extractor.input_shape();
  if (mask.height != in.height || mask.width != in.width)
    throw DataError("mask resolution does not match extractor input");
  detail::check_image_shape(image, in, "feature matching");

  std::vector<int> class_list;
  for (std::int32_t v : mask.data)
    if (v != ignore_index && std::find(class_list.begin(), class_list.end(), v) == class_list.end())
      class_list.push_back(v);
  std::sort(class_list.begin(), class_list.end());

  const std::vector<FeatureMap> maps = extractor.extract(image);
  const bool with_gradient = extractor.has_gradient();
  LossResult out;
  if (with_gradient) out.image_cotangent = Vec::Zero(image.data.size());

  for (std::size_t l = 0; l < maps.size(); ++l) {
    const FeatureMap& fm = maps[l];
    const LabelMap resized = resize_mask_nearest(mask, fm.shape.height, fm.shape.width);
    const std::int64_t plane = static_cast<std::int64_t>(fm.shape.height) * fm.shape.width;
    Vec stage_cot = Vec::Zero(fm.data.size());
    bool stage_touched = false;
    for (int c : class_list) {
      const BankEntry* ref = bank.find(static_cast<int>(l), c);
      if (!ref) continue;
      std::int64_t count = 0;
      for (std::int32_t v : resized.data) count += v == c;
      if (count == 0) continue;
      const auto mean = class_region_mean(fm, resized, c);
      auto [term, mean_grad] = detail::cosine_distance_term(*mean, ref->mean);
      out.loss += term;
      if (!with_gradient || mean_grad.isZero(0.0)) continue;
      stage_touched = true;
      const Vec per_pixel = mean_grad / static_cast<double>(count);
      for (int r = 0; r < fm.shape.height; ++r)
        for (int col = 0; col < fm.shape.width; ++col) {
          if (resized.at(r, col) != c) continue;
          const std::int64_t p = static_cast<std::int64_t>(r) * fm.shape.width + col;
          for (int ch = 0; ch < fm.shape.channels; ++ch) stage_cot[ch * plane + p] += per_pixel[ch];
        }
    }
    if (with_gradient && stage_touched)
      *out.image_cotangent += extractor.gradient(image, static_cast<int>(l), stage_cot);
  }
  return out;
}

using ImageLossFn = std::function<LossResult(const Image&)>;

struct LatentLossResult {
  double loss = 0.0;
  Vec gradient;
};

namespace detail {

inline double composite_loss(const LatentState& state, const Condition& cond, const NoisePredictor& predictor,
                             const Decoder& decoder, const ImageLossFn& loss_fn, const NoiseSchedule& schedule,
                             bool frozen, const Vec& frozen_eps) {
  const Vec eps = frozen ? frozen_eps : predictor.predict(state, cond);
  const Vec clean = predict_clean(state, eps, schedule);
  return loss_fn(decoder.decode(clean)).loss;
}

}  // namespace detail

/// Loss and gradient of an image loss w.r.t. the latent z_t, chained
/// through the clean-sample estimate and the decoder. With
/// differentiate_through_predictor = false the predicted noise is treated
/// as constant (the estimate is then z -> z/sqrt(ab) up to a constant);
/// otherwise the predictor's own gradient contract joins the chain. Missing
/// gradient contracts fall back to central finite differences on the whole
/// composite when allowed.
inline LatentLossResult latent_loss_gradient(const LatentState& state, const Condition& cond,
                                             const NoisePredictor& predictor, const Decoder& decoder,
                                             const ImageLossFn& loss_fn, const NoiseSchedule& schedule,
                                             bool differentiate_through_predictor = false,
                                             bool allow_fd_fallback = true) {
  if (state.t < 1) throw DataError("latent loss gradient needs t >= 1");
  const double ab = schedule.at(state.t);
  const Vec eps = predictor.predict(state, cond);
  const Vec clean = predict_clean(state, eps, schedule);
  const Image decoded = decoder.decode(clean);
  const LossResult image_loss = loss_fn(decoded);

  LatentLossResult out;
  out.loss = image_loss.loss;

  const bool need_predictor_grad = differentiate_through_predictor;
  const bool analytic = image_loss.image_cotangent.has_value() && decoder.has_gradient() &&
                        (!need_predictor_grad || predictor.has_gradient());
  if (analytic) {
    const Vec clean_cot = decoder.gradient(clean, *image_loss.image_cotangent);
    if (need_predictor_grad) {
      const Vec eps_vjp = predictor.gradient(state, cond, clean_cot);
      out.gradient = (clean_cot - std::sqrt(1.0 - ab) * eps_vjp) / std::sqrt(ab);
    } else {
      out.gradient = clean_cot / std::sqrt(ab);
    }
    return out;
  }

  if (!allow_fd_fallback)
    throw std::runtime_error(
        "latent loss gradient: a contract lacks its gradient and the finite-difference fallback is disabled");

  const double h = 1e-4 * (1.0 + state.z.cwiseAbs().maxCoeff());
  out.gradient.resize(state.z.size());
  const bool frozen = !differentiate_through_predictor;
  for (Eigen::Index i = 0; i < state.z.size(); ++i) {
    LatentState plus{state.z, state.t};
    LatentState minus{state.z, state.t};
    plus.z[i] += h;
    minus.z[i] -= h;
    const double lp = detail::composite_loss(plus, cond, predictor, decoder, loss_fn, schedule, frozen, eps);
    const double lm = detail::composite_loss(minus, cond, predictor, decoder, loss_fn, schedule, frozen, eps);
    out.gradient[i] = (lp - lm) / (2.0 * h);
  }
  return out;
}

struct GuidanceScales {
  double rho = 0.0;
  double gamma = 0.0;
};

/// Norm-stabilized guidance scales: each lambda is multiplied by
/// sqrt(1 - ab_t) * ||eps|| / max(||grad||, floor), so the injected term's
/// norm tracks the noise norm rather than the raw gradient magnitude.
inline GuidanceScales guidance_scales(const Vec& eps, const Vec& grad_seg, const Vec& grad_feat,
                                      double alpha_bar, const GuidanceConfig& cfg) {
  validate(cfg);
  const double base = std::sqrt(1.0 - alpha_bar) * eps.norm();
  GuidanceScales s;
  if (cfg.lambda_seg > 0 && grad_seg.size() > 0)
    s.rho = cfg.lambda_seg * base / std::max(grad_seg.norm(), cfg.grad_norm_floor);
  if (cfg.lambda_feat > 0 && grad_feat.size() > 0)
    s.gamma = cfg.lambda_feat * base / std::max(grad_feat.norm(), cfg.grad_norm_floor);
  return s;
}

/// Injects the scaled loss gradients into the predicted noise. Zero scales
/// (or absent gradients) leave the corresponding term out entirely, so an
/// unguided call returns `eps` bit-for-bit.
inline Vec guided_noise(const Vec& eps, const Vec& grad_seg, const Vec& grad_feat,
                        const GuidanceScales& scales) {
  Vec out = eps;
  if (scales.rho != 0.0 && grad_seg.size() > 0) {
    if (grad_seg.size() != eps.size()) throw DataError("segmentation gradient dimension mismatch");
    out += scales.rho * grad_seg;
  }
  if (scales.gamma != 0.0 && grad_feat.size() > 0) {
    if (grad_feat.size() != eps.size()) throw DataError("feature gradient dimension mismatch");
    out += scales.gamma * grad_feat;
  }
  return out;
}

}  // namespace segdistill
