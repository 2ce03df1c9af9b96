#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <memory>
#include <vector>

#include "segdistill/common.hpp"
#include "segdistill/rng.hpp"

namespace segdistill {

using Logits = Image;      // channels = class count
using FeatureMap = Image;  // channels = stage width

namespace detail {

inline Eigen::MatrixXd seeded_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal() * scale;
  return m;
}

inline void check_image_shape(const Image& img, const Shape3& expected, const char* what) {
  if (img.shape != expected || img.data.size() != expected.size())
    throw DataError(std::string(what) + ": image geometry mismatch");
}

}  // namespace detail

/// Latent-to-image decoding contract. `gradient` is the vector-Jacobian
/// product pulling an image cotangent back to the latent.
class Decoder {
 public:
  virtual ~Decoder() = default;
  virtual int latent_dim() const = 0;
  virtual Shape3 image_shape() const = 0;
  virtual Image decode(const Vec& latent) const = 0;
  virtual bool has_gradient() const { return false; }
  virtual Vec gradient(const Vec& latent, const Vec& image_cotangent) const {
    (void)latent;
    (void)image_cotangent;
    throw std::runtime_error("decoder has no gradient contract");
  }
};

/// Reinterprets the latent vector directly as the image.
class IdentityDecoder final : public Decoder {
 public:
  explicit IdentityDecoder(Shape3 shape) : shape_(shape) {
    if (shape.size() <= 0) throw ConfigError("decoder image shape must be positive");
  }
  int latent_dim() const override { return static_cast<int>(shape_.size()); }
  Shape3 image_shape() const override { return shape_; }
  Image decode(const Vec& latent) const override {
    if (latent.size() != shape_.size()) throw DataError("latent dimension does not match decoder");
    return Image{shape_, latent};
  }
  bool has_gradient() const override { return true; }
  Vec gradient(const Vec&, const Vec& image_cotangent) const override { return image_cotangent; }

 private:
  Shape3 shape_;
};

/// Seeded affine decode x = A z + b; the Jacobian is the constant A.
class AffineDecoder final : public Decoder {
 public:
  AffineDecoder(int latent_dim, Shape3 shape, std::uint64_t seed) : dim_(latent_dim), shape_(shape) {
    if (latent_dim <= 0) throw ConfigError("latent dimension must be positive");
    if (shape.size() <= 0) throw ConfigError("decoder image shape must be positive");
    Rng rng(mix_seed(seed, "affine-decoder"));
    a_ = detail::seeded_matrix(static_cast<Eigen::Index>(shape.size()), latent_dim, rng);
    b_.resize(shape.size());
    for (Eigen::Index i = 0; i < b_.size(); ++i) b_[i] = 0.1 * rng.normal();
  }
  int latent_dim() const override { return dim_; }
  Shape3 image_shape() const override { return shape_; }
  Image decode(const Vec& latent) const override {
    if (latent.size() != dim_) throw DataError("latent dimension does not match decoder");
    return Image{shape_, a_ * latent + b_};
  }
  bool has_gradient() const override { return true; }
  Vec gradient(const Vec&, const Vec& image_cotangent) const override {
    return a_.transpose() * image_cotangent;
  }

 private:
  int dim_;
  Shape3 shape_;
  Eigen::MatrixXd a_;
  Vec b_;
};

/// Per-pixel class-logit contract. `gradient` pulls a logits cotangent
/// back to an image cotangent.
class Segmenter {
 public:
  virtual ~Segmenter() = default;
  virtual int num_classes() const = 0;
  virtual Shape3 input_shape() const = 0;
  virtual Logits segment(const Image& image) const = 0;
  virtual bool has_gradient() const { return false; }
  virtual Vec gradient(const Image& image, const Vec& logits_cotangent) const {
    (void)image;
    (void)logits_cotangent;
    throw std::runtime_error("segmenter has no gradient contract");
  }
};

/// Seeded per-pixel linear head: logits_k(u,v) = sum_c W(k,c) x_c(u,v) + b_k.
class LinearSegmenter final : public Segmenter {
 public:
  LinearSegmenter(int num_classes, Shape3 input_shape, std::uint64_t seed)
      : classes_(num_classes), in_(input_shape) {
    if (num_classes <= 0) throw ConfigError("segmenter class count must be positive");
    if (in_.size() <= 0) throw ConfigError("segmenter input shape must be positive");
    Rng rng(mix_seed(seed, "linear-segmenter"));
    w_ = detail::seeded_matrix(num_classes, in_.channels, rng);
    b_.resize(num_classes);
    for (int k = 0; k < num_classes; ++k) b_[k] = 0.1 * rng.normal();
  }
  int num_classes() const override { return classes_; }
  Shape3 input_shape() const override { return in_; }
  Logits segment(const Image& image) const override {
    detail::check_image_shape(image, in_, "segment");
    const std::int64_t plane = static_cast<std::int64_t>(in_.height) * in_.width;
    Logits out;
    out.shape = {classes_, in_.height, in_.width};
    out.data = Vec::Zero(out.shape.size());
    for (int k = 0; k < classes_; ++k)
      for (int c = 0; c < in_.channels; ++c)
        out.data.segment(k * plane, plane) += w_(k, c) * image.data.segment(c * plane, plane);
    for (int k = 0; k < classes_; ++k) out.data.segment(k * plane, plane).array() += b_[k];
    return out;
  }
  bool has_gradient() const override { return true; }
  Vec gradient(const Image& image, const Vec& logits_cotangent) const override {
    detail::check_image_shape(image, in_, "segment gradient");
    const std::int64_t plane = static_cast<std::int64_t>(in_.height) * in_.width;
    if (logits_cotangent.size() != classes_ * plane) throw DataError("logits cotangent geometry mismatch");
    Vec out = Vec::Zero(in_.size());
    for (int c = 0; c < in_.channels; ++c)
      for (int k = 0; k < classes_; ++k)
        out.segment(c * plane, plane) += w_(k, c) * logits_cotangent.segment(k * plane, plane);
    return out;
  }

 private:
  int classes_;
  Shape3 in_;
  Eigen::MatrixXd w_;
  Vec b_;
};

/// Nearest-prototype head matched to the mask image encoding: class c
/// scores -(v - e_c)^2 where v is the channel-mean pixel value and e_c is
/// the encoded value of class c. On a cleanly encoded image the argmax
/// recovers the class map.
class PrototypeSegmenter final : public Segmenter {
 public:
  PrototypeSegmenter(int num_classes, Shape3 input_shape) : classes_(num_classes), in_(input_shape) {
    if (num_classes <= 0) throw ConfigError("segmenter class count must be positive");
    if (in_.size() <= 0) throw ConfigError("segmenter input shape must be positive");
    const double denom = std::max(num_classes - 1, 1);
    proto_.resize(num_classes);
    for (int k = 0; k < num_classes; ++k) proto_[k] = 2.0 * k / denom - 1.0;
  }
  int num_classes() const override { return classes_; }
  Shape3 input_shape() const override { return in_; }
  Logits segment(const Image& image) const override {
    detail::check_image_shape(image, in_, "segment");
    const std::int64_t plane = static_cast<std::int64_t>(in_.height) * in_.width;
    Vec mean = Vec::Zero(plane);
    for (int c = 0; c < in_.channels; ++c) mean += image.data.segment(c * plane, plane);
    mean /= in_.channels;
    Logits out;
    out.shape = {classes_, in_.height, in_.width};
    out.data.resize(out.shape.size());
    for (int k = 0; k < classes_; ++k)
      out.data.segment(k * plane, plane) = -(mean.array() - proto_[k]).square();
    return out;
  }
  bool has_gradient() const override { return true; }
  Vec gradient(const Image& image, const Vec& logits_cotangent) const override {
    detail::check_image_shape(image, in_, "segment gradient");
    const std::int64_t plane = static_cast<std::int64_t>(in_.height) * in_.width;
    if (logits_cotangent.size() != classes_ * plane) throw DataError("logits cotangent geometry mismatch");
    Vec mean = Vec::Zero(plane);
    for (int c = 0; c < in_.channels; ++c) mean += image.data.segment(c * plane, plane);
    mean /= in_.channels;
    Vec mean_cot = Vec::Zero(plane);
    for (int k = 0; k < classes_; ++k)
      mean_cot += logits_cotangent.segment(k * plane, plane).cwiseProduct(
          (-2.0 * (mean.array() - proto_[k])).matrix());
    Vec out(in_.size());
    for (int c = 0; c < in_.channels; ++c) out.segment(c * plane, plane) = mean_cot / in_.channels;
    return out;
  }

 private:
  int classes_;
  Shape3 in_;
  Vec proto_;
};

/// Multi-stage feature-map contract. Each stage downsamples the image
/// by its declared factor; `gradient` pulls one stage's feature cotangent
/// back to an image cotangent (callers accumulate over stages).
class FeatureExtractor {
 public:
  struct StageInfo {
    int channels = 0;
    int factor = 1;
  };

  virtual ~FeatureExtractor() = default;
  virtual Shape3 input_shape() const = 0;
  virtual std::vector<StageInfo> stages() const = 0;
  virtual std::vector<FeatureMap> extract(const Image& image) const = 0;
  virtual bool has_gradient() const { return false; }
  virtual Vec gradient(const Image& image, int stage, const Vec& feature_cotangent) const {
    (void)image;
    (void)stage;
    (void)feature_cotangent;
    throw std::runtime_error("feature extractor has no gradient contract");
  }
};

/// Seeded analytic extractor: stage l averages the image over factor-2^l
/// blocks and mixes channels with a fixed matrix A_l. Both maps are linear,
/// so the stage VJP is exact.
class PoolingExtractor final : public FeatureExtractor {
 public:
  PoolingExtractor(Shape3 input_shape, std::vector<int> stage_channels, std::uint64_t seed) : in_(input_shape) {
    if (in_.size() <= 0) throw ConfigError("extractor input shape must be positive");
    if (stage_channels.empty()) throw ConfigError("extractor needs at least one stage");
    Rng rng(mix_seed(seed, "pooling-extractor"));
    for (std::size_t l = 0; l < stage_channels.size(); ++l) {
      const int factor = 1 << l;
      if (stage_channels[l] <= 0) throw ConfigError("stage channel count must be positive");
      if (in_.height % factor != 0 || in_.width % factor != 0)
        throw ConfigError("image " + std::to_string(in_.height) + "x" + std::to_string(in_.width) +
                          " is not divisible by stage factor " + std::to_string(factor));
      stages_.push_back({stage_channels[l], factor});
      mix_.push_back(detail::seeded_matrix(stage_channels[l], in_.channels, rng));
    }
  }

  Shape3 input_shape() const override { return in_; }
  std::vector<StageInfo> stages() const override { return stages_; }

  std::vector<FeatureMap> extract(const Image& image) const override {
    detail::check_image_shape(image, in_, "extract");
    std::vector<FeatureMap> out;
    out.reserve(stages_.size());
    for (std::size_t l = 0; l < stages_.size(); ++l) {
      const auto [cl, f] = stages_[l];
      const int hl = in_.height / f, wl = in_.width / f;
      const Eigen::MatrixXd pooled = pool(image, f);  // rows: in channels, cols: hl*wl
      FeatureMap fm;
      fm.shape = {cl, hl, wl};
      fm.data.resize(fm.shape.size());
      const Eigen::MatrixXd mixed = mix_[l] * pooled;
      for (int k = 0; k < cl; ++k)
        for (int p = 0; p < hl * wl; ++p) fm.data[static_cast<std::int64_t>(k) * hl * wl + p] = mixed(k, p);
      out.push_back(std::move(fm));
    }
    return out;
  }

  bool has_gradient() const override { return true; }

  Vec gradient(const Image& image, int stage, const Vec& feature_cotangent) const override {
    detail::check_image_shape(image, in_, "extract gradient");
    if (stage < 0 || stage >= static_cast<int>(stages_.size())) throw DataError("stage index out of range");
    const auto [cl, f] = stages_[static_cast<std::size_t>(stage)];
    const int hl = in_.height / f, wl = in_.width / f;
    if (feature_cotangent.size() != static_cast<std::int64_t>(cl) * hl * wl)
      throw DataError("feature cotangent geometry mismatch");
    Eigen::MatrixXd cot(cl, hl * wl);
    for (int k = 0; k < cl; ++k)
      for (int p = 0; p < hl * wl; ++p) cot(k, p) = feature_cotangent[static_cast<std::int64_t>(k) * hl * wl + p];
    const Eigen::MatrixXd pooled_cot = mix_[static_cast<std::size_t>(stage)].transpose() * cot;
    const double inv_area = 1.0 / (static_cast<double>(f) * f);
    Vec out = Vec::Zero(in_.size());
    const std::int64_t plane = static_cast<std::int64_t>(in_.height) * in_.width;
    for (int c = 0; c < in_.channels; ++c)
      for (int r = 0; r < in_.height; ++r)
        for (int col = 0; col < in_.width; ++col)
          out[c * plane + static_cast<std::int64_t>(r) * in_.width + col] =
              pooled_cot(c, (r / f) * wl + col / f) * inv_area;
    return out;
  }

 private:
  Eigen::MatrixXd pool(const Image& image, int f) const {
    const int hl = in_.height / f, wl = in_.width / f;
    Eigen::MatrixXd pooled = Eigen::MatrixXd::Zero(in_.channels, hl * wl);
    const std::int64_t plane = static_cast<std::int64_t>(in_.height) * in_.width;
    const double inv_area = 1.0 / (static_cast<double>(f) * f);
    for (int c = 0; c < in_.channels; ++c)
      for (int r = 0; r < in_.height; ++r)
        for (int col = 0; col < in_.width; ++col)
          pooled(c, (r / f) * wl + col / f) +=
              image.data[c * plane + static_cast<std::int64_t>(r) * in_.width + col] * inv_area;
    return pooled;
  }

  Shape3 in_;
  std::vector<StageInfo> stages_;
  std::vector<Eigen::MatrixXd> mix_;
};

}  // namespace segdistill
