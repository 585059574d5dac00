#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tsseg {

/// Channel-major grid storage: one row per channel, one column per pixel
/// (row-major pixel order, p = y * width + x).
template <typename Scalar>
using Planes = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using IndexGrid = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a NaN or infinity reaches a numeric stage that cannot use it.
class NonFiniteError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A channels x height x width grid. Used for images, feature maps and
/// probability maps alike.
template <typename Scalar>
struct Tensor {
  Planes<Scalar> data;
  int height = 0;
  int width = 0;

  Tensor() = default;
  Tensor(int channels, int h, int w) : data(Planes<Scalar>::Zero(channels, h * w)), height(h), width(w) {}
  Tensor(Planes<Scalar> planes, int h, int w) : data(std::move(planes)), height(h), width(w) {
    if (data.cols() != static_cast<Eigen::Index>(h) * w)
      throw ShapeError("tensor planes do not match spatial shape");
  }

  int channels() const { return static_cast<int>(data.rows()); }
  int pixels() const { return height * width; }
  Scalar& operator()(int c, int y, int x) { return data(c, y * width + x); }
  Scalar operator()(int c, int y, int x) const { return data(c, y * width + x); }

  bool same_shape(const Tensor& other) const {
    return channels() == other.channels() && height == other.height && width == other.width;
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(data.template cast<Other>(), height, width);
  }
};

/// Intermediate activations between network stages.
template <typename Scalar>
using FeatureMap = Tensor<Scalar>;

template <typename Scalar>
bool all_finite(const Tensor<Scalar>& t) {
  return t.data.allFinite();
}

inline const std::vector<std::string>& default_class_names() {
  static const std::vector<std::string> names{"Background", "NCR/NET", "Edema", "Enhancing"};
  return names;
}

inline const std::vector<std::string>& default_modalities() {
  static const std::vector<std::string> roles{"T1", "T1ce", "T2", "FLAIR"};
  return roles;
}

/// Multi-channel 2D slice with channel role tags.
struct Volume {
  std::string id;
  Tensor<float> image;
  std::vector<std::string> channel_roles;
  std::optional<std::vector<float>> spacing;

  int channels() const { return image.channels(); }
  int height() const { return image.height; }
  int width() const { return image.width; }
};

/// Validates shape, role count and finiteness. Throws ShapeError.
void validate_volume(const Volume& v);

Volume make_volume(std::string id, Tensor<float> image, std::vector<std::string> roles,
                   std::optional<std::vector<float>> spacing = std::nullopt);

/// Hard per-pixel class labels in [0, num_classes).
struct LabelMask {
  IndexGrid classes;
  int num_classes = 4;

  int height() const { return static_cast<int>(classes.rows()); }
  int width() const { return static_cast<int>(classes.cols()); }
  std::int32_t at(int p) const { return classes.data()[p]; }
};

LabelMask make_label_mask(IndexGrid classes, int num_classes);

struct LabeledSample {
  Volume volume;
  LabelMask mask;
};

using LabeledSet = std::vector<LabeledSample>;
using UnlabeledSet = std::vector<Volume>;

/// Checks id uniqueness and spatial consistency within a set.
void validate_set(const LabeledSet& set);
void validate_set(const UnlabeledSet& set);

template <typename Scalar>
struct ModelOutput {
  Tensor<Scalar> logits;
  Tensor<Scalar> probs;
  Tensor<Scalar> logvar;
};

/// Per-pixel softmax over the channel axis, computed with a max shift.
template <typename Scalar>
Tensor<Scalar> softmax_over_classes(const Tensor<Scalar>& logits) {
  if (!logits.data.allFinite()) throw NonFiniteError("softmax_over_classes: non-finite logit");
  if (logits.channels() < 1) throw ShapeError("softmax_over_classes: no class channels");
  Tensor<Scalar> out(logits.channels(), logits.height, logits.width);
  const RowVec<Scalar> peak = logits.data.colwise().maxCoeff();
  out.data = (logits.data.rowwise() - peak).array().exp().matrix();
  const RowVec<Scalar> total = out.data.colwise().sum();
  out.data.array().rowwise() /= total.array();
  return out;
}

/// Index of the largest channel per pixel; ties resolve to the lowest index.
template <typename Scalar>
IndexGrid argmax_over_classes(const Tensor<Scalar>& t) {
  IndexGrid out(t.height, t.width);
  for (int p = 0; p < t.pixels(); ++p) {
    Eigen::Index best = 0;
    t.data.col(p).maxCoeff(&best);
    out.data()[p] = static_cast<std::int32_t>(best);
  }
  return out;
}

template <typename Scalar = float>
Tensor<Scalar> onehot(const LabelMask& mask, int num_classes) {
  if (num_classes < 1) throw std::invalid_argument("onehot: class count must be positive");
  Tensor<Scalar> out(num_classes, mask.height(), mask.width());
  for (int p = 0; p < out.pixels(); ++p) {
    const auto c = mask.at(p);
    if (c < 0 || c >= num_classes)
      throw std::out_of_range("onehot: class id " + std::to_string(c) + " outside [0," +
                              std::to_string(num_classes) + ")");
    out.data(c, p) = Scalar(1);
  }
  return out;
}

template <typename Scalar>
LabelMask mask_from_argmax(const Tensor<Scalar>& t) {
  return LabelMask{argmax_over_classes(t), t.channels()};
}

/// Max-class probability per pixel, as a 1-channel tensor.
template <typename Scalar>
Tensor<Scalar> max_probability(const Tensor<Scalar>& probs) {
  return Tensor<Scalar>(probs.data.colwise().maxCoeff(), probs.height, probs.width);
}

}  // namespace tsseg
