#pragma once

#include "tsseg/core.hpp"

#include <algorithm>
#include <cmath>

namespace tsseg {

enum class ThresholdMode { Fixed, Percentile };

struct LossConfig {
  double lambda_ce = 1.0;
  double lambda_reg = 1e-5;
  double lambda_high = 0.5;  // weight on the learn term
  double lambda_low = 0.1;   // weight on the unlearn term
  double epsilon = 1e-6;     // Dice stabilizer
  double tau_p = 0.9;        // per-pixel confidence threshold
  double kappa = 2.0;        // cap on per-pixel CE inside the unlearn term
  double var_floor = 1e-6;
  ThresholdMode threshold_mode = ThresholdMode::Fixed;
  double percentile = 60.0;  // used in Percentile mode

  void validate() const;
  bool operator==(const LossConfig&) const = default;
};

inline constexpr double kProbClamp = 1e-7;

/// A loss value together with its gradient w.r.t. the probability map.
template <typename Scalar>
struct LossGrad {
  double value = 0;
  Tensor<Scalar> dprobs;
};

namespace loss_detail {
template <typename Scalar>
void require_same(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": shape mismatch");
}
template <typename Scalar>
void require_grid(const Tensor<Scalar>& probs, const LabelMask& y, const Tensor<Scalar>& conf, const char* op) {
  if (y.height() != probs.height || y.width() != probs.width || conf.height != probs.height ||
      conf.width != probs.width || conf.channels() != 1)
    throw ShapeError(std::string(op) + ": shape mismatch");
}
inline double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }
inline double pixel_ce(double p) { return -std::log(clamp_prob(p)); }
inline double pixel_ce_grad(double p) { return (p < kProbClamp || p > 1.0 - kProbClamp) ? 0.0 : -1.0 / p; }
}  // namespace loss_detail

/// 1 - mean_c (2 sum P y + eps) / (sum P + sum y + eps).
template <typename Scalar>
LossGrad<Scalar> dice_loss_grad(const Tensor<Scalar>& probs, const Tensor<Scalar>& target, double eps,
                                bool with_grad = true) {
  loss_detail::require_same(probs, target, "dice_loss");
  const int C = probs.channels();
  LossGrad<Scalar> out;
  if (with_grad) out.dprobs = Tensor<Scalar>(C, probs.height, probs.width);
  double ratio_sum = 0;
  for (int c = 0; c < C; ++c) {
    const auto pc = probs.data.row(c).template cast<double>();
    const auto yc = target.data.row(c).template cast<double>();
    const double inter = pc.cwiseProduct(yc).sum();
    const double denom = pc.sum() + yc.sum() + eps;
    const double num = 2 * inter + eps;
    ratio_sum += num / denom;
    if (with_grad)
      out.dprobs.data.row(c) = ((-(2.0 * yc * denom).array() + num) / (C * denom * denom)).matrix().template cast<Scalar>();
  }
  out.value = 1.0 - ratio_sum / C;
  return out;
}

template <typename Scalar>
double dice_loss(const Tensor<Scalar>& probs, const Tensor<Scalar>& target, double eps) {
  return dice_loss_grad(probs, target, eps, false).value;
}

/// Mean over pixels of -sum_c y log clamp(P).
template <typename Scalar>
LossGrad<Scalar> ce_loss_grad(const Tensor<Scalar>& probs, const Tensor<Scalar>& target, bool with_grad = true) {
  loss_detail::require_same(probs, target, "ce_loss");
  LossGrad<Scalar> out;
  if (with_grad) out.dprobs = Tensor<Scalar>(probs.channels(), probs.height, probs.width);
  const double n = probs.pixels();
  double total = 0;
  for (int p = 0; p < probs.pixels(); ++p)
    for (int c = 0; c < probs.channels(); ++c) {
      const double y = target.data(c, p);
      if (y == 0) continue;
      const double pr = probs.data(c, p);
      total += y * loss_detail::pixel_ce(pr);
      if (with_grad) out.dprobs.data(c, p) = Scalar(y * loss_detail::pixel_ce_grad(pr) / n);
    }
  out.value = total / n;
  return out;
}

template <typename Scalar>
double ce_loss(const Tensor<Scalar>& probs, const Tensor<Scalar>& target) {
  return ce_loss_grad(probs, target, false).value;
}

/// dice + lambda_ce * ce for one sample.
template <typename Scalar>
LossGrad<Scalar> supervised_loss_grad(const Tensor<Scalar>& probs, const Tensor<Scalar>& target,
                                      const LossConfig& cfg, bool with_grad = true) {
  auto dice = dice_loss_grad(probs, target, cfg.epsilon, with_grad);
  auto ce = ce_loss_grad(probs, target, with_grad);
  LossGrad<Scalar> out;
  out.value = dice.value + cfg.lambda_ce * ce.value;
  if (with_grad) out.dprobs = Tensor<Scalar>(dice.dprobs.data + Scalar(cfg.lambda_ce) * ce.dprobs.data, probs.height, probs.width);
  return out;
}

/// Sum over the batch of (dice + lambda_ce * ce) plus lambda_reg * ||theta||^2.
template <typename Scalar>
double teacher_loss(const std::vector<Tensor<Scalar>>& probs, const std::vector<Tensor<Scalar>>& targets,
                    double theta_squared_norm, const LossConfig& cfg) {
  if (probs.size() != targets.size()) throw ShapeError("teacher_loss: batch size mismatch");
  double total = 0;
  for (size_t i = 0; i < probs.size(); ++i) total += supervised_loss_grad(probs[i], targets[i], cfg, false).value;
  return total + cfg.lambda_reg * theta_squared_norm;
}

/// Per-pixel log of the population variance, across passes, of the
/// probability of the class that wins the pass-averaged map; floored at
/// var_floor before the log.
template <typename Scalar>
Tensor<Scalar> uncertainty_target(const std::vector<Tensor<Scalar>>& passes, double var_floor) {
  if (passes.size() < 2) throw std::invalid_argument("uncertainty_target: need at least 2 passes");
  for (const auto& t : passes) loss_detail::require_same(t, passes.front(), "uncertainty_target");
  const auto& first = passes.front();
  Mat<double> mean = Mat<double>::Zero(first.channels(), first.pixels());
  for (const auto& t : passes) mean += t.data.template cast<double>();
  mean /= double(passes.size());
  Tensor<Scalar> out(1, first.height, first.width);
  for (int p = 0; p < first.pixels(); ++p) {
    Eigen::Index c = 0;
    mean.col(p).maxCoeff(&c);
    double m = 0, s2 = 0;
    for (const auto& t : passes) m += t.data(c, p);
    m /= double(passes.size());
    for (const auto& t : passes) s2 += (t.data(c, p) - m) * (t.data(c, p) - m);
    out.data(0, p) = Scalar(std::log(std::max(s2 / double(passes.size()), var_floor)));
  }
  return out;
}

/// Mean squared error between predicted and target log-variance. The
/// gradient is w.r.t. the prediction.
template <typename Scalar>
LossGrad<Scalar> uncertainty_regression_grad(const Tensor<Scalar>& pred, const Tensor<Scalar>& target,
                                             bool with_grad = true) {
  loss_detail::require_same(pred, target, "uncertainty_regression_loss");
  const Mat<double> diff = (pred.data - target.data).template cast<double>();
  LossGrad<Scalar> out;
  out.value = diff.squaredNorm() / double(diff.size());
  if (with_grad) out.dprobs = Tensor<Scalar>((2.0 / double(diff.size()) * diff).template cast<Scalar>(), pred.height, pred.width);
  return out;
}

template <typename Scalar>
double uncertainty_regression_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target) {
  return uncertainty_regression_grad(pred, target, false).value;
}

/// Pixels with confidence >= tau belong to the high set; the rest to the low set.
template <typename Scalar>
bool in_high_set(Scalar confidence, double tau) {
  return double(confidence) >= tau;
}

/// Mean pixel CE against hard pseudo-labels over {p : c_p >= tau}; 0 if empty.
template <typename Scalar>
LossGrad<Scalar> high_conf_loss_grad(const Tensor<Scalar>& probs, const LabelMask& pseudo, const Tensor<Scalar>& conf,
                                     double tau, bool with_grad = true) {
  loss_detail::require_grid(probs, pseudo, conf, "high_conf_loss");
  LossGrad<Scalar> out;
  if (with_grad) out.dprobs = Tensor<Scalar>(probs.channels(), probs.height, probs.width);
  int count = 0;
  for (int p = 0; p < probs.pixels(); ++p) count += in_high_set(conf.data(0, p), tau);
  if (count == 0) return out;
  double total = 0;
  for (int p = 0; p < probs.pixels(); ++p) {
    if (!in_high_set(conf.data(0, p), tau)) continue;
    const int c = pseudo.at(p);
    const double pr = probs.data(c, p);
    total += loss_detail::pixel_ce(pr);
    if (with_grad) out.dprobs.data(c, p) = Scalar(loss_detail::pixel_ce_grad(pr) / count);
  }
  out.value = total / count;
  return out;
}

/// Mean over {p : c_p < tau} of min(pixel CE, kappa); 0 if empty.
template <typename Scalar>
LossGrad<Scalar> low_conf_loss_grad(const Tensor<Scalar>& probs, const LabelMask& pseudo, const Tensor<Scalar>& conf,
                                    double tau, double kappa, bool with_grad = true) {
  loss_detail::require_grid(probs, pseudo, conf, "low_conf_loss");
  LossGrad<Scalar> out;
  if (with_grad) out.dprobs = Tensor<Scalar>(probs.channels(), probs.height, probs.width);
  int count = 0;
  for (int p = 0; p < probs.pixels(); ++p) count += !in_high_set(conf.data(0, p), tau);
  if (count == 0) return out;
  double total = 0;
  for (int p = 0; p < probs.pixels(); ++p) {
    if (in_high_set(conf.data(0, p), tau)) continue;
    const int c = pseudo.at(p);
    const double pr = probs.data(c, p);
    const double ce = loss_detail::pixel_ce(pr);
    total += std::min(ce, kappa);
    if (with_grad && ce < kappa) out.dprobs.data(c, p) = Scalar(loss_detail::pixel_ce_grad(pr) / count);
  }
  out.value = total / count;
  return out;
}

template <typename Scalar>
double high_conf_loss(const Tensor<Scalar>& probs, const LabelMask& pseudo, const Tensor<Scalar>& conf, double tau) {
  return high_conf_loss_grad(probs, pseudo, conf, tau, false).value;
}

template <typename Scalar>
double low_conf_loss(const Tensor<Scalar>& probs, const LabelMask& pseudo, const Tensor<Scalar>& conf, double tau,
                     double kappa) {
  return low_conf_loss_grad(probs, pseudo, conf, tau, kappa, false).value;
}

/// L_sup + lambda_high * L_high - lambda_low * L_low + lambda_reg * ||theta||^2.
inline double student_total_loss(double supervised, double high, double low, double theta_squared_norm,
                                 const LossConfig& cfg) {
  return supervised + cfg.lambda_high * high - cfg.lambda_low * low + cfg.lambda_reg * theta_squared_norm;
}

/// Chain rule through the per-pixel softmax: dZ = P * (dP - sum_c P dP).
template <typename Scalar>
Tensor<Scalar> softmax_backward(const Tensor<Scalar>& probs, const Tensor<Scalar>& dprobs) {
  const RowVec<Scalar> inner = probs.data.cwiseProduct(dprobs.data).colwise().sum();
  return Tensor<Scalar>(probs.data.cwiseProduct(dprobs.data.rowwise() - inner), probs.height, probs.width);
}

/// q-th percentile (linear interpolation, q in [0, 100]) of the pooled values.
double percentile(std::vector<double> values, double q);

}  // namespace tsseg
