#pragma once

#include "tsseg/core.hpp"

#include <string>
#include <vector>

namespace tsseg {

/// 2|A n B| / (|A| + |B|) for the binary masks of class c.
/// Both empty -> 1.0; exactly one empty -> 0.0.
double dice_coefficient(const LabelMask& pred, const LabelMask& target, int c);

/// |A n B| / |A u B| with the same empty-mask convention as Dice.
double iou(const LabelMask& pred, const LabelMask& target, int c);

double pixel_accuracy(const LabelMask& pred, const LabelMask& target);

struct ClassScore {
  std::string name;
  double dice = 0;
  double iou = 0;
};

struct ClasswiseScores {
  std::vector<ClassScore> classes;
  double macro_dice = 0;
  double macro_iou = 0;
  bool macro_includes_background = false;
};

/// Accumulates per-class overlap counts over many mask pairs so Dice/IoU
/// are computed over the pooled pixels of a whole set.
class OverlapCounter {
 public:
  explicit OverlapCounter(int num_classes);
  void add(const LabelMask& pred, const LabelMask& target);
  ClasswiseScores scores(const std::vector<std::string>& names, bool include_background = false) const;
  /// Macro Dice over classes, excluding background unless asked.
  double macro_dice(bool include_background = false) const;
  double accuracy() const;
  int num_classes() const { return static_cast<int>(inter_.size()); }

 private:
  std::vector<long long> inter_, pred_, target_;
  long long correct_ = 0, total_ = 0;
};

ClasswiseScores classwise_scores(const LabelMask& pred, const LabelMask& target,
                                 const std::vector<std::string>& names, bool include_background = false);

/// Classes whose stored IoU differs from dice / (2 - dice) by more than tol.
std::vector<std::string> identity_violations(const ClasswiseScores& scores, double tol = 1e-9);

struct ConfidenceStats {
  double mean = 0, min = 0, max = 0;
  double bin_low = 0, bin_high = 0;
  std::vector<int> histogram;  // equal-width bins over [bin_low, bin_high]
  std::vector<double> sorted;  // ascending
};

ConfidenceStats confidence_stats(const std::vector<double>& image_confidences, int bins = 20);

struct Agreement {
  IndexGrid map;  // 1 where argmax labels agree
  double fraction = 0;
};

Agreement agreement_map(const IndexGrid& a, const IndexGrid& b);

template <typename Scalar>
Agreement agreement_map(const ModelOutput<Scalar>& a, const ModelOutput<Scalar>& b) {
  if (!a.probs.same_shape(b.probs)) throw ShapeError("agreement_map: shape mismatch");
  return agreement_map(argmax_over_classes(a.probs), argmax_over_classes(b.probs));
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either input is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace tsseg
