#include "tsseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tsseg {
namespace {

void require_same(const LabelMask& a, const LabelMask& b, const char* op) {
  if (a.height() != b.height() || a.width() != b.width()) throw ShapeError(std::string(op) + ": shape mismatch");
}

struct Counts {
  long long inter = 0, a = 0, b = 0;
};

Counts count_class(const LabelMask& pred, const LabelMask& target, int c) {
  Counts n;
  for (Eigen::Index p = 0; p < pred.classes.size(); ++p) {
    const bool x = pred.at(static_cast<int>(p)) == c, y = target.at(static_cast<int>(p)) == c;
    n.a += x;
    n.b += y;
    n.inter += x && y;
  }
  return n;
}

double dice_from(long long inter, long long a, long long b) {
  if (a == 0 && b == 0) return 1.0;
  return 2.0 * double(inter) / double(a + b);
}

double iou_from(long long inter, long long a, long long b) {
  if (a == 0 && b == 0) return 1.0;
  return double(inter) / double(a + b - inter);
}

}  // namespace

double dice_coefficient(const LabelMask& pred, const LabelMask& target, int c) {
  require_same(pred, target, "dice_coefficient");
  const Counts n = count_class(pred, target, c);
  return dice_from(n.inter, n.a, n.b);
}

double iou(const LabelMask& pred, const LabelMask& target, int c) {
  require_same(pred, target, "iou");
  const Counts n = count_class(pred, target, c);
  return iou_from(n.inter, n.a, n.b);
}

double pixel_accuracy(const LabelMask& pred, const LabelMask& target) {
  require_same(pred, target, "pixel_accuracy");
  if (pred.classes.size() == 0) return 1.0;
  return double((pred.classes.array() == target.classes.array()).count()) / double(pred.classes.size());
}

OverlapCounter::OverlapCounter(int num_classes)
    : inter_(static_cast<size_t>(num_classes)), pred_(inter_.size()), target_(inter_.size()) {}

void OverlapCounter::add(const LabelMask& pred, const LabelMask& target) {
  require_same(pred, target, "OverlapCounter::add");
  const int C = num_classes();
  for (Eigen::Index p = 0; p < pred.classes.size(); ++p) {
    const int a = pred.at(static_cast<int>(p)), b = target.at(static_cast<int>(p));
    if (a < 0 || a >= C || b < 0 || b >= C) throw std::out_of_range("OverlapCounter: class id out of range");
    ++pred_[a];
    ++target_[b];
    if (a == b) ++inter_[a];
  }
  correct_ += (pred.classes.array() == target.classes.array()).count();
  total_ += pred.classes.size();
}

ClasswiseScores OverlapCounter::scores(const std::vector<std::string>& names, bool include_background) const {
  ClasswiseScores s;
  s.macro_includes_background = include_background;
  int used = 0;
  for (int c = 0; c < num_classes(); ++c) {
    ClassScore cs;
    cs.name = c < static_cast<int>(names.size()) ? names[c] : "class" + std::to_string(c);
    cs.dice = dice_from(inter_[c], pred_[c], target_[c]);
    cs.iou = iou_from(inter_[c], pred_[c], target_[c]);
    if (c > 0 || include_background || num_classes() == 1) {
      s.macro_dice += cs.dice;
      s.macro_iou += cs.iou;
      ++used;
    }
    s.classes.push_back(std::move(cs));
  }
  if (used) {
    s.macro_dice /= used;
    s.macro_iou /= used;
  }
  return s;
}

double OverlapCounter::macro_dice(bool include_background) const {
  return scores({}, include_background).macro_dice;
}

double OverlapCounter::accuracy() const { return total_ ? double(correct_) / double(total_) : 1.0; }

ClasswiseScores classwise_scores(const LabelMask& pred, const LabelMask& target, const std::vector<std::string>& names,
                                 bool include_background) {
  OverlapCounter counter(std::max(pred.num_classes, target.num_classes));
  counter.add(pred, target);
  return counter.scores(names, include_background);
}

std::vector<std::string> identity_violations(const ClasswiseScores& scores, double tol) {
  std::vector<std::string> bad;
  for (const auto& c : scores.classes)
    if (std::abs(c.iou - c.dice / (2.0 - c.dice)) > tol) bad.push_back(c.name);
  return bad;
}

ConfidenceStats confidence_stats(const std::vector<double>& values, int bins) {
  if (values.empty()) throw std::invalid_argument("confidence_stats: no samples");
  if (bins < 1) throw std::invalid_argument("confidence_stats: bin count must be positive");
  ConfidenceStats s;
  s.sorted = values;
  std::sort(s.sorted.begin(), s.sorted.end());
  s.min = s.sorted.front();
  s.max = s.sorted.back();
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / double(values.size());
  s.bin_low = s.min;
  s.bin_high = s.max;
  s.histogram.assign(static_cast<size_t>(bins), 0);
  const double width = (s.max - s.min) / bins;
  for (double v : values) {
    int b = width > 0 ? static_cast<int>((v - s.min) / width) : 0;
    ++s.histogram[static_cast<size_t>(std::clamp(b, 0, bins - 1))];
  }
  return s;
}

Agreement agreement_map(const IndexGrid& a, const IndexGrid& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("agreement_map: shape mismatch");
  Agreement out;
  out.map = (a.array() == b.array()).cast<std::int32_t>();
  out.fraction = a.size() ? double(out.map.sum()) / double(a.size()) : 1.0;
  return out;
}

namespace {
std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t i, size_t j) { return v[i] < v[j]; });
  std::vector<double> ranks(v.size());
  for (size_t i = 0; i < order.size();) {
    size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * double(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}
}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman: length mismatch");
  if (x.size() < 2) return 0.0;
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = double(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace tsseg
