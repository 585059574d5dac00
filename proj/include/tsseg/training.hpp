#pragma once

// Pieces shared by teacher and student training: checkpoints, the Adam
// optimizer, per-epoch history records and held-out evaluation.

#include "tsseg/archive.hpp"
#include "tsseg/backbone.hpp"
#include "tsseg/losses.hpp"
#include "tsseg/metrics.hpp"

#include <filesystem>
#include <optional>

namespace tsseg {

struct Checkpoint {
  BackboneConfig config;
  BackboneParameters<float> params;

  Archive to_archive() const;
  static Checkpoint from_archive(const Archive& archive);
  /// SHA-256 of the serialized archive.
  std::string digest() const;
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

/// Adam with bias correction; the L2 penalty arrives through the gradient.
class Adam {
 public:
  Adam(const BackboneParameters<float>& like, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);
  void step(BackboneParameters<float>& params, const BackboneParameters<float>& grads);
  long long steps() const { return t_; }

 private:
  BackboneParameters<float> m_, v_;
  double lr_, b1_, b2_, eps_;
  long long t_ = 0;
};

struct EpochRecord {
  int epoch = 0;  // 1-based, global across curriculum stages
  int stage = 0;  // 0 for teacher training
  double train_loss = 0;
  std::optional<double> val_loss;
  double train_dice = 0;
  std::optional<double> val_dice;
  double accuracy = 0;  // val pixel accuracy, train accuracy when val is empty
};

using TrainHistory = std::vector<EpochRecord>;

std::string history_to_jsonl(const TrainHistory& history);
TrainHistory history_from_jsonl(const std::string& text);

struct EvalResult {
  double loss = 0;  // mean per-sample dice + lambda_ce * ce
  double dice = 0;  // macro Dice without background
  double accuracy = 0;
  ClasswiseScores scores;
};

/// Deterministic forward over a labeled set.
EvalResult evaluate_model(const BackboneParameters<float>& params, const BackboneConfig& cfg, const LabeledSet& set,
                          const LossConfig& loss);

/// Adds 2 * lambda_reg * theta to the gradient.
void add_weight_decay(const BackboneParameters<float>& params, double lambda_reg, BackboneParameters<float>& grads);

/// Deterministic permutation of [0, n) for an epoch.
std::vector<size_t> epoch_order(size_t n, std::uint64_t seed, int epoch);

/// Horizontal mirror of an image and its target mask.
Tensor<float> flip_horizontal(const Tensor<float>& t);
LabelMask flip_horizontal(const LabelMask& m);

}  // namespace tsseg
