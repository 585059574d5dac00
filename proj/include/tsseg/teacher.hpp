#pragma once

#include "tsseg/training.hpp"

namespace tsseg {

struct TeacherTrainConfig {
  int epochs = 50;
  int batch_size = 4;
  double learning_rate = 1e-3;
  int passes = 8;  // stochastic forward passes for uncertainty targets
  std::uint64_t seed = 7;
  double uncertainty_weight = 0.1;
  bool distill_uncertainty = true;  // false skips the target passes entirely
  bool augment_flips = false;

  void validate() const;
  bool operator==(const TeacherTrainConfig&) const = default;
};

struct TeacherResult {
  Checkpoint checkpoint;  // best by val Dice (train Dice without val)
  TrainHistory history;
  int best_epoch = 0;
  bool diverged = false;
};

/// Supervised teacher training with interleaved uncertainty distillation.
/// Fully determined by the inputs and cfg.seed.
TeacherResult train_teacher(const LabeledSet& labeled, const LabeledSet& val, const BackboneConfig& backbone,
                            const TeacherTrainConfig& cfg, const LossConfig& loss);

struct TeacherPrediction {
  Tensor<float> mean_probs;  // average of the stochastic passes
  Tensor<float> logvar;      // uncertainty head, deterministic pass
};

/// K stochastic passes averaged; the dropout stream depends on seed and
/// the volume id only.
TeacherPrediction teacher_predict(const Volume& x, const Checkpoint& teacher, int passes, std::uint64_t seed);

}  // namespace tsseg
