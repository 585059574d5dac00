#pragma once

#include "tsseg/pseudolabel.hpp"

namespace tsseg {

struct CurriculumStage {
  double fraction = 1.0;
  int epochs = 10;
  bool operator==(const CurriculumStage&) const = default;
};

struct CurriculumSchedule {
  std::vector<CurriculumStage> stages{{0.10, 10}, {0.20, 10}, {0.40, 10}, {0.60, 10}, {0.80, 10}, {1.00, 10}};

  void validate() const;
  bool operator==(const CurriculumSchedule&) const = default;
};

/// Parses "0.1:10,0.2:10,..." (fraction:epochs pairs).
CurriculumSchedule parse_schedule(const std::string& text);

struct StudentTrainConfig {
  int batch_size = 4;
  double learning_rate = 1e-3;
  std::uint64_t seed = 11;
  bool augment_flips = false;

  void validate() const;
  bool operator==(const StudentTrainConfig&) const = default;
};

struct StageReport {
  int stage = 0;  // 1-based
  double fraction = 0;
  double best_val_loss = 0;
  double best_val_dice = 0;
  double dice_gain = 0;  // vs. previous stage (stage 1: vs. the untrained student)
  int samples_used = 0;  // labeled + selected pseudo-labeled
  int pseudo_used = 0;
  double tau = 0;        // per-pixel threshold in effect
};

struct CurriculumResult {
  Checkpoint student;  // best val Dice across all stages
  std::vector<StageReport> reports;
  TrainHistory history;
  std::vector<PseudoLabeledSample> pool;  // after the last refinement
  std::vector<std::string> stage_start_digests, stage_end_digests;
  double initial_val_dice = 0;
  bool aborted = false;
};

/// Progressive curriculum over a pre-built pseudo-label pool. The student
/// shares the teacher's architecture, starts from a fresh random init and
/// warm-starts from stage to stage.
CurriculumResult run_curriculum(const LabeledSet& labeled, std::vector<PseudoLabeledSample> pool,
                                const LabeledSet& val, const Checkpoint& teacher, const CurriculumSchedule& schedule,
                                const LossConfig& loss, const StudentTrainConfig& train, double agreement_damping);

/// Generates the pool from the teacher first.
CurriculumResult run_curriculum(const LabeledSet& labeled, const UnlabeledSet& unlabeled, const LabeledSet& val,
                                const Checkpoint& teacher, const CurriculumSchedule& schedule, const LossConfig& loss,
                                const StudentTrainConfig& train, const PseudoLabelConfig& pseudo);

/// Per-pixel threshold for a stage: tau_p, or the configured percentile of
/// c_p over the selected samples.
double resolve_threshold(const LossConfig& loss, const std::vector<PseudoLabeledSample>& pool,
                         const std::vector<size_t>& selected);

EvalResult evaluate_student(const Checkpoint& student, const LabeledSet& val, const LossConfig& loss);

std::string stage_reports_to_jsonl(const std::vector<StageReport>& reports);
std::vector<StageReport> stage_reports_from_jsonl(const std::string& text);

}  // namespace tsseg
