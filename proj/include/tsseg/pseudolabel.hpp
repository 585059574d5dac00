#pragma once

#include "tsseg/teacher.hpp"

#include <filesystem>

namespace tsseg {

struct PseudoLabeledSample {
  Volume volume;
  LabelMask labels;          // argmax of the averaged teacher map
  Tensor<float> soft;        // averaged teacher probabilities (diagnostics)
  Tensor<float> confidence;  // c_p, 1 channel, in [0, 1]
  double image_confidence = 0;
  int provenance = 0;  // stage index of the last refinement, 0 = fresh

  const std::string& id() const { return volume.id; }
};

/// c_p = max_c P(c) * exp(-max(U, 0)), clamped to [0, 1].
template <typename Scalar>
Tensor<Scalar> pixel_confidence(const Tensor<Scalar>& mean_probs, const Tensor<Scalar>& logvar) {
  if (logvar.channels() != 1 || logvar.height != mean_probs.height || logvar.width != mean_probs.width)
    throw ShapeError("pixel_confidence: shape mismatch");
  if (!mean_probs.data.allFinite() || !logvar.data.allFinite())
    throw std::invalid_argument("pixel_confidence: non-finite input");
  Tensor<Scalar> out(1, mean_probs.height, mean_probs.width);
  const RowVec<Scalar> peak = mean_probs.data.colwise().maxCoeff();
  out.data.row(0) = (peak.array() * (-logvar.data.row(0).array().cwiseMax(Scalar(0))).exp())
                        .cwiseMax(Scalar(0))
                        .cwiseMin(Scalar(1))
                        .matrix();
  return out;
}

/// Arithmetic mean of a confidence grid.
template <typename Scalar>
double image_confidence(const Tensor<Scalar>& confidence) {
  if (confidence.data.size() == 0) throw std::invalid_argument("image_confidence: empty grid");
  return confidence.data.template cast<double>().mean();
}

struct PseudoLabelConfig {
  int passes = 8;                  // stochastic teacher passes per sample
  double agreement_damping = 0.5;  // alpha
  std::uint64_t seed = 13;

  void validate() const;
  bool operator==(const PseudoLabelConfig&) const = default;
};

PseudoLabeledSample make_pseudolabeled(const Volume& x, const TeacherPrediction& pred);

std::vector<PseudoLabeledSample> generate_pseudolabels(const UnlabeledSet& unlabeled, const Checkpoint& teacher,
                                                       int passes, std::uint64_t seed);

struct StageSelection {
  int stage = 0;
  double fraction = 1.0;
  std::vector<size_t> indices;  // into the sample list, best first
  std::vector<std::string> ids;
};

/// ceil(fraction * n) with tolerance for binary fractions like 0.6 * 5.
size_t selection_size(double fraction, size_t n);

/// Ranks by image confidence (descending, ties by id ascending) and keeps
/// the top ceil(fraction * N_u).
StageSelection select_stage(const std::vector<PseudoLabeledSample>& samples, double fraction, int stage = 0);

/// Damps c_p by alpha where teacher and student argmax disagree
/// (deterministic passes), recomputes C_img and stamps provenance.
void refine_by_agreement(std::vector<PseudoLabeledSample>& samples, const Checkpoint& teacher,
                         const Checkpoint& student, double alpha, int stage);

/// Same as above with precomputed teacher argmax maps (aligned with samples).
void refine_by_agreement(std::vector<PseudoLabeledSample>& samples, const std::vector<IndexGrid>& teacher_labels,
                         const Checkpoint& student, double alpha, int stage);

// ---- on-disk cache: one archive per sample id plus an index ----

struct CacheStatus {
  bool hit = false;
  std::string reason;
};

/// A hit needs an index whose teacher digest and id list match.
CacheStatus check_pseudolabel_cache(const std::filesystem::path& dir, const std::string& teacher_digest,
                                    const UnlabeledSet& unlabeled);

void save_pseudolabel_cache(const std::filesystem::path& dir, const std::vector<PseudoLabeledSample>& samples,
                            const std::string& teacher_digest);

/// Loads records and reattaches the input volumes by id.
std::vector<PseudoLabeledSample> load_pseudolabel_cache(const std::filesystem::path& dir,
                                                        const UnlabeledSet& unlabeled);

/// "sample_id,confidence,rank" rows in rank order.
std::string ranking_csv(const std::vector<PseudoLabeledSample>& samples);

}  // namespace tsseg
