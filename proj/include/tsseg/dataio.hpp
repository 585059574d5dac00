#pragma once

#include "tsseg/core.hpp"

#include <array>
#include <filesystem>
#include <map>

namespace tsseg {

/// Nested-disk toy tumours: edema contains the core, the core contains the
/// enhancing disk. Radii are drawn per sample; the core and enhancing
/// radii are fractions of the enclosing disk.
struct SyntheticSpec {
  int count = 200;
  int height = 64;
  int width = 64;
  int modalities = 4;
  double labeled_fraction = 0.1;
  double val_fraction = 0.1;
  double noise_sigma = 0.1;  // additive Gaussian noise, also scales the bias field
  double edema_radius_min = 7.0;
  double edema_radius_max = 15.0;
  double core_ratio_min = 0.45;
  double core_ratio_max = 0.75;
  double enhancing_ratio_min = 0.3;
  double enhancing_ratio_max = 0.6;
  std::uint64_t seed = 2024;

  void validate() const;
  bool operator==(const SyntheticSpec&) const = default;
};

struct DiskLayout {
  double cy = 0, cx = 0, radius = 0;
};

struct TumorLayout {
  DiskLayout edema, core, enhancing;
};

struct SyntheticCorpus {
  LabeledSet labeled;
  UnlabeledSet unlabeled;
  LabeledSet val;
  std::vector<LabelMask> unlabeled_truth;     // withheld labels, aligned with unlabeled
  std::map<std::string, TumorLayout> layouts;  // by sample id
};

/// Byte-identical output for identical specs.
SyntheticCorpus generate_synthetic(const SyntheticSpec& spec);

/// Class map implied by a layout: 3 enhancing, 1 core, 2 edema, 0 background.
LabelMask rasterize_layout(const TumorLayout& layout, int height, int width);

/// Directory of per-sample archives plus manifest.json (generator settings + digests).
void save_corpus(const SyntheticCorpus& corpus, const SyntheticSpec& spec, const std::filesystem::path& dir);
SyntheticCorpus load_corpus(const std::filesystem::path& dir, SyntheticSpec* spec_out = nullptr);
/// True when dir holds a corpus written from exactly these settings.
bool corpus_matches(const std::filesystem::path& dir, const SyntheticSpec& spec);

// ---- real volumes ----

/// Maps modality roles and the optional label map to file-name patterns
/// relative to a case directory; "{case}" expands to the directory name.
struct LayoutDescriptor {
  std::vector<std::string> roles{"T1", "T1ce", "T2", "FLAIR"};
  std::map<std::string, std::string> modality_patterns{{"T1", "{case}_t1.nii.gz"},
                                                      {"T1ce", "{case}_t1ce.nii.gz"},
                                                      {"T2", "{case}_t2.nii.gz"},
                                                      {"FLAIR", "{case}_flair.nii.gz"}};
  std::optional<std::string> label_pattern = std::string("{case}_seg.nii.gz");
  bool drop_empty_slices = false;  // drop slices without tumour labels
  int slice_step = 1;

  bool operator==(const LayoutDescriptor&) const = default;
};

struct VolumeStack {
  std::vector<Volume> slices;
  std::optional<std::vector<LabelMask>> labels;
};

VolumeStack load_volume_stack(const std::filesystem::path& case_dir, const LayoutDescriptor& layout);

/// BraTS labels {0,1,2,4} -> contiguous {0,1,2,3}; anything else throws.
std::int32_t remap_brats_label(std::int32_t raw);
std::int32_t unmap_brats_label(std::int32_t contiguous);

/// Z-scores the nonzero voxels of one channel; zeros stay zero and a
/// near-constant channel becomes all zero.
void normalize_nonzero(Eigen::Ref<Eigen::Matrix<float, 1, Eigen::Dynamic>> channel, double var_floor = 1e-8);

/// Minimal NIfTI-1 volume (x fastest, then y, then z), optionally gzipped.
struct NiftiVolume {
  std::array<int, 3> dims{1, 1, 1};
  std::array<float, 3> spacing{1, 1, 1};
  std::vector<float> voxels;
};

NiftiVolume read_nifti(const std::filesystem::path& path);
void write_nifti(const std::filesystem::path& path, const NiftiVolume& volume);

}  // namespace tsseg
