#pragma once

// JSON forms of every configuration and record type, plus the run
// configuration consumed by the command-line tool. Parsing is strict:
// unknown keys and wrongly typed values are rejected with the full field
// path, while absent keys keep their defaults.

#include "tsseg/dataio.hpp"
#include "tsseg/student.hpp"

#include <nlohmann/json.hpp>

namespace tsseg {

/// Raised for malformed configuration; the message starts with the field path.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataSource {
  std::string kind = "synthetic";  // "synthetic" or "layout"
  SyntheticSpec synthetic;
  LayoutDescriptor layout;
  std::string root;  // case directories live here when kind == "layout"
  std::vector<std::string> labeled_cases, unlabeled_cases, val_cases;

  bool operator==(const DataSource&) const = default;
};

struct RunConfig {
  BackboneConfig backbone;
  LossConfig loss;
  TeacherTrainConfig teacher;
  CurriculumSchedule schedule;
  StudentTrainConfig student;
  PseudoLabelConfig pseudolabel;
  DataSource data;
  std::string output_dir = "runs/quickstart";
  /// Nonzero overrides the per-module seeds (see with_master_seed).
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

/// Copy of cfg with the teacher, student, pseudo-label and corpus seeds
/// derived from cfg.seed; unchanged when cfg.seed is 0.
RunConfig with_master_seed(const RunConfig& cfg);

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string dump_run_config(const RunConfig& cfg);

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);
void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);
void to_json(nlohmann::json& j, const TeacherTrainConfig& c);
void from_json(const nlohmann::json& j, TeacherTrainConfig& c);
void to_json(nlohmann::json& j, const CurriculumSchedule& c);
void from_json(const nlohmann::json& j, CurriculumSchedule& c);
void to_json(nlohmann::json& j, const StudentTrainConfig& c);
void from_json(const nlohmann::json& j, StudentTrainConfig& c);
void to_json(nlohmann::json& j, const PseudoLabelConfig& c);
void from_json(const nlohmann::json& j, PseudoLabelConfig& c);
void to_json(nlohmann::json& j, const SyntheticSpec& c);
void from_json(const nlohmann::json& j, SyntheticSpec& c);
void to_json(nlohmann::json& j, const LayoutDescriptor& c);
void from_json(const nlohmann::json& j, LayoutDescriptor& c);
void to_json(nlohmann::json& j, const DataSource& c);
void from_json(const nlohmann::json& j, DataSource& c);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);
void to_json(nlohmann::json& j, const EpochRecord& r);
void from_json(const nlohmann::json& j, EpochRecord& r);
void to_json(nlohmann::json& j, const StageReport& r);
void from_json(const nlohmann::json& j, StageReport& r);

}  // namespace tsseg
