#include "tsseg/config.hpp"

#include "tsseg/archive.hpp"
#include "tsseg/seeding.hpp"

#include <set>

namespace tsseg {

namespace {

using nlohmann::json;

/// Reads named fields out of one JSON object and remembers which keys
/// were consumed so that leftovers can be reported.
class Reader {
 public:
  Reader(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError(where("") + "expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const ConfigError&) {
      throw;
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + describe(*it, e));
    }
  }

  /// Nested object parsed by a reader-aware function.
  template <typename Fn>
  void nested(const char* key, Fn&& fn) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it != j_.end()) fn(*it, where(key, false));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(where(it.key()) + "unknown field");
  }

 private:
  std::string where(const std::string& key, bool colon = true) const {
    std::string p = prefix_;
    if (!key.empty()) p += (p.empty() ? "" : ".") + key;
    return colon ? (p.empty() ? "" : p + ": ") : p;
  }
  static std::string describe(const json& v, const json::exception&) {
    return "value " + v.dump() + " has the wrong type";
  }

  const json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

// Section parsers take the field path so nested diagnostics are complete.
void read_backbone(const json& j, BackboneConfig& c, const std::string& at) {
  Reader r(j, at);
  r.get("in_channels", c.in_channels);
  r.get("num_classes", c.num_classes);
  r.get("base_width", c.base_width);
  r.get("depth", c.depth);
  r.get("dilation_rates", c.dilation_rates);
  r.get("token_dim", c.token_dim);
  r.get("heads", c.heads);
  r.get("ff_mult", c.ff_mult);
  r.get("dropout_rate", c.dropout_rate);
  r.get("input_height", c.input_height);
  r.get("input_width", c.input_width);
  r.finish();
}

void read_loss(const json& j, LossConfig& c, const std::string& at) {
  Reader r(j, at);
  r.get("lambda_ce", c.lambda_ce);
  r.get("lambda_reg", c.lambda_reg);
  r.get("lambda_high", c.lambda_high);
  r.get("lambda_low", c.lambda_low);
  r.get("epsilon", c.epsilon);
  r.get("tau_p", c.tau_p);
  r.get("kappa", c.kappa);
  r.get("var_floor", c.var_floor);
  std::string mode = c.threshold_mode == ThresholdMode::Fixed ? "fixed" : "percentile";
  r.get("threshold_mode", mode);
  if (mode == "fixed") c.threshold_mode = ThresholdMode::Fixed;
  else if (mode == "percentile") c.threshold_mode = ThresholdMode::Percentile;
  else throw ConfigError(at + ".threshold_mode: expected \"fixed\" or \"percentile\", got \"" + mode + "\"");
  r.get("percentile", c.percentile);
  r.finish();
}

void read_teacher(const json& j, TeacherTrainConfig& c, const std::string& at) {
  Reader r(j, at);
  r.get("epochs", c.epochs);
  r.get("batch_size", c.batch_size);
  r.get("learning_rate", c.learning_rate);
  r.get("passes", c.passes);
  r.get("seed", c.seed);
  r.get("uncertainty_weight", c.uncertainty_weight);
  r.get("distill_uncertainty", c.distill_uncertainty);
  r.get("augment_flips", c.augment_flips);
  r.finish();
}

void read_schedule(const json& j, CurriculumSchedule& c, const std::string& at) {
  if (j.is_string()) {
    try {
      c = parse_schedule(j.get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(at + ": " + e.what());
    }
    return;
  }
  if (!j.is_array()) throw ConfigError(at + ": expected an array of {fraction, epochs} or a \"f:e,...\" string");
  c.stages.clear();
  for (size_t i = 0; i < j.size(); ++i) {
    CurriculumStage s;
    Reader r(j[i], at + "[" + std::to_string(i) + "]");
    r.get("fraction", s.fraction);
    r.get("epochs", s.epochs);
    r.finish();
    c.stages.push_back(s);
  }
}

void read_student(const json& j, StudentTrainConfig& c, const std::string& at) {
  Reader r(j, at);
  r.get("batch_size", c.batch_size);
  r.get("learning_rate", c.learning_rate);
  r.get("seed", c.seed);
  r.get("augment_flips", c.augment_flips);
  r.finish();
}

void read_pseudo(const json& j, PseudoLabelConfig& c, const std::string& at) {
  Reader r(j, at);
  r.get("passes", c.passes);
  r.get("agreement_damping", c.agreement_damping);
  r.get("seed", c.seed);
  r.finish();
}

void read_synthetic(const json& j, SyntheticSpec& c, const std::string& at) {
  Reader r(j, at);
  r.get("count", c.count);
  r.get("height", c.height);
  r.get("width", c.width);
  r.get("modalities", c.modalities);
  r.get("labeled_fraction", c.labeled_fraction);
  r.get("val_fraction", c.val_fraction);
  r.get("noise_sigma", c.noise_sigma);
  r.get("edema_radius_min", c.edema_radius_min);
  r.get("edema_radius_max", c.edema_radius_max);
  r.get("core_ratio_min", c.core_ratio_min);
  r.get("core_ratio_max", c.core_ratio_max);
  r.get("enhancing_ratio_min", c.enhancing_ratio_min);
  r.get("enhancing_ratio_max", c.enhancing_ratio_max);
  r.get("seed", c.seed);
  r.finish();
}

void read_layout(const json& j, LayoutDescriptor& c, const std::string& at) {
  Reader r(j, at);
  r.get("roles", c.roles);
  r.get("modality_patterns", c.modality_patterns);
  r.get("label_pattern", c.label_pattern);
  r.get("drop_empty_slices", c.drop_empty_slices);
  r.get("slice_step", c.slice_step);
  r.finish();
}

void read_data(const json& j, DataSource& c, const std::string& at) {
  Reader r(j, at);
  r.get("kind", c.kind);
  r.nested("synthetic", [&](const json& v, const std::string& p) { read_synthetic(v, c.synthetic, p); });
  r.nested("layout", [&](const json& v, const std::string& p) { read_layout(v, c.layout, p); });
  r.get("root", c.root);
  r.get("labeled_cases", c.labeled_cases);
  r.get("unlabeled_cases", c.unlabeled_cases);
  r.get("val_cases", c.val_cases);
  r.finish();
}

void read_run(const json& j, RunConfig& c) {
  Reader r(j, "");
  r.nested("backbone", [&](const json& v, const std::string& p) { read_backbone(v, c.backbone, p); });
  r.nested("loss", [&](const json& v, const std::string& p) { read_loss(v, c.loss, p); });
  r.nested("teacher", [&](const json& v, const std::string& p) { read_teacher(v, c.teacher, p); });
  r.nested("schedule", [&](const json& v, const std::string& p) { read_schedule(v, c.schedule, p); });
  r.nested("student", [&](const json& v, const std::string& p) { read_student(v, c.student, p); });
  r.nested("pseudolabel", [&](const json& v, const std::string& p) { read_pseudo(v, c.pseudolabel, p); });
  r.nested("data", [&](const json& v, const std::string& p) { read_data(v, c.data, p); });
  r.get("output_dir", c.output_dir);
  r.get("seed", c.seed);
  r.finish();
}

template <typename T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

template <typename T>
std::optional<T> optional_from(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->template get<T>();
}

}  // namespace

void to_json(json& j, const BackboneConfig& c) {
  j = {{"in_channels", c.in_channels}, {"num_classes", c.num_classes}, {"base_width", c.base_width},
       {"depth", c.depth}, {"dilation_rates", c.dilation_rates}, {"token_dim", c.token_dim},
       {"heads", c.heads}, {"ff_mult", c.ff_mult}, {"dropout_rate", c.dropout_rate},
       {"input_height", c.input_height}, {"input_width", c.input_width}};
}
void from_json(const json& j, BackboneConfig& c) { read_backbone(j, c, "backbone"); }

void to_json(json& j, const LossConfig& c) {
  j = {{"lambda_ce", c.lambda_ce}, {"lambda_reg", c.lambda_reg}, {"lambda_high", c.lambda_high},
       {"lambda_low", c.lambda_low}, {"epsilon", c.epsilon}, {"tau_p", c.tau_p}, {"kappa", c.kappa},
       {"var_floor", c.var_floor},
       {"threshold_mode", c.threshold_mode == ThresholdMode::Fixed ? "fixed" : "percentile"},
       {"percentile", c.percentile}};
}
void from_json(const json& j, LossConfig& c) { read_loss(j, c, "loss"); }

void to_json(json& j, const TeacherTrainConfig& c) {
  j = {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
       {"passes", c.passes}, {"seed", c.seed}, {"uncertainty_weight", c.uncertainty_weight},
       {"distill_uncertainty", c.distill_uncertainty}, {"augment_flips", c.augment_flips}};
}
void from_json(const json& j, TeacherTrainConfig& c) { read_teacher(j, c, "teacher"); }

void to_json(json& j, const CurriculumSchedule& c) {
  j = json::array();
  for (const auto& s : c.stages) j.push_back({{"fraction", s.fraction}, {"epochs", s.epochs}});
}
void from_json(const json& j, CurriculumSchedule& c) { read_schedule(j, c, "schedule"); }

void to_json(json& j, const StudentTrainConfig& c) {
  j = {{"batch_size", c.batch_size}, {"learning_rate", c.learning_rate}, {"seed", c.seed},
       {"augment_flips", c.augment_flips}};
}
void from_json(const json& j, StudentTrainConfig& c) { read_student(j, c, "student"); }

void to_json(json& j, const PseudoLabelConfig& c) {
  j = {{"passes", c.passes}, {"agreement_damping", c.agreement_damping}, {"seed", c.seed}};
}
void from_json(const json& j, PseudoLabelConfig& c) { read_pseudo(j, c, "pseudolabel"); }

void to_json(json& j, const SyntheticSpec& c) {
  j = {{"count", c.count}, {"height", c.height}, {"width", c.width}, {"modalities", c.modalities},
       {"labeled_fraction", c.labeled_fraction}, {"val_fraction", c.val_fraction},
       {"noise_sigma", c.noise_sigma}, {"edema_radius_min", c.edema_radius_min},
       {"edema_radius_max", c.edema_radius_max}, {"core_ratio_min", c.core_ratio_min},
       {"core_ratio_max", c.core_ratio_max}, {"enhancing_ratio_min", c.enhancing_ratio_min},
       {"enhancing_ratio_max", c.enhancing_ratio_max}, {"seed", c.seed}};
}
void from_json(const json& j, SyntheticSpec& c) { read_synthetic(j, c, "synthetic"); }

void to_json(json& j, const LayoutDescriptor& c) {
  j = {{"roles", c.roles}, {"modality_patterns", c.modality_patterns}, {"label_pattern", optional_json(c.label_pattern)},
       {"drop_empty_slices", c.drop_empty_slices}, {"slice_step", c.slice_step}};
}
void from_json(const json& j, LayoutDescriptor& c) { read_layout(j, c, "layout"); }

void to_json(json& j, const DataSource& c) {
  j = {{"kind", c.kind}, {"synthetic", c.synthetic}, {"layout", c.layout}, {"root", c.root},
       {"labeled_cases", c.labeled_cases}, {"unlabeled_cases", c.unlabeled_cases}, {"val_cases", c.val_cases}};
}
void from_json(const json& j, DataSource& c) { read_data(j, c, "data"); }

void to_json(json& j, const RunConfig& c) {
  j = {{"backbone", c.backbone}, {"loss", c.loss},       {"teacher", c.teacher},         {"schedule", c.schedule},
       {"student", c.student},   {"pseudolabel", c.pseudolabel}, {"data", c.data}, {"output_dir", c.output_dir},
       {"seed", c.seed}};
}
void from_json(const json& j, RunConfig& c) { read_run(j, c); }

void to_json(json& j, const EpochRecord& r) {
  j = {{"epoch", r.epoch},           {"stage", r.stage},
       {"train_loss", r.train_loss}, {"val_loss", optional_json(r.val_loss)},
       {"train_dice", r.train_dice}, {"val_dice", optional_json(r.val_dice)},
       {"accuracy", r.accuracy}};
}
void from_json(const json& j, EpochRecord& r) {
  r.epoch = j.at("epoch");
  r.stage = j.at("stage");
  r.train_loss = j.at("train_loss");
  r.val_loss = optional_from<double>(j, "val_loss");
  r.train_dice = j.at("train_dice");
  r.val_dice = optional_from<double>(j, "val_dice");
  r.accuracy = j.at("accuracy");
}

void to_json(json& j, const StageReport& r) {
  j = {{"stage", r.stage},           {"fraction", r.fraction},         {"best_val_loss", r.best_val_loss},
       {"best_val_dice", r.best_val_dice}, {"dice_gain", r.dice_gain}, {"samples_used", r.samples_used},
       {"pseudo_used", r.pseudo_used}, {"tau", r.tau}};
}
void from_json(const json& j, StageReport& r) {
  r.stage = j.at("stage");
  r.fraction = j.at("fraction");
  r.best_val_loss = j.at("best_val_loss");
  r.best_val_dice = j.at("best_val_dice");
  r.dice_gain = j.at("dice_gain");
  r.samples_used = j.at("samples_used");
  r.pseudo_used = j.at("pseudo_used");
  r.tau = j.at("tau");
}

void RunConfig::validate() const {
  auto wrap = [](const char* section, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      const std::string msg = e.what();
      // Module validators already prefix their own section name.
      throw ConfigError(msg.rfind(section, 0) == 0 ? msg : std::string(section) + "." + msg);
    }
  };
  wrap("backbone", [&] { backbone.validate(); });
  wrap("loss", [&] { loss.validate(); });
  wrap("teacher", [&] { teacher.validate(); });
  wrap("schedule", [&] { schedule.validate(); });
  wrap("student", [&] { student.validate(); });
  wrap("pseudolabel", [&] { pseudolabel.validate(); });
  if (data.kind == "synthetic") {
    wrap("data", [&] { data.synthetic.validate(); });
    if (data.synthetic.modalities != backbone.in_channels)
      throw ConfigError("data.synthetic.modalities: " + std::to_string(data.synthetic.modalities) +
                        " does not match backbone.in_channels = " + std::to_string(backbone.in_channels));
    if (data.synthetic.height != backbone.input_height || data.synthetic.width != backbone.input_width)
      throw ConfigError("data.synthetic.height: corpus size differs from backbone.input_height/input_width");
  } else if (data.kind == "layout") {
    if (data.root.empty()) throw ConfigError("data.root: required when data.kind is \"layout\"");
    if (data.labeled_cases.empty()) throw ConfigError("data.labeled_cases: at least one labeled case is required");
    if (static_cast<int>(data.layout.roles.size()) != backbone.in_channels)
      throw ConfigError("data.layout.roles: role count does not match backbone.in_channels");
    if (data.layout.slice_step < 1) throw ConfigError("data.layout.slice_step: must be >= 1");
  } else {
    throw ConfigError("data.kind: expected \"synthetic\" or \"layout\", got \"" + data.kind + "\"");
  }
  if (output_dir.empty()) throw ConfigError("output_dir: must not be empty");
}

RunConfig with_master_seed(const RunConfig& cfg) {
  RunConfig out = cfg;
  if (cfg.seed == 0) return out;
  out.teacher.seed = derive_seed(cfg.seed, {1});
  out.pseudolabel.seed = derive_seed(cfg.seed, {2});
  out.student.seed = derive_seed(cfg.seed, {3});
  out.data.synthetic.seed = derive_seed(cfg.seed, {4});
  return out;
}

RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: not valid JSON (") + e.what() + ")");
  }
  RunConfig c;
  read_run(j, c);
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config: file '" + path.string() + "' does not exist");
  return parse_run_config(read_text(path));
}

std::string dump_run_config(const RunConfig& cfg) { return json(cfg).dump(2) + "\n"; }

}  // namespace tsseg
