#include "tsseg/pseudolabel.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

namespace tsseg {

void PseudoLabelConfig::validate() const {
  if (passes < 1) throw std::invalid_argument("pseudolabel.passes: must be >= 1");
  if (!(agreement_damping > 0 && agreement_damping <= 1))
    throw std::invalid_argument("pseudolabel.agreement_damping: must lie in (0, 1]");
}

PseudoLabeledSample make_pseudolabeled(const Volume& x, const TeacherPrediction& pred) {
  PseudoLabeledSample s;
  s.volume = x;
  s.labels = mask_from_argmax(pred.mean_probs);
  s.soft = pred.mean_probs;
  s.confidence = pixel_confidence(pred.mean_probs, pred.logvar);
  s.image_confidence = image_confidence(s.confidence);
  return s;
}

std::vector<PseudoLabeledSample> generate_pseudolabels(const UnlabeledSet& unlabeled, const Checkpoint& teacher,
                                                       int passes, std::uint64_t seed) {
  std::vector<PseudoLabeledSample> out;
  out.reserve(unlabeled.size());
  for (const auto& x : unlabeled) out.push_back(make_pseudolabeled(x, teacher_predict(x, teacher, passes, seed)));
  return out;
}

size_t selection_size(double fraction, size_t n) {
  if (!(fraction > 0 && fraction <= 1)) throw std::invalid_argument("select_stage: fraction must lie in (0, 1]");
  const double k = std::ceil(fraction * double(n) - 1e-9);
  return std::min(n, static_cast<size_t>(std::max(0.0, k)));
}

StageSelection select_stage(const std::vector<PseudoLabeledSample>& samples, double fraction, int stage) {
  StageSelection sel;
  sel.stage = stage;
  sel.fraction = fraction;
  const size_t keep = selection_size(fraction, samples.size());
  std::vector<size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (samples[a].image_confidence != samples[b].image_confidence)
      return samples[a].image_confidence > samples[b].image_confidence;
    return samples[a].id() < samples[b].id();
  });
  order.resize(keep);
  sel.indices = order;
  for (size_t i : order) sel.ids.push_back(samples[i].id());
  return sel;
}

void refine_by_agreement(std::vector<PseudoLabeledSample>& samples, const std::vector<IndexGrid>& teacher_labels,
                         const Checkpoint& student, double alpha, int stage) {
  if (!(alpha > 0 && alpha <= 1)) throw std::invalid_argument("refine_by_agreement: alpha must lie in (0, 1]");
  if (teacher_labels.size() != samples.size()) throw std::invalid_argument("refine_by_agreement: label count mismatch");
  for (size_t i = 0; i < samples.size(); ++i) {
    auto& s = samples[i];
    const IndexGrid student_labels = argmax_over_classes(forward(s.volume.image, student.params, student.config).probs);
    const Agreement agree = agreement_map(teacher_labels[i], student_labels);
    for (int p = 0; p < s.confidence.pixels(); ++p)
      if (!agree.map.data()[p]) s.confidence.data(0, p) *= float(alpha);
    s.image_confidence = image_confidence(s.confidence);
    s.provenance = stage;
  }
}

void refine_by_agreement(std::vector<PseudoLabeledSample>& samples, const Checkpoint& teacher,
                         const Checkpoint& student, double alpha, int stage) {
  std::vector<IndexGrid> teacher_labels;
  teacher_labels.reserve(samples.size());
  for (const auto& s : samples)
    teacher_labels.push_back(argmax_over_classes(forward(s.volume.image, teacher.params, teacher.config).probs));
  refine_by_agreement(samples, teacher_labels, student, alpha, stage);
}

namespace {

std::filesystem::path record_path(const std::filesystem::path& dir, const std::string& id) {
  // Slice ids from real volumes look like "case/z042"; keep them flat.
  std::string name = id;
  std::replace(name.begin(), name.end(), '/', '_');
  return dir / (name + ".tsa");
}

std::vector<std::string> ids_of(const UnlabeledSet& unlabeled) {
  std::vector<std::string> ids;
  for (const auto& v : unlabeled) ids.push_back(v.id);
  return ids;
}

}  // namespace

CacheStatus check_pseudolabel_cache(const std::filesystem::path& dir, const std::string& teacher_digest,
                                    const UnlabeledSet& unlabeled) {
  const auto index_path = dir / "index.json";
  if (!std::filesystem::exists(index_path)) return {false, "no cache index"};
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(read_text(index_path));
  } catch (const std::exception& e) {
    return {false, std::string("unreadable cache index: ") + e.what()};
  }
  if (index.value("teacher_digest", "") != teacher_digest) return {false, "teacher checkpoint digest changed"};
  if (index.value("ids", std::vector<std::string>{}) != ids_of(unlabeled)) return {false, "unlabeled id list changed"};
  for (const auto& v : unlabeled)
    if (!std::filesystem::exists(record_path(dir, v.id))) return {false, "missing record for '" + v.id + "'"};
  return {true, "digest match"};
}

void save_pseudolabel_cache(const std::filesystem::path& dir, const std::vector<PseudoLabeledSample>& samples,
                            const std::string& teacher_digest) {
  std::filesystem::create_directories(dir);
  std::filesystem::remove(dir / "index.json");
  std::vector<std::string> ids;
  for (const auto& s : samples) {
    Archive a;
    a.meta = {{"kind", "tsseg-pseudolabel"},
              {"sample_id", s.id()},
              {"image_confidence", s.image_confidence},
              {"provenance", s.provenance},
              {"teacher_digest", teacher_digest},
              {"height", s.labels.height()},
              {"width", s.labels.width()},
              {"num_classes", s.labels.num_classes}};
    a.put("labels", s.labels.classes);
    a.put("confidence", s.confidence.data);
    a.put("soft", s.soft.data);
    a.save(record_path(dir, s.id()));
    ids.push_back(s.id());
  }
  // Index last so an interrupted write never looks like a valid cache.
  write_text_atomic(dir / "index.json", nlohmann::json{{"teacher_digest", teacher_digest}, {"ids", ids}}.dump(2));
}

std::vector<PseudoLabeledSample> load_pseudolabel_cache(const std::filesystem::path& dir,
                                                        const UnlabeledSet& unlabeled) {
  std::vector<PseudoLabeledSample> out;
  for (const auto& v : unlabeled) {
    const Archive a = Archive::load(record_path(dir, v.id));
    if (a.meta.value("sample_id", "") != v.id) throw std::runtime_error("pseudo-label record id mismatch for '" + v.id + "'");
    const int h = a.meta.at("height"), w = a.meta.at("width");
    PseudoLabeledSample s;
    s.volume = v;
    s.labels = make_label_mask(a.get_index("labels"), a.meta.at("num_classes").get<int>());
    s.confidence = Tensor<float>(a.get<float>("confidence"), h, w);
    s.soft = Tensor<float>(a.get<float>("soft"), h, w);
    s.image_confidence = a.meta.at("image_confidence").get<double>();
    s.provenance = a.meta.at("provenance").get<int>();
    out.push_back(std::move(s));
  }
  return out;
}

std::string ranking_csv(const std::vector<PseudoLabeledSample>& samples) {
  std::ostringstream out;
  out << "sample_id,confidence,rank\n";
  if (samples.empty()) return out.str();
  const auto sel = select_stage(samples, 1.0);
  out.precision(9);
  for (size_t r = 0; r < sel.indices.size(); ++r)
    out << samples[sel.indices[r]].id() << ',' << samples[sel.indices[r]].image_confidence << ',' << r + 1 << '\n';
  return out.str();
}

}  // namespace tsseg
