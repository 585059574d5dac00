#include "tsseg/student.hpp"

#include "tsseg/config.hpp"
#include "tsseg/seeding.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace tsseg {

void CurriculumSchedule::validate() const {
  if (stages.empty()) throw std::invalid_argument("schedule.stages: must not be empty");
  for (size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    if (!(s.fraction > 0 && s.fraction <= 1))
      throw std::invalid_argument("schedule.stages[" + std::to_string(i) + "].fraction: must lie in (0, 1]");
    if (s.epochs < 1) throw std::invalid_argument("schedule.stages[" + std::to_string(i) + "].epochs: must be >= 1");
    if (i > 0 && !(s.fraction > stages[i - 1].fraction))
      throw std::invalid_argument("schedule.stages[" + std::to_string(i) + "].fraction: must be strictly increasing");
  }
  if (stages.back().fraction != 1.0) throw std::invalid_argument("schedule.stages: final fraction must be 1.0");
}

CurriculumSchedule parse_schedule(const std::string& text) {
  CurriculumSchedule sched;
  sched.stages.clear();
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw std::invalid_argument("schedule: expected fraction:epochs, got '" + item + "'");
    try {
      sched.stages.push_back({std::stod(item.substr(0, colon)), std::stoi(item.substr(colon + 1))});
    } catch (const std::logic_error&) {
      throw std::invalid_argument("schedule: cannot parse '" + item + "'");
    }
  }
  sched.validate();
  return sched;
}

void StudentTrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("student.batch_size: must be >= 1");
  if (!(learning_rate > 0)) throw std::invalid_argument("student.learning_rate: must be > 0");
}

double resolve_threshold(const LossConfig& loss, const std::vector<PseudoLabeledSample>& pool,
                         const std::vector<size_t>& selected) {
  if (loss.threshold_mode == ThresholdMode::Fixed || selected.empty()) return loss.tau_p;
  std::vector<double> values;
  for (size_t i : selected)
    for (Eigen::Index p = 0; p < pool[i].confidence.data.size(); ++p) values.push_back(pool[i].confidence.data(0, p));
  return percentile(std::move(values), loss.percentile);
}

EvalResult evaluate_student(const Checkpoint& student, const LabeledSet& val, const LossConfig& loss) {
  if (val.empty()) throw std::invalid_argument("evaluate_student: validation set is empty");
  return evaluate_model(student.params, student.config, val, loss);
}

namespace {

enum Stream : std::uint64_t { kInit = 101, kDropout = 102, kFlip = 103 };

// One training item of the mixed set: a labeled sample or a pool entry.
struct Item {
  const LabeledSample* labeled = nullptr;
  const PseudoLabeledSample* pseudo = nullptr;
};

}  // namespace

CurriculumResult run_curriculum(const LabeledSet& labeled, std::vector<PseudoLabeledSample> pool,
                                const LabeledSet& val, const Checkpoint& teacher, const CurriculumSchedule& schedule,
                                const LossConfig& loss, const StudentTrainConfig& train, double agreement_damping) {
  schedule.validate();
  loss.validate();
  train.validate();
  if (val.empty()) throw std::invalid_argument("run_curriculum: validation set is empty");
  const BackboneConfig& cfg = teacher.config;

  CurriculumResult result;
  BackboneParameters<float> params = init_parameters<float>(cfg, derive_seed(train.seed, {kInit}));
  Adam adam(params, train.learning_rate);
  BackboneParameters<float> grads = params.zeros_like();
  result.student = Checkpoint{cfg, params};
  result.initial_val_dice = evaluate_model(params, cfg, val, loss).dice;

  // Teacher argmax (deterministic pass) is fixed; compute it once for refinement.
  std::vector<IndexGrid> teacher_labels;
  if (schedule.stages.size() > 1)
    for (const auto& s : pool)
      teacher_labels.push_back(argmax_over_classes(forward(s.volume.image, teacher.params, cfg).probs));

  double best_overall = -1, previous_best = result.initial_val_dice;
  int global_epoch = 0;
  for (size_t t = 0; t < schedule.stages.size() && !result.aborted; ++t) {
    const auto& stage = schedule.stages[t];
    const int stage_no = static_cast<int>(t) + 1;
    const StageSelection sel = select_stage(pool, stage.fraction, stage_no);
    const double tau = resolve_threshold(loss, pool, sel.indices);
    result.stage_start_digests.push_back(Checkpoint{cfg, params}.digest());

    std::vector<Item> items;
    for (const auto& s : labeled) items.push_back({&s, nullptr});
    for (size_t i : sel.indices) items.push_back({nullptr, &pool[i]});

    StageReport report;
    report.stage = stage_no;
    report.fraction = stage.fraction;
    report.samples_used = static_cast<int>(items.size());
    report.pseudo_used = static_cast<int>(sel.indices.size());
    report.tau = tau;
    report.best_val_dice = -1;
    report.best_val_loss = std::numeric_limits<double>::infinity();

    for (int e = 0; e < stage.epochs && !result.aborted; ++e) {
      ++global_epoch;
      const auto order = epoch_order(items.size(), train.seed, global_epoch);
      OverlapCounter train_counter(cfg.num_classes);
      double train_loss = 0;
      int labeled_seen = 0;
      BackboneParameters<float> before = params;
      for (size_t start = 0; start < order.size(); start += train.batch_size) {
        const size_t end = std::min(order.size(), start + static_cast<size_t>(train.batch_size));
        const float inv_batch = 1.0f / float(end - start);
        grads.set_zero();
        double batch_loss = 0;
        try {
          for (size_t b = start; b < end; ++b) {
            const Item& item = items[order[b]];
            const Volume& vol = item.labeled ? item.labeled->volume : item.pseudo->volume;
            const std::uint64_t key = derive_seed(static_cast<std::uint64_t>(global_epoch), {fnv1a(vol.id)});
            Tensor<float> image = vol.image;
            LabelMask mask = item.labeled ? item.labeled->mask : item.pseudo->labels;
            Tensor<float> conf = item.pseudo ? item.pseudo->confidence : Tensor<float>();
            if (train.augment_flips) {
              std::mt19937_64 flip_rng(derive_seed(train.seed, {kFlip, key}));
              if (std::bernoulli_distribution(0.5)(flip_rng)) {
                image = flip_horizontal(image);
                mask = flip_horizontal(mask);
                if (item.pseudo) conf = flip_horizontal(conf);
              }
            }
            DropoutRng rng(derive_seed(train.seed, {kDropout, key}));
            ForwardTrace<float> trace;
            const auto out = forward(image, params, cfg, &rng, &trace);
            Tensor<float> dprobs;
            if (item.labeled) {
              auto sup = supervised_loss_grad(out.probs, onehot<float>(mask, cfg.num_classes), loss);
              batch_loss += sup.value;
              train_loss += sup.value;
              ++labeled_seen;
              dprobs = std::move(sup.dprobs);
            } else {
              auto high = high_conf_loss_grad(out.probs, mask, conf, tau);
              auto low = low_conf_loss_grad(out.probs, mask, conf, tau, loss.kappa);
              batch_loss += loss.lambda_high * high.value - loss.lambda_low * low.value;
              const Planes<float> mixed =
                  float(loss.lambda_high) * high.dprobs.data - float(loss.lambda_low) * low.dprobs.data;
              dprobs = Tensor<float>(mixed, out.probs.height, out.probs.width);
            }
            Tensor<float> dlogits = softmax_backward(out.probs, dprobs);
            dlogits.data *= inv_batch;
            backward(trace, params, cfg, dlogits, Tensor<float>(1, image.height, image.width), grads);
            if (item.labeled) train_counter.add(mask_from_argmax(out.probs), mask);
          }
        } catch (const NonFiniteError&) {
          batch_loss = std::numeric_limits<double>::quiet_NaN();
        }
        add_weight_decay(params, loss.lambda_reg, grads);
        if (!std::isfinite(batch_loss) || !grads.all_finite()) {
          result.aborted = true;
          params = before;
          break;
        }
        adam.step(params, grads);
        if (!params.all_finite()) {
          result.aborted = true;
          params = before;
          break;
        }
      }
      if (result.aborted) break;

      const EvalResult ev = evaluate_model(params, cfg, val, loss);
      EpochRecord rec;
      rec.epoch = global_epoch;
      rec.stage = stage_no;
      rec.train_loss = labeled_seen ? train_loss / labeled_seen : 0.0;
      rec.train_dice = train_counter.macro_dice();
      rec.val_loss = ev.loss;
      rec.val_dice = ev.dice;
      rec.accuracy = ev.accuracy;
      result.history.push_back(rec);
      report.best_val_loss = std::min(report.best_val_loss, ev.loss);
      if (ev.dice > report.best_val_dice) report.best_val_dice = ev.dice;
      if (ev.dice > best_overall) {
        best_overall = ev.dice;
        result.student.params = params;
      }
    }
    if (report.best_val_dice < 0) break;  // aborted before any epoch finished
    report.dice_gain = report.best_val_dice - previous_best;
    previous_best = report.best_val_dice;
    result.reports.push_back(report);
    result.stage_end_digests.push_back(Checkpoint{cfg, params}.digest());

    if (!result.aborted && t + 1 < schedule.stages.size())
      refine_by_agreement(pool, teacher_labels, Checkpoint{cfg, params}, agreement_damping, stage_no);
  }
  result.pool = std::move(pool);
  return result;
}

CurriculumResult run_curriculum(const LabeledSet& labeled, const UnlabeledSet& unlabeled, const LabeledSet& val,
                                const Checkpoint& teacher, const CurriculumSchedule& schedule, const LossConfig& loss,
                                const StudentTrainConfig& train, const PseudoLabelConfig& pseudo) {
  pseudo.validate();
  return run_curriculum(labeled, generate_pseudolabels(unlabeled, teacher, pseudo.passes, pseudo.seed), val, teacher,
                        schedule, loss, train, pseudo.agreement_damping);
}

std::string stage_reports_to_jsonl(const std::vector<StageReport>& reports) {
  std::ostringstream out;
  for (const auto& r : reports) out << nlohmann::json(r).dump() << '\n';
  return out.str();
}

std::vector<StageReport> stage_reports_from_jsonl(const std::string& text) {
  std::vector<StageReport> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line).get<StageReport>());
  return out;
}

}  // namespace tsseg
