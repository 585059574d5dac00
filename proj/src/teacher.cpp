#include "tsseg/teacher.hpp"

#include "tsseg/seeding.hpp"

#include <cmath>
#include <limits>

namespace tsseg {

void TeacherTrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("teacher." + field + ": " + why);
  };
  if (epochs < 1) fail("epochs", "must be >= 1");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (!(learning_rate > 0)) fail("learning_rate", "must be > 0");
  if (passes < 2) fail("passes", "must be >= 2");
  if (!(uncertainty_weight >= 0)) fail("uncertainty_weight", "must be >= 0");
}

namespace {
enum Stream : std::uint64_t { kInit = 1, kTrainDropout = 2, kTargetDropout = 3, kFlip = 4 };
}

TeacherResult train_teacher(const LabeledSet& labeled, const LabeledSet& val, const BackboneConfig& backbone,
                            const TeacherTrainConfig& cfg, const LossConfig& loss) {
  if (labeled.empty()) throw std::invalid_argument("train_teacher: labeled set is empty");
  backbone.validate();
  cfg.validate();
  loss.validate();
  validate_set(labeled);
  if (!val.empty()) validate_set(val);

  BackboneParameters<float> params = init_parameters<float>(backbone, derive_seed(cfg.seed, {kInit}));
  Adam adam(params, cfg.learning_rate);
  BackboneParameters<float> grads = params.zeros_like();

  TeacherResult result;
  result.checkpoint = Checkpoint{backbone, params};
  double best = -1;
  const bool distill = cfg.distill_uncertainty;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = epoch_order(labeled.size(), cfg.seed, epoch);
    OverlapCounter train_counter(backbone.num_classes);
    double train_loss = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      const float inv_batch = 1.0f / float(end - start);
      grads.set_zero();
      double batch_loss = 0;
      try {
        for (size_t b = start; b < end; ++b) {
          const auto& sample = labeled[order[b]];
          const std::uint64_t step_key = static_cast<std::uint64_t>(epoch) * 1000003u + order[b];
          Tensor<float> image = sample.volume.image;
          LabelMask mask = sample.mask;
          if (cfg.augment_flips) {
            std::mt19937_64 flip_rng(derive_seed(cfg.seed, {kFlip, step_key}));
            if (std::bernoulli_distribution(0.5)(flip_rng)) {
              image = flip_horizontal(image);
              mask = flip_horizontal(mask);
            }
          }
          Tensor<float> target_logvar;
          if (distill) {
            DropoutRng target_rng(derive_seed(cfg.seed, {kTargetDropout, step_key}));
            std::vector<Tensor<float>> passes;
            for (int k = 0; k < cfg.passes; ++k) passes.push_back(forward(image, params, backbone, &target_rng).probs);
            target_logvar = uncertainty_target(passes, loss.var_floor);
          }
          DropoutRng rng(derive_seed(cfg.seed, {kTrainDropout, step_key}));
          ForwardTrace<float> trace;
          const auto out = forward(image, params, backbone, &rng, &trace);
          const auto target = onehot<float>(mask, backbone.num_classes);
          auto sup = supervised_loss_grad(out.probs, target, loss);
          Tensor<float> dlogits = softmax_backward(out.probs, sup.dprobs);
          dlogits.data *= inv_batch;
          Tensor<float> dlogvar(1, image.height, image.width);
          double unc = 0;
          if (distill) {
            auto reg = uncertainty_regression_grad(out.logvar, target_logvar);
            unc = reg.value;
            dlogvar.data = reg.dprobs.data * float(cfg.uncertainty_weight) * inv_batch;
          }
          backward(trace, params, backbone, dlogits, dlogvar, grads);
          batch_loss += sup.value + cfg.uncertainty_weight * unc;
          train_loss += sup.value;
          train_counter.add(mask_from_argmax(out.probs), mask);
        }
      } catch (const NonFiniteError&) {
        batch_loss = std::numeric_limits<double>::quiet_NaN();
      }
      add_weight_decay(params, loss.lambda_reg, grads);
      if (!std::isfinite(batch_loss) || !grads.all_finite()) {
        result.diverged = true;
        break;
      }
      adam.step(params, grads);
      if (!params.all_finite()) {
        result.diverged = true;
        break;
      }
    }
    if (result.diverged) break;

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_loss / double(labeled.size());
    rec.train_dice = train_counter.macro_dice();
    double score = rec.train_dice;
    if (!val.empty()) {
      const EvalResult ev = evaluate_model(params, backbone, val, loss);
      rec.val_loss = ev.loss;
      rec.val_dice = ev.dice;
      rec.accuracy = ev.accuracy;
      score = ev.dice;
    } else {
      rec.accuracy = train_counter.accuracy();
    }
    result.history.push_back(rec);
    if (score > best) {
      best = score;
      result.best_epoch = epoch;
      result.checkpoint.params = params;
    }
  }
  return result;
}

TeacherPrediction teacher_predict(const Volume& x, const Checkpoint& teacher, int passes, std::uint64_t seed) {
  if (passes < 1) throw std::invalid_argument("teacher_predict: passes must be >= 1");
  DropoutRng rng(derive_seed(seed, {fnv1a(x.id)}));
  TeacherPrediction out;
  for (int k = 0; k < passes; ++k) {
    const auto probs = forward(x.image, teacher.params, teacher.config, &rng).probs;
    if (k == 0) out.mean_probs = probs;
    else out.mean_probs.data += probs.data;
  }
  out.mean_probs.data /= float(passes);
  out.logvar = forward(x.image, teacher.params, teacher.config).logvar;
  return out;
}

}  // namespace tsseg
