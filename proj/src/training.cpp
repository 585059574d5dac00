#include "tsseg/training.hpp"

#include "tsseg/config.hpp"
#include "tsseg/seeding.hpp"

#include <numeric>
#include <random>
#include <sstream>

namespace tsseg {

Archive Checkpoint::to_archive() const {
  Archive a;
  a.meta["kind"] = "tsseg-checkpoint";
  a.meta["backbone"] = config;
  for (size_t i = 0; i < params.size(); ++i) a.put(params.names()[i], params.at(i));
  return a;
}

Checkpoint Checkpoint::from_archive(const Archive& a) {
  if (a.meta.value("kind", "") != "tsseg-checkpoint") throw std::runtime_error("not a checkpoint archive");
  Checkpoint ck;
  ck.config = a.meta.at("backbone").get<BackboneConfig>();
  ck.params = make_parameters<float>(ck.config);
  for (size_t i = 0; i < ck.params.size(); ++i) {
    Planes<float> m = a.get<float>(ck.params.names()[i]);
    if (m.rows() != ck.params.at(i).rows() || m.cols() != ck.params.at(i).cols())
      throw std::runtime_error("checkpoint: array '" + ck.params.names()[i] + "' has the wrong shape");
    ck.params.at(i) = std::move(m);
  }
  if (!ck.params.all_finite()) throw std::runtime_error("checkpoint: non-finite parameters");
  return ck;
}

std::string Checkpoint::digest() const { return sha256_hex(to_archive().serialize()); }

void Checkpoint::save(const std::filesystem::path& path) const { to_archive().save(path); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) { return from_archive(Archive::load(path)); }

Adam::Adam(const BackboneParameters<float>& like, double learning_rate, double beta1, double beta2, double eps)
    : m_(like.zeros_like()), v_(like.zeros_like()), lr_(learning_rate), b1_(beta1), b2_(beta2), eps_(eps) {}

void Adam::step(BackboneParameters<float>& params, const BackboneParameters<float>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, double(t_)), c2 = 1.0 - std::pow(b2_, double(t_));
  const float step = float(lr_ * std::sqrt(c2) / c1);
  for (size_t i = 0; i < params.size(); ++i) {
    auto m = m_.at(i).array();
    auto v = v_.at(i).array();
    const auto g = grads.at(i).array();
    m = float(b1_) * m + float(1 - b1_) * g;
    v = float(b2_) * v + float(1 - b2_) * g.square();
    params.at(i).array() -= step * m / (v.sqrt() + float(eps_ * std::sqrt(c2)));
  }
}

std::string history_to_jsonl(const TrainHistory& history) {
  std::ostringstream out;
  for (const auto& r : history) out << nlohmann::json(r).dump() << '\n';
  return out.str();
}

TrainHistory history_from_jsonl(const std::string& text) {
  TrainHistory h;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) h.push_back(nlohmann::json::parse(line).get<EpochRecord>());
  return h;
}

EvalResult evaluate_model(const BackboneParameters<float>& params, const BackboneConfig& cfg, const LabeledSet& set,
                          const LossConfig& loss) {
  if (set.empty()) throw std::invalid_argument("evaluate: empty evaluation set");
  OverlapCounter counter(cfg.num_classes);
  EvalResult r;
  for (const auto& s : set) {
    const auto out = forward(s.volume.image, params, cfg);
    const auto target = onehot<float>(s.mask, cfg.num_classes);
    r.loss += supervised_loss_grad(out.probs, target, loss, false).value;
    counter.add(mask_from_argmax(out.probs), s.mask);
  }
  r.loss /= double(set.size());
  r.scores = counter.scores(default_class_names(), false);
  r.dice = r.scores.macro_dice;
  r.accuracy = counter.accuracy();
  return r;
}

void add_weight_decay(const BackboneParameters<float>& params, double lambda_reg, BackboneParameters<float>& grads) {
  if (lambda_reg == 0) return;
  for (size_t i = 0; i < params.size(); ++i) grads.at(i) += float(2 * lambda_reg) * params.at(i);
}

std::vector<size_t> epoch_order(size_t n, std::uint64_t seed, int epoch) {
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, {0x5348u, static_cast<std::uint64_t>(epoch)}));
  for (size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

Tensor<float> flip_horizontal(const Tensor<float>& t) {
  Tensor<float> out(t.channels(), t.height, t.width);
  for (int c = 0; c < t.channels(); ++c)
    for (int y = 0; y < t.height; ++y)
      for (int x = 0; x < t.width; ++x) out(c, y, x) = t(c, y, t.width - 1 - x);
  return out;
}

LabelMask flip_horizontal(const LabelMask& m) {
  LabelMask out = m;
  out.classes = m.classes.rowwise().reverse();
  return out;
}

}  // namespace tsseg
