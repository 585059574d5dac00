#include "fixtures.hpp"

#include "tsseg/seeding.hpp"
#include "tsseg/teacher.hpp"

using namespace tsseg;
using tsseg::testing::tiny_config;
using tsseg::testing::tiny_spec;

TEST_SUITE("teacher") {

TEST_CASE("train dice rises on a one-sample set") {
  const auto corpus = generate_synthetic(tiny_spec());
  const LabeledSet one{corpus.labeled.front()};
  TeacherTrainConfig cfg;
  cfg.epochs = 5;
  cfg.passes = 2;
  const auto res = train_teacher(one, {}, tiny_config(), cfg, LossConfig{});
  REQUIRE(res.history.size() == 5);
  int drops = 0;
  for (size_t i = 1; i < res.history.size(); ++i) drops += res.history[i].train_dice <= res.history[i - 1].train_dice;
  CHECK(drops <= 1);
  CHECK(res.history.back().train_dice > res.history.front().train_dice);
  CHECK(!res.history.front().val_dice.has_value());
}

TEST_CASE("fixed seed reproduces history and checkpoint") {
  const auto corpus = generate_synthetic(tiny_spec());
  TeacherTrainConfig cfg;
  cfg.epochs = 2;
  cfg.passes = 2;
  const auto a = train_teacher(corpus.labeled, corpus.val, tiny_config(0.2), cfg, LossConfig{});
  const auto b = train_teacher(corpus.labeled, corpus.val, tiny_config(0.2), cfg, LossConfig{});
  CHECK(history_to_jsonl(a.history) == history_to_jsonl(b.history));
  CHECK(a.checkpoint.digest() == b.checkpoint.digest());
  cfg.seed += 1;
  const auto c = train_teacher(corpus.labeled, corpus.val, tiny_config(0.2), cfg, LossConfig{});
  CHECK(a.checkpoint.digest() != c.checkpoint.digest());
}

TEST_CASE("zero uncertainty weight equals training without the uncertainty objective") {
  const auto corpus = generate_synthetic(tiny_spec());
  TeacherTrainConfig with;
  with.epochs = 2;
  with.passes = 3;
  with.uncertainty_weight = 0.0;
  TeacherTrainConfig without = with;
  without.distill_uncertainty = false;
  const auto a = train_teacher(corpus.labeled, corpus.val, tiny_config(0.2), with, LossConfig{});
  const auto b = train_teacher(corpus.labeled, corpus.val, tiny_config(0.2), without, LossConfig{});
  CHECK(history_to_jsonl(a.history) == history_to_jsonl(b.history));
  CHECK(a.checkpoint.digest() == b.checkpoint.digest());
}

TEST_CASE("history has one record per epoch with val metrics") {
  const auto corpus = generate_synthetic(tiny_spec());
  TeacherTrainConfig cfg;
  cfg.epochs = 3;
  cfg.passes = 2;
  const auto res = train_teacher(corpus.labeled, corpus.val, tiny_config(0.2), cfg, LossConfig{});
  REQUIRE(res.history.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(res.history[i].epoch == int(i) + 1);
    CHECK(res.history[i].val_dice.has_value());
    CHECK(res.history[i].val_loss.has_value());
  }
  CHECK(res.best_epoch >= 1);
  const auto round = history_from_jsonl(history_to_jsonl(res.history));
  CHECK(history_to_jsonl(round) == history_to_jsonl(res.history));
}

TEST_CASE("empty labeled set and bad configs are rejected") {
  TeacherTrainConfig cfg;
  CHECK_THROWS_AS(train_teacher({}, {}, tiny_config(), cfg, LossConfig{}), std::invalid_argument);
  cfg.passes = 1;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("teacher.passes"), std::invalid_argument);
  cfg = TeacherTrainConfig{};
  cfg.epochs = 0;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("teacher.epochs"), std::invalid_argument);
}

TEST_CASE("divergence stops training and keeps a finite checkpoint") {
  const auto corpus = generate_synthetic(tiny_spec());
  TeacherTrainConfig cfg;
  cfg.epochs = 3;
  cfg.passes = 2;
  cfg.learning_rate = 1e30;  // first update overflows the weights
  const auto res = train_teacher(corpus.labeled, corpus.val, tiny_config(), cfg, LossConfig{});
  CHECK(res.diverged);
  CHECK(res.checkpoint.params.all_finite());
  CHECK(res.history.size() < 3);
}

TEST_CASE("teacher_predict averages passes and stays normalized") {
  const auto corpus = generate_synthetic(tiny_spec());
  const Checkpoint ck{tiny_config(0.2), init_parameters<float>(tiny_config(0.2), 3)};
  const Volume& x = corpus.unlabeled.front();
  const auto pred = teacher_predict(x, ck, 4, 21);
  CHECK((pred.mean_probs.data.colwise().sum().array() - 1).abs().maxCoeff() < 1e-5);

  // Oracle: replay the same dropout stream pass by pass.
  DropoutRng rng(derive_seed(21, {fnv1a(x.id)}));
  Planes<double> sum = Planes<double>::Zero(4, 256);
  for (int k = 0; k < 4; ++k) sum += forward(x.image, ck.params, ck.config, &rng).probs.data.cast<double>();
  CHECK((pred.mean_probs.data.cast<double>() - sum / 4).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(pred.logvar.data == forward(x.image, ck.params, ck.config).logvar.data);
}

TEST_CASE("teacher_predict with K=1 and no dropout is the deterministic forward") {
  const auto corpus = generate_synthetic(tiny_spec());
  const Checkpoint ck{tiny_config(0.0), init_parameters<float>(tiny_config(0.0), 4)};
  const Volume& x = corpus.unlabeled.front();
  CHECK(teacher_predict(x, ck, 1, 5).mean_probs.data == forward(x.image, ck.params, ck.config).probs.data);
}

TEST_CASE("saved and reloaded teacher predicts bit-identically") {
  const auto corpus = generate_synthetic(tiny_spec());
  const Checkpoint ck{tiny_config(0.2), init_parameters<float>(tiny_config(0.2), 6)};
  const auto dir = tsseg::testing::scratch_dir("teacher-roundtrip");
  ck.save(dir / "t.ckpt");
  const Checkpoint back = Checkpoint::load(dir / "t.ckpt");
  CHECK(back.config == ck.config);
  CHECK(back.params == ck.params);
  CHECK(back.digest() == ck.digest());
  const auto& x = corpus.unlabeled.front();
  CHECK(teacher_predict(x, back, 3, 8).mean_probs.data == teacher_predict(x, ck, 3, 8).mean_probs.data);
}

}  // TEST_SUITE
