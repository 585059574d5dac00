#include "fixtures.hpp"

#include "tsseg/pseudolabel.hpp"

#include <cmath>

using namespace tsseg;
using tsseg::testing::tiny_config;
using tsseg::testing::tiny_spec;

namespace {

Tensor<float> filled(int channels, int h, int w, float v) {
  Tensor<float> t(channels, h, w);
  t.data.setConstant(v);
  return t;
}

PseudoLabeledSample fake_sample(const std::string& id, double confidence) {
  PseudoLabeledSample s;
  s.volume.id = id;
  s.image_confidence = confidence;
  return s;
}

}  // namespace

TEST_SUITE("pseudolabel") {

TEST_CASE("pixel confidence examples") {
  Tensor<float> probs(2, 1, 3);
  probs.data << 0.9f, 0.5f, 0.2f,
                0.1f, 0.5f, 0.8f;
  Tensor<float> logvar(1, 1, 3);
  logvar.data << std::log(2.0f), 0.0f, -3.0f;
  const auto c = pixel_confidence(probs, logvar);
  CHECK(c.data(0, 0) == doctest::Approx(0.45).epsilon(1e-6));
  CHECK(c.data(0, 1) == doctest::Approx(0.5));
  CHECK(c.data(0, 2) == doctest::Approx(0.8));  // negative log-variance is clipped to zero
}

TEST_CASE("pixel confidence stays inside [0, 1] for random inputs") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const auto probs = tsseg::testing::random_probs<float>(4, 6, 6, rng);
    auto logvar = tsseg::testing::random_tensor<float>(1, 6, 6, rng, -3.0, 5.0);
    const auto c = pixel_confidence(probs, logvar);
    CHECK(c.data.minCoeff() >= 0.0f);
    CHECK(c.data.maxCoeff() <= 1.0f);
  }
}

TEST_CASE("pixel confidence rejects mismatched or non-finite input") {
  CHECK_THROWS_AS(pixel_confidence(filled(2, 2, 2, 0.5f), filled(1, 2, 3, 0.f)), ShapeError);
  auto lv = filled(1, 2, 2, 0.f);
  lv.data(0, 1) = std::nanf("");
  CHECK_THROWS_AS(pixel_confidence(filled(2, 2, 2, 0.5f), lv), std::invalid_argument);
}

TEST_CASE("image confidence is the mean of the grid") {
  Tensor<float> c(1, 1, 10);
  c.data.setConstant(1.0f);
  c.data(0, 0) = 0.09f;
  CHECK(image_confidence(c) == doctest::Approx(0.909).epsilon(1e-6));
  CHECK_THROWS_AS(image_confidence(Tensor<float>()), std::invalid_argument);
}

TEST_CASE("stage selection sizes") {
  CHECK(selection_size(0.1, 100) == 10);
  CHECK(selection_size(0.6, 5) == 3);
  CHECK(selection_size(0.25, 10) == 3);
  CHECK(selection_size(1.0, 7) == 7);
  CHECK(selection_size(0.01, 5) == 1);
  CHECK_THROWS_AS(selection_size(0.0, 5), std::invalid_argument);
  CHECK_THROWS_AS(selection_size(1.5, 5), std::invalid_argument);
}

TEST_CASE("stage selection ranks by confidence with id tie break") {
  const std::vector<PseudoLabeledSample> pool{fake_sample("d", 0.3), fake_sample("b", 0.9), fake_sample("a", 0.5),
                                              fake_sample("c", 0.5), fake_sample("e", 0.1)};
  const auto sel = select_stage(pool, 0.6, 2);
  CHECK(sel.stage == 2);
  CHECK(sel.ids == std::vector<std::string>{"b", "a", "c"});
  CHECK(sel.indices == std::vector<size_t>{1, 2, 3});
  CHECK(select_stage(pool, 1.0).ids == std::vector<std::string>{"b", "a", "c", "d", "e"});
}

TEST_CASE("larger fractions select supersets") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<PseudoLabeledSample> pool;
  for (int i = 0; i < 37; ++i) pool.push_back(fake_sample("s" + std::to_string(i), u(rng)));
  std::vector<std::string> prev;
  for (double f : {0.1, 0.2, 0.4, 0.6, 0.8, 1.0}) {
    const auto ids = select_stage(pool, f).ids;
    CHECK(std::equal(prev.begin(), prev.end(), ids.begin()));
    prev = ids;
  }
  CHECK(prev.size() == 37);
}

TEST_CASE("agreement refinement damps only disagreeing pixels") {
  // An all-zero network outputs uniform probabilities, so its argmax is class 0 everywhere.
  const auto cfg = tiny_config(0.0);
  const Checkpoint student{cfg, make_parameters<float>(cfg)};
  const auto corpus = generate_synthetic(tiny_spec());
  PseudoLabeledSample s;
  s.volume = corpus.unlabeled.front();
  s.labels = make_label_mask(IndexGrid::Zero(16, 16), 4);
  s.confidence = filled(1, 16, 16, 0.8f);
  s.image_confidence = 0.8;
  IndexGrid teacher = IndexGrid::Zero(16, 16);
  teacher.topRows(4).setConstant(2);  // 64 of 256 pixels disagree
  std::vector<PseudoLabeledSample> pool{s};
  refine_by_agreement(pool, {teacher}, student, 0.5, 3);
  CHECK(pool[0].confidence.data(0, 0) == doctest::Approx(0.4));
  CHECK(pool[0].confidence.data(0, 255) == doctest::Approx(0.8));
  CHECK(pool[0].image_confidence == doctest::Approx((64 * 0.4 + 192 * 0.8) / 256));
  CHECK(pool[0].provenance == 3);

  std::vector<PseudoLabeledSample> full{s};
  refine_by_agreement(full, {IndexGrid::Zero(16, 16)}, student, 0.5, 1);
  CHECK(full[0].image_confidence == doctest::Approx(0.8));
  CHECK_THROWS_AS(refine_by_agreement(full, {teacher}, student, 0.0, 1), std::invalid_argument);
}

TEST_CASE("refinement with alpha one leaves confidences unchanged") {
  const auto cfg = tiny_config(0.0);
  const Checkpoint net{cfg, init_parameters<float>(cfg, 1)};
  const Checkpoint other{cfg, init_parameters<float>(cfg, 2)};
  const auto corpus = generate_synthetic(tiny_spec());
  auto pool = generate_pseudolabels(corpus.unlabeled, net, 1, 5);
  const auto before = pool;
  refine_by_agreement(pool, net, other, 1.0, 1);
  for (size_t i = 0; i < pool.size(); ++i) CHECK(pool[i].confidence.data == before[i].confidence.data);
}

TEST_CASE("generated pseudo-labels are the argmax of the averaged map") {
  const auto cfg = tiny_config(0.2);
  const Checkpoint teacher{cfg, init_parameters<float>(cfg, 4)};
  const auto corpus = generate_synthetic(tiny_spec());
  const auto pool = generate_pseudolabels(corpus.unlabeled, teacher, 3, 9);
  REQUIRE(pool.size() == corpus.unlabeled.size());
  for (const auto& s : pool) {
    CHECK(s.labels.classes == argmax_over_classes(s.soft));
    CHECK(s.provenance == 0);
    CHECK(s.image_confidence == doctest::Approx(image_confidence(s.confidence)));
  }
  const auto again = generate_pseudolabels(corpus.unlabeled, teacher, 3, 9);
  CHECK(again[0].soft.data == pool[0].soft.data);
}

TEST_CASE("cache hits on a matching digest and misses otherwise") {
  const auto cfg = tiny_config(0.2);
  const Checkpoint teacher{cfg, init_parameters<float>(cfg, 4)};
  const auto corpus = generate_synthetic(tiny_spec());
  const auto pool = generate_pseudolabels(corpus.unlabeled, teacher, 2, 9);
  const auto dir = tsseg::testing::scratch_dir("plcache");
  CHECK_FALSE(check_pseudolabel_cache(dir, teacher.digest(), corpus.unlabeled).hit);
  save_pseudolabel_cache(dir, pool, teacher.digest());
  CHECK(check_pseudolabel_cache(dir, teacher.digest(), corpus.unlabeled).hit);

  const auto miss = check_pseudolabel_cache(dir, std::string(64, '0'), corpus.unlabeled);
  CHECK_FALSE(miss.hit);
  CHECK(miss.reason.find("digest") != std::string::npos);
  UnlabeledSet fewer(corpus.unlabeled.begin(), corpus.unlabeled.end() - 1);
  CHECK_FALSE(check_pseudolabel_cache(dir, teacher.digest(), fewer).hit);

  const auto back = load_pseudolabel_cache(dir, corpus.unlabeled);
  REQUIRE(back.size() == pool.size());
  for (size_t i = 0; i < pool.size(); ++i) {
    CHECK(back[i].id() == pool[i].id());
    CHECK(back[i].labels.classes == pool[i].labels.classes);
    CHECK(back[i].confidence.data == pool[i].confidence.data);
    CHECK(back[i].image_confidence == pool[i].image_confidence);
  }
}

TEST_CASE("ids with slashes map to flat record names") {
  PseudoLabeledSample s;
  s.volume.id = "case7/z012";
  s.labels = make_label_mask(IndexGrid::Zero(8, 8), 4);
  s.confidence = filled(1, 8, 8, 1.f);
  s.soft = filled(4, 8, 8, 0.25f);
  const auto dir = tsseg::testing::scratch_dir("plslash");
  save_pseudolabel_cache(dir, {s}, "abc");
  CHECK(std::filesystem::exists(dir / "case7_z012.tsa"));
}

TEST_CASE("ranking csv lists ids in rank order") {
  const std::vector<PseudoLabeledSample> pool{fake_sample("x", 0.25), fake_sample("y", 0.75)};
  CHECK(ranking_csv(pool) == "sample_id,confidence,rank\ny,0.75,1\nx,0.25,2\n");
  CHECK(ranking_csv({}) == "sample_id,confidence,rank\n");
}

}  // TEST_SUITE
