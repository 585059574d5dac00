#include "support.hpp"

#include "tsseg/metrics.hpp"

#include <numeric>

using namespace tsseg;
using tsseg::testing::random_mask;

namespace {

LabelMask binary(std::initializer_list<int> bits, int h, int w) {
  IndexGrid g(h, w);
  std::copy(bits.begin(), bits.end(), g.data());
  return LabelMask{g, 2};
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("dice on equal, disjoint and half-overlapping masks") {
  const auto a = binary({1, 1, 1, 1, 0, 0, 0, 0}, 2, 4);
  const auto b = binary({0, 0, 0, 0, 1, 1, 1, 1}, 2, 4);
  const auto c = binary({0, 0, 1, 1, 1, 1, 0, 0}, 2, 4);
  CHECK(dice_coefficient(a, a, 1) == 1.0);
  CHECK(dice_coefficient(a, b, 1) == 0.0);
  CHECK(dice_coefficient(a, c, 1) == 0.5);  // |A|=4, |B|=4, |AnB|=2
  CHECK(iou(a, a, 1) == 1.0);
  CHECK(iou(a, c, 1) == doctest::Approx(1.0 / 3));  // |AnB|=2, |AuB|=6
}

TEST_CASE("empty-mask conventions") {
  const auto none = binary({0, 0, 0, 0}, 2, 2), some = binary({0, 1, 0, 0}, 2, 2);
  CHECK(dice_coefficient(none, none, 1) == 1.0);
  CHECK(iou(none, none, 1) == 1.0);
  CHECK(dice_coefficient(none, some, 1) == 0.0);
  CHECK(dice_coefficient(some, none, 1) == 0.0);
  CHECK(iou(some, none, 1) == 0.0);
}

TEST_CASE("metrics reject shape mismatches") {
  CHECK_THROWS_AS(dice_coefficient(binary({0, 0, 0, 0}, 2, 2), binary({0, 0, 0, 0}, 1, 4), 1), ShapeError);
  CHECK_THROWS_AS(agreement_map(IndexGrid::Zero(2, 2), IndexGrid::Zero(2, 3)), ShapeError);
}

TEST_CASE("iou equals dice / (2 - dice) on random 8x8 masks") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto p = random_mask(2, 8, 8, rng), t = random_mask(2, 8, 8, rng);
    const double d = dice_coefficient(p, t, 1), j = iou(p, t, 1);
    REQUIRE(j == doctest::Approx(d / (2 - d)).epsilon(1e-12));
    CHECK(j <= d + 1e-15);
  }
}

TEST_CASE("scores are invariant under a shared pixel permutation") {
  std::mt19937_64 rng(2);
  const auto p = random_mask(4, 6, 6, rng), t = random_mask(4, 6, 6, rng);
  std::vector<int> perm(36);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  LabelMask pp = p, tt = t;
  for (int i = 0; i < 36; ++i) {
    pp.classes.data()[i] = p.at(perm[i]);
    tt.classes.data()[i] = t.at(perm[i]);
  }
  for (int c = 0; c < 4; ++c) {
    CHECK(dice_coefficient(p, t, c) == dice_coefficient(pp, tt, c));
    CHECK(iou(p, t, c) == iou(pp, tt, c));
  }
}

TEST_CASE("pixel accuracy and the pooled counter") {
  const auto a = binary({1, 1, 0, 0}, 2, 2), b = binary({1, 0, 0, 1}, 2, 2);
  CHECK(pixel_accuracy(a, b) == 0.5);
  OverlapCounter counter(2);
  counter.add(a, b);
  counter.add(a, a);
  // Class 1 pooled: |A|=4, |B|=4, |AnB|=3.
  CHECK(counter.scores({"bg", "fg"}).classes[1].dice == doctest::Approx(0.75));
  CHECK(counter.macro_dice() == doctest::Approx(0.75));
  CHECK(counter.accuracy() == doctest::Approx(0.75));
}

TEST_CASE("classwise scores: perfect predictions and record names") {
  std::mt19937_64 rng(3);
  const auto m = random_mask(4, 8, 8, rng);
  const auto s = classwise_scores(m, m, default_class_names(), true);
  REQUIRE(s.classes.size() == 4);
  CHECK(s.classes[0].name == "Background");
  CHECK(s.classes[1].name == "NCR/NET");
  CHECK(s.classes[3].name == "Enhancing");
  for (const auto& c : s.classes) CHECK(c.dice == 1.0);
  CHECK(s.macro_dice == 1.0);
  CHECK(identity_violations(s).empty());
}

TEST_CASE("identity violations flag inconsistent records") {
  ClasswiseScores s;
  s.classes = {{"NCR/NET", 0.731, 0.0}, {"Edema", 0.5, 1.0 / 3}};
  const auto bad = identity_violations(s);
  REQUIRE(bad.size() == 1);
  CHECK(bad[0] == "NCR/NET");
}

TEST_CASE("confidence statistics") {
  const auto flat = confidence_stats(std::vector<double>(10, 0.909));
  CHECK(flat.mean == doctest::Approx(0.909));
  CHECK(flat.max - flat.min == 0.0);
  CHECK(std::accumulate(flat.histogram.begin(), flat.histogram.end(), 0) == 10);

  const auto pair = confidence_stats({0.9125, 0.8975});
  CHECK(pair.min == 0.8975);
  CHECK(pair.max == 0.9125);
  CHECK(pair.sorted == std::vector<double>{0.8975, 0.9125});

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> v(57);
  for (auto& x : v) x = u(rng);
  const auto s = confidence_stats(v, 7);
  CHECK(s.mean == doctest::Approx(std::accumulate(v.begin(), v.end(), 0.0) / 57));
  CHECK(std::accumulate(s.histogram.begin(), s.histogram.end(), 0) == 57);
  CHECK(std::is_sorted(s.sorted.begin(), s.sorted.end()));
  CHECK_THROWS_AS(confidence_stats({}), std::invalid_argument);
}

TEST_CASE("agreement fraction") {
  std::mt19937_64 rng(5);
  const auto m = random_mask(4, 5, 5, rng);
  CHECK(agreement_map(m.classes, m.classes).fraction == 1.0);
  IndexGrid a(2, 2), b(2, 2);
  a << 0, 1, 2, 3;
  b << 1, 0, 3, 2;
  CHECK(agreement_map(a, b).fraction == 0.0);
  b << 0, 1, 2, 0;
  const auto ag = agreement_map(a, b);
  CHECK(ag.fraction == 0.75);
  CHECK(ag.map(1, 1) == 0);
  CHECK(ag.map(0, 0) == 1);
}

TEST_CASE("spearman rank correlation") {
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(spearman({1, 1, 1}, {1, 2, 3}) == 0.0);
  // Ties get average ranks: x ranks (1, 2.5, 2.5, 4), y ranks (1, 2, 3, 4).
  const double r = spearman({1, 2, 2, 3}, {1, 2, 3, 4});
  const double sxy = (-1.5) * (-1.5) + 0 * (-0.5) + 0 * 0.5 + 1.5 * 1.5;
  const double sxx = 1.5 * 1.5 * 2, syy = 1.5 * 1.5 * 2 + 0.25 * 2;
  CHECK(r == doctest::Approx(sxy / std::sqrt(sxx * syy)));
}

}  // TEST_SUITE
