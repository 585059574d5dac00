#include "support.hpp"

using namespace tsseg;
using tsseg::testing::random_mask;

TEST_SUITE("core") {

TEST_CASE("softmax of equal logits is uniform") {
  Tensor<double> z(4, 3, 3);
  z.data.setConstant(2.5);
  const auto p = softmax_over_classes(z);
  CHECK(p.data.isApproxToConstant(0.25, 1e-12));
}

TEST_CASE("softmax of [0, ln 3] is [1/4, 3/4]") {
  Tensor<double> z(2, 1, 1);
  z.data(1, 0) = std::log(3.0);
  const auto p = softmax_over_classes(z);
  CHECK(p.data(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(p.data(1, 0) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax is invariant to a per-pixel shift and keeps argmax") {
  std::mt19937_64 rng(5);
  auto z = tsseg::testing::random_tensor<double>(4, 5, 5, rng, -3, 3);
  Tensor<double> shifted = z;
  for (int p = 0; p < z.pixels(); ++p) shifted.data.col(p).array() += 100.0 * p - 7;
  const auto a = softmax_over_classes(z), b = softmax_over_classes(shifted);
  CHECK((a.data - b.data).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(argmax_over_classes(a) == argmax_over_classes(z));
  CHECK((a.data.colwise().sum().array() - 1).abs().maxCoeff() < 1e-12);
}

TEST_CASE("softmax rejects non-finite logits") {
  Tensor<float> z(3, 2, 2);
  z.data(1, 2) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(softmax_over_classes(z), std::invalid_argument);
  z.data(1, 2) = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(softmax_over_classes(z), std::invalid_argument);
}

TEST_CASE("onehot of an all-zero mask fills channel 0") {
  const LabelMask m{IndexGrid::Zero(3, 3), 4};
  const auto h = onehot<float>(m, 4);
  CHECK(h.data.row(0).isOnes());
  CHECK(h.data.bottomRows(3).isZero());
}

TEST_CASE("onehot places a single class-3 pixel") {
  IndexGrid g = IndexGrid::Zero(2, 2);
  g(1, 0) = 3;
  const auto h = onehot<float>(LabelMask{g, 4}, 4);
  CHECK(h(3, 1, 0) == 1.0f);
  CHECK(h.data.row(3).sum() == 1.0f);
  CHECK(h(0, 1, 0) == 0.0f);
}

TEST_CASE("argmax of onehot is the identity on every 4x4 grid draw") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    const LabelMask m = random_mask(4, 4, 4, rng);
    const auto h = onehot<float>(m, 4);
    CHECK((h.data.colwise().sum().array() == 1.0f).all());
    REQUIRE(argmax_over_classes(h) == m.classes);
  }
}

TEST_CASE("onehot rejects class ids outside the range") {
  IndexGrid g = IndexGrid::Zero(2, 2);
  g(0, 1) = 4;
  CHECK_THROWS_AS(onehot<float>(LabelMask{g, 4}, 4), std::out_of_range);
  g(0, 1) = -1;
  CHECK_THROWS_AS(onehot<float>(LabelMask{g, 4}, 4), std::out_of_range);
  CHECK_THROWS_AS(make_label_mask(g, 4), std::out_of_range);
}

TEST_CASE("argmax ties resolve to the lowest class index") {
  Tensor<float> t(3, 1, 2);
  t.data << 0.4f, 0.2f, 0.4f, 0.4f, 0.2f, 0.4f;
  const auto a = argmax_over_classes(t);
  CHECK(a(0, 0) == 0);
  CHECK(a(0, 1) == 1);  // column (0.2, 0.4, 0.4)
}

TEST_CASE("volumes below 8x8 or with mismatched roles are rejected") {
  const std::vector<std::string> roles{"T1", "T1ce", "T2", "FLAIR"};
  CHECK_THROWS_AS(make_volume("a", Tensor<float>(4, 7, 8), roles), ShapeError);
  CHECK_THROWS_AS(make_volume("a", Tensor<float>(3, 8, 8), roles), ShapeError);
  Tensor<float> bad(4, 8, 8);
  bad.data(2, 5) = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(make_volume("a", bad, roles), std::invalid_argument);
  CHECK_NOTHROW(make_volume("a", Tensor<float>(4, 8, 8), roles, std::vector<float>{1.f, 1.f}));
}

TEST_CASE("sets reject duplicate ids and inconsistent shapes") {
  const std::vector<std::string> roles{"T1"};
  UnlabeledSet u{make_volume("a", Tensor<float>(1, 8, 8), roles), make_volume("a", Tensor<float>(1, 8, 8), roles)};
  CHECK_THROWS_AS(validate_set(u), std::invalid_argument);
  u[1].id = "b";
  CHECK_NOTHROW(validate_set(u));
  u.push_back(make_volume("c", Tensor<float>(1, 16, 8), roles));
  CHECK_THROWS_AS(validate_set(u), ShapeError);

  LabeledSet s{{make_volume("a", Tensor<float>(1, 8, 8), roles), LabelMask{IndexGrid::Zero(8, 9), 4}}};
  CHECK_THROWS_AS(validate_set(s), ShapeError);
}

}  // TEST_SUITE
