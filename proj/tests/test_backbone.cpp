#include "support.hpp"

#include "tsseg/layers.hpp"
#include "tsseg/losses.hpp"

using namespace tsseg;
using tsseg::testing::random_tensor;
using tsseg::testing::tiny_config;

namespace {

BackboneConfig one_channel(int depth, int width) {
  BackboneConfig c = tiny_config();
  c.in_channels = 1;
  c.depth = depth;
  c.base_width = width;
  return c;
}

/// Zeroes the attention and feed-forward weights and biases.
template <typename Scalar>
void zero_transformer_branches(BackboneParameters<Scalar>& p) {
  for (const char* n : {"tf.attn.q", "tf.attn.k", "tf.attn.v", "tf.attn.o", "tf.ff1", "tf.ff2"}) {
    p[std::string(n) + ".weight"].setZero();
    p[std::string(n) + ".bias"].setZero();
  }
}

}  // namespace

TEST_SUITE("backbone") {

namespace {

/// Independent count from the layer shapes.
Eigen::Index tally(const BackboneConfig& c) {
  Eigen::Index n = 0;
  int in = c.in_channels;
  for (int l = 0; l < c.depth; ++l) {
    const int out = c.stage_width(l);
    n += out * in * 9 + out;
    in = out;
  }
  const int d = c.token_dim, deep = c.stage_width(c.depth - 1);
  n += static_cast<Eigen::Index>(c.dilation_rates.size()) * (deep * deep * 9 + deep);
  n += d * deep * static_cast<int>(c.dilation_rates.size()) + d;
  n += c.tokens() * d + 4 * d + 4 * (d * d + d) + (d * 2 * d + 2 * d) + (2 * d * d + d);
  int deeper = d;
  for (int l = c.depth - 2; l >= 0; --l) {
    const int w = c.stage_width(l);
    n += w * deeper * 9 + w + w * w + w * w * 9 + w;
    deeper = w;
  }
  n += c.num_classes * deeper + c.num_classes + deeper + 1;
  return n;
}

}  // namespace

TEST_CASE("parameter counts match golden values and a layer-by-layer tally") {
  // Golden values guard against silent architecture changes.
  CHECK(parameter_count(BackboneConfig{}) == 73013);
  CHECK(parameter_count(tiny_config()) == 3341);
  for (const auto& c : {BackboneConfig{}, tiny_config()}) {
    CHECK(parameter_count(c) == tally(c));
    CHECK(parameter_count(c) == make_parameters<float>(c).scalar_count());
  }
}

TEST_CASE("config validation names the offending field") {
  BackboneConfig c;
  c.token_dim = 30;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("backbone.token_dim"), std::invalid_argument);
  c = BackboneConfig{};
  c.depth = 1;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("backbone.depth"), std::invalid_argument);
  c = BackboneConfig{};
  c.dropout_rate = 0.95;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("backbone.dropout_rate"), std::invalid_argument);
  c = BackboneConfig{};
  c.dilation_rates = {};
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("backbone.dilation_rates"), std::invalid_argument);
}

TEST_CASE("encoder halves resolution per stage") {
  BackboneConfig c;
  c.depth = 4;
  c.base_width = 2;
  const auto p = init_parameters<float>(c, 1);
  std::mt19937_64 rng(2);
  const auto feats = encode(random_tensor(4, 64, 64, rng), p, c);
  REQUIRE(feats.size() == 4);
  for (int l = 0; l < 4; ++l) {
    CHECK(feats[l].height == 64 >> l);
    CHECK(feats[l].width == 64 >> l);
    CHECK(feats[l].channels() == 2 << l);
    CHECK(all_finite(feats[l]));
  }
}

TEST_CASE("encoder rejects indivisible sizes with a padding hint") {
  const BackboneConfig c = tiny_config();
  const auto p = make_parameters<float>(c);
  CHECK_THROWS_WITH_AS(encode(Tensor<float>(4, 15, 16), p, c), doctest::Contains("pad"), ShapeError);
}

TEST_CASE("zero encoder weights give zero features") {
  const BackboneConfig c = tiny_config();
  const auto p = make_parameters<float>(c);
  std::mt19937_64 rng(3);
  for (const auto& f : encode(random_tensor(4, 16, 16, rng), p, c)) CHECK(f.data.isZero());
}

TEST_CASE("identity 1x1-equivalent kernel reproduces a nonnegative input") {
  // Centre tap 1 and everything else 0 is a 1x1 identity inside a 3x3 kernel.
  const BackboneConfig c = one_channel(2, 1);
  auto p = make_parameters<double>(c);
  p["enc.0.weight"](0, 4) = 1.0;
  Tensor<double> x(1, 4, 4);
  for (int i = 0; i < 16; ++i) x.data(0, i) = i * 0.25;
  BackboneConfig small = c;
  small.input_height = small.input_width = 4;
  const auto feats = encode(x, p, small);
  CHECK(feats[0].data == x.data);
  // Stage 1 sees the 2x2 max-pooled map.
  Tensor<double> pooled = layers::maxpool2(x);
  CHECK(pooled.data(0, 0) == 5 * 0.25);
  CHECK(pooled.data(0, 3) == 15 * 0.25);
}

TEST_CASE("hand-computed 3x3 convolution on a 4x4 grid") {
  Tensor<double> x(1, 4, 4);
  for (int i = 0; i < 16; ++i) x.data(0, i) = i + 1;
  Planes<double> w(1, 9);
  w << 0, 1, 0, 1, -4, 1, 0, 1, 0;  // discrete Laplacian
  Planes<double> b = Planes<double>::Constant(1, 1, 0.5);
  const auto y = layers::conv2d(x, w, &b, {3, 1});
  // Oracle with explicit zero padding.
  for (int r = 0; r < 4; ++r)
    for (int s = 0; s < 4; ++s) {
      auto at = [&](int rr, int ss) { return (rr < 0 || ss < 0 || rr > 3 || ss > 3) ? 0.0 : x(0, rr, ss); };
      const double expect = at(r - 1, s) + at(r + 1, s) + at(r, s - 1) + at(r, s + 1) - 4 * at(r, s) + 0.5;
      CHECK(y(0, r, s) == doctest::Approx(expect));
    }
}

TEST_CASE("aspp output keeps spatial size and projects to token_dim") {
  const BackboneConfig c = tiny_config();
  const auto p = init_parameters<float>(c, 4);
  std::mt19937_64 rng(5);
  const auto f = random_tensor(c.stage_width(c.depth - 1), 8, 8, rng);
  const auto y = aspp(f, p, c);
  CHECK(y.height == 8);
  CHECK(y.width == 8);
  CHECK(y.channels() == c.token_dim);
}

TEST_CASE("aspp with zero weights is zero") {
  const BackboneConfig c = tiny_config();
  const auto p = make_parameters<float>(c);
  std::mt19937_64 rng(6);
  CHECK(aspp(random_tensor(c.stage_width(1), 8, 8, rng), p, c).data.isZero());
}

TEST_CASE("aspp with a single rate {1} is an ordinary convolution") {
  BackboneConfig c = tiny_config();
  c.dilation_rates = {1};
  auto p = init_parameters<double>(c, 7);
  p["aspp.proj.weight"] = Planes<double>::Identity(c.token_dim, c.stage_width(1));
  p["aspp.proj.bias"].setZero();
  std::mt19937_64 rng(8);
  const auto f = random_tensor<double>(c.stage_width(1), 8, 8, rng);
  const Planes<double>& b = p["aspp.branch.0.bias"];
  const auto expect = layers::relu(layers::conv2d(f, p["aspp.branch.0.weight"], &b, {3, 1}));
  CHECK((aspp(f, p, c).data - expect.data).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("aspp averaging weights on a constant interior stay constant") {
  // Rates {1,2} on a 2-channel map; each branch averages its 18 taps. Away
  // from the zero-padded border (distance >= 2) every tap sees the constant.
  BackboneConfig c = one_channel(2, 1);
  c.dilation_rates = {1, 2};
  c.token_dim = 2;
  c.heads = 1;
  c.input_height = c.input_width = 16;
  auto p = make_parameters<double>(c);
  p["aspp.branch.0.weight"].setConstant(1.0 / 18);
  p["aspp.branch.1.weight"].setConstant(1.0 / 18);
  p["aspp.proj.weight"].row(0).setConstant(0.25);
  p["aspp.proj.weight"].row(1).setZero();
  p["aspp.proj.weight"](1, 2) = 1.0;
  Tensor<double> f(2, 8, 8);
  f.data.setConstant(3.0);
  const auto y = aspp(f, p, c);
  for (int r = 2; r < 6; ++r)
    for (int s = 2; s < 6; ++s) {
      CHECK(y(0, r, s) == doctest::Approx(3.0));
      CHECK(y(1, r, s) == doctest::Approx(3.0));
    }
}

TEST_CASE("aspp rejects a dilation wider than the feature map") {
  BackboneConfig c = tiny_config();
  auto p = make_parameters<float>(c);
  c.dilation_rates = {1, 9};
  CHECK_THROWS(aspp(Tensor<float>(c.stage_width(1), 8, 8), p, c));
}

TEST_CASE("transformer with zero branch weights is the identity") {
  const BackboneConfig c = tiny_config(0.2);
  auto p = init_parameters<double>(c, 9);
  zero_transformer_branches(p);
  std::mt19937_64 rng(10);
  const auto f = random_tensor<double>(c.token_dim, 8, 8, rng);
  DropoutRng drop(1);
  CHECK((transformer_bottleneck(f, p, c).data - f.data).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((transformer_bottleneck(f, p, c, &drop).data - f.data).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("a single token attends to itself with weight 1") {
  BackboneConfig c = tiny_config();
  c.depth = 4;
  c.dilation_rates = {1};
  c.input_height = c.input_width = 8;  // 1x1 bottleneck
  auto p = init_parameters<double>(c, 11);
  TransformerTrace<double> t;
  std::mt19937_64 rng(12);
  transformer_bottleneck(random_tensor<double>(c.token_dim, 1, 1, rng), p, c, nullptr, &t);
  for (const auto& a : t.weights) CHECK(a(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("two-token attention matches closed-form softmax(QK^T/sqrt(dk))V") {
  BackboneConfig c = tiny_config();
  c.token_dim = 2;
  c.heads = 1;
  c.depth = 4;
  c.input_height = 16;  // 2x1 bottleneck
  c.input_width = 8;
  auto p = make_parameters<double>(c);
  // Identity-like projections; the attention weights are read from the trace.
  p["tf.ln1.gamma"].setOnes();
  p["tf.attn.q.weight"] << 1, 0, 0, 1;
  p["tf.attn.k.weight"] << 2, 0, 0, 1;
  p["tf.attn.v.weight"] << 1, 0, 0, 1;
  p["tf.attn.o.weight"] << 1, 0, 0, 1;
  Tensor<double> f(2, 2, 1);
  f.data << 1.0, 3.0, 2.0, -1.0;  // token 0 = (1,2), token 1 = (3,-1)
  TransformerTrace<double> t;
  const auto y = transformer_bottleneck(f, p, c, nullptr, &t);
  // With d=2 the layer norm maps every token to (-1,1) or (1,-1).
  Mat<double> X(2, 2);
  X << -1, 1, 1, -1;
  const Mat<double> Q = X;
  Mat<double> Kfull(2, 2);
  Kfull << 2 * X(0, 0), X(0, 1), 2 * X(1, 0), X(1, 1);
  Mat<double> S = Q * Kfull.transpose() / std::sqrt(2.0);
  Mat<double> A(2, 2);
  for (int i = 0; i < 2; ++i) {
    const double m = S.row(i).maxCoeff();
    const double e0 = std::exp(S(i, 0) - m), e1 = std::exp(S(i, 1) - m);
    A(i, 0) = e0 / (e0 + e1);
    A(i, 1) = e1 / (e0 + e1);
  }
  // The layer norm epsilon shrinks |xhat| by about 2e-5.
  REQUIRE(t.weights.size() == 1);
  CHECK((t.weights[0] - A).cwiseAbs().maxCoeff() < 1e-4);
  // Residual: output tokens = input + A X (feed-forward weights are zero).
  const Mat<double> expect = f.data.transpose() + A * X;
  CHECK((y.data.transpose() - expect).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("nearest upsampling of a constant map is constant") {
  Tensor<float> x(3, 4, 4);
  x.data.setConstant(1.5f);
  const auto y = layers::upsample2(x);
  CHECK(y.height == 8);
  CHECK(y.data.isApproxToConstant(1.5f));
}

TEST_CASE("decoder with zero skip weights ignores the skip input") {
  const BackboneConfig c = tiny_config();
  auto p = init_parameters<double>(c, 13);
  p["dec.0.skip.weight"].setZero();
  std::mt19937_64 rng(14);
  const auto deeper = random_tensor<double>(c.token_dim, 8, 8, rng);
  const auto a = decode_stage(deeper, random_tensor<double>(c.stage_width(0), 16, 16, rng), 0, p, c);
  const auto b = decode_stage(deeper, random_tensor<double>(c.stage_width(0), 16, 16, rng), 0, p, c);
  CHECK(a.data == b.data);
}

TEST_CASE("decoder stage on 2x2 -> 4x4 matches a manual evaluation") {
  BackboneConfig c = one_channel(2, 1);
  c.token_dim = 1;
  c.heads = 1;
  c.input_height = c.input_width = 8;  // only fixes the parameter shapes
  auto p = make_parameters<double>(c);
  p["dec.0.up.weight"](0, 4) = 2.0;  // centre tap
  p["dec.0.up.bias"](0, 0) = -1.0;
  p["dec.0.skip.weight"](0, 0) = 0.5;
  p["dec.0.res.weight"](0, 4) = 1.0;
  p["dec.0.res.bias"](0, 0) = -3.0;
  Tensor<double> deeper(1, 2, 2), skip(1, 4, 4);
  deeper.data << 1, 2, 3, 4;
  for (int i = 0; i < 16; ++i) skip.data(0, i) = i;
  const auto y = decode_stage(deeper, skip, 0, p, c);
  for (int r = 0; r < 4; ++r)
    for (int s = 0; s < 4; ++s) {
      const double fused = std::max(0.0, 2 * deeper(0, r / 2, s / 2) - 1 + 0.5 * skip(0, r, s));
      const double expect = fused + std::max(0.0, fused - 3);
      CHECK(y(0, r, s) == doctest::Approx(expect));
    }
}

TEST_CASE("decoder rejects mismatched skip resolution") {
  const BackboneConfig c = tiny_config();
  const auto p = init_parameters<float>(c, 15);
  CHECK_THROWS_AS(decode_stage(Tensor<float>(c.token_dim, 8, 8), Tensor<float>(c.stage_width(0), 12, 12), 0, p, c),
                  ShapeError);
}

TEST_CASE("deterministic forward is bit-identical across calls") {
  const BackboneConfig c = tiny_config(0.2);
  const auto p = init_parameters<float>(c, 16);
  std::mt19937_64 rng(17);
  const auto x = random_tensor(4, 16, 16, rng);
  const auto a = forward(x, p, c), b = forward(x, p, c);
  CHECK(a.logits.data == b.logits.data);
  CHECK(a.logvar.data == b.logvar.data);
  CHECK((a.probs.data.colwise().sum().array() - 1).abs().maxCoeff() < 1e-5);
}

TEST_CASE("zero parameters give uniform probabilities and zero log-variance") {
  const BackboneConfig c = tiny_config();
  const auto p = make_parameters<float>(c);
  std::mt19937_64 rng(18);
  const auto out = forward(random_tensor(4, 16, 16, rng), p, c);
  CHECK(out.probs.data.isApproxToConstant(0.25f));
  CHECK(out.logvar.data.isZero());
}

TEST_CASE("dropout 0 makes the stochastic pass deterministic") {
  const BackboneConfig c = tiny_config(0.0);
  const auto p = init_parameters<float>(c, 19);
  std::mt19937_64 rng(20);
  const auto x = random_tensor(4, 16, 16, rng);
  DropoutRng drop(3);
  CHECK(forward(x, p, c, true, drop).logits.data == forward(x, p, c).logits.data);
}

TEST_CASE("stochastic passes with dropout differ") {
  const BackboneConfig c = tiny_config(0.2);
  const auto p = init_parameters<float>(c, 21);
  std::mt19937_64 rng(22);
  DropoutRng drop(4);
  int differ = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_tensor(4, 16, 16, rng);
    differ += forward(x, p, c, true, drop).logits.data != forward(x, p, c, true, drop).logits.data;
  }
  CHECK(differ == 20);
}

TEST_CASE("analytic gradients match central differences for every parameter group") {
  const BackboneConfig c = tiny_config();
  auto p = init_parameters<double>(c, 23);
  std::mt19937_64 rng(24);
  std::normal_distribution<double> n(0, 0.1);
  for (size_t i = 0; i < p.size(); ++i)
    for (Eigen::Index k = 0; k < p.at(i).size(); ++k) p.at(i).data()[k] += n(rng);
  const auto x = random_tensor<double>(4, 16, 16, rng);
  const auto y = onehot<double>(tsseg::testing::random_mask(4, 16, 16, rng), 4);
  const auto target = random_tensor<double>(1, 16, 16, rng);
  LossConfig lc;
  auto objective = [&](const BackboneParameters<double>& q) {
    const auto o = forward(x, q, c);
    return supervised_loss_grad(o.probs, y, lc, false).value + 0.3 * uncertainty_regression_loss(o.logvar, target);
  };
  ForwardTrace<double> trace;
  const auto o = forward(x, p, c, nullptr, &trace);
  auto dlogvar = uncertainty_regression_grad(o.logvar, target).dprobs;
  dlogvar.data *= 0.3;
  auto g = p.zeros_like();
  backward(trace, p, c, softmax_backward(o.probs, supervised_loss_grad(o.probs, y, lc).dprobs), dlogvar, g);
  for (size_t i = 0; i < p.size(); ++i) {
    CAPTURE(p.names()[i]);
    const Eigen::Index step = std::max<Eigen::Index>(1, p.at(i).size() / 5);
    for (Eigen::Index k = 0; k < p.at(i).size(); k += step) {
      auto q = p;
      const double h = 1e-5;
      q.at(i).data()[k] += h;
      const double up = objective(q);
      q.at(i).data()[k] -= 2 * h;
      const double fd = (up - objective(q)) / (2 * h), an = g.at(i).data()[k];
      CHECK(std::abs(fd - an) <= 1e-3 * std::max({std::abs(fd), std::abs(an), 1e-6}));
    }
  }
}

TEST_CASE("parameter init is reproducible and finite") {
  const auto a = init_parameters<float>(BackboneConfig{}, 5), b = init_parameters<float>(BackboneConfig{}, 5);
  CHECK(a == b);
  CHECK(a.all_finite());
  CHECK(!(a == init_parameters<float>(BackboneConfig{}, 6)));
}

}  // TEST_SUITE
