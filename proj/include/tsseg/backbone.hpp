#pragma once

// TransASPP-UNet: convolutional encoder, atrous spatial pyramid pooling,
// transformer bottleneck, skip-connected decoder and two 1x1 heads
// (class logits and per-pixel log-variance). Templated on the scalar so the
// same code trains in float and is gradient-checked in double.

#include "tsseg/core.hpp"
#include "tsseg/layers.hpp"

#include <map>
#include <random>
#include <string_view>

namespace tsseg {

struct BackboneConfig {
  int in_channels = 4;
  int num_classes = 4;
  int base_width = 8;
  int depth = 3;
  std::vector<int> dilation_rates{1, 2, 4, 8};
  int token_dim = 32;  // also the ASPP output width
  int heads = 4;
  int ff_mult = 2;
  double dropout_rate = 0.2;
  int input_height = 64;  // fixes the positional-embedding length
  int input_width = 64;

  int stage_width(int stage) const { return base_width << stage; }
  int bottleneck_height() const { return input_height >> (depth - 1); }
  int bottleneck_width() const { return input_width >> (depth - 1); }
  int tokens() const { return bottleneck_height() * bottleneck_width(); }

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;

  bool operator==(const BackboneConfig&) const = default;
};

/// Named, ordered collection of parameter arrays.
template <typename Scalar>
class ParameterSet {
 public:
  void add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    index_.emplace(name, values_.size());
    names_.push_back(std::move(name));
    values_.push_back(Planes<Scalar>::Zero(rows, cols));
  }

  Planes<Scalar>& operator[](std::string_view name) { return values_[locate(name)]; }
  const Planes<Scalar>& operator[](std::string_view name) const { return values_[locate(name)]; }
  Planes<Scalar>& at(size_t i) { return values_.at(i); }
  const Planes<Scalar>& at(size_t i) const { return values_.at(i); }
  bool contains(std::string_view name) const { return index_.find(name) != index_.end(); }

  size_t size() const { return values_.size(); }
  const std::vector<std::string>& names() const { return names_; }

  Eigen::Index scalar_count() const {
    Eigen::Index n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  double squared_norm() const {
    double s = 0;
    for (const auto& v : values_) s += v.template cast<double>().squaredNorm();
    return s;
  }

  bool all_finite() const {
    for (const auto& v : values_)
      if (!v.allFinite()) return false;
    return true;
  }

  ParameterSet zeros_like() const {
    ParameterSet out = *this;
    for (auto& v : out.values_) v.setZero();
    return out;
  }

  void set_zero() {
    for (auto& v : values_) v.setZero();
  }

  ParameterSet& operator+=(const ParameterSet& other) {
    for (size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
    return *this;
  }

  template <typename Other>
  ParameterSet<Other> cast() const {
    ParameterSet<Other> out;
    for (size_t i = 0; i < values_.size(); ++i) {
      out.add(names_[i], values_[i].rows(), values_[i].cols());
      out.at(i) = values_[i].template cast<Other>();
    }
    return out;
  }

  bool operator==(const ParameterSet& other) const {
    if (names_ != other.names_) return false;
    for (size_t i = 0; i < values_.size(); ++i)
      if (values_[i].rows() != other.values_[i].rows() || values_[i].cols() != other.values_[i].cols() ||
          values_[i] != other.values_[i])
        return false;
    return true;
  }

 private:
  size_t locate(std::string_view name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
    return it->second;
  }

  std::vector<std::string> names_;
  std::vector<Planes<Scalar>> values_;
  std::map<std::string, size_t, std::less<>> index_;
};

template <typename Scalar>
using BackboneParameters = ParameterSet<Scalar>;

namespace backbone_detail {
inline std::string enc(int l, const char* what) { return "enc." + std::to_string(l) + "." + what; }
inline std::string dec(int l, const char* what) { return "dec." + std::to_string(l) + "." + what; }
inline std::string branch(size_t i, const char* what) { return "aspp.branch." + std::to_string(i) + "." + what; }
inline layers::ConvGeometry k3(int dilation = 1) { return {3, dilation}; }
inline constexpr layers::ConvGeometry k1{1, 1};
}  // namespace backbone_detail

/// Zero-valued parameters with the layout implied by the config.
template <typename Scalar>
BackboneParameters<Scalar> make_parameters(const BackboneConfig& cfg) {
  using namespace backbone_detail;
  cfg.validate();
  BackboneParameters<Scalar> p;
  int prev = cfg.in_channels;
  for (int l = 0; l < cfg.depth; ++l) {
    const int c = cfg.stage_width(l);
    p.add(enc(l, "weight"), c, prev * 9);
    p.add(enc(l, "bias"), c, 1);
    prev = c;
  }
  const int d = cfg.token_dim;
  for (size_t i = 0; i < cfg.dilation_rates.size(); ++i) {
    p.add(branch(i, "weight"), d, prev * 9);
    p.add(branch(i, "bias"), d, 1);
  }
  p.add("aspp.proj.weight", d, d * static_cast<int>(cfg.dilation_rates.size()));
  p.add("aspp.proj.bias", d, 1);

  p.add("tf.pos", cfg.tokens(), d);
  p.add("tf.ln1.gamma", 1, d);
  p.add("tf.ln1.beta", 1, d);
  for (const char* m : {"q", "k", "v", "o"}) {
    p.add(std::string("tf.attn.") + m + ".weight", d, d);
    p.add(std::string("tf.attn.") + m + ".bias", 1, d);
  }
  p.add("tf.ln2.gamma", 1, d);
  p.add("tf.ln2.beta", 1, d);
  p.add("tf.ff1.weight", d, d * cfg.ff_mult);
  p.add("tf.ff1.bias", 1, d * cfg.ff_mult);
  p.add("tf.ff2.weight", d * cfg.ff_mult, d);
  p.add("tf.ff2.bias", 1, d);

  int deeper = d;
  for (int l = cfg.depth - 2; l >= 0; --l) {
    const int c = cfg.stage_width(l);
    p.add(dec(l, "up.weight"), c, deeper * 9);
    p.add(dec(l, "up.bias"), c, 1);
    p.add(dec(l, "skip.weight"), c, c);
    p.add(dec(l, "res.weight"), c, c * 9);
    p.add(dec(l, "res.bias"), c, 1);
    deeper = c;
  }
  p.add("head.seg.weight", cfg.num_classes, cfg.stage_width(0));
  p.add("head.seg.bias", cfg.num_classes, 1);
  p.add("head.logvar.weight", 1, cfg.stage_width(0));
  p.add("head.logvar.bias", 1, 1);
  return p;
}

/// He-normal convolutions, Xavier-normal token projections, unit layer-norm gains.
template <typename Scalar>
BackboneParameters<Scalar> init_parameters(const BackboneConfig& cfg, std::uint64_t seed) {
  BackboneParameters<Scalar> p = make_parameters<Scalar>(cfg);
  std::mt19937_64 rng(seed);
  auto fill = [&](Planes<Scalar>& m, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = Scalar(dist(rng));
  };
  for (size_t i = 0; i < p.size(); ++i) {
    const std::string& name = p.names()[i];
    Planes<Scalar>& m = p.at(i);
    const bool is_weight = name.ends_with(".weight");
    if (name.starts_with("tf.ln") && name.ends_with(".gamma")) {
      m.setOnes();
    } else if (name == "tf.pos") {
      fill(m, 0.02);
    } else if (is_weight && name.starts_with("tf.")) {
      fill(m, std::sqrt(2.0 / double(m.rows() + m.cols())));
    } else if (is_weight) {
      fill(m, std::sqrt(2.0 / double(m.cols())));
    }
  }
  return p;
}

inline Eigen::Index parameter_count(const BackboneConfig& cfg) {
  return make_parameters<float>(cfg).scalar_count();
}

// ---------------------------------------------------------------- traces

template <typename Scalar>
struct EncodeTrace {
  std::vector<layers::PoolCache> pools;  // pools[l] feeds stage l + 1
  std::vector<layers::ConvCache<Scalar>> convs;
  std::vector<FeatureMap<Scalar>> outputs;
};

template <typename Scalar>
struct AsppTrace {
  std::vector<layers::ConvCache<Scalar>> branch_convs;
  std::vector<FeatureMap<Scalar>> branch_outputs;
  layers::ConvCache<Scalar> proj;
};

template <typename Scalar>
struct TransformerTrace {
  Mat<Scalar> input;  // N x d tokens
  layers::LayerNormCache<Scalar> ln1, ln2;
  Mat<Scalar> attn_in, q, k, v, concat;
  std::vector<Mat<Scalar>> weights;  // per-head N x N attention
  Planes<Scalar> drop_attn, drop_ff;  // empty when inactive
  Mat<Scalar> mid, ff_in, hidden;
  int height = 0, width = 0;
};

template <typename Scalar>
struct DecodeStageTrace {
  layers::ConvCache<Scalar> up, skip, res;
  FeatureMap<Scalar> fused;     // relu(up + skip)
  FeatureMap<Scalar> refined;   // relu(res(fused))
  Planes<Scalar> drop;          // empty when inactive
};

template <typename Scalar>
struct DecodeTrace {
  std::vector<DecodeStageTrace<Scalar>> stages;  // stages[l], l in [0, depth - 2]
};

template <typename Scalar>
struct ForwardTrace {
  EncodeTrace<Scalar> encode;
  AsppTrace<Scalar> aspp;
  TransformerTrace<Scalar> transformer;
  DecodeTrace<Scalar> decode;
  layers::ConvCache<Scalar> seg_head, logvar_head;
};

/// Dropout source; a null rng means deterministic inference.
using DropoutRng = std::mt19937_64;

// ---------------------------------------------------------------- forward

template <typename Scalar>
std::vector<FeatureMap<Scalar>> encode(const Tensor<Scalar>& x, const BackboneParameters<Scalar>& p,
                                       const BackboneConfig& cfg, EncodeTrace<Scalar>* trace = nullptr) {
  using namespace backbone_detail;
  const int stride = 1 << (cfg.depth - 1);
  if (x.height % stride || x.width % stride) {
    const int ph = (stride - x.height % stride) % stride, pw = (stride - x.width % stride) % stride;
    throw ShapeError("encode: spatial size " + std::to_string(x.height) + "x" + std::to_string(x.width) +
                     " is not divisible by " + std::to_string(stride) + "; pad by " + std::to_string(ph) + "x" +
                     std::to_string(pw));
  }
  if (x.channels() != cfg.in_channels)
    throw ShapeError("encode: expected " + std::to_string(cfg.in_channels) + " input channels, got " +
                     std::to_string(x.channels()));
  std::vector<FeatureMap<Scalar>> out;
  if (trace) {
    trace->convs.resize(cfg.depth);
    trace->pools.resize(cfg.depth - 1);
  }
  Tensor<Scalar> in = x;
  for (int l = 0; l < cfg.depth; ++l) {
    if (l > 0) in = layers::maxpool2(out.back(), trace ? &trace->pools[l - 1] : nullptr);
    const Planes<Scalar>& b = p[enc(l, "bias")];
    out.push_back(layers::relu(layers::conv2d(in, p[enc(l, "weight")], &b, k3(), trace ? &trace->convs[l] : nullptr)));
  }
  if (trace) trace->outputs = out;
  return out;
}

template <typename Scalar>
FeatureMap<Scalar> aspp(const FeatureMap<Scalar>& f, const BackboneParameters<Scalar>& p, const BackboneConfig& cfg,
                        AsppTrace<Scalar>* trace = nullptr) {
  using namespace backbone_detail;
  const int extent = std::max(f.height, f.width);
  for (int r : cfg.dilation_rates)
    if (r > extent)
      throw ShapeError("aspp: dilation " + std::to_string(r) + " exceeds feature extent " + std::to_string(extent));
  const size_t n = cfg.dilation_rates.size();
  const int d = cfg.token_dim;
  if (trace) {
    trace->branch_convs.resize(n);
    trace->branch_outputs.resize(n);
  }
  Tensor<Scalar> stacked(static_cast<int>(n) * d, f.height, f.width);
  for (size_t i = 0; i < n; ++i) {
    const Planes<Scalar>& b = p[branch(i, "bias")];
    auto y = layers::relu(layers::conv2d(f, p[branch(i, "weight")], &b, k3(cfg.dilation_rates[i]),
                                         trace ? &trace->branch_convs[i] : nullptr));
    stacked.data.middleRows(static_cast<Eigen::Index>(i) * d, d) = y.data;
    if (trace) trace->branch_outputs[i] = std::move(y);
  }
  const Planes<Scalar>& b = p["aspp.proj.bias"];
  return layers::conv2d(stacked, p["aspp.proj.weight"], &b, k1, trace ? &trace->proj : nullptr);
}

/// Pre-norm transformer block over the h*w tokens of f. The learned
/// positional embedding enters the attention input only, so zero attention
/// and feed-forward weights make the block the identity.
template <typename Scalar>
FeatureMap<Scalar> transformer_bottleneck(const FeatureMap<Scalar>& f, const BackboneParameters<Scalar>& p,
                                          const BackboneConfig& cfg, DropoutRng* rng = nullptr,
                                          TransformerTrace<Scalar>* trace = nullptr) {
  const int d = cfg.token_dim, heads = cfg.heads, dk = d / heads;
  if (f.channels() != d) throw ShapeError("transformer_bottleneck: expected " + std::to_string(d) + " channels");
  if (f.pixels() != cfg.tokens())
    throw ShapeError("transformer_bottleneck: " + std::to_string(f.pixels()) + " tokens, positional embedding has " +
                     std::to_string(cfg.tokens()));
  const bool drop = rng && cfg.dropout_rate > 0;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dk));

  Mat<Scalar> x = f.data.transpose();
  layers::LayerNormCache<Scalar> ln1, ln2;
  Mat<Scalar> attn_in = layers::layer_norm(x, p["tf.ln1.gamma"], p["tf.ln1.beta"], &ln1);
  attn_in += p["tf.pos"];
  Mat<Scalar> q = layers::linear(attn_in, p["tf.attn.q.weight"], p["tf.attn.q.bias"]);
  Mat<Scalar> k = layers::linear(attn_in, p["tf.attn.k.weight"], p["tf.attn.k.bias"]);
  Mat<Scalar> v = layers::linear(attn_in, p["tf.attn.v.weight"], p["tf.attn.v.bias"]);
  Mat<Scalar> concat(x.rows(), d);
  std::vector<Mat<Scalar>> weights;
  for (int h = 0; h < heads; ++h) {
    Mat<Scalar> a = layers::softmax_rows<Scalar>(q.middleCols(h * dk, dk) * k.middleCols(h * dk, dk).transpose() * scale);
    concat.middleCols(h * dk, dk).noalias() = a * v.middleCols(h * dk, dk);
    weights.push_back(std::move(a));
  }
  Mat<Scalar> attn_out = layers::linear(concat, p["tf.attn.o.weight"], p["tf.attn.o.bias"]);
  Planes<Scalar> drop_attn, drop_ff;
  if (drop) {
    drop_attn = layers::dropout_mask<Scalar>(attn_out.rows(), attn_out.cols(), cfg.dropout_rate, *rng);
    attn_out.array() *= drop_attn.array();
  }
  Mat<Scalar> mid = x + attn_out;
  Mat<Scalar> ff_in = layers::layer_norm(mid, p["tf.ln2.gamma"], p["tf.ln2.beta"], &ln2);
  Mat<Scalar> hidden = layers::linear(ff_in, p["tf.ff1.weight"], p["tf.ff1.bias"]).cwiseMax(Scalar(0));
  Mat<Scalar> ff_out = layers::linear(hidden, p["tf.ff2.weight"], p["tf.ff2.bias"]);
  if (drop) {
    drop_ff = layers::dropout_mask<Scalar>(ff_out.rows(), ff_out.cols(), cfg.dropout_rate, *rng);
    ff_out.array() *= drop_ff.array();
  }
  FeatureMap<Scalar> out(Planes<Scalar>((mid + ff_out).transpose()), f.height, f.width);
  if (trace) {
    trace->input = std::move(x);
    trace->ln1 = std::move(ln1);
    trace->ln2 = std::move(ln2);
    trace->attn_in = std::move(attn_in);
    trace->q = std::move(q);
    trace->k = std::move(k);
    trace->v = std::move(v);
    trace->concat = std::move(concat);
    trace->weights = std::move(weights);
    trace->drop_attn = std::move(drop_attn);
    trace->drop_ff = std::move(drop_ff);
    trace->mid = std::move(mid);
    trace->ff_in = std::move(ff_in);
    trace->hidden = std::move(hidden);
    trace->height = f.height;
    trace->width = f.width;
  }
  return out;
}

/// One decoder stage: relu(W_up * up(deeper) + b + W_skip * skip), then a
/// residual refinement conv, then (stochastic only) dropout.
template <typename Scalar>
FeatureMap<Scalar> decode_stage(const FeatureMap<Scalar>& deeper, const FeatureMap<Scalar>& skip, int l,
                                const BackboneParameters<Scalar>& p, const BackboneConfig& cfg,
                                DropoutRng* rng = nullptr, DecodeStageTrace<Scalar>* trace = nullptr) {
  using namespace backbone_detail;
  if (2 * deeper.height != skip.height || 2 * deeper.width != skip.width)
    throw ShapeError("decode: upsampled " + std::to_string(2 * deeper.height) + "x" + std::to_string(2 * deeper.width) +
                     " does not match skip " + std::to_string(skip.height) + "x" + std::to_string(skip.width));
  const Planes<Scalar>& up_b = p[dec(l, "up.bias")];
  const Planes<Scalar>& res_b = p[dec(l, "res.bias")];
  Tensor<Scalar> pre = layers::conv2d(layers::upsample2(deeper), p[dec(l, "up.weight")], &up_b, k3(),
                                      trace ? &trace->up : nullptr);
  pre.data += layers::conv2d<Scalar>(skip, p[dec(l, "skip.weight")], nullptr, k1, trace ? &trace->skip : nullptr).data;
  FeatureMap<Scalar> fused = layers::relu(pre);
  FeatureMap<Scalar> refined =
      layers::relu(layers::conv2d(fused, p[dec(l, "res.weight")], &res_b, k3(), trace ? &trace->res : nullptr));
  FeatureMap<Scalar> out(fused.data + refined.data, fused.height, fused.width);
  if (rng && cfg.dropout_rate > 0) {
    Planes<Scalar> mask = layers::dropout_mask<Scalar>(out.data.rows(), out.data.cols(), cfg.dropout_rate, *rng);
    out.data.array() *= mask.array();
    if (trace) trace->drop = std::move(mask);
  }
  if (trace) {
    trace->fused = std::move(fused);
    trace->refined = std::move(refined);
  }
  return out;
}

/// features: encoder outputs for stages 0..depth-2 followed by the
/// bottleneck output at the deepest resolution.
template <typename Scalar>
FeatureMap<Scalar> decode(const std::vector<FeatureMap<Scalar>>& features, const BackboneParameters<Scalar>& p,
                          const BackboneConfig& cfg, DropoutRng* rng = nullptr, DecodeTrace<Scalar>* trace = nullptr) {
  if (static_cast<int>(features.size()) != cfg.depth)
    throw ShapeError("decode: expected " + std::to_string(cfg.depth) + " feature maps");
  if (trace) trace->stages.resize(cfg.depth - 1);
  FeatureMap<Scalar> cur = features.back();
  for (int l = cfg.depth - 2; l >= 0; --l)
    cur = decode_stage(cur, features[l], l, p, cfg, rng, trace ? &trace->stages[l] : nullptr);
  return cur;
}

template <typename Scalar>
ModelOutput<Scalar> forward(const Tensor<Scalar>& x, const BackboneParameters<Scalar>& p, const BackboneConfig& cfg,
                            DropoutRng* rng = nullptr, ForwardTrace<Scalar>* trace = nullptr) {
  using namespace backbone_detail;
  auto feats = encode(x, p, cfg, trace ? &trace->encode : nullptr);
  auto bottleneck = transformer_bottleneck(aspp(feats.back(), p, cfg, trace ? &trace->aspp : nullptr), p, cfg, rng,
                                           trace ? &trace->transformer : nullptr);
  feats.back() = std::move(bottleneck);
  FeatureMap<Scalar> top = decode(feats, p, cfg, rng, trace ? &trace->decode : nullptr);
  const Planes<Scalar>& sb = p["head.seg.bias"];
  const Planes<Scalar>& ub = p["head.logvar.bias"];
  ModelOutput<Scalar> out;
  out.logits = layers::conv2d(top, p["head.seg.weight"], &sb, k1, trace ? &trace->seg_head : nullptr);
  out.logvar = layers::conv2d(top, p["head.logvar.weight"], &ub, k1, trace ? &trace->logvar_head : nullptr);
  out.probs = softmax_over_classes(out.logits);
  return out;
}

/// Convenience overload: stochastic == false ignores rng.
template <typename Scalar>
ModelOutput<Scalar> forward(const Tensor<Scalar>& x, const BackboneParameters<Scalar>& p, const BackboneConfig& cfg,
                            bool stochastic, DropoutRng& rng) {
  return forward(x, p, cfg, stochastic ? &rng : nullptr);
}

// ---------------------------------------------------------------- backward

template <typename Scalar>
FeatureMap<Scalar> transformer_backward(const TransformerTrace<Scalar>& t, const BackboneParameters<Scalar>& p,
                                        const BackboneConfig& cfg, const FeatureMap<Scalar>& dout,
                                        BackboneParameters<Scalar>& g) {
  const int d = cfg.token_dim, heads = cfg.heads, dk = d / heads;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dk));
  Mat<Scalar> dz = dout.data.transpose();

  // feed-forward branch
  Mat<Scalar> dff = dz;
  if (t.drop_ff.size()) dff.array() *= t.drop_ff.array();
  Mat<Scalar> dhidden = layers::linear_backward(t.hidden, p["tf.ff2.weight"], dff, g["tf.ff2.weight"], g["tf.ff2.bias"]);
  dhidden = (t.hidden.array() > Scalar(0)).select(dhidden, Scalar(0));
  Mat<Scalar> dffin = layers::linear_backward(t.ff_in, p["tf.ff1.weight"], dhidden, g["tf.ff1.weight"], g["tf.ff1.bias"]);
  Mat<Scalar> dmid = dz + layers::layer_norm_backward(t.ln2, p["tf.ln2.gamma"], dffin, g["tf.ln2.gamma"], g["tf.ln2.beta"]);

  // attention branch
  Mat<Scalar> dattn = dmid;
  if (t.drop_attn.size()) dattn.array() *= t.drop_attn.array();
  Mat<Scalar> dconcat = layers::linear_backward(t.concat, p["tf.attn.o.weight"], dattn, g["tf.attn.o.weight"], g["tf.attn.o.bias"]);
  Mat<Scalar> dq(t.q.rows(), d), dk_(t.k.rows(), d), dv(t.v.rows(), d);
  for (int h = 0; h < heads; ++h) {
    const Mat<Scalar>& a = t.weights[h];
    const auto dO = dconcat.middleCols(h * dk, dk);
    Mat<Scalar> da = dO * t.v.middleCols(h * dk, dk).transpose();
    dv.middleCols(h * dk, dk).noalias() = a.transpose() * dO;
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rowdot = (da.array() * a.array()).rowwise().sum();
    Mat<Scalar> ds = (a.array() * (da.array().colwise() - rowdot.array())) * scale;
    dq.middleCols(h * dk, dk).noalias() = ds * t.k.middleCols(h * dk, dk);
    dk_.middleCols(h * dk, dk).noalias() = ds.transpose() * t.q.middleCols(h * dk, dk);
  }
  Mat<Scalar> dattn_in = layers::linear_backward(t.attn_in, p["tf.attn.q.weight"], dq, g["tf.attn.q.weight"], g["tf.attn.q.bias"]);
  dattn_in += layers::linear_backward(t.attn_in, p["tf.attn.k.weight"], dk_, g["tf.attn.k.weight"], g["tf.attn.k.bias"]);
  dattn_in += layers::linear_backward(t.attn_in, p["tf.attn.v.weight"], dv, g["tf.attn.v.weight"], g["tf.attn.v.bias"]);
  g["tf.pos"] += dattn_in;
  Mat<Scalar> dx = dmid + layers::layer_norm_backward(t.ln1, p["tf.ln1.gamma"], dattn_in, g["tf.ln1.gamma"], g["tf.ln1.beta"]);
  return FeatureMap<Scalar>(Planes<Scalar>(dx.transpose()), t.height, t.width);
}

template <typename Scalar>
FeatureMap<Scalar> aspp_backward(const AsppTrace<Scalar>& t, const BackboneParameters<Scalar>& p,
                                 const BackboneConfig& cfg, const FeatureMap<Scalar>& dout,
                                 BackboneParameters<Scalar>& g) {
  using namespace backbone_detail;
  const int d = cfg.token_dim;
  Tensor<Scalar> dstacked = layers::conv2d_backward(t.proj, p["aspp.proj.weight"], dout, g["aspp.proj.weight"], &g["aspp.proj.bias"]);
  FeatureMap<Scalar> dx;
  for (size_t i = 0; i < t.branch_outputs.size(); ++i) {
    Tensor<Scalar> dy(Planes<Scalar>(dstacked.data.middleRows(static_cast<Eigen::Index>(i) * d, d)), dout.height, dout.width);
    dy = layers::relu_backward(t.branch_outputs[i], dy);
    auto di = layers::conv2d_backward(t.branch_convs[i], p[branch(i, "weight")], dy, g[branch(i, "weight")], &g[branch(i, "bias")]);
    if (i == 0) dx = std::move(di);
    else dx.data += di.data;
  }
  return dx;
}

/// Backpropagates loss gradients w.r.t. logits and log-variance into g.
template <typename Scalar>
void backward(const ForwardTrace<Scalar>& t, const BackboneParameters<Scalar>& p, const BackboneConfig& cfg,
              const Tensor<Scalar>& dlogits, const Tensor<Scalar>& dlogvar, BackboneParameters<Scalar>& g) {
  using namespace backbone_detail;
  FeatureMap<Scalar> dtop = layers::conv2d_backward(t.seg_head, p["head.seg.weight"], dlogits, g["head.seg.weight"], &g["head.seg.bias"]);
  dtop.data += layers::conv2d_backward(t.logvar_head, p["head.logvar.weight"], dlogvar, g["head.logvar.weight"],
                                       &g["head.logvar.bias"]).data;

  std::vector<FeatureMap<Scalar>> denc(cfg.depth);
  FeatureMap<Scalar> dcur = std::move(dtop);
  for (int l = 0; l <= cfg.depth - 2; ++l) {
    const auto& s = t.decode.stages[l];
    if (s.drop.size()) dcur.data.array() *= s.drop.array();
    // out = fused + relu(res(fused))
    Tensor<Scalar> dres = layers::relu_backward(s.refined, dcur);
    Tensor<Scalar> dfused = layers::conv2d_backward(s.res, p[dec(l, "res.weight")], dres, g[dec(l, "res.weight")], &g[dec(l, "res.bias")]);
    dfused.data += dcur.data;
    Tensor<Scalar> dpre = layers::relu_backward(s.fused, dfused);
    denc[l] = layers::conv2d_backward<Scalar>(s.skip, p[dec(l, "skip.weight")], dpre, g[dec(l, "skip.weight")], nullptr);
    Tensor<Scalar> dup = layers::conv2d_backward(s.up, p[dec(l, "up.weight")], dpre, g[dec(l, "up.weight")], &g[dec(l, "up.bias")]);
    dcur = layers::upsample2_backward(dup);
  }
  FeatureMap<Scalar> daspp = transformer_backward(t.transformer, p, cfg, dcur, g);
  FeatureMap<Scalar> ddeep = aspp_backward(t.aspp, p, cfg, daspp, g);

  FeatureMap<Scalar> dstage = std::move(ddeep);
  for (int l = cfg.depth - 1; l >= 0; --l) {
    if (l < cfg.depth - 1) dstage.data += denc[l].data;
    Tensor<Scalar> dpre = layers::relu_backward(t.encode.outputs[l], dstage);
    Tensor<Scalar> din = layers::conv2d_backward(t.encode.convs[l], p[enc(l, "weight")], dpre, g[enc(l, "weight")], &g[enc(l, "bias")]);
    if (l > 0) dstage = layers::maxpool2_backward(t.encode.pools[l - 1], din);
  }
}

}  // namespace tsseg
