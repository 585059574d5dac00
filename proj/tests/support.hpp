#pragma once

#include "tsseg/backbone.hpp"

#include <doctest.h>

#include <filesystem>
#include <random>

namespace tsseg::testing {

/// Depth-2 network on 16x16 inputs; small enough for finite differences.
inline BackboneConfig tiny_config(double dropout = 0.0) {
  BackboneConfig c;
  c.in_channels = 4;
  c.num_classes = 4;
  c.base_width = 4;
  c.depth = 2;
  c.dilation_rates = {1, 2};
  c.token_dim = 8;
  c.heads = 2;
  c.ff_mult = 2;
  c.dropout_rate = dropout;
  c.input_height = 16;
  c.input_width = 16;
  return c;
}

template <typename Scalar = float>
Tensor<Scalar> random_tensor(int c, int h, int w, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<Scalar> t(c, h, w);
  for (Eigen::Index i = 0; i < t.data.size(); ++i) t.data.data()[i] = Scalar(u(rng));
  return t;
}

/// Random point on the probability simplex at every pixel.
template <typename Scalar = double>
Tensor<Scalar> random_probs(int c, int h, int w, std::mt19937_64& rng) {
  std::gamma_distribution<double> g(1.0, 1.0);
  Tensor<Scalar> t(c, h, w);
  for (int p = 0; p < t.pixels(); ++p) {
    double total = 0;
    for (int k = 0; k < c; ++k) total += (t.data(k, p) = Scalar(g(rng) + 1e-3));
    for (int k = 0; k < c; ++k) t.data(k, p) /= Scalar(total);
  }
  return t;
}

inline LabelMask random_mask(int c, int h, int w, std::mt19937_64& rng) {
  IndexGrid g(h, w);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = static_cast<std::int32_t>(rng() % c);
  return LabelMask{g, c};
}

/// Fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("tsseg-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace tsseg::testing
