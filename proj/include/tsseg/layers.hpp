#pragma once

// Forward/backward primitives for the segmentation backbone. Every backward
// routine returns the gradient w.r.t. its input and accumulates into the
// parameter gradients it is handed.

#include "tsseg/core.hpp"

#include <random>

namespace tsseg::layers {

struct ConvGeometry {
  int kernel = 3;
  int dilation = 1;
};

/// Unfolds x into (channels * k * k) x pixels columns for a same-size
/// convolution with zero padding of dilation * (k / 2).
template <typename Scalar>
Planes<Scalar> im2col(const Tensor<Scalar>& x, ConvGeometry g) {
  const int k = g.kernel, half = k / 2, H = x.height, W = x.width;
  Planes<Scalar> cols = Planes<Scalar>::Zero(static_cast<Eigen::Index>(x.channels()) * k * k, x.pixels());
  for (int c = 0; c < x.channels(); ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const int dy = (ky - half) * g.dilation, dx = (kx - half) * g.dilation;
        auto row = cols.row((c * k + ky) * k + kx);
        for (int y = 0; y < H; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
          for (int xx = x0; xx < x1; ++xx) row(y * W + xx) = x.data(c, sy * W + xx + dx);
        }
      }
  return cols;
}

template <typename Scalar>
Tensor<Scalar> col2im(const Planes<Scalar>& cols, int channels, int H, int W, ConvGeometry g) {
  const int k = g.kernel, half = k / 2;
  Tensor<Scalar> x(channels, H, W);
  for (int c = 0; c < channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const int dy = (ky - half) * g.dilation, dx = (kx - half) * g.dilation;
        const auto row = cols.row((c * k + ky) * k + kx);
        for (int y = 0; y < H; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
          for (int xx = x0; xx < x1; ++xx) x.data(c, sy * W + xx + dx) += row(y * W + xx);
        }
      }
  return x;
}

/// Cached input of a convolution (already unfolded for k > 1).
template <typename Scalar>
struct ConvCache {
  Planes<Scalar> cols;
  int in_channels = 0, height = 0, width = 0;
  ConvGeometry geometry;
};

/// weight: out x (in * k * k); bias: out x 1 (may be empty for no bias).
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Planes<Scalar>& weight, const Planes<Scalar>* bias,
                      ConvGeometry g, ConvCache<Scalar>* cache = nullptr) {
  const Eigen::Index expect = static_cast<Eigen::Index>(x.channels()) * g.kernel * g.kernel;
  if (weight.cols() != expect)
    throw ShapeError("conv2d: weight expects " + std::to_string(weight.cols() / (g.kernel * g.kernel)) +
                     " input channels, got " + std::to_string(x.channels()));
  Tensor<Scalar> y(static_cast<int>(weight.rows()), x.height, x.width);
  if (g.kernel == 1) {
    y.data.noalias() = weight * x.data;
    if (cache) cache->cols = x.data;
  } else {
    Planes<Scalar> cols = im2col(x, g);
    y.data.noalias() = weight * cols;
    if (cache) cache->cols = std::move(cols);
  }
  if (bias) y.data.colwise() += bias->col(0);
  if (cache) {
    cache->in_channels = x.channels();
    cache->height = x.height;
    cache->width = x.width;
    cache->geometry = g;
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> conv2d_backward(const ConvCache<Scalar>& cache, const Planes<Scalar>& weight,
                               const Tensor<Scalar>& dy, Planes<Scalar>& dweight, Planes<Scalar>* dbias) {
  dweight.noalias() += dy.data * cache.cols.transpose();
  if (dbias) dbias->col(0) += dy.data.rowwise().sum();
  Planes<Scalar> dcols = weight.transpose() * dy.data;
  if (cache.geometry.kernel == 1) return Tensor<Scalar>(std::move(dcols), cache.height, cache.width);
  return col2im(dcols, cache.in_channels, cache.height, cache.width, cache.geometry);
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return Tensor<Scalar>(x.data.cwiseMax(Scalar(0)), x.height, x.width);
}

/// Gradient through ReLU given the ReLU output.
template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& out, const Tensor<Scalar>& dy) {
  return Tensor<Scalar>((out.data.array() > Scalar(0)).select(dy.data, Scalar(0)), dy.height, dy.width);
}

struct PoolCache {
  std::vector<int> argmax;  // source pixel per output element, channel-major
  int height = 0, width = 0;
};

/// 2x2 max pooling with stride 2. Ties resolve to the first element in scan order.
template <typename Scalar>
Tensor<Scalar> maxpool2(const Tensor<Scalar>& x, PoolCache* cache = nullptr) {
  if (x.height % 2 || x.width % 2) throw ShapeError("maxpool2: odd spatial size");
  const int h = x.height / 2, w = x.width / 2;
  Tensor<Scalar> y(x.channels(), h, w);
  if (cache) {
    cache->argmax.assign(static_cast<size_t>(x.channels()) * h * w, 0);
    cache->height = x.height;
    cache->width = x.width;
  }
  for (int c = 0; c < x.channels(); ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        int best = (2 * i) * x.width + 2 * j;
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b) {
            const int p = (2 * i + a) * x.width + 2 * j + b;
            if (x.data(c, p) > x.data(c, best)) best = p;
          }
        y.data(c, i * w + j) = x.data(c, best);
        if (cache) cache->argmax[static_cast<size_t>(c) * h * w + i * w + j] = best;
      }
  return y;
}

template <typename Scalar>
Tensor<Scalar> maxpool2_backward(const PoolCache& cache, const Tensor<Scalar>& dy) {
  Tensor<Scalar> dx(dy.channels(), cache.height, cache.width);
  const int n = dy.pixels();
  for (int c = 0; c < dy.channels(); ++c)
    for (int q = 0; q < n; ++q) dx.data(c, cache.argmax[static_cast<size_t>(c) * n + q]) += dy.data(c, q);
  return dx;
}

/// Nearest-neighbour 2x upsampling.
template <typename Scalar>
Tensor<Scalar> upsample2(const Tensor<Scalar>& x) {
  const int H = 2 * x.height, W = 2 * x.width;
  Tensor<Scalar> y(x.channels(), H, W);
  for (int c = 0; c < x.channels(); ++c)
    for (int yy = 0; yy < H; ++yy)
      for (int xx = 0; xx < W; ++xx) y.data(c, yy * W + xx) = x.data(c, (yy / 2) * x.width + xx / 2);
  return y;
}

template <typename Scalar>
Tensor<Scalar> upsample2_backward(const Tensor<Scalar>& dy) {
  const int h = dy.height / 2, w = dy.width / 2;
  Tensor<Scalar> dx(dy.channels(), h, w);
  for (int c = 0; c < dy.channels(); ++c)
    for (int yy = 0; yy < dy.height; ++yy)
      for (int xx = 0; xx < dy.width; ++xx) dx.data(c, (yy / 2) * w + xx / 2) += dy.data(c, yy * dy.width + xx);
  return dx;
}

/// Inverted dropout mask: entries are 0 or 1 / (1 - rate).
template <typename Scalar, typename Rng>
Planes<Scalar> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  Planes<Scalar> mask(rows, cols);
  std::bernoulli_distribution keep(1.0 - rate);
  const Scalar scale = Scalar(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? scale : Scalar(0);
  return mask;
}

// ---- token-level (N x d) operations ----

template <typename Scalar>
struct LayerNormCache {
  Mat<Scalar> normalized;  // xhat
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std;
};

template <typename Scalar>
Mat<Scalar> layer_norm(const Mat<Scalar>& x, const Planes<Scalar>& gamma, const Planes<Scalar>& beta,
                       LayerNormCache<Scalar>* cache = nullptr, Scalar eps = Scalar(1e-5)) {
  const Eigen::Index d = x.cols();
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean = x.rowwise().mean();
  Mat<Scalar> centered = x.colwise() - mean;
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> var = centered.array().square().rowwise().sum() / Scalar(d);
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std = (var.array() + eps).rsqrt();
  Mat<Scalar> xhat = centered.array().colwise() * inv_std.array();
  Mat<Scalar> y = (xhat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array();
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = inv_std;
  }
  return y;
}

template <typename Scalar>
Mat<Scalar> layer_norm_backward(const LayerNormCache<Scalar>& cache, const Planes<Scalar>& gamma,
                                const Mat<Scalar>& dy, Planes<Scalar>& dgamma, Planes<Scalar>& dbeta) {
  const auto& xhat = cache.normalized;
  const Scalar d = Scalar(xhat.cols());
  dgamma.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  dbeta.row(0) += dy.colwise().sum();
  const Mat<Scalar> dxhat = dy.array().rowwise() * gamma.row(0).array();
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> sum1 = dxhat.rowwise().sum();
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> sum2 = (dxhat.array() * xhat.array()).rowwise().sum();
  Mat<Scalar> dx = (d * dxhat.array() - xhat.array().colwise() * sum2.array()).colwise() - sum1.array();
  dx.array().colwise() *= cache.inv_std.array() / d;
  return dx;
}

/// Row-wise affine map x * W + b with W: in x out, b: 1 x out.
template <typename Scalar>
Mat<Scalar> linear(const Mat<Scalar>& x, const Planes<Scalar>& weight, const Planes<Scalar>& bias) {
  Mat<Scalar> y = x * weight;
  y.rowwise() += bias.row(0);
  return y;
}

template <typename Scalar>
Mat<Scalar> linear_backward(const Mat<Scalar>& x, const Planes<Scalar>& weight, const Mat<Scalar>& dy,
                            Planes<Scalar>& dweight, Planes<Scalar>& dbias) {
  dweight.noalias() += x.transpose() * dy;
  dbias.row(0) += dy.colwise().sum();
  return dy * weight.transpose();
}

template <typename Scalar>
Mat<Scalar> softmax_rows(const Mat<Scalar>& s) {
  Mat<Scalar> a = (s.colwise() - s.rowwise().maxCoeff()).array().exp();
  a.array().colwise() /= a.rowwise().sum().array();
  return a;
}

}  // namespace tsseg::layers
