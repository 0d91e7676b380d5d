#pragma once

// Minimal feed-forward network with hand-written backward passes. Activations
// are row-major (batch x features) matrices whose feature axis is an HWC
// image, so a strided convolution is im2col followed by one GEMM.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "image.hpp"
#include "random.hpp"

namespace jigsaw_vae::nn {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<Matrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const Matrix<T>>;

inline constexpr double kLeakySlope = 0.2;

enum class LayerKind { conv, conv_transpose, dense, leaky_relu, sigmoid };

/// Geometry of a strided convolution from `in` to `out`; a transposed
/// convolution reuses the same geometry with the roles of in/out swapped.
struct ConvGeometry {
  ImageShape in;   // conv input (the transposed layer's output)
  ImageShape out;  // conv output (the transposed layer's input)
  std::size_t kernel_h = 1, kernel_w = 1, stride = 1, pad = 0;

  std::size_t patch() const noexcept { return kernel_h * kernel_w * in.channels; }
};

inline std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  ConvGeometry conv{};
  std::size_t weight_offset = 0;
  std::size_t weight_count = 0;
  std::size_t bias_offset = 0;
  std::size_t bias_count = 0;
};

namespace detail {

/// rows: (n, oy, ox); cols: (ky, kx, c). Out-of-image taps read zero.
template <typename T>
void im2col(const ConvGeometry& g, std::size_t batch, const T* x, T* cols) {
  const std::size_t C = g.in.channels, P = g.patch();
  for (std::size_t n = 0; n < batch; ++n) {
    const T* img = x + n * g.in.pixels();
    for (std::size_t oy = 0; oy < g.out.height; ++oy) {
      for (std::size_t ox = 0; ox < g.out.width; ++ox) {
        T* row = cols + ((n * g.out.height + oy) * g.out.width + ox) * P;
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + ky * g.kernel_w * C;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in.height)) {
            std::fill(dst, dst + g.kernel_w * C, T(0));
            continue;
          }
          for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            T* d = dst + kx * C;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in.width)) {
              std::fill(d, d + C, T(0));
            } else {
              const T* s = img + (static_cast<std::size_t>(iy) * g.in.width + static_cast<std::size_t>(ix)) * C;
              std::copy(s, s + C, d);
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: accumulates patch columns back into images.
template <typename T>
void col2im(const ConvGeometry& g, std::size_t batch, const T* cols, T* x) {
  const std::size_t C = g.in.channels, P = g.patch();
  std::fill(x, x + batch * g.in.pixels(), T(0));
  for (std::size_t n = 0; n < batch; ++n) {
    T* img = x + n * g.in.pixels();
    for (std::size_t oy = 0; oy < g.out.height; ++oy) {
      for (std::size_t ox = 0; ox < g.out.width; ++ox) {
        const T* row = cols + ((n * g.out.height + oy) * g.out.width + ox) * P;
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in.height)) continue;
          for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in.width)) continue;
            const T* s = row + (ky * g.kernel_w + kx) * C;
            T* d = img + (static_cast<std::size_t>(iy) * g.in.width + static_cast<std::size_t>(ix)) * C;
            for (std::size_t c = 0; c < C; ++c) d[c] += s[c];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Activations kept from the forward pass for backprop.
template <typename T>
struct ForwardCache {
  std::vector<Matrix<T>> inputs;   // input of every layer
  std::vector<Matrix<T>> columns;  // im2col buffers (conv) / col buffers (conv_transpose)
  Matrix<T> output;
};

/// A chain of layers whose parameters live in an external flat array.
class Sequential {
 public:
  Sequential() = default;

  std::size_t in_features() const { return layers_.empty() ? 0 : layers_.front().in_features; }
  std::size_t out_features() const { return layers_.empty() ? 0 : layers_.back().out_features; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  std::size_t param_begin() const { return param_begin_; }
  std::size_t param_end() const { return param_end_; }

  /// Layers are appended with parameter ranges allocated from `next_offset`.
  void begin_params(std::size_t offset) { param_begin_ = param_end_ = offset; }

  void add_conv(const ImageShape& in, std::size_t out_channels, std::size_t kernel_h, std::size_t kernel_w,
                std::size_t stride, std::size_t pad) {
    ConvGeometry g{in, {}, kernel_h, kernel_w, stride, pad};
    g.out = {conv_out_size(in.height, kernel_h, stride, pad), conv_out_size(in.width, kernel_w, stride, pad),
             out_channels};
    LayerSpec l;
    l.kind = LayerKind::conv;
    l.conv = g;
    l.in_features = in.pixels();
    l.out_features = g.out.pixels();
    allocate(l, g.patch() * out_channels, out_channels);
  }

  /// Transposed convolution mapping `in` back to `out` (the shape a conv with
  /// the same kernel/stride/pad would map from).
  void add_conv_transpose(const ImageShape& in, const ImageShape& out, std::size_t kernel_h, std::size_t kernel_w,
                          std::size_t stride, std::size_t pad) {
    ConvGeometry g{out, in, kernel_h, kernel_w, stride, pad};
    if (conv_out_size(out.height, kernel_h, stride, pad) != in.height ||
        conv_out_size(out.width, kernel_w, stride, pad) != in.width)
      throw DimensionMismatch("add_conv_transpose: " + to_string(in) + " is not the conv image of " + to_string(out));
    LayerSpec l;
    l.kind = LayerKind::conv_transpose;
    l.conv = g;
    l.in_features = in.pixels();
    l.out_features = out.pixels();
    allocate(l, in.channels * g.patch(), out.channels);
  }

  void add_dense(std::size_t in, std::size_t out) {
    LayerSpec l;
    l.kind = LayerKind::dense;
    l.in_features = in;
    l.out_features = out;
    allocate(l, in * out, out);
  }

  void add_activation(LayerKind kind) {
    LayerSpec l;
    l.kind = kind;
    l.in_features = l.out_features = out_features();
    l.weight_offset = l.bias_offset = param_end_;
    layers_.push_back(l);
  }

  /// He-style initialisation of weights, zero biases.
  template <typename T>
  void initialize(std::span<T> params, Rng& rng, double last_layer_scale = 1.0) const {
    std::size_t last_weighted = layers_.size();
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (layers_[i].weight_count) last_weighted = i;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      if (!l.weight_count) continue;
      std::size_t fan_in = 0;
      switch (l.kind) {
        case LayerKind::conv: fan_in = l.conv.patch(); break;
        case LayerKind::conv_transpose:
          fan_in = l.conv.in.channels * l.conv.kernel_h * l.conv.kernel_w / (l.conv.stride * l.conv.stride);
          break;
        default: fan_in = l.in_features; break;
      }
      double scale = std::sqrt(2.0 / (1.0 + kLeakySlope * kLeakySlope) / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
      if (i == last_weighted) scale *= last_layer_scale;
      for (std::size_t k = 0; k < l.weight_count; ++k) params[l.weight_offset + k] = static_cast<T>(rng.normal() * scale);
      for (std::size_t k = 0; k < l.bias_count; ++k) params[l.bias_offset + k] = T(0);
    }
  }

  template <typename T>
  Matrix<T> forward(std::span<const T> params, const Matrix<T>& input, ForwardCache<T>* cache = nullptr) const {
    if (static_cast<std::size_t>(input.cols()) != in_features())
      throw DimensionMismatch("Sequential::forward: expected " + std::to_string(in_features()) + " features, got " +
                              std::to_string(input.cols()));
    if (cache) {
      cache->inputs.assign(layers_.size(), {});
      cache->columns.assign(layers_.size(), {});
    }
    Matrix<T> x = input;
    const auto n = static_cast<std::size_t>(input.rows());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      Matrix<T> y;
      switch (l.kind) {
        case LayerKind::dense: {
          ConstMatrixMap<T> w(params.data() + l.weight_offset, l.in_features, l.out_features);
          Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(params.data() + l.bias_offset, l.out_features);
          y.noalias() = x * w;
          y.rowwise() += b;
          break;
        }
        case LayerKind::conv: {
          const auto& g = l.conv;
          Matrix<T> cols(n * g.out.height * g.out.width, g.patch());
          detail::im2col(g, n, x.data(), cols.data());
          ConstMatrixMap<T> w(params.data() + l.weight_offset, g.patch(), g.out.channels);
          Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(params.data() + l.bias_offset, g.out.channels);
          Matrix<T> out(cols.rows(), g.out.channels);
          out.noalias() = cols * w;
          out.rowwise() += b;
          y = MatrixMap<T>(out.data(), n, l.out_features);
          if (cache) cache->columns[i] = std::move(cols);
          break;
        }
        case LayerKind::conv_transpose: {
          const auto& g = l.conv;
          ConstMatrixMap<T> xin(x.data(), n * g.out.height * g.out.width, g.out.channels);
          ConstMatrixMap<T> w(params.data() + l.weight_offset, g.out.channels, g.patch());
          Matrix<T> cols(xin.rows(), g.patch());
          cols.noalias() = xin * w;
          y.resize(n, l.out_features);
          detail::col2im(g, n, cols.data(), y.data());
          MatrixMap<T> ym(y.data(), n * g.in.height * g.in.width, g.in.channels);
          Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(params.data() + l.bias_offset, g.in.channels);
          ym.rowwise() += b;
          break;
        }
        case LayerKind::leaky_relu:
          y = x.unaryExpr([](T v) { return v > T(0) ? v : static_cast<T>(kLeakySlope) * v; });
          break;
        case LayerKind::sigmoid:
          y = x.unaryExpr([](T v) { return T(1) / (T(1) + std::exp(-v)); });
          break;
      }
      if (cache) cache->inputs[i] = std::move(x);
      x = std::move(y);
    }
    if (cache) cache->output = x;
    return x;
  }

  /// Given d(objective)/d(output), accumulates parameter gradients into
  /// `grad` (same layout as params) and returns d(objective)/d(input).
  template <typename T>
  Matrix<T> backward(std::span<const T> params, const ForwardCache<T>& cache, const Matrix<T>& d_output,
                     std::span<T> grad, bool need_input_grad = true) const {
    Matrix<T> dy = d_output;
    const auto n = static_cast<std::size_t>(d_output.rows());
    for (std::size_t i = layers_.size(); i-- > 0;) {
      const auto& l = layers_[i];
      const auto& x = cache.inputs[i];
      const bool first = (i == 0);
      Matrix<T> dx;
      switch (l.kind) {
        case LayerKind::dense: {
          ConstMatrixMap<T> w(params.data() + l.weight_offset, l.in_features, l.out_features);
          MatrixMap<T> gw(grad.data() + l.weight_offset, l.in_features, l.out_features);
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(grad.data() + l.bias_offset, l.out_features);
          gw.noalias() += x.transpose() * dy;
          gb += dy.colwise().sum();
          if (!first || need_input_grad) dx.noalias() = dy * w.transpose();
          break;
        }
        case LayerKind::conv: {
          const auto& g = l.conv;
          const auto& cols = cache.columns[i];
          ConstMatrixMap<T> dym(dy.data(), cols.rows(), g.out.channels);
          ConstMatrixMap<T> w(params.data() + l.weight_offset, g.patch(), g.out.channels);
          MatrixMap<T> gw(grad.data() + l.weight_offset, g.patch(), g.out.channels);
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(grad.data() + l.bias_offset, g.out.channels);
          gw.noalias() += cols.transpose() * dym;
          gb += dym.colwise().sum();
          if (!first || need_input_grad) {
            Matrix<T> dcols(cols.rows(), g.patch());
            dcols.noalias() = dym * w.transpose();
            dx.resize(n, l.in_features);
            detail::col2im(g, n, dcols.data(), dx.data());
          }
          break;
        }
        case LayerKind::conv_transpose: {
          const auto& g = l.conv;
          const std::size_t rows = n * g.out.height * g.out.width;
          Matrix<T> dcols(rows, g.patch());
          detail::im2col(g, n, dy.data(), dcols.data());
          ConstMatrixMap<T> xin(x.data(), rows, g.out.channels);
          ConstMatrixMap<T> w(params.data() + l.weight_offset, g.out.channels, g.patch());
          MatrixMap<T> gw(grad.data() + l.weight_offset, g.out.channels, g.patch());
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(grad.data() + l.bias_offset, g.in.channels);
          gw.noalias() += xin.transpose() * dcols;
          gb += ConstMatrixMap<T>(dy.data(), n * g.in.height * g.in.width, g.in.channels).colwise().sum();
          if (!first || need_input_grad) {
            dx.resize(n, l.in_features);
            MatrixMap<T> dxm(dx.data(), rows, g.out.channels);
            dxm.noalias() = dcols * w.transpose();
          }
          break;
        }
        case LayerKind::leaky_relu:
          dx = dy.binaryExpr(x, [](T d, T v) { return v > T(0) ? d : static_cast<T>(kLeakySlope) * d; });
          break;
        case LayerKind::sigmoid: {
          const auto& y = (i + 1 < layers_.size()) ? cache.inputs[i + 1] : cache.output;
          dx = dy.binaryExpr(y, [](T d, T s) { return d * s * (T(1) - s); });
          break;
        }
      }
      dy = std::move(dx);
    }
    return dy;
  }

 private:
  void allocate(LayerSpec& l, std::size_t weights, std::size_t biases) {
    if (!layers_.empty() && layers_.back().out_features != l.in_features)
      throw DimensionMismatch("Sequential: layer input " + std::to_string(l.in_features) +
                              " does not match previous output " + std::to_string(layers_.back().out_features));
    l.weight_offset = param_end_;
    l.weight_count = weights;
    l.bias_offset = param_end_ + weights;
    l.bias_count = biases;
    param_end_ += weights + biases;
    layers_.push_back(l);
  }

  std::vector<LayerSpec> layers_;
  std::size_t param_begin_ = 0;
  std::size_t param_end_ = 0;
};

}  // namespace jigsaw_vae::nn
