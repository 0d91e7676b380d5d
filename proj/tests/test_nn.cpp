#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "jigsaw_vae/network.hpp"
#include "jigsaw_vae/nn.hpp"

using namespace jigsaw_vae;
using nn::Matrix;

namespace {

// Relative error of an analytic gradient against central differences of
// L = sum(w .* f(params, x)).
double layer_grad_error(const nn::Sequential& net, std::size_t in_features, Rng& rng) {
  std::vector<double> params(net.param_end());
  for (auto& p : params) p = rng.normal() * 0.5;
  Matrix<double> x(3, in_features);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  nn::ForwardCache<double> cache;
  const Matrix<double> y = net.forward<double>(params, x, &cache);
  Matrix<double> w(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
  std::vector<double> grad(params.size(), 0.0);
  const Matrix<double> dx = net.backward<double>(params, cache, w, grad, true);

  auto loss = [&](const std::vector<double>& p, const Matrix<double>& in) {
    return (net.forward<double>(p, in).array() * w.array()).sum();
  };
  const double h = 1e-6;
  double num = 0, den = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params;
    p[k] += h;
    const double up = loss(p, x);
    p[k] -= 2 * h;
    const double fd = (up - loss(p, x)) / (2 * h);
    num += (fd - grad[k]) * (fd - grad[k]);
    den += fd * fd + grad[k] * grad[k];
  }
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Matrix<double> xp = x;
    xp.data()[i] += h;
    const double up = loss(params, xp);
    xp.data()[i] -= 2 * h;
    const double fd = (up - loss(params, xp)) / (2 * h);
    num += (fd - dx.data()[i]) * (fd - dx.data()[i]);
    den += fd * fd + dx.data()[i] * dx.data()[i];
  }
  return std::sqrt(num / den);
}

}  // namespace

TEST(ConvGeometry, OutputSizes) {
  EXPECT_EQ(nn::conv_out_size(28, 3, 2, 1), 14u);
  EXPECT_EQ(nn::conv_out_size(14, 4, 2, 1), 7u);
  EXPECT_EQ(nn::conv_out_size(7, 3, 2, 1), 4u);
  EXPECT_EQ(nn::conv_out_size(32, 4, 2, 1), 16u);
}

TEST(Layers, ConvGradient) {
  Rng rng(1);
  nn::Sequential net;
  net.begin_params(0);
  net.add_conv({5, 6, 2}, 3, 3, 3, 2, 1);
  EXPECT_LT(layer_grad_error(net, 5 * 6 * 2, rng), 1e-7);
}

TEST(Layers, ConvTransposeGradient) {
  Rng rng(2);
  nn::Sequential net;
  net.begin_params(0);
  net.add_conv_transpose({4, 4, 3}, {8, 8, 2}, 4, 4, 2, 1);
  EXPECT_LT(layer_grad_error(net, 4 * 4 * 3, rng), 1e-7);
}

TEST(Layers, DenseAndActivationsGradient) {
  Rng rng(3);
  nn::Sequential net;
  net.begin_params(0);
  net.add_dense(7, 5);
  net.add_activation(nn::LayerKind::leaky_relu);
  net.add_dense(5, 4);
  net.add_activation(nn::LayerKind::sigmoid);
  EXPECT_LT(layer_grad_error(net, 7, rng), 1e-7);
}

TEST(Layers, ConvTransposeIsAdjointOfConv) {
  // <conv(x), y> == <x, convT(y)> with shared weights and zero bias
  Rng rng(4);
  const ImageShape big{6, 6, 2}, small{3, 3, 3};
  nn::Sequential conv, convt;
  conv.begin_params(0);
  conv.add_conv(big, 3, 4, 4, 2, 1);
  convt.begin_params(0);
  convt.add_conv_transpose(small, big, 4, 4, 2, 1);
  // conv W is (kh,kw,cin) x cout; convT W is cin_t x (kh,kw,cout_t) with cin_t = 3, cout_t = 2
  std::vector<double> wc(conv.param_end(), 0.0), wt(convt.param_end(), 0.0);
  const std::size_t K = 16;
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t ci = 0; ci < 2; ++ci)
      for (std::size_t co = 0; co < 3; ++co) {
        const double v = rng.normal();
        wc[(k * 2 + ci) * 3 + co] = v;
        wt[co * (K * 2) + k * 2 + ci] = v;
      }
  Matrix<double> x(1, big.pixels()), y(1, small.pixels());
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = rng.normal();
  const double lhs = (conv.forward<double>(wc, x).array() * y.array()).sum();
  const double rhs = (x.array() * convt.forward<double>(wt, y).array()).sum();
  EXPECT_NEAR(lhs, rhs, 1e-10 * std::max(1.0, std::abs(lhs)));
}

TEST(NetworkShape, MnistEncoderDecoder) {
  const Network net(ArchConfig{});
  EXPECT_EQ(net.encoder.in_features(), 28u * 28u * 3u);
  EXPECT_EQ(net.encoder.out_features(), 32u);
  EXPECT_EQ(net.decoder.in_features(), 16u);
  EXPECT_EQ(net.decoder.out_features(), 28u * 28u * 3u);
  EXPECT_EQ(net.decoder.param_begin(), net.encoder.param_end());
}

TEST(NetworkShape, SyntheticEncoderDecoder) {
  const Network net(ArchConfig{{32, 32, 3}, {32, 32, 64, 64}, 16});
  EXPECT_EQ(net.decoder.out_features(), 32u * 32u * 3u);
}

TEST(NetworkShape, DecoderOutputsInUnitInterval) {
  Rng rng(5);
  const Network net(ArchConfig{});
  const auto p = net.initial_params<float>(rng);
  Matrix<float> z(4, 16);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = static_cast<float>(rng.normal() * 3);
  const auto x = net.decoder.forward<float>(p, z);
  EXPECT_GE(x.minCoeff(), 0.0f);
  EXPECT_LE(x.maxCoeff(), 1.0f);
}
