#pragma once

#include <cstdint>
#include <vector>

#include "image.hpp"
#include "nn.hpp"
#include "random.hpp"

namespace jigsaw_vae {

/// Encoder: one strided conv per entry of `channels` (LeakyReLU after each),
/// then a dense layer to [mean | log-variance]. Decoder mirrors it with
/// transposed convolutions and a sigmoid output.
struct ArchConfig {
  ImageShape input{28, 28, 3};
  std::vector<std::size_t> channels{32, 32, 64, 64};
  std::size_t latent_dim = 16;

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

/// Spatial size after one downsampling conv: even sides use kernel 4,
/// odd sides kernel 3; both stride 2, pad 1.
inline std::size_t downsample_kernel(std::size_t side) { return side % 2 == 0 ? 4 : 3; }

struct Network {
  ArchConfig arch;
  nn::Sequential encoder;
  nn::Sequential decoder;

  explicit Network(const ArchConfig& a) : arch(a) {
    if (a.input.pixels() == 0) throw DimensionMismatch("Network: empty input shape");
    if (a.latent_dim == 0) throw DimensionMismatch("Network: latent_dim must be positive");
    if (a.channels.empty()) throw DimensionMismatch("Network: at least one conv layer required");

    std::vector<ImageShape> shapes{a.input};
    encoder.begin_params(0);
    for (std::size_t ch : a.channels) {
      const auto& s = shapes.back();
      encoder.add_conv(s, ch, downsample_kernel(s.height), downsample_kernel(s.width), 2, 1);
      encoder.add_activation(nn::LayerKind::leaky_relu);
      shapes.push_back(encoder.layers()[encoder.layers().size() - 2].conv.out);
    }
    encoder.add_dense(shapes.back().pixels(), 2 * a.latent_dim);

    decoder.begin_params(encoder.param_end());
    decoder.add_dense(a.latent_dim, shapes.back().pixels());
    decoder.add_activation(nn::LayerKind::leaky_relu);
    for (std::size_t i = a.channels.size(); i-- > 0;) {
      ImageShape target = shapes[i];
      const auto& s = shapes[i + 1];
      decoder.add_conv_transpose(s, target, downsample_kernel(target.height), downsample_kernel(target.width), 2, 1);
      decoder.add_activation(i == 0 ? nn::LayerKind::sigmoid : nn::LayerKind::leaky_relu);
    }
  }

  std::size_t param_count() const { return decoder.param_end(); }
  std::size_t encoder_param_count() const { return encoder.param_end(); }

  template <typename T>
  AlignedVector<T> initial_params(Rng& rng) const {
    AlignedVector<T> p(param_count(), T(0));
    encoder.initialize<T>(p, rng, 0.1);
    decoder.initialize<T>(p, rng);
    return p;
  }
};

/// Network weights plus the architecture they belong to. Parameter order is
/// encoder layers then decoder layers; within a layer, weights then biases.
/// Conv weights are (kh, kw, c_in) x c_out row-major; transposed-conv weights
/// are c_in x (kh, kw, c_out); dense weights are in x out.
template <typename T = float>
struct ModelParams {
  ArchConfig arch;
  AlignedVector<T> values;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

template <typename T = float>
ModelParams<T> init_model(const ArchConfig& arch, Rng& rng) {
  Network net(arch);
  return {arch, net.initial_params<T>(rng)};
}

}  // namespace jigsaw_vae
