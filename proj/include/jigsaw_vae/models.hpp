#pragma once

// VAE family sharing one encoder/decoder pair. Variants differ only in what
// the encoder sees (clean, noisy, mixed or jigsaw-permuted input), which image
// is reconstructed, and the KL weight.

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "image.hpp"
#include "network.hpp"
#include "nn.hpp"
#include "permutation.hpp"
#include "random.hpp"

namespace jigsaw_vae {

using nn::Matrix;

enum class Variant { vae, beta_vae, d_vae, mixup_vae, jigsaw_vae, jigsaw_beta_vae };

inline constexpr std::array<Variant, 6> kAllVariants{Variant::vae,       Variant::beta_vae,   Variant::d_vae,
                                                     Variant::mixup_vae, Variant::jigsaw_vae, Variant::jigsaw_beta_vae};

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::vae: return "vae";
    case Variant::beta_vae: return "beta_vae";
    case Variant::d_vae: return "d_vae";
    case Variant::mixup_vae: return "mixup_vae";
    case Variant::jigsaw_vae: return "jigsaw_vae";
    case Variant::jigsaw_beta_vae: return "jigsaw_beta_vae";
  }
  return "?";
}

class InvalidVariant : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline Variant parse_variant(std::string_view name) {
  for (auto v : kAllVariants)
    if (to_string(v) == name) return v;
  throw InvalidVariant("unknown variant '" + std::string(name) + "'");
}

struct VariantConfig {
  Variant variant = Variant::vae;
  double beta = 4.0;
  double noise_std = 0.1;
  double mixup_alpha = 1.0;
  std::size_t grid_divisions = 4;
  bool permute_channels = false;

  bool is_jigsaw() const { return variant == Variant::jigsaw_vae || variant == Variant::jigsaw_beta_vae; }
  bool uses_beta() const { return variant == Variant::beta_vae || variant == Variant::jigsaw_beta_vae; }
  double effective_beta() const { return uses_beta() ? beta : 1.0; }

  void validate() const {
    if (static_cast<int>(variant) < 0 || static_cast<int>(variant) > 5) throw InvalidVariant("invalid variant value");
    if (uses_beta() && !(beta > 0.0)) throw std::invalid_argument("VariantConfig: beta must be positive");
    if (variant == Variant::d_vae && !(noise_std >= 0.0))
      throw std::invalid_argument("VariantConfig: noise_std must be nonnegative");
    if (variant == Variant::mixup_vae && !(mixup_alpha > 0.0))
      throw std::invalid_argument("VariantConfig: mixup_alpha must be positive");
    if (is_jigsaw() && grid_divisions == 0) throw std::invalid_argument("VariantConfig: grid_divisions must be positive");
  }
};

/// Per-sample Gaussian posterior, one row per sample:
/// sample = mean + exp(log_variance / 2) * noise.
template <typename T = float>
struct GaussianLatent {
  Matrix<T> mean;
  Matrix<T> log_variance;
  Matrix<T> sample;
  Matrix<T> noise;

  std::size_t size() const { return static_cast<std::size_t>(mean.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(mean.cols()); }
};

struct ElboReport {
  double recon_term = 0.0;
  double kl_term = 0.0;
  double beta = 1.0;
  double objective = 0.0;

  static ElboReport make(double recon, double kl, double beta) { return {recon, kl, beta, recon - beta * kl}; }
};

// ---------------------------------------------------------------------------
// KL divergence

/// KL(N(mean, exp(log_variance)) || N(0, I)) for one sample, in double.
template <typename Derived>
double kl_diag_gaussian(const Eigen::MatrixBase<Derived>& mean, const Eigen::MatrixBase<Derived>& log_variance) {
  double kl = 0.0;
  for (Eigen::Index d = 0; d < mean.size(); ++d) {
    const double m = static_cast<double>(mean(d)), lv = static_cast<double>(log_variance(d));
    kl += -0.5 * (1.0 + lv - m * m - std::exp(lv));
  }
  return kl;
}

/// Per-sample KL and its gradient with respect to mean and log-variance.
template <typename T>
struct KlTerms {
  Eigen::Matrix<T, Eigen::Dynamic, 1> per_sample;
  Matrix<T> d_mean;
  Matrix<T> d_log_variance;
};

struct StandardNormalPrior {
  template <typename T>
  KlTerms<T> operator()(const Matrix<T>& mean, const Matrix<T>& log_variance) const {
    KlTerms<T> out;
    const Matrix<T> var = log_variance.array().exp().matrix();
    out.per_sample = (T(-0.5) * (T(1) + log_variance.array() - mean.array().square() - var.array())).rowwise().sum();
    out.d_mean = mean;
    out.d_log_variance = (T(0.5) * (var.array() - T(1))).matrix();
    return out;
  }
};

// ---------------------------------------------------------------------------
// Encoder / decoder

template <typename T>
nn::ConstMatrixMap<T> as_matrix(const ImageBatch<T>& b) {
  return nn::ConstMatrixMap<T>(b.values().data(), b.size(), b.stride());
}

inline void check_geometry(const ArchConfig& arch, const ImageShape& shape) {
  if (shape != arch.input)
    throw DimensionMismatch("model expects " + to_string(arch.input) + " images, got " + to_string(shape));
}

/// Encodes with the given noise (rows x latent_dim); pass a zero matrix for
/// the posterior mean.
template <typename T>
GaussianLatent<T> encode_with_noise(const ModelParams<T>& params, const ImageBatch<T>& batch, const Matrix<T>& noise) {
  check_geometry(params.arch, batch.shape());
  const Network net(params.arch);
  const std::size_t D = params.arch.latent_dim;
  if (static_cast<std::size_t>(noise.rows()) != batch.size() || static_cast<std::size_t>(noise.cols()) != D)
    throw DimensionMismatch("encode: noise must be batch x latent_dim");
  const Matrix<T> h = net.encoder.forward<T>(params.values, Matrix<T>(as_matrix(batch)));
  GaussianLatent<T> out;
  out.mean = h.leftCols(D);
  out.log_variance = h.rightCols(D);
  out.noise = noise;
  out.sample = out.mean.array() + (T(0.5) * out.log_variance.array()).exp() * noise.array();
  return out;
}

template <typename T>
Matrix<T> draw_noise(std::size_t rows, std::size_t dim, Rng& rng) {
  Matrix<T> eps(rows, dim);
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = static_cast<T>(rng.normal());
  return eps;
}

template <typename T>
GaussianLatent<T> encode(const ModelParams<T>& params, const ImageBatch<T>& batch, Rng& rng) {
  return encode_with_noise(params, batch, draw_noise<T>(batch.size(), params.arch.latent_dim, rng));
}

/// Posterior means, computed in chunks.
template <typename T>
Matrix<T> encode_means(const ModelParams<T>& params, const ImageBatch<T>& batch, std::size_t chunk = 256) {
  const std::size_t D = params.arch.latent_dim;
  Matrix<T> means(batch.size(), D);
  for (std::size_t b = 0; b < batch.size(); b += chunk) {
    const std::size_t e = std::min(batch.size(), b + chunk);
    auto lat = encode_with_noise<T>(params, batch.slice(b, e), Matrix<T>::Zero(e - b, D));
    means.middleRows(b, e - b) = lat.mean;
  }
  return means;
}

/// Decoder output: per-pixel likelihood means in [0, 1].
template <typename T>
ImageBatch<T> decode(const ModelParams<T>& params, const Matrix<T>& z) {
  if (static_cast<std::size_t>(z.cols()) != params.arch.latent_dim)
    throw DimensionMismatch("decode: expected latent dimension " + std::to_string(params.arch.latent_dim) + ", got " +
                            std::to_string(z.cols()));
  const Network net(params.arch);
  Matrix<T> x = net.decoder.forward<T>(params.values, z);
  AlignedVector<T> data(x.data(), x.data() + x.size());
  return ImageBatch<T>(static_cast<std::size_t>(z.rows()), params.arch.input, std::move(data));
}

// ---------------------------------------------------------------------------
// Variant inputs

struct MixupResult {
  ImageBatch<float> mixed;
  ImageBatch<float> target;
  double lambda = 1.0;
};

/// mixed = lambda * a + (1 - lambda) * b; the target is whichever source
/// contributes more (a on a tie).
template <typename T>
std::pair<ImageBatch<T>, ImageBatch<T>> mixup_with_lambda(const ImageBatch<T>& a, const ImageBatch<T>& b,
                                                          double lambda) {
  if (a.shape() != b.shape() || a.size() != b.size()) throw DimensionMismatch("mixup: batches differ in geometry");
  ImageBatch<T> mixed(a.size(), a.shape());
  const T l = static_cast<T>(lambda), m = static_cast<T>(1.0 - lambda);
  auto av = a.values(), bv = b.values();
  auto out = mixed.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = l * av[i] + m * bv[i];
  return {std::move(mixed), lambda >= 0.5 ? a : b};
}

inline MixupResult mixup_batch(const ImageBatch<float>& a, const ImageBatch<float>& b, double alpha, Rng& rng) {
  if (!(alpha > 0.0)) throw std::invalid_argument("mixup_batch: alpha must be positive");
  if (a.shape() != b.shape() || a.size() != b.size()) throw DimensionMismatch("mixup: batches differ in geometry");
  const double lambda = rng.beta(alpha, alpha);
  auto [mixed, target] = mixup_with_lambda(a, b, lambda);
  return {std::move(mixed), std::move(target), lambda};
}

/// Every stochastic choice of one ELBO evaluation, so the objective can be
/// re-evaluated (e.g. for finite differences) with identical draws.
template <typename T = float>
struct StepDraws {
  Matrix<T> noise;                             // latent epsilon
  std::vector<PermutationSpec> permutations;   // jigsaw: one per sample
  std::vector<T> input_noise;                  // d_vae: additive pixel noise
  double mix_lambda = 1.0;                     // mixup
  std::vector<std::size_t> mix_partner;        // mixup: partner index per sample
};

template <typename T>
StepDraws<T> draw_step(const ImageBatch<T>& batch, const VariantConfig& config, std::size_t latent_dim, Rng& rng) {
  StepDraws<T> d;
  switch (config.variant) {
    case Variant::d_vae:
      d.input_noise.resize(batch.values().size());
      for (auto& v : d.input_noise) v = static_cast<T>(rng.normal() * config.noise_std);
      break;
    case Variant::mixup_vae:
      d.mix_partner.resize(batch.size());
      std::iota(d.mix_partner.begin(), d.mix_partner.end(), std::size_t{0});
      rng.shuffle(std::span<std::size_t>(d.mix_partner));
      d.mix_lambda = rng.beta(config.mixup_alpha, config.mixup_alpha);
      break;
    case Variant::jigsaw_vae:
    case Variant::jigsaw_beta_vae: {
      const auto grid = make_grid(batch.shape().height, batch.shape().width, config.grid_divisions);
      std::optional<std::size_t> channels;
      if (config.permute_channels) channels = batch.shape().channels;
      d.permutations.reserve(batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i) d.permutations.push_back(sample_permutation(grid, channels, rng));
      break;
    }
    default: break;
  }
  d.noise = draw_noise<T>(batch.size(), latent_dim, rng);
  return d;
}

template <typename T>
struct VariantInputs {
  ImageBatch<T> encoder_input;
  ImageBatch<T> target;
};

/// What the encoder sees and what the decoder must reproduce. Jigsaw variants
/// encode j(x) but reconstruct the original x.
template <typename T>
VariantInputs<T> variant_inputs(const ImageBatch<T>& batch, const VariantConfig& config, const StepDraws<T>& draws) {
  switch (config.variant) {
    case Variant::vae:
    case Variant::beta_vae: return {batch, batch};
    case Variant::d_vae: {
      ImageBatch<T> noisy = batch;
      auto v = noisy.values();
      if (draws.input_noise.size() != v.size()) throw DimensionMismatch("d_vae: input noise size mismatch");
      for (std::size_t i = 0; i < v.size(); ++i) v[i] += draws.input_noise[i];
      return {std::move(noisy), batch};
    }
    case Variant::mixup_vae: {
      const auto partner = batch.gather(draws.mix_partner);
      auto [mixed, target] = mixup_with_lambda(batch, partner, draws.mix_lambda);
      return {std::move(mixed), std::move(target)};
    }
    case Variant::jigsaw_vae:
    case Variant::jigsaw_beta_vae: return {apply_each<T>(draws.permutations, batch), batch};
  }
  throw InvalidVariant("variant_inputs: invalid variant");
}

// ---------------------------------------------------------------------------
// ELBO

/// Log-density of a unit-variance Gaussian over all pixels, averaged over the
/// batch, plus its gradient with respect to the reconstruction.
template <typename T>
double gaussian_log_likelihood(const Matrix<T>& target, const Matrix<T>& recon, Matrix<T>* d_recon) {
  const auto n = static_cast<double>(target.rows());
  const auto pixels = static_cast<double>(target.cols());
  const Matrix<T> diff = target - recon;
  double sq = 0.0;
  for (Eigen::Index i = 0; i < diff.size(); ++i) sq += static_cast<double>(diff.data()[i]) * diff.data()[i];
  if (d_recon) *d_recon = diff / static_cast<T>(n);
  return -0.5 * sq / n - 0.5 * pixels * std::log(2.0 * std::numbers::pi);
}

/// Single-sample ELBO of `target` under q(z | encoder_input), averaged over
/// the batch. When `grad` is non-empty the gradient of the objective with
/// respect to all parameters is accumulated into it.
template <typename T, typename Prior = StandardNormalPrior>
ElboReport elbo_core(const ModelParams<T>& params, const ImageBatch<T>& encoder_input, const ImageBatch<T>& target,
                     const Matrix<T>& noise, double beta, std::span<T> grad, const Prior& prior = {},
                     GaussianLatent<T>* latent_out = nullptr) {
  check_geometry(params.arch, encoder_input.shape());
  check_geometry(params.arch, target.shape());
  const Network net(params.arch);
  const std::size_t D = params.arch.latent_dim;
  const bool want_grad = !grad.empty();
  if (want_grad && grad.size() != params.values.size()) throw DimensionMismatch("elbo: gradient buffer size mismatch");
  const auto n = static_cast<T>(encoder_input.size());

  nn::ForwardCache<T> enc_cache, dec_cache;
  const Matrix<T> h = net.encoder.forward<T>(params.values, Matrix<T>(as_matrix(encoder_input)),
                                             want_grad ? &enc_cache : nullptr);
  const Matrix<T> mean = h.leftCols(D);
  const Matrix<T> log_var = h.rightCols(D);
  const Matrix<T> std_dev = (T(0.5) * log_var.array()).exp();
  const Matrix<T> z = mean.array() + std_dev.array() * noise.array();

  const Matrix<T> recon = net.decoder.forward<T>(params.values, z, want_grad ? &dec_cache : nullptr);
  Matrix<T> d_recon;
  const double recon_term = gaussian_log_likelihood<T>(Matrix<T>(as_matrix(target)), recon, want_grad ? &d_recon : nullptr);

  const KlTerms<T> kl = prior(mean, log_var);
  double kl_sum = 0.0;
  for (Eigen::Index i = 0; i < kl.per_sample.size(); ++i) kl_sum += static_cast<double>(kl.per_sample(i));
  const double kl_term = kl_sum / static_cast<double>(encoder_input.size());

  if (want_grad) {
    const Matrix<T> dz = net.decoder.backward<T>(params.values, dec_cache, d_recon, grad);
    const T b = static_cast<T>(beta);
    Matrix<T> dh(h.rows(), 2 * D);
    dh.leftCols(D) = dz - (b / n) * kl.d_mean;
    dh.rightCols(D) = (dz.array() * noise.array() * std_dev.array() * T(0.5)).matrix() - (b / n) * kl.d_log_variance;
    net.encoder.backward<T>(params.values, enc_cache, dh, grad, false);
  }
  if (latent_out) *latent_out = {mean, log_var, z, noise};
  return ElboReport::make(recon_term, kl_term, beta);
}

/// ELBO of one batch under a variant with all stochastic draws supplied.
template <typename T, typename Prior = StandardNormalPrior>
ElboReport elbo_with_draws(const ModelParams<T>& params, const ImageBatch<T>& batch, const VariantConfig& config,
                           const StepDraws<T>& draws, std::span<T> grad = {}, const Prior& prior = {},
                           GaussianLatent<T>* latent_out = nullptr) {
  config.validate();
  const auto in = variant_inputs(batch, config, draws);
  return elbo_core<T, Prior>(params, in.encoder_input, in.target, draws.noise, config.effective_beta(), grad, prior,
                             latent_out);
}

template <typename T>
ElboReport elbo_step(const ModelParams<T>& params, const ImageBatch<T>& batch, const VariantConfig& config, Rng& rng) {
  config.validate();
  const auto draws = draw_step(batch, config, params.arch.latent_dim, rng);
  return elbo_with_draws<T>(params, batch, config, draws);
}

// ---------------------------------------------------------------------------
// Training

struct TrainSettings {
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  ElboReport report;
};

/// Adam ascent on the objective.
class Adam {
 public:
  Adam(std::size_t n, const TrainSettings& s) : m_(n, 0.0f), v_(n, 0.0f), s_(s) {}

  void step(std::span<float> params, std::span<const float> grad) {
    ++t_;
    const double b1 = s_.adam_beta1, b2 = s_.adam_beta2;
    const auto c1 = static_cast<float>(1.0 - std::pow(b1, static_cast<double>(t_)));
    const auto c2 = static_cast<float>(1.0 - std::pow(b2, static_cast<double>(t_)));
    const auto lr = static_cast<float>(s_.learning_rate), eps = static_cast<float>(s_.adam_epsilon);
    const auto fb1 = static_cast<float>(b1), fb2 = static_cast<float>(b2);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = fb1 * m_[i] + (1.0f - fb1) * grad[i];
      v_[i] = fb2 * v_[i] + (1.0f - fb2) * grad[i] * grad[i];
      params[i] += lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps);
    }
  }

 private:
  std::vector<float> m_, v_;
  TrainSettings s_;
  std::uint64_t t_ = 0;
};

/// Stateful epoch runner; the clustering module drives it with a mixture prior.
class Trainer {
 public:
  using BatchObserver = std::function<void(const GaussianLatent<float>&)>;

  Trainer(ModelParams<float>& params, VariantConfig config, TrainSettings settings)
      : params_(params), config_(config), settings_(settings), adam_(params.values.size(), settings) {
    config_.validate();
    if (settings_.batch_size == 0) throw std::invalid_argument("TrainSettings: batch_size must be positive");
  }

  const VariantConfig& config() const { return config_; }
  const TrainSettings& settings() const { return settings_; }

  /// One pass over `data` in an rng-shuffled order. Returns sample-weighted
  /// averages of the per-batch reports.
  template <typename Prior = StandardNormalPrior>
  ElboReport run_epoch(const ImageBatch<float>& data, Rng& rng, const Prior& prior = {},
                       const BatchObserver& observe = {}) {
    check_geometry(params_.arch, data.shape());
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    AlignedVector<float> grad(params_.values.size());
    double recon = 0.0, kl = 0.0;
    for (std::size_t b = 0; b < order.size(); b += settings_.batch_size) {
      const std::size_t e = std::min(order.size(), b + settings_.batch_size);
      const auto batch = data.gather(std::span<const std::size_t>(order).subspan(b, e - b));
      const auto draws = draw_step(batch, config_, params_.arch.latent_dim, rng);
      std::fill(grad.begin(), grad.end(), 0.0f);
      GaussianLatent<float> latent;
      const auto r = elbo_with_draws<float, Prior>(params_, batch, config_, draws, grad, prior,
                                                   observe ? &latent : nullptr);
      if (!std::isfinite(r.objective))
        throw TrainingDiverged("training diverged: objective is " + std::to_string(r.objective) + " at step " +
                               std::to_string(steps_));
      if (observe) observe(latent);
      adam_.step(params_.values, grad);
      ++steps_;
      recon += r.recon_term * static_cast<double>(e - b);
      kl += r.kl_term * static_cast<double>(e - b);
    }
    const auto n = static_cast<double>(std::max<std::size_t>(data.size(), 1));
    return ElboReport::make(recon / n, kl / n, config_.effective_beta());
  }

 private:
  ModelParams<float>& params_;
  VariantConfig config_;
  TrainSettings settings_;
  Adam adam_;
  std::uint64_t steps_ = 0;
};

using EpochCallback = std::function<void(const EpochLog&, const ModelParams<float>&)>;

/// Stochastic gradient ascent for `settings.epochs` epochs. `on_epoch` is
/// called after every epoch (checkpointing hook).
inline std::vector<EpochLog> train(ModelParams<float>& params, const ImageBatch<float>& data,
                                   const VariantConfig& config, const TrainSettings& settings, Rng& rng,
                                   const EpochCallback& on_epoch = {}) {
  Trainer trainer(params, config, settings);
  std::vector<EpochLog> log;
  for (std::size_t epoch = 1; epoch <= settings.epochs; ++epoch) {
    log.push_back({epoch, trainer.run_epoch(data, rng)});
    if (on_epoch) on_epoch(log.back(), params);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Generation and evaluation

inline ImageBatch<float> sample_prior(const ModelParams<float>& params, std::size_t n, Rng& rng,
                                      std::size_t chunk = 256) {
  std::vector<float> data;
  data.reserve(n * params.arch.input.pixels());
  for (std::size_t b = 0; b < n; b += chunk) {
    const std::size_t e = std::min(n, b + chunk);
    const auto imgs = decode(params, draw_noise<float>(e - b, params.arch.latent_dim, rng));
    data.insert(data.end(), imgs.values().begin(), imgs.values().end());
  }
  return ImageBatch<float>(n, params.arch.input, std::move(data));
}

/// Decodes `steps` evenly spaced points on the segment between the posterior
/// means of a and b (single images).
inline ImageBatch<float> interpolate(const ModelParams<float>& params, const ImageBatch<float>& a,
                                     const ImageBatch<float>& b, std::size_t steps) {
  if (steps < 2) throw std::invalid_argument("interpolate: steps must be at least 2");
  if (a.size() != 1 || b.size() != 1) throw DimensionMismatch("interpolate: endpoints must be single images");
  const Matrix<float> za = encode_means(params, a);
  const Matrix<float> zb = encode_means(params, b);
  // Frames are decoded one at a time so that the endpoints match
  // reconstruct() of the same single image bit for bit.
  std::vector<float> data;
  data.reserve(steps * params.arch.input.pixels());
  for (std::size_t s = 0; s < steps; ++s) {
    Matrix<float> z;
    if (s == 0) {
      z = za;
    } else if (s + 1 == steps) {
      z = zb;
    } else {
      const float t = static_cast<float>(static_cast<double>(s) / static_cast<double>(steps - 1));
      z = (1.0f - t) * za + t * zb;
    }
    const auto frame = decode(params, z);
    data.insert(data.end(), frame.values().begin(), frame.values().end());
  }
  return ImageBatch<float>(steps, params.arch.input, std::move(data));
}

/// Reconstruction through the posterior mean (epsilon = 0).
inline ImageBatch<float> reconstruct(const ModelParams<float>& params, const ImageBatch<float>& batch) {
  return decode(params, encode_means(params, batch));
}

/// Mean over samples and pixels of the squared reconstruction error.
inline double reconstruction_mse(const ModelParams<float>& params, const ImageBatch<float>& images,
                                 std::size_t chunk = 256) {
  if (images.empty()) return 0.0;
  double sq = 0.0;
  for (std::size_t b = 0; b < images.size(); b += chunk) {
    const std::size_t e = std::min(images.size(), b + chunk);
    const auto part = images.slice(b, e);
    const auto rec = reconstruct(params, part);
    auto x = part.values(), y = rec.values();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = static_cast<double>(x[i]) - y[i];
      sq += d * d;
    }
  }
  return sq / static_cast<double>(images.values().size());
}

}  // namespace jigsaw_vae
