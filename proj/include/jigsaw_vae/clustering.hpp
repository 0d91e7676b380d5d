#pragma once

// Gaussian-mixture-prior VAE for clustering. The prior over z is a learned
// diagonal Gaussian mixture; components whose weight drops below a truncation
// threshold are frozen out for good. Network weights follow the variant's
// gradient; the mixture is refit by a penalised EM step after every epoch.
//
// KL term per sample: -log sum_k pi_k exp(-KL(q(z|x) || N(m_k, s_k^2))),
// i.e. the ELBO with q(c|x) at its optimum gamma_k ~ pi_k exp(-KL_k).

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "checkpoint.hpp"
#include "datasets.hpp"
#include "io.hpp"
#include "models.hpp"
#include "network.hpp"
#include "random.hpp"

namespace jigsaw_vae {

struct MixtureLatentState {
  Matrix<double> component_means;          // K x D
  Matrix<double> component_log_variances;  // K x D
  std::vector<double> mixture_weights;     // K, on the simplex; 0 for truncated components
  double truncation_threshold = 0.01;

  std::size_t components() const { return mixture_weights.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(component_means.cols()); }
  bool active(std::size_t k) const { return mixture_weights[k] > 0.0 && mixture_weights[k] >= truncation_threshold; }

  std::size_t active_count() const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < components(); ++k) n += active(k) ? 1 : 0;
    return n;
  }

  void validate() const {
    double sum = 0.0;
    for (double w : mixture_weights) {
      if (!(w >= 0.0)) throw std::invalid_argument("MixtureLatentState: negative weight");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw std::invalid_argument("MixtureLatentState: weights do not sum to 1");
  }
};

/// Components that survive a given threshold.
inline std::size_t active_components(const std::vector<double>& weights, double threshold) {
  return static_cast<std::size_t>(
      std::count_if(weights.begin(), weights.end(), [&](double w) { return w > 0.0 && w >= threshold; }));
}

/// KL(N(mean, exp(lv)) || N(m_k, exp(lv_k))) for every sample x component.
template <typename T>
Matrix<double> component_kl(const Matrix<T>& mean, const Matrix<T>& log_variance, const MixtureLatentState& s) {
  const auto N = mean.rows(), K = static_cast<Eigen::Index>(s.components()), D = mean.cols();
  Matrix<double> kl(N, K);
  for (Eigen::Index i = 0; i < N; ++i)
    for (Eigen::Index k = 0; k < K; ++k) {
      double acc = 0.0;
      for (Eigen::Index d = 0; d < D; ++d) {
        const double lv = static_cast<double>(log_variance(i, d));
        const double lvk = s.component_log_variances(k, d);
        const double diff = static_cast<double>(mean(i, d)) - s.component_means(k, d);
        acc += lvk - lv + (std::exp(lv) + diff * diff) * std::exp(-lvk) - 1.0;
      }
      kl(i, k) = 0.5 * acc;
    }
  return kl;
}

/// gamma_ik ~ pi_k exp(-KL_ik) over active components; returns per-sample
/// -log sum_k pi_k exp(-KL_ik).
inline std::vector<double> kl_responsibilities(const Matrix<double>& kl, const MixtureLatentState& s,
                                               Matrix<double>& gamma) {
  const auto N = kl.rows(), K = kl.cols();
  gamma.setZero(N, K);
  std::vector<double> out(static_cast<std::size_t>(N));
  for (Eigen::Index i = 0; i < N; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < K; ++k)
      if (s.active(static_cast<std::size_t>(k))) mx = std::max(mx, std::log(s.mixture_weights[k]) - kl(i, k));
    double sum = 0.0;
    for (Eigen::Index k = 0; k < K; ++k)
      if (s.active(static_cast<std::size_t>(k))) {
        gamma(i, k) = std::exp(std::log(s.mixture_weights[k]) - kl(i, k) - mx);
        sum += gamma(i, k);
      }
    gamma.row(i) /= sum;
    out[static_cast<std::size_t>(i)] = -(mx + std::log(sum));
  }
  return out;
}

/// Prior functor for elbo_core.
struct MixturePrior {
  const MixtureLatentState* state = nullptr;

  template <typename T>
  KlTerms<T> operator()(const Matrix<T>& mean, const Matrix<T>& log_variance) const {
    const auto& s = *state;
    const Matrix<double> kl = component_kl(mean, log_variance, s);
    Matrix<double> gamma;
    const auto per = kl_responsibilities(kl, s, gamma);
    const auto N = mean.rows(), D = mean.cols(), K = kl.cols();
    KlTerms<T> out;
    out.per_sample.resize(N);
    out.d_mean.setZero(N, D);
    out.d_log_variance.setZero(N, D);
    for (Eigen::Index i = 0; i < N; ++i) {
      out.per_sample(i) = static_cast<T>(per[static_cast<std::size_t>(i)]);
      for (Eigen::Index d = 0; d < D; ++d) {
        const double var = std::exp(static_cast<double>(log_variance(i, d)));
        double gm = 0.0, gl = 0.0;
        for (Eigen::Index k = 0; k < K; ++k) {
          if (gamma(i, k) == 0.0) continue;
          const double inv = std::exp(-s.component_log_variances(k, d));
          gm += gamma(i, k) * (static_cast<double>(mean(i, d)) - s.component_means(k, d)) * inv;
          gl += gamma(i, k) * 0.5 * (var * inv - 1.0);
        }
        out.d_mean(i, d) = static_cast<T>(gm);
        out.d_log_variance(i, d) = static_cast<T>(gl);
      }
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Mixture fitting

struct ClusterSettings {
  std::size_t components = 10;
  double truncation_threshold = 0.01;
  std::size_t warmup_epochs = 25;    // standard-normal prior before the mixture is fitted
  std::size_t init_em_iterations = 100;
  double min_log_variance = -9.0;
};

/// Sufficient statistics for the M-step.
struct MixtureStats {
  std::vector<double> mass;  // sum gamma
  Matrix<double> first;      // sum gamma * mu
  Matrix<double> second;     // sum gamma * (sigma^2 + mu^2)
  double count = 0.0;

  MixtureStats(std::size_t K, std::size_t D) : mass(K, 0.0), first(Matrix<double>::Zero(K, D)), second(Matrix<double>::Zero(K, D)) {}

  template <typename T>
  void add(const Matrix<T>& mean, const Matrix<T>& log_variance, const Matrix<double>& gamma) {
    for (Eigen::Index i = 0; i < mean.rows(); ++i) {
      for (Eigen::Index k = 0; k < gamma.cols(); ++k) {
        const double g = gamma(i, k);
        if (g == 0.0) continue;
        mass[k] += g;
        for (Eigen::Index d = 0; d < mean.cols(); ++d) {
          const double m = static_cast<double>(mean(i, d));
          first(k, d) += g * m;
          second(k, d) += g * (std::exp(static_cast<double>(log_variance(i, d))) + m * m);
        }
      }
      count += 1.0;
    }
  }
};

/// Penalised M-step: pi_k ~ max(N_k / N - tau, 0), then components below tau
/// are truncated and the survivors renormalised. Truncated components never
/// come back.
inline void m_step(MixtureLatentState& s, const MixtureStats& st, double min_log_variance) {
  const std::size_t K = s.components();
  const double tau = s.truncation_threshold;
  std::vector<double> w(K, 0.0);
  double total = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    if (!s.active(k)) continue;
    w[k] = std::max(st.mass[k] / st.count - tau, 0.0);
    total += w[k];
  }
  if (total <= 0.0) {
    // everything would be pruned: keep the heaviest component
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (st.mass[k] > st.mass[best]) best = k;
    w.assign(K, 0.0);
    w[best] = 1.0;
    total = 1.0;
  }
  for (auto& v : w) v /= total;
  double kept = 0.0;
  for (auto& v : w) {
    if (v < tau) v = 0.0;
    kept += v;
  }
  if (kept <= 0.0) {
    const auto best = static_cast<std::size_t>(std::max_element(w.begin(), w.end()) - w.begin());
    w.assign(K, 0.0);
    w[best] = 1.0;
    kept = 1.0;
  }
  for (auto& v : w) v /= kept;

  for (std::size_t k = 0; k < K; ++k) {
    if (w[k] > 0.0 && st.mass[k] > 1e-12) {
      for (Eigen::Index d = 0; d < s.component_means.cols(); ++d) {
        const double m = st.first(k, d) / st.mass[k];
        const double var = st.second(k, d) / st.mass[k] - m * m;
        s.component_means(k, d) = m;
        s.component_log_variances(k, d) = std::max(std::log(std::max(var, 1e-300)), min_log_variance);
      }
    }
  }
  s.mixture_weights = w;
}

/// k-means++ seeding, Lloyd refinement, then penalised EM on the latent
/// posteriors.
inline MixtureLatentState fit_mixture(const Matrix<float>& mean, const Matrix<float>& log_variance,
                                      const ClusterSettings& cs, Rng& rng) {
  const auto N = mean.rows(), D = mean.cols();
  const auto K = static_cast<Eigen::Index>(cs.components);
  if (N < K) throw std::invalid_argument("fit_mixture: fewer samples than components");
  const Matrix<double> x = mean.cast<double>();

  Matrix<double> centers(K, D);
  std::vector<double> dist(static_cast<std::size_t>(N), std::numeric_limits<double>::infinity());
  centers.row(0) = x.row(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(N))));
  for (Eigen::Index k = 1; k < K; ++k) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) {
      dist[i] = std::min(dist[i], (x.row(i) - centers.row(k - 1)).squaredNorm());
      total += dist[i];
    }
    double u = rng.uniform() * total;
    Eigen::Index pick = N - 1;
    for (Eigen::Index i = 0; i < N; ++i) {
      u -= dist[i];
      if (u < 0.0) {
        pick = i;
        break;
      }
    }
    centers.row(k) = x.row(pick);
  }

  std::vector<Eigen::Index> label(static_cast<std::size_t>(N), 0);
  for (int iter = 0; iter < 25; ++iter) {
    for (Eigen::Index i = 0; i < N; ++i) {
      Eigen::Index best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (Eigen::Index k = 0; k < K; ++k) {
        const double d2 = (x.row(i) - centers.row(k)).squaredNorm();
        if (d2 < bd) {
          bd = d2;
          best = k;
        }
      }
      label[i] = best;
    }
    Matrix<double> sum = Matrix<double>::Zero(K, D);
    std::vector<double> cnt(static_cast<std::size_t>(K), 0.0);
    for (Eigen::Index i = 0; i < N; ++i) {
      sum.row(label[i]) += x.row(i);
      cnt[label[i]] += 1.0;
    }
    for (Eigen::Index k = 0; k < K; ++k)
      if (cnt[k] > 0) centers.row(k) = sum.row(k) / cnt[k];
  }

  MixtureLatentState s;
  s.truncation_threshold = cs.truncation_threshold;
  s.component_means = centers;
  s.component_log_variances = Matrix<double>::Zero(K, D);
  s.mixture_weights.assign(static_cast<std::size_t>(K), 1.0 / static_cast<double>(K));
  {
    MixtureStats st(cs.components, static_cast<std::size_t>(D));
    Matrix<double> gamma = Matrix<double>::Zero(N, K);
    for (Eigen::Index i = 0; i < N; ++i) gamma(i, label[i]) = 1.0;
    st.add(mean, log_variance, gamma);
    m_step(s, st, cs.min_log_variance);
  }
  for (std::size_t iter = 0; iter < cs.init_em_iterations; ++iter) {
    MixtureStats st(cs.components, static_cast<std::size_t>(D));
    Matrix<double> gamma;
    kl_responsibilities(component_kl(mean, log_variance, s), s, gamma);
    st.add(mean, log_variance, gamma);
    m_step(s, st, cs.min_log_variance);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Model, training, assignment

struct ClusterModel {
  ModelParams<float> params;
  VariantConfig variant;
  MixtureLatentState mixture;
};

struct ClusterTrainLog {
  std::vector<EpochLog> epochs;
  std::vector<std::size_t> active_after_epoch;
};

inline ClusterModel train_cluster_vae(const ImageBatch<float>& data, const ArchConfig& arch, const VariantConfig& variant,
                                      const ClusterSettings& cs, const TrainSettings& ts, Rng& rng,
                                      ClusterTrainLog* log = nullptr,
                                      const std::function<void(std::size_t, const ClusterModel&)>& on_epoch = {}) {
  if (cs.components < 2) throw std::invalid_argument("train_cluster_vae: need at least 2 components");
  if (ts.epochs <= cs.warmup_epochs) throw std::invalid_argument("train_cluster_vae: epochs must exceed warmup_epochs");
  ClusterModel model{init_model<float>(arch, rng), variant, {}};
  Trainer trainer(model.params, variant, ts);
  std::size_t epoch = 0;
  for (; epoch < cs.warmup_epochs; ++epoch) {
    const auto r = trainer.run_epoch(data, rng);
    if (log) {
      log->epochs.push_back({epoch + 1, r});
      log->active_after_epoch.push_back(0);
    }
    if (on_epoch) on_epoch(epoch + 1, model);
  }

  {
    Matrix<float> means(data.size(), arch.latent_dim), logvars(data.size(), arch.latent_dim);
    for (std::size_t b = 0; b < data.size(); b += 256) {
      const std::size_t e = std::min(data.size(), b + 256);
      const auto lat = encode_with_noise<float>(model.params, data.slice(b, e), Matrix<float>::Zero(e - b, arch.latent_dim));
      means.middleRows(b, e - b) = lat.mean;
      logvars.middleRows(b, e - b) = lat.log_variance;
    }
    model.mixture = fit_mixture(means, logvars, cs, rng);
  }

  for (; epoch < ts.epochs; ++epoch) {
    MixtureStats stats(cs.components, arch.latent_dim);
    const MixturePrior prior{&model.mixture};
    const auto observe = [&](const GaussianLatent<float>& lat) {
      Matrix<double> gamma;
      kl_responsibilities(component_kl(lat.mean, lat.log_variance, model.mixture), model.mixture, gamma);
      stats.add(lat.mean, lat.log_variance, gamma);
    };
    const auto r = trainer.run_epoch(data, rng, prior, observe);
    m_step(model.mixture, stats, cs.min_log_variance);
    if (log) {
      log->epochs.push_back({epoch + 1, r});
      log->active_after_epoch.push_back(model.mixture.active_count());
    }
    if (on_epoch) on_epoch(epoch + 1, model);
  }
  return model;
}

struct ClusterAssignment {
  std::size_t sample_id = 0;
  std::vector<double> responsibilities;
  std::size_t hard_label = 0;
};

/// Responsibilities pi_k N(z; m_k, s_k^2) at the posterior mean; truncated
/// components get exactly zero.
inline std::vector<ClusterAssignment> assign_latents(const MixtureLatentState& s, const Matrix<float>& z) {
  const std::size_t K = s.components();
  std::vector<ClusterAssignment> out(static_cast<std::size_t>(z.rows()));
  std::vector<double> logp(K);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      if (!s.active(k)) continue;
      double lp = std::log(s.mixture_weights[k]);
      for (Eigen::Index d = 0; d < z.cols(); ++d) {
        const double lv = s.component_log_variances(static_cast<Eigen::Index>(k), d);
        const double diff = static_cast<double>(z(i, d)) - s.component_means(static_cast<Eigen::Index>(k), d);
        lp += -0.5 * (lv + diff * diff * std::exp(-lv) + std::log(2.0 * std::numbers::pi));
      }
      logp[k] = lp;
      mx = std::max(mx, lp);
    }
    auto& a = out[static_cast<std::size_t>(i)];
    a.sample_id = static_cast<std::size_t>(i);
    a.responsibilities.assign(K, 0.0);
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k)
      if (s.active(k)) {
        a.responsibilities[k] = std::exp(logp[k] - mx);
        sum += a.responsibilities[k];
      }
    std::size_t best = K;
    for (std::size_t k = 0; k < K; ++k) {
      if (!s.active(k)) continue;
      a.responsibilities[k] /= sum;
      if (best == K || a.responsibilities[k] > a.responsibilities[best]) best = k;
    }
    a.hard_label = best;
  }
  return out;
}

inline std::vector<ClusterAssignment> assign(const ClusterModel& model, const ImageBatch<float>& batch) {
  return assign_latents(model.mixture, encode_means(model.params, batch));
}

inline std::vector<int> hard_labels(const std::vector<ClusterAssignment>& a) {
  std::vector<int> out;
  out.reserve(a.size());
  for (const auto& x : a) out.push_back(static_cast<int>(x.hard_label));
  return out;
}

/// Decodes, per sample, the mean of q(z|x) x N(m_c, s_c^2) for its assigned
/// component c (precision-weighted combination of the encoder mean and the
/// component mean).
inline ImageBatch<float> reconstruct_via_cluster(const ClusterModel& model, const ImageBatch<float>& batch) {
  std::vector<float> data;
  data.reserve(batch.values().size());
  const std::size_t D = model.params.arch.latent_dim;
  for (std::size_t b = 0; b < batch.size(); b += 256) {
    const std::size_t e = std::min(batch.size(), b + 256);
    const auto lat = encode_with_noise<float>(model.params, batch.slice(b, e), Matrix<float>::Zero(e - b, D));
    const auto labels = assign_latents(model.mixture, lat.mean);
    Matrix<float> z(e - b, D);
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const auto c = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)].hard_label);
      for (Eigen::Index d = 0; d < z.cols(); ++d) {
        const double pq = std::exp(-static_cast<double>(lat.log_variance(i, d)));
        const double pc = std::exp(-model.mixture.component_log_variances(c, d));
        z(i, d) = static_cast<float>((pq * lat.mean(i, d) + pc * model.mixture.component_means(c, d)) / (pq + pc));
      }
    }
    const auto imgs = decode(model.params, z);
    data.insert(data.end(), imgs.values().begin(), imgs.values().end());
  }
  return ImageBatch<float>(batch.size(), batch.shape(), std::move(data));
}

// ---------------------------------------------------------------------------
// Persistence: a regular checkpoint whose manifest also carries the mixture.

inline io::Manifest mixture_manifest(const MixtureLatentState& s) {
  io::Manifest m;
  std::vector<double> means(s.component_means.data(), s.component_means.data() + s.component_means.size());
  std::vector<double> lv(s.component_log_variances.data(),
                         s.component_log_variances.data() + s.component_log_variances.size());
  std::ostringstream w, mu, v;
  w.precision(17);
  mu.precision(17);
  v.precision(17);
  for (std::size_t i = 0; i < s.mixture_weights.size(); ++i) w << (i ? "," : "") << s.mixture_weights[i];
  for (std::size_t i = 0; i < means.size(); ++i) mu << (i ? "," : "") << means[i];
  for (std::size_t i = 0; i < lv.size(); ++i) v << (i ? "," : "") << lv[i];
  m.set("mixture_components", s.components());
  m.set("mixture_dim", s.dim());
  m.set("mixture_truncation", s.truncation_threshold);
  m.set("mixture_weights", w.str());
  m.set("mixture_means", mu.str());
  m.set("mixture_log_variances", v.str());
  return m;
}

inline MixtureLatentState read_mixture(const io::Manifest& m) {
  MixtureLatentState s;
  const auto K = m.get_as<std::size_t>("mixture_components"), D = m.get_as<std::size_t>("mixture_dim");
  s.truncation_threshold = m.get_as<double>("mixture_truncation");
  s.mixture_weights = io::split_as<double>(m.get("mixture_weights"));
  const auto mu = io::split_as<double>(m.get("mixture_means"));
  const auto lv = io::split_as<double>(m.get("mixture_log_variances"));
  if (s.mixture_weights.size() != K || mu.size() != K * D || lv.size() != K * D)
    throw io::FormatError("mixture: size mismatch");
  s.component_means = Eigen::Map<const Matrix<double>>(mu.data(), K, D);
  s.component_log_variances = Eigen::Map<const Matrix<double>>(lv.data(), K, D);
  return s;
}

inline void save_cluster_model(const std::filesystem::path& stem, const ClusterModel& model, std::uint64_t seed,
                               std::size_t epoch, const io::Manifest& extra = {}) {
  Checkpoint c{model.params, model.variant, seed, epoch, mixture_manifest(model.mixture)};
  for (const auto& [k, v] : extra.entries()) c.extra.set(k, v);
  save_checkpoint(stem, c);
}

inline ClusterModel load_cluster_model(const std::filesystem::path& stem) {
  auto c = load_checkpoint(stem);
  return {std::move(c.params), c.variant, read_mixture(c.extra)};
}

}  // namespace jigsaw_vae
