#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "datasets.hpp"
#include "image.hpp"
#include "models.hpp"
#include "nn.hpp"
#include "random.hpp"

namespace jigsaw_vae {

// ---------------------------------------------------------------------------
// Feature presence metric

struct FeatureAudit {
  std::string feature;
  std::size_t n_generated_with = 0;  // N_gf
  std::size_t n_generated = 0;       // N_g
  std::size_t n_train_with = 0;      // N_tf
  std::size_t n_train = 0;           // N_t
  double fpm = 0.0;
};

/// |n_gf / n_g - n_tf / n_t| x 100.
inline double compute_fpm(std::size_t n_gf, std::size_t n_g, std::size_t n_tf, std::size_t n_t) {
  if (n_g == 0 || n_t == 0) throw std::invalid_argument("compute_fpm: zero denominator");
  if (n_gf > n_g || n_tf > n_t) throw std::invalid_argument("compute_fpm: feature count exceeds total");
  const double generated = static_cast<double>(n_gf) / static_cast<double>(n_g);
  const double train = static_cast<double>(n_tf) / static_cast<double>(n_t);
  return std::abs(generated - train) * 100.0;
}

inline FeatureAudit make_audit(std::string feature, std::size_t n_gf, std::size_t n_g, std::size_t n_tf,
                               std::size_t n_t) {
  return {std::move(feature), n_gf, n_g, n_tf, n_t, compute_fpm(n_gf, n_g, n_tf, n_t)};
}

// ---------------------------------------------------------------------------
// Presence classifier: small conv net, one logit, hard decision at a
// threshold picked for balanced accuracy on a validation split.

struct ClassifierSettings {
  std::vector<std::size_t> channels{16, 32};
  std::size_t hidden = 32;
  std::size_t epochs = 4;
  std::size_t batch_size = 64;
  double learning_rate = 2e-3;
  double validation_fraction = 0.15;
  double test_fraction = 0.15;
};

struct PresenceClassifier {
  std::string feature;
  ImageShape input;
  ClassifierSettings settings;
  AlignedVector<float> params;
  double threshold = 0.5;
  double heldout_accuracy = 0.0;

  nn::Sequential network() const {
    nn::Sequential net;
    net.begin_params(0);
    ImageShape s = input;
    for (std::size_t ch : settings.channels) {
      net.add_conv(s, ch, downsample_kernel(s.height), downsample_kernel(s.width), 2, 1);
      net.add_activation(nn::LayerKind::leaky_relu);
      s = net.layers()[net.layers().size() - 2].conv.out;
    }
    net.add_dense(s.pixels(), settings.hidden);
    net.add_activation(nn::LayerKind::leaky_relu);
    net.add_dense(settings.hidden, 1);
    return net;
  }

  /// P(feature present) per image.
  std::vector<double> predict_proba(const ImageBatch<float>& batch, std::size_t chunk = 512) const {
    if (batch.shape() != input) throw DimensionMismatch("PresenceClassifier: wrong image geometry");
    const auto net = network();
    std::vector<double> out;
    out.reserve(batch.size());
    for (std::size_t b = 0; b < batch.size(); b += chunk) {
      const std::size_t e = std::min(batch.size(), b + chunk);
      const auto part = batch.slice(b, e);
      const auto logits = net.forward<float>(params, nn::Matrix<float>(as_matrix(part)));
      for (Eigen::Index i = 0; i < logits.rows(); ++i) out.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(logits(i, 0)))));
    }
    return out;
  }

  std::vector<bool> decide(const ImageBatch<float>& batch) const {
    const auto p = predict_proba(batch);
    std::vector<bool> out(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) out[i] = p[i] >= threshold;
    return out;
  }
};

namespace detail {

inline double balanced_accuracy(const std::vector<double>& prob, const std::vector<std::uint8_t>& label, double thr) {
  std::size_t tp = 0, pos = 0, tn = 0, neg = 0;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    if (label[i]) {
      ++pos;
      tp += prob[i] >= thr;
    } else {
      ++neg;
      tn += prob[i] < thr;
    }
  }
  const double tpr = pos ? static_cast<double>(tp) / static_cast<double>(pos) : 1.0;
  const double tnr = neg ? static_cast<double>(tn) / static_cast<double>(neg) : 1.0;
  return 0.5 * (tpr + tnr);
}

}  // namespace detail

/// Trains on a shuffled train split, tunes the threshold on a validation
/// split and reports accuracy on the remaining held-out split.
inline PresenceClassifier train_presence_classifier(const LabeledImageSet& labeled, const std::string& feature, Rng& rng,
                                                    const ClassifierSettings& settings = {}) {
  const auto flags = labeled.feature_column(feature);
  const std::size_t positives = static_cast<std::size_t>(std::count(flags.begin(), flags.end(), 1));
  if (positives == 0 || positives == flags.size())
    throw std::invalid_argument("train_presence_classifier: feature '" + feature + "' needs both classes");

  std::vector<std::size_t> order(labeled.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  const auto n = order.size();
  const auto n_val = static_cast<std::size_t>(std::lround(static_cast<double>(n) * settings.validation_fraction));
  const auto n_test = static_cast<std::size_t>(std::lround(static_cast<double>(n) * settings.test_fraction));
  if (n_val == 0 || n_test == 0 || n_val + n_test >= n)
    throw std::invalid_argument("train_presence_classifier: too few samples for the requested splits");
  const std::span<const std::size_t> all(order);
  const auto train_idx = all.subspan(0, n - n_val - n_test);
  const auto val_idx = all.subspan(n - n_val - n_test, n_val);
  const auto test_idx = all.subspan(n - n_test, n_test);

  PresenceClassifier clf;
  clf.feature = feature;
  clf.input = labeled.images.shape();
  clf.settings = settings;
  const auto net = clf.network();
  clf.params.assign(net.param_end(), 0.0f);
  net.initialize<float>(clf.params, rng);

  TrainSettings adam_settings;
  adam_settings.learning_rate = settings.learning_rate;
  Adam adam(clf.params.size(), adam_settings);
  AlignedVector<float> grad(clf.params.size());
  std::vector<std::size_t> epoch_order(train_idx.begin(), train_idx.end());
  for (std::size_t epoch = 0; epoch < settings.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(epoch_order));
    for (std::size_t b = 0; b < epoch_order.size(); b += settings.batch_size) {
      const std::size_t e = std::min(epoch_order.size(), b + settings.batch_size);
      const auto idx = std::span<const std::size_t>(epoch_order).subspan(b, e - b);
      const auto batch = labeled.images.gather(idx);
      nn::ForwardCache<float> cache;
      const auto logits = net.forward<float>(clf.params, nn::Matrix<float>(as_matrix(batch)), &cache);
      // gradient of the mean log-likelihood of the labels (ascent)
      nn::Matrix<float> d(logits.rows(), 1);
      for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const float p = 1.0f / (1.0f + std::exp(-logits(i, 0)));
        d(i, 0) = (static_cast<float>(flags[idx[static_cast<std::size_t>(i)]]) - p) / static_cast<float>(idx.size());
      }
      std::fill(grad.begin(), grad.end(), 0.0f);
      net.backward<float>(clf.params, cache, d, grad, false);
      adam.step(clf.params, grad);
    }
  }

  auto split_probs = [&](std::span<const std::size_t> idx, std::vector<std::uint8_t>& labels) {
    labels.clear();
    for (auto i : idx) labels.push_back(flags[i]);
    return clf.predict_proba(labeled.images.gather(idx));
  };
  std::vector<std::uint8_t> val_labels, test_labels;
  const auto val_prob = split_probs(val_idx, val_labels);
  std::vector<double> candidates = val_prob;
  candidates.push_back(0.5);
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  double best = -1.0;
  for (std::size_t k = 0; k + 1 < candidates.size(); ++k) {
    const double thr = 0.5 * (candidates[k] + candidates[k + 1]);
    const double acc = detail::balanced_accuracy(val_prob, val_labels, thr);
    if (acc > best) {
      best = acc;
      clf.threshold = thr;
    }
  }
  clf.threshold = std::clamp(clf.threshold, 1e-6, 1.0 - 1e-6);

  const auto test_prob = split_probs(test_idx, test_labels);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test_prob.size(); ++i) correct += (test_prob[i] >= clf.threshold) == (test_labels[i] != 0);
  clf.heldout_accuracy = static_cast<double>(correct) / static_cast<double>(test_prob.size());
  return clf;
}

struct AuditResult {
  std::vector<FeatureAudit> features;
  double average_fpm = 0.0;
};

/// N_gf from classifier decisions on generated images, N_tf from the
/// ground-truth flags of the training set.
inline AuditResult audit_features(const std::vector<PresenceClassifier>& classifiers, const ImageBatch<float>& generated,
                                  const LabeledImageSet& train_set) {
  if (generated.empty()) throw std::invalid_argument("audit_features: no generated images");
  if (classifiers.empty()) throw std::invalid_argument("audit_features: no classifiers");
  AuditResult out;
  for (const auto& clf : classifiers) {
    const auto decisions = clf.decide(generated);
    const auto n_gf = static_cast<std::size_t>(std::count(decisions.begin(), decisions.end(), true));
    const auto col = train_set.feature_column(clf.feature);
    const auto n_tf = static_cast<std::size_t>(std::count(col.begin(), col.end(), 1));
    out.features.push_back(make_audit(clf.feature, n_gf, generated.size(), n_tf, train_set.size()));
  }
  double sum = 0.0;
  for (const auto& a : out.features) sum += a.fpm;
  out.average_fpm = sum / static_cast<double>(out.features.size());
  return out;
}

// ---------------------------------------------------------------------------
// Normalized mutual information

/// I(U; V) / ((H(U) + H(V)) / 2), natural logs. Two single-block partitions
/// score 1; a single block against a non-trivial partition scores 0.
inline double nmi(const std::vector<int>& true_labels, const std::vector<int>& predicted) {
  if (true_labels.size() != predicted.size()) throw std::invalid_argument("nmi: label vectors differ in length");
  if (true_labels.empty()) throw std::invalid_argument("nmi: empty labelling");
  std::map<int, std::size_t> ui, vi;
  for (int u : true_labels) ui.emplace(u, ui.size());
  for (int v : predicted) vi.emplace(v, vi.size());
  std::vector<double> table(ui.size() * vi.size(), 0.0), ru(ui.size(), 0.0), cv(vi.size(), 0.0);
  for (std::size_t i = 0; i < true_labels.size(); ++i) {
    const auto a = ui[true_labels[i]], b = vi[predicted[i]];
    table[a * vi.size() + b] += 1.0;
    ru[a] += 1.0;
    cv[b] += 1.0;
  }
  const auto n = static_cast<double>(true_labels.size());
  auto entropy = [n](const std::vector<double>& counts) {
    double h = 0.0;
    for (double c : counts)
      if (c > 0.0) h -= (c / n) * std::log(c / n);
    return h;
  };
  const double hu = entropy(ru), hv = entropy(cv);
  if (hu == 0.0 && hv == 0.0) return 1.0;
  double mi = 0.0;
  for (std::size_t a = 0; a < ru.size(); ++a)
    for (std::size_t b = 0; b < cv.size(); ++b) {
      const double c = table[a * cv.size() + b];
      if (c > 0.0) mi += (c / n) * std::log(c * n / (ru[a] * cv[b]));
    }
  const double denom = 0.5 * (hu + hv);
  return std::clamp(mi / denom, 0.0, 1.0);
}

}  // namespace jigsaw_vae
