#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>
#include <vector>

#include "jigsaw_vae/checkpoint.hpp"
#include "jigsaw_vae/clustering.hpp"
#include "jigsaw_vae/datasets.hpp"
#include "jigsaw_vae/models.hpp"

using namespace jigsaw_vae;

namespace {

// D = 2 toy model, a few hundred parameters.
ArchConfig toy_arch() { return {{8, 8, 2}, {2, 2, 2, 2}, 2}; }

template <typename T>
ImageBatch<T> random_batch(std::size_t n, ImageShape shape, Rng& rng) {
  ImageBatch<T> b(n, shape);
  for (auto& v : b.values()) v = static_cast<T>(rng.uniform());
  return b;
}

VariantConfig variant(Variant v) {
  VariantConfig c;
  c.variant = v;
  c.grid_divisions = 4;
  c.permute_channels = true;
  return c;
}

template <typename Prior = StandardNormalPrior>
double gradient_error(Variant v, std::uint64_t seed, const Prior& prior = {}) {
  Rng rng(seed);
  auto params = init_model<double>(toy_arch(), rng);
  const auto batch = random_batch<double>(3, toy_arch().input, rng);
  const auto cfg = variant(v);
  const auto draws = draw_step(batch, cfg, 2, rng);
  std::vector<double> grad(params.values.size(), 0.0);
  elbo_with_draws<double, Prior>(params, batch, cfg, draws, grad, prior);
  const double h = 1e-6;
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < params.values.size(); ++k) {
    const double keep = params.values[k];
    params.values[k] = keep + h;
    const double up = elbo_with_draws<double, Prior>(params, batch, cfg, draws, {}, prior).objective;
    params.values[k] = keep - h;
    const double down = elbo_with_draws<double, Prior>(params, batch, cfg, draws, {}, prior).objective;
    params.values[k] = keep;
    const double fd = (up - down) / (2 * h);
    num += (fd - grad[k]) * (fd - grad[k]);
    den += std::max(fd * fd, grad[k] * grad[k]);
  }
  return std::sqrt(num / den);
}

// log q(z) - log p(z) Monte Carlo oracle for KL(q || N(0, I)).
double kl_monte_carlo(const Eigen::VectorXd& mu, const Eigen::VectorXd& lv, std::size_t n, Rng& rng) {
  double acc = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    double lq = 0.0, lp = 0.0;
    for (Eigen::Index d = 0; d < mu.size(); ++d) {
      const double eps = rng.normal();
      const double z = mu(d) + std::exp(0.5 * lv(d)) * eps;
      lq += -0.5 * (std::log(2 * std::numbers::pi) + lv(d) + eps * eps);
      lp += -0.5 * (std::log(2 * std::numbers::pi) + z * z);
    }
    acc += lq - lp;
  }
  return acc / static_cast<double>(n);
}

}  // namespace

// --- encode / decode --------------------------------------------------------

TEST(Encode, ZeroNoiseGivesMean) {
  Rng rng(1);
  const auto p = init_model<float>(toy_arch(), rng);
  const auto x = random_batch<float>(4, toy_arch().input, rng);
  const auto lat = encode_with_noise<float>(p, x, Matrix<float>::Zero(4, 2));
  EXPECT_EQ(lat.sample, lat.mean);
}

TEST(Encode, ReparameterizationIdentityExact) {
  Rng rng(2);
  const auto p = init_model<float>(toy_arch(), rng);
  const auto x = random_batch<float>(4, toy_arch().input, rng);
  const auto lat = encode(p, x, rng);
  const Matrix<float> expect = lat.mean.array() + (0.5f * lat.log_variance.array()).exp() * lat.noise.array();
  EXPECT_EQ(lat.sample, expect);
}

TEST(Encode, DeterministicGivenNoise) {
  Rng rng(3);
  const auto p = init_model<float>(toy_arch(), rng);
  const auto x = random_batch<float>(2, toy_arch().input, rng);
  const auto eps = draw_noise<float>(2, 2, rng);
  EXPECT_EQ(encode_with_noise<float>(p, x, eps).sample, encode_with_noise<float>(p, x, eps).sample);
}

TEST(Encode, MonteCarloMomentsMatchPosterior) {
  Rng rng(4);
  const auto p = init_model<double>(toy_arch(), rng);
  const auto one = random_batch<double>(1, toy_arch().input, rng);
  ImageBatch<double> many(0, toy_arch().input);
  const std::size_t n = 100000;
  for (std::size_t i = 0; i < n; ++i) many.append(one);
  const auto lat = encode(p, many, rng);
  for (Eigen::Index d = 0; d < 2; ++d) {
    const double mean = lat.mean(0, d), var = std::exp(lat.log_variance(0, d));
    const double m = lat.sample.col(d).mean();
    const double v = (lat.sample.col(d).array() - m).square().sum() / (n - 1);
    EXPECT_NEAR(m, mean, 3 * std::sqrt(var / n));
    EXPECT_NEAR(v, var, 3 * var * std::sqrt(2.0 / (n - 1)));
  }
}

TEST(Encode, RejectsWrongGeometry) {
  Rng rng(5);
  const auto p = init_model<float>(toy_arch(), rng);
  const auto x = random_batch<float>(1, {8, 8, 3}, rng);
  EXPECT_THROW(encode(p, x, rng), DimensionMismatch);
}

TEST(Decode, ShapeRangeDeterminism) {
  Rng rng(6);
  const auto p = init_model<float>(toy_arch(), rng);
  const auto z = draw_noise<float>(5, 2, rng);
  const auto a = decode(p, Matrix<float>(3.0f * z));
  EXPECT_EQ(a.shape(), toy_arch().input);
  EXPECT_EQ(a.size(), 5u);
  for (float v : a.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_EQ(decode(p, Matrix<float>(3.0f * z)), a);
}

TEST(Decode, RejectsWrongLatentDimension) {
  Rng rng(7);
  const auto p = init_model<float>(toy_arch(), rng);
  EXPECT_THROW(decode(p, Matrix<float>(Matrix<float>::Zero(2, 3))), DimensionMismatch);
}

// --- KL -----------------------------------------------------------------------

TEST(Kl, ZeroAtStandardNormal) {
  const Eigen::VectorXd mu = Eigen::VectorXd::Zero(16), lv = Eigen::VectorXd::Zero(16);
  EXPECT_EQ(kl_diag_gaussian(mu, lv), 0.0);
}

TEST(Kl, UnitMeanShift) {
  Eigen::VectorXd mu(1), lv(1);
  mu << 1.0;
  lv << 0.0;
  EXPECT_DOUBLE_EQ(kl_diag_gaussian(mu, lv), 0.5);
}

TEST(Kl, NonNegative) {
  Rng rng(8);
  for (int t = 0; t < 1000; ++t) {
    Eigen::VectorXd mu(4), lv(4);
    for (int d = 0; d < 4; ++d) {
      mu(d) = rng.normal() * 2;
      lv(d) = rng.normal() * 2;
    }
    EXPECT_GE(kl_diag_gaussian(mu, lv), -1e-6);
  }
}

TEST(Kl, MatchesMonteCarlo) {
  Rng rng(9);
  for (int t = 0; t < 3; ++t) {
    Eigen::VectorXd mu(4), lv(4);
    for (int d = 0; d < 4; ++d) {
      mu(d) = rng.uniform() * 4 - 2;
      lv(d) = 2 * std::log(0.5 + 1.5 * rng.uniform());
    }
    const double exact = kl_diag_gaussian(mu, lv);
    EXPECT_NEAR(kl_monte_carlo(mu, lv, 1000000, rng), exact, 0.01 * exact);
  }
}

TEST(Kl, PriorFunctorAgreesWithClosedForm) {
  Rng rng(10);
  Matrix<double> mu(3, 4), lv(3, 4);
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    mu.data()[i] = rng.normal();
    lv.data()[i] = rng.normal();
  }
  const auto kl = StandardNormalPrior{}(mu, lv);
  for (int i = 0; i < 3; ++i)
    EXPECT_NEAR(kl.per_sample(i), kl_diag_gaussian(Eigen::VectorXd(mu.row(i).transpose()), Eigen::VectorXd(lv.row(i).transpose())),
                1e-12);
}

// --- ELBO ---------------------------------------------------------------------

TEST(Elbo, ObjectiveFormulaAndKlNonNegative) {
  Rng rng(11);
  const auto p = init_model<float>(toy_arch(), rng);
  const auto x = random_batch<float>(8, toy_arch().input, rng);
  for (auto v : kAllVariants) {
    const auto r = elbo_step(p, x, variant(v), rng);
    EXPECT_EQ(r.objective, r.recon_term - r.beta * r.kl_term);
    EXPECT_GE(r.kl_term, -1e-6);
  }
}

TEST(Elbo, BetaOneEqualsVae) {
  Rng rng(12);
  const auto p = init_model<double>(toy_arch(), rng);
  const auto x = random_batch<double>(4, toy_arch().input, rng);
  auto bcfg = variant(Variant::beta_vae);
  bcfg.beta = 1.0;
  const auto draws = draw_step(x, variant(Variant::vae), 2, rng);
  EXPECT_EQ(elbo_with_draws<double>(p, x, bcfg, draws).objective,
            elbo_with_draws<double>(p, x, variant(Variant::vae), draws).objective);
}

TEST(Elbo, BetaLinearity) {
  Rng rng(13);
  const auto p = init_model<double>(toy_arch(), rng);
  const auto x = random_batch<double>(4, toy_arch().input, rng);
  const auto draws = draw_step(x, variant(Variant::vae), 2, rng);
  for (double beta : {0.5, 1.0, 2.0}) {
    auto c = variant(Variant::beta_vae);
    c.beta = beta;
    const auto r = elbo_with_draws<double>(p, x, c, draws);
    const auto base = elbo_with_draws<double>(p, x, variant(Variant::vae), draws);
    EXPECT_DOUBLE_EQ(r.recon_term, base.recon_term);
    EXPECT_DOUBLE_EQ(r.kl_term, base.kl_term);
    EXPECT_DOUBLE_EQ(r.objective, base.recon_term - beta * base.kl_term);
  }
}

TEST(Elbo, JigsawWithIdentityGroupEqualsVae) {
  Rng rng(14);
  const auto p = init_model<float>(toy_arch(), rng);
  const auto x = random_batch<float>(6, toy_arch().input, rng);
  auto j = variant(Variant::jigsaw_vae);
  j.grid_divisions = 1;
  j.permute_channels = false;
  Rng a(99), b(99);
  const auto rj = elbo_step(p, x, j, a);
  const auto rv = elbo_step(p, x, variant(Variant::vae), b);
  EXPECT_EQ(rj.objective, rv.objective);
  EXPECT_EQ(rj.recon_term, rv.recon_term);
  EXPECT_EQ(rj.kl_term, rv.kl_term);
}

TEST(Elbo, JigsawReconstructsOriginalImage) {
  Rng rng(15);
  const auto x = random_batch<float>(4, toy_arch().input, rng);
  const auto cfg = variant(Variant::jigsaw_vae);
  const auto draws = draw_step(x, cfg, 2, rng);
  const auto in = variant_inputs(x, cfg, draws);
  EXPECT_EQ(in.target, x);
  EXPECT_EQ(in.encoder_input, apply_each<float>(draws.permutations, x));
}

TEST(Elbo, DenoisingEncodesNoisyReconstructsClean) {
  Rng rng(16);
  const auto x = random_batch<float>(4, toy_arch().input, rng);
  const auto cfg = variant(Variant::d_vae);
  const auto draws = draw_step(x, cfg, 2, rng);
  const auto in = variant_inputs(x, cfg, draws);
  EXPECT_EQ(in.target, x);
  EXPECT_NE(in.encoder_input, x);
  for (std::size_t i = 0; i < x.values().size(); ++i)
    EXPECT_FLOAT_EQ(in.encoder_input.values()[i], x.values()[i] + draws.input_noise[i]);
}

TEST(Elbo, InvalidVariantRejected) {
  Rng rng(17);
  const auto p = init_model<float>(toy_arch(), rng);
  const auto x = random_batch<float>(2, toy_arch().input, rng);
  VariantConfig bad;
  bad.variant = static_cast<Variant>(42);
  EXPECT_THROW(elbo_step(p, x, bad, rng), InvalidVariant);
  EXPECT_THROW(parse_variant("vampprior"), InvalidVariant);
}

class GradientCheck : public ::testing::TestWithParam<Variant> {};

TEST_P(GradientCheck, MatchesCentralDifferences) { EXPECT_LT(gradient_error(GetParam(), 100), 1e-4); }

INSTANTIATE_TEST_SUITE_P(AllVariants, GradientCheck, ::testing::ValuesIn(kAllVariants),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(GradientCheckMixture, MixturePriorMatchesCentralDifferences) {
  MixtureLatentState s;
  s.component_means.resize(3, 2);
  s.component_means << 0.5, -0.3, -1.0, 0.8, 2.0, 2.0;
  s.component_log_variances.resize(3, 2);
  s.component_log_variances << -0.5, 0.2, 0.1, -0.3, 0.0, 0.0;
  s.mixture_weights = {0.6, 0.4, 0.0};
  for (auto v : {Variant::vae, Variant::jigsaw_vae, Variant::mixup_vae})
    EXPECT_LT(gradient_error(v, 200, MixturePrior{&s}), 1e-4) << to_string(v);
}

// --- mixup --------------------------------------------------------------------

TEST(Mixup, LambdaOne) {
  Rng rng(18);
  const auto a = random_batch<float>(2, {4, 4, 1}, rng), b = random_batch<float>(2, {4, 4, 1}, rng);
  const auto [mixed, target] = mixup_with_lambda(a, b, 1.0);
  EXPECT_EQ(mixed, a);
  EXPECT_EQ(target, a);
}

TEST(Mixup, LambdaZero) {
  Rng rng(19);
  const auto a = random_batch<float>(2, {4, 4, 1}, rng), b = random_batch<float>(2, {4, 4, 1}, rng);
  const auto [mixed, target] = mixup_with_lambda(a, b, 0.0);
  EXPECT_EQ(mixed, b);
  EXPECT_EQ(target, b);
}

TEST(Mixup, MaxContributionTarget) {
  Rng rng(20);
  const auto a = random_batch<float>(2, {4, 4, 1}, rng), b = random_batch<float>(2, {4, 4, 1}, rng);
  const auto [mixed, target] = mixup_with_lambda(a, b, 0.7);
  for (std::size_t i = 0; i < a.values().size(); ++i)
    EXPECT_FLOAT_EQ(mixed.values()[i], 0.7f * a.values()[i] + 0.3f * b.values()[i]);
  EXPECT_EQ(target, a);
  EXPECT_EQ(mixup_with_lambda(a, b, 0.3).second, b);
}

TEST(Mixup, TieGoesToFirst) {
  Rng rng(21);
  const auto a = random_batch<float>(1, {4, 4, 1}, rng), b = random_batch<float>(1, {4, 4, 1}, rng);
  EXPECT_EQ(mixup_with_lambda(a, b, 0.5).second, a);
}

TEST(Mixup, BatchDrawsLambdaAndRejectsBadInput) {
  Rng rng(22);
  const auto a = random_batch<float>(2, {4, 4, 1}, rng), b = random_batch<float>(2, {4, 4, 1}, rng);
  const auto r = mixup_batch(a, b, 1.0, rng);
  EXPECT_GE(r.lambda, 0.0);
  EXPECT_LE(r.lambda, 1.0);
  EXPECT_EQ(r.target, r.lambda >= 0.5 ? a : b);
  EXPECT_THROW(mixup_batch(a, random_batch<float>(2, {4, 4, 3}, rng), 1.0, rng), DimensionMismatch);
  EXPECT_ANY_THROW(mixup_batch(a, b, 0.0, rng));
}

// --- training -----------------------------------------------------------------

TEST(Train, ZeroEpochsLeavesParamsUnchanged) {
  Rng rng(23);
  auto p = init_model<float>(toy_arch(), rng);
  const auto before = p;
  TrainSettings s;
  s.epochs = 0;
  const auto log = train(p, random_batch<float>(16, toy_arch().input, rng), variant(Variant::vae), s, rng);
  EXPECT_TRUE(log.empty());
  EXPECT_EQ(p, before);
}

TEST(Train, SameSeedBitIdenticalCheckpoints) {
  Rng data(24);
  const auto x = random_batch<float>(64, toy_arch().input, data);
  TrainSettings s;
  s.epochs = 3;
  s.batch_size = 16;
  for (auto v : kAllVariants) {
    Rng a(7), b(7);
    auto pa = init_model<float>(toy_arch(), a);
    auto pb = init_model<float>(toy_arch(), b);
    const auto la = train(pa, x, variant(v), s, a);
    const auto lb = train(pb, x, variant(v), s, b);
    EXPECT_EQ(pa, pb) << to_string(v);
    ASSERT_EQ(la.size(), 3u);
    EXPECT_EQ(la.back().report.objective, lb.back().report.objective);
  }
}

TEST(Train, EpochCallbackFiresEveryEpoch) {
  Rng rng(25);
  auto p = init_model<float>(toy_arch(), rng);
  TrainSettings s;
  s.epochs = 4;
  s.batch_size = 8;
  std::vector<std::size_t> seen;
  train(p, random_batch<float>(16, toy_arch().input, rng), variant(Variant::vae), s, rng,
        [&](const EpochLog& e, const ModelParams<float>&) { seen.push_back(e.epoch); });
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3, 4}));
}

TEST(Train, NanObjectiveAborts) {
  Rng rng(26);
  auto p = init_model<float>(toy_arch(), rng);
  auto x = random_batch<float>(8, toy_arch().input, rng);
  x.values()[3] = std::numeric_limits<float>::quiet_NaN();
  TrainSettings s;
  s.epochs = 1;
  EXPECT_THROW(train(p, x, variant(Variant::vae), s, rng), TrainingDiverged);
}

TEST(Train, ObjectiveImprovesOnColoredMnistFirstEpochs) {
  const std::filesystem::path dir = std::filesystem::path(JIGSAW_VAE_SOURCE_DIR) / "data" / "mnist";
  if (!std::filesystem::exists(dir)) GTEST_SKIP() << "no MNIST files";
  const auto colored = build_colored_mnist(load_mnist(dir, "train").head(2000), ColorPalette::standard());
  TrainSettings s;
  s.epochs = 5;
  int monotone = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(derive_seed(1, "vae", seed, "train"));
    auto p = init_model<float>(ArchConfig{}, rng);
    const auto log = train(p, colored.images, variant(Variant::vae), s, rng);
    bool ok = true;
    for (std::size_t e = 1; e < log.size(); ++e) ok = ok && log[e].report.objective >= log[e - 1].report.objective;
    monotone += ok;
  }
  EXPECT_GE(monotone, 4);
}

// --- generation -----------------------------------------------------------------

TEST(SamplePrior, EmptyReproducibleInRange) {
  Rng rng(27);
  const auto p = init_model<float>(toy_arch(), rng);
  EXPECT_TRUE(sample_prior(p, 0, rng).empty());
  Rng a(5), b(5);
  const auto sa = sample_prior(p, 300, a);
  EXPECT_EQ(sa, sample_prior(p, 300, b));
  EXPECT_EQ(sa.size(), 300u);
  for (float v : sa.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Interpolate, TwoStepsAreEndpoints) {
  Rng rng(28);
  const auto p = init_model<float>(toy_arch(), rng);
  const auto a = random_batch<float>(1, toy_arch().input, rng), b = random_batch<float>(1, toy_arch().input, rng);
  const auto strip = interpolate(p, a, b, 2);
  ASSERT_EQ(strip.size(), 2u);
  EXPECT_EQ(strip.slice(0, 1), decode(p, encode_means(p, a)));
  EXPECT_EQ(strip.slice(1, 2), decode(p, encode_means(p, b)));
}

TEST(Interpolate, EndpointsBitEqualReconstructions) {
  Rng rng(29);
  const auto p = init_model<float>(toy_arch(), rng);
  const auto a = random_batch<float>(1, toy_arch().input, rng), b = random_batch<float>(1, toy_arch().input, rng);
  const auto strip = interpolate(p, a, b, 8);
  EXPECT_EQ(strip.size(), 8u);
  EXPECT_EQ(strip.slice(0, 1), reconstruct(p, a));
  EXPECT_EQ(strip.slice(7, 8), reconstruct(p, b));
}

TEST(Interpolate, RejectsFewerThanTwoSteps) {
  Rng rng(30);
  const auto p = init_model<float>(toy_arch(), rng);
  const auto a = random_batch<float>(1, toy_arch().input, rng);
  EXPECT_ANY_THROW(interpolate(p, a, a, 1));
}

// --- reconstruction error -----------------------------------------------------------

namespace {

// Zero decoder with a constant output bias: every pixel decodes to sigmoid(bias).
ModelParams<float> constant_decoder(float bias) {
  Rng rng(31);
  auto p = init_model<float>(toy_arch(), rng);
  const Network net(toy_arch());
  std::fill(p.values.begin() + static_cast<std::ptrdiff_t>(net.decoder.param_begin()), p.values.end(), 0.0f);
  const auto& last = net.decoder.layers()[net.decoder.layers().size() - 2];
  for (std::size_t c = 0; c < last.bias_count; ++c) p.values[last.bias_offset + c] = bias;
  return p;
}

}  // namespace

TEST(ReconstructionMse, ConstantHalfOnHalfInputsIsZero) {
  ImageBatch<float> x(5, toy_arch().input);
  for (auto& v : x.values()) v = 0.5f;
  EXPECT_EQ(reconstruction_mse(constant_decoder(0.0f), x), 0.0);
}

TEST(ReconstructionMse, ConstantZeroOnOnesIsOne) {
  ImageBatch<float> x(5, toy_arch().input);
  for (auto& v : x.values()) v = 1.0f;
  EXPECT_EQ(reconstruction_mse(constant_decoder(-1000.0f), x), 1.0);
}

// --- checkpoints ----------------------------------------------------------------

TEST(Checkpoint, RoundTrip) {
  Rng rng(32);
  Checkpoint c{init_model<float>(toy_arch(), rng), variant(Variant::jigsaw_beta_vae), 1234, 7, {}};
  c.extra.set("training_hash", "abc");
  const auto dir = std::filesystem::temp_directory_path() / "jigsaw_vae_test_ckpt";
  std::filesystem::remove_all(dir);
  save_checkpoint(dir / "model", c);
  const auto back = load_checkpoint(dir / "model");
  EXPECT_EQ(back.params, c.params);
  EXPECT_EQ(back.variant.variant, Variant::jigsaw_beta_vae);
  EXPECT_TRUE(back.variant.permute_channels);
  EXPECT_EQ(back.seed, 1234u);
  EXPECT_EQ(back.epoch, 7u);
  EXPECT_EQ(back.extra.get("training_hash"), "abc");
}

TEST(TrainingLog, CsvHeaderAndRows) {
  const std::vector<EpochLog> log{{1, ElboReport::make(-10, 2, 1)}, {2, ElboReport::make(-8, 2.5, 1)}};
  EXPECT_EQ(training_log_csv(log), "epoch,recon_term,kl_term,objective\n1,-10,2,-12\n2,-8,2.5,-10.5\n");
}
