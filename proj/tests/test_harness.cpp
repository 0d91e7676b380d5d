#include <gtest/gtest.h>

#include <filesystem>

#include "jigsaw_vae/harness.hpp"

using namespace jigsaw_vae;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("jigsaw_vae_test_" + name);
  fs::remove_all(p);
  return p;
}

fs::path mnist_dir() { return fs::path(JIGSAW_VAE_SOURCE_DIR) / "data" / "mnist"; }

ExperimentConfig tiny_clustering(const fs::path& out) {
  auto cfg = ExperimentConfig::from_ini(R"(
[experiment]
kind = clustering
variants = vae,jigsaw_vae
seeds = 1
root_seed = 5
[data]
train_limit = 300
test_limit = 100
[variant]
permute_channels = true
[model]
conv_channels = 4,4,8,8
latent_dim = 4
[train]
epochs = 3
batch_size = 64
[cluster]
warmup_epochs = 1
init_em_iterations = 10
)");
  cfg.output_dir = out;
  cfg.mnist_dir = mnist_dir();
  cfg.cache_dir = out / "cache";
  return cfg;
}

ExperimentConfig tiny_features(const fs::path& out) {
  auto cfg = ExperimentConfig::from_ini(R"(
[experiment]
kind = feature-inspection
variants = vae,jigsaw_vae
seeds = 2
[data]
synthetic_train = 200
synthetic_test = 50
classifier_train = 400
[model]
conv_channels = 4,4,8,8
latent_dim = 4
[train]
epochs = 2
batch_size = 64
[audit]
generated = 100
classifier_epochs = 1
)");
  cfg.output_dir = out;
  cfg.cache_dir = out / "cache";
  return cfg;
}

}  // namespace

TEST(Config, ParsesSectionsAndKeepsDefaults) {
  const auto cfg = ExperimentConfig::from_ini("[experiment]\nkind = feature-inspection\nseeds = 3\n[train]\nepochs = 7\n");
  EXPECT_EQ(cfg.kind, ExperimentKind::feature_inspection);
  EXPECT_EQ(cfg.seeds, 3u);
  EXPECT_EQ(cfg.train.epochs, 7u);
  EXPECT_EQ(cfg.train.batch_size, 128u);
  EXPECT_EQ(cfg.latent_dim, 16u);
  EXPECT_EQ(cfg.input_shape(), (ImageShape{32, 32, 3}));
}

TEST(Config, CanonicalRoundTrip) {
  const auto cfg = tiny_clustering("/tmp/x");
  const auto back = ExperimentConfig::from_ini(cfg.canonical());
  EXPECT_EQ(back.canonical(), cfg.canonical());
  EXPECT_EQ(back.hash(), cfg.hash());
}

TEST(Config, TrainingHashIgnoresOutputLocations) {
  auto a = tiny_clustering("/tmp/a"), b = tiny_clustering("/tmp/b");
  b.seeds = 4;
  EXPECT_EQ(a.training_hash(), b.training_hash());
  b.train.epochs = 4;
  EXPECT_NE(a.training_hash(), b.training_hash());
}

TEST(Config, UnknownKeyRejected) {
  EXPECT_THROW(ExperimentConfig::from_ini("[train]\nepoch = 3\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_ini("[bogus]\nx = 1\n"), ConfigError);
}

TEST(Config, EmptyVariantListRejected) {
  auto cfg = ExperimentConfig::from_ini("");
  cfg.variants.clear();
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Config, UnknownVariantRejected) {
  EXPECT_THROW(ExperimentConfig::from_ini("[experiment]\nvariants = vae,vq_vae\n"), ConfigError);
}

TEST(Config, IncompatibleGridRejected) {
  EXPECT_THROW(ExperimentConfig::from_ini("[variant]\ngrid_divisions = 5\n"), DimensionMismatch);
}

TEST(Median, OddEvenAndEmpty) {
  EXPECT_DOUBLE_EQ(median({3, 1, 2}), 2.0);
  EXPECT_DOUBLE_EQ(median({4, 1, 2, 3}), 2.5);
  EXPECT_THROW(median({}), std::invalid_argument);
}

TEST(Csv, RoundTripAndMedianTable) {
  CsvTable t{{"variant", "seed", "a", "b"}, {{"vae", "0", "1", "10"}, {"vae", "1", "3", "30"}, {"vae", "2", "2", "20"},
                                             {"jigsaw_vae", "0", "5", "0.5"}}};
  const auto back = CsvTable::parse(t.str());
  EXPECT_EQ(back.header, t.header);
  EXPECT_EQ(back.rows, t.rows);
  const auto med = median_table(t);
  EXPECT_EQ(med.header, (std::vector<std::string>{"variant", "a", "b"}));
  ASSERT_EQ(med.rows.size(), 2u);
  EXPECT_EQ(med.rows[0], (std::vector<std::string>{"vae", "2", "20"}));
  EXPECT_EQ(med.rows[1], (std::vector<std::string>{"jigsaw_vae", "5", "0.5"}));
}

TEST(Clustering, TinyRunTablesAndDeterminism) {
  if (!fs::exists(mnist_dir())) GTEST_SKIP() << "no MNIST files";
  const auto a = fresh_dir("clu_a"), b = fresh_dir("clu_b");
  run_clustering(tiny_clustering(a));
  run_clustering(tiny_clustering(b));
  const auto ta = io::read_text(a / "table2.csv");
  EXPECT_EQ(ta, io::read_text(b / "table2.csv"));
  for (const char* v : {"vae", "jigsaw_vae"})
    EXPECT_EQ(io::read_text(a / v / "seed0" / "checkpoint.params.f32"), io::read_text(b / v / "seed0" / "checkpoint.params.f32"));

  const auto t = CsvTable::parse(ta);
  ASSERT_EQ(t.rows.size(), 2u);
  std::size_t singles = 0;
  for (const auto& h : t.header) singles += h.starts_with("nmi_single_") && h != "nmi_single_median";
  EXPECT_EQ(singles, 10u);
  for (const auto& row : t.rows) {
    std::vector<double> v;
    for (int k = 0; k < 10; ++k) v.push_back(std::stod(row[t.column("nmi_single_" + std::to_string(k))]));
    EXPECT_NEAR(std::stod(row[t.column("nmi_single_median")]), median(v), 1e-9);
    for (double x : v) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
  }
  EXPECT_TRUE(fs::exists(a / "nmi.json"));
  EXPECT_TRUE(fs::exists(a / "vae" / "seed0" / "reconstructions_single.png"));
  EXPECT_TRUE(fs::exists(a / "vae" / "seed0" / "mixture_log.csv"));
  EXPECT_NE(build_report(a).find("Clustering NMI"), std::string::npos);
}

TEST(FeatureInspection, TinyRunInterpolationAndResume) {
  const auto dir = fresh_dir("features");
  const auto cfg = tiny_features(dir);
  const auto rec = run_feature_inspection(cfg);
  EXPECT_EQ(rec.entries.size(), 4u);
  const auto t = CsvTable::parse(io::read_text(dir / "table1.csv"));
  EXPECT_EQ(t.header.front(), "variant");
  EXPECT_EQ(t.header[2], "mse");
  EXPECT_EQ(t.header.back(), "AVG");
  EXPECT_EQ(t.header.size(), 3u + 8u + 1u);
  for (const auto& row : t.rows) {
    double sum = 0;
    for (std::size_t c = 3; c < 11; ++c) sum += std::stod(row[c]);
    EXPECT_NEAR(std::stod(row.back()), sum / 8.0, 1e-6);
  }
  const auto med = CsvTable::parse(io::read_text(dir / "table1_median.csv"));
  EXPECT_EQ(med.rows.size(), 2u);

  // a second invocation reuses the finished checkpoints
  const auto before = io::read_text(dir / "table1.csv");
  const auto stamp = fs::last_write_time(dir / "vae" / "seed0" / "checkpoint.params.f32");
  run_feature_inspection(cfg);
  EXPECT_EQ(io::read_text(dir / "table1.csv"), before);
  EXPECT_EQ(fs::last_write_time(dir / "vae" / "seed0" / "checkpoint.params.f32"), stamp);

  auto icfg = cfg;
  icfg.kind = ExperimentKind::interpolation;
  icfg.output_dir = dir / "interp";
  icfg.checkpoint_root = dir;
  icfg.steps = 6;
  const auto irec = run_interpolation(icfg);
  ASSERT_EQ(irec.entries.size(), 2u);
  for (const auto& e : irec.entries) {
    EXPECT_EQ(e.metrics[0].second, 6.0);
    EXPECT_EQ(e.metrics[1].second, 1.0);
  }
  const auto strip = io::read_f32(icfg.output_dir / "jigsaw_vae_strip.f32");
  EXPECT_EQ(strip.size(), 6u * 32u * 32u * 3u);

  icfg.checkpoint_root = dir / "missing";
  EXPECT_THROW(run_interpolation(icfg), MissingCheckpoint);
}

TEST(FeatureInspection, WrongKindRejected) {
  auto cfg = tiny_features(fresh_dir("wrong_kind"));
  cfg.kind = ExperimentKind::clustering;
  EXPECT_THROW(run_feature_inspection(cfg), ConfigError);
}

TEST(PairSelector, PicksFeaturePresentAndAbsent) {
  Rng rng(1);
  const auto set = build_two_factor_synthetic(ImbalanceConfig::minority_shape(2, 0.3), 60, rng);
  const auto [a, b] = feature_pair_selector("shape_triangle")(set);
  EXPECT_TRUE(set.flag(a, set.feature_index("shape_triangle")));
  EXPECT_FALSE(set.flag(b, set.feature_index("shape_triangle")));
}
