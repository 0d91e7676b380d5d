// jigsaw-vae: command-line front end for the experiment harness.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "jigsaw_vae/harness.hpp"

namespace jv = jigsaw_vae;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> variant;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "experiment config (INI)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "root seed override");
  cmd->add_option("--out", f.out, "output directory override");
  cmd->add_option("--variant", f.variant, "run a single variant");
}

jv::ExperimentConfig resolve(const CommonFlags& f) {
  auto cfg = jv::ExperimentConfig::load(f.config);
  if (f.seed) cfg.root_seed = *f.seed;
  if (f.out) cfg.output_dir = *f.out;
  if (f.variant) cfg.variants = {jv::parse_variant(*f.variant)};
  cfg.validate();
  return cfg;
}

void print_tables(const jv::RunRecord& rec) {
  for (const auto& t : rec.tables) std::cout << "wrote " << t.generic_string() << "\n";
}

int cmd_prepare(const jv::ExperimentConfig& cfg) {
  for (const auto& p : jv::prepare_data(cfg)) std::cout << "wrote " << p.generic_string() << ".{manifest,f32}\n";
  return 0;
}

int cmd_train(const jv::ExperimentConfig& cfg) {
  if (cfg.kind == jv::ExperimentKind::clustering) {
    const auto data = jv::colored_mnist_data(cfg);
    for (auto v : cfg.variants)
      for (std::size_t s = 0; s < cfg.seeds; ++s) {
        const auto m = jv::train_or_load_cluster(cfg, v, s, data.train.images);
        std::cout << jv::to_string(v) << " seed " << s << ": " << m.mixture.active_count() << " active components\n";
      }
  } else {
    const auto data = jv::synthetic_data(cfg);
    for (auto v : cfg.variants)
      for (std::size_t s = 0; s < cfg.seeds; ++s) {
        const auto p = jv::train_or_load_vae(cfg, v, s, data.train.images);
        std::cout << jv::to_string(v) << " seed " << s << ": test mse " << jv::reconstruction_mse(p, data.test.images)
                  << "\n";
      }
  }
  return 0;
}

int cmd_sample(const jv::ExperimentConfig& cfg) {
  for (auto v : cfg.variants)
    for (std::size_t s = 0; s < cfg.seeds; ++s) {
      const auto dir = jv::run_dir(cfg.output_dir, v, s);
      const auto stem = dir / "checkpoint";
      if (!jv::fs::exists(jv::with_suffix(stem, ".manifest")))
        throw jv::MissingCheckpoint("no checkpoint at " + stem.string() + " (run `train` first)");
      const auto ckpt = jv::load_checkpoint(stem);
      jv::Rng rng(jv::derive_seed(cfg.root_seed, jv::to_string(v), s, "sample"));
      const auto images = jv::sample_prior(ckpt.params, cfg.generated, rng);
      jv::io::write_f32(dir / "samples.f32", images.values());
      if (!images.empty())
        jv::io::write_png_grid(dir / "samples.png", images.slice(0, std::min(cfg.grid_images, images.size())), 10);
      std::cout << "wrote " << (dir / "samples.f32").generic_string() << " (" << images.size() << " images)\n";
    }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Jigsaw-VAE experiments"};
  app.require_subcommand(1);
  CommonFlags flags;
  auto* prepare = app.add_subcommand("prepare-data", "build and cache the datasets of an experiment");
  auto* train = app.add_subcommand("train", "train every configured variant x seed");
  auto* sample = app.add_subcommand("sample", "draw prior samples from trained checkpoints");
  auto* fpm = app.add_subcommand("eval-fpm", "feature-inspection protocol (FPM table)");
  auto* cluster = app.add_subcommand("cluster", "biased clustering protocol (NMI table)");
  auto* interp = app.add_subcommand("interpolate", "latent interpolation strips");
  auto* report = app.add_subcommand("report", "markdown summary of the tables in the output directory");
  for (auto* c : {prepare, train, sample, fpm, cluster, interp, report}) add_common(c, flags);

  CLI11_PARSE(app, argc, argv);
  try {
    const auto cfg = resolve(flags);
    if (prepare->parsed()) return cmd_prepare(cfg);
    if (train->parsed()) return cmd_train(cfg);
    if (sample->parsed()) return cmd_sample(cfg);
    if (fpm->parsed()) {
      print_tables(jv::run_feature_inspection(cfg));
      return 0;
    }
    if (cluster->parsed()) {
      print_tables(jv::run_clustering(cfg));
      return 0;
    }
    if (interp->parsed()) {
      print_tables(jv::run_interpolation(cfg));
      return 0;
    }
    if (report->parsed()) {
      const auto md = jv::build_report(cfg.output_dir);
      jv::io::write_text_atomic(cfg.output_dir / "report.md", md);
      std::cout << md;
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
