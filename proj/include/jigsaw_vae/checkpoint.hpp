#pragma once

// Checkpoints: <stem>.manifest + <stem>.params.f32. The manifest records the
// architecture, the variant, the seed, the epoch and the parameter layout
// (see ModelParams); the f32 file is the flat parameter vector.

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "io.hpp"
#include "models.hpp"
#include "network.hpp"

namespace jigsaw_vae {

inline void write_arch(io::Manifest& m, const ArchConfig& a) {
  m.set("input_height", a.input.height);
  m.set("input_width", a.input.width);
  m.set("input_channels", a.input.channels);
  m.set("conv_channels", io::join(a.channels));
  m.set("latent_dim", a.latent_dim);
}

inline ArchConfig read_arch(const io::Manifest& m) {
  ArchConfig a;
  a.input = {m.get_as<std::size_t>("input_height"), m.get_as<std::size_t>("input_width"),
             m.get_as<std::size_t>("input_channels")};
  a.channels = io::split_as<std::size_t>(m.get("conv_channels"));
  a.latent_dim = m.get_as<std::size_t>("latent_dim");
  return a;
}

inline void write_variant(io::Manifest& m, const VariantConfig& v) {
  m.set("variant", std::string(to_string(v.variant)));
  m.set("beta", v.beta);
  m.set("noise_std", v.noise_std);
  m.set("mixup_alpha", v.mixup_alpha);
  m.set("grid_divisions", v.grid_divisions);
  m.set("permute_channels", v.permute_channels ? "true" : "false");
}

inline VariantConfig read_variant(const io::Manifest& m) {
  VariantConfig v;
  v.variant = parse_variant(m.get("variant"));
  v.beta = m.get_as<double>("beta");
  v.noise_std = m.get_as<double>("noise_std");
  v.mixup_alpha = m.get_as<double>("mixup_alpha");
  v.grid_divisions = m.get_as<std::size_t>("grid_divisions");
  v.permute_channels = m.get("permute_channels") == "true";
  return v;
}

struct Checkpoint {
  ModelParams<float> params;
  VariantConfig variant;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  io::Manifest extra;  // caller-defined keys (config hash, mixture, ...)
};

inline std::filesystem::path with_suffix(std::filesystem::path stem, const char* suffix) {
  stem += suffix;
  return stem;
}

inline void save_checkpoint(const std::filesystem::path& stem, const Checkpoint& c) {
  const Network net(c.params.arch);
  if (net.param_count() != c.params.values.size()) throw DimensionMismatch("save_checkpoint: parameter count mismatch");
  io::Manifest m;
  m.set("format", "jigsaw-vae-checkpoint-v1");
  write_arch(m, c.params.arch);
  write_variant(m, c.variant);
  m.set("seed", c.seed);
  m.set("epoch", c.epoch);
  m.set("param_count", c.params.values.size());
  m.set("encoder_param_count", net.encoder_param_count());
  m.set("param_order",
        "encoder layers then decoder layers; per layer weights then biases; conv W[(kh,kw,c_in),c_out]; "
        "conv_transpose W[c_in,(kh,kw,c_out)]; dense W[in,out]; row-major float32-le");
  for (const auto& [k, v] : c.extra.entries()) m.set("x." + k, v);
  io::write_f32(with_suffix(stem, ".params.f32"), c.params.values);
  m.write(with_suffix(stem, ".manifest"));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& stem) {
  const auto m = io::Manifest::read(with_suffix(stem, ".manifest"));
  if (m.get("format") != "jigsaw-vae-checkpoint-v1") throw io::FormatError(stem.string() + ": not a checkpoint");
  Checkpoint c;
  c.params.arch = read_arch(m);
  const auto raw = io::read_f32(with_suffix(stem, ".params.f32"));
  c.params.values.assign(raw.begin(), raw.end());
  if (c.params.values.size() != m.get_as<std::size_t>("param_count") ||
      c.params.values.size() != Network(c.params.arch).param_count())
    throw io::FormatError(stem.string() + ": parameter count mismatch");
  c.variant = read_variant(m);
  c.seed = m.get_as<std::uint64_t>("seed");
  c.epoch = m.get_as<std::size_t>("epoch");
  for (const auto& [k, v] : m.entries())
    if (k.rfind("x.", 0) == 0) c.extra.set(k.substr(2), v);
  return c;
}

inline std::string training_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch,recon_term,kl_term,objective\n";
  for (const auto& e : log)
    os << e.epoch << ',' << e.report.recon_term << ',' << e.report.kl_term << ',' << e.report.objective << '\n';
  return os.str();
}

}  // namespace jigsaw_vae
