// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--criteria 1,2,...] [--work-dir DIR]
//
// Criteria 6-8 train full experiments under --work-dir using the configs in
// configs/acceptance/. Finished checkpoints there are reused by 6 and 7.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>

#include "jigsaw_vae/harness.hpp"

using namespace jigsaw_vae;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

fs::path g_work = fs::temp_directory_path() / "jigsaw_vae_acceptance";
const fs::path g_source = JIGSAW_VAE_SOURCE_DIR;

std::string num(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

// --- 1. FPM against a recount from raw flags --------------------------------

Outcome fpm_oracle() {
  Rng rng(derive_seed(1, "acceptance", 1, "fpm"));
  for (int t = 0; t < 1000; ++t) {
    std::vector<std::uint8_t> gen(1 + rng.below(3000)), train(1 + rng.below(3000));
    const double pg = rng.uniform(), pt = rng.uniform();
    for (auto& f : gen) f = rng.uniform() < pg;
    for (auto& f : train) f = rng.uniform() < pt;
    std::size_t n_gf = 0, n_tf = 0;
    for (auto f : gen) n_gf += f;
    for (auto f : train) n_tf += f;
    const double expect = std::fabs(static_cast<double>(n_gf) / static_cast<double>(gen.size()) -
                                    static_cast<double>(n_tf) / static_cast<double>(train.size())) *
                          100.0;
    const double got = compute_fpm(static_cast<std::size_t>(std::count(gen.begin(), gen.end(), 1)), gen.size(),
                                   static_cast<std::size_t>(std::count(train.begin(), train.end(), 1)), train.size());
    if (got != expect) return {false, "tuple " + std::to_string(t) + ": " + num(got) + " != " + num(expect)};
  }
  return {true, "1000 tuples exact"};
}

// --- 2. permutations ------------------------------------------------------------

Outcome permutation_suite() {
  Rng rng(derive_seed(1, "acceptance", 2, "permutation"));
  const auto grid = make_grid(28, 28, 4);
  for (int t = 0; t < 1000; ++t) {
    ImageBatch<float> x(1, {28, 28, 3});
    for (auto& v : x.values()) v = static_cast<float>(rng.uniform());
    const auto spec = sample_permutation(grid, 3, rng);
    const auto y = apply(spec, x);
    if (apply(invert(spec), y) != x) return {false, "round trip failed at pair " + std::to_string(t)};
    std::vector<float> a(x.values().begin(), x.values().end()), b(y.values().begin(), y.values().end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    if (a != b) return {false, "pixel multiset changed at pair " + std::to_string(t)};
  }
  std::map<std::vector<std::size_t>, int> counts;
  std::vector<std::size_t> base{0, 1, 2, 3};
  do counts[base] = 0;
  while (std::next_permutation(base.begin(), base.end()));
  const auto g2 = make_grid(4, 4, 2);
  const int draws = 48000;
  for (int i = 0; i < draws; ++i) ++counts.at(sample_permutation(g2, std::nullopt, rng).tile_order);
  const double e = draws / 24.0;
  double stat = 0;
  for (const auto& [k, c] : counts) stat += (c - e) * (c - e) / e;
  const double p = boost::math::gamma_q(23.0 / 2.0, stat / 2.0);
  return {p > 0.001, "1000 round trips exact, multiset exact, chi2 = " + num(stat) + " p = " + num(p)};
}

// --- 3. KL against Monte Carlo ---------------------------------------------------

Outcome kl_monte_carlo() {
  Rng rng(derive_seed(1, "acceptance", 3, "kl"));
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(16);
  if (kl_diag_gaussian(zero, zero) != 0.0) return {false, "KL(N(0,I) || N(0,I)) != 0"};
  double worst = 0;
  for (int t = 0; t < 20; ++t) {
    Eigen::VectorXd mu(16), lv(16);
    for (int d = 0; d < 16; ++d) {
      mu(d) = rng.uniform() * 4 - 2;
      lv(d) = 2 * std::log(0.3 + 2.7 * rng.uniform());
    }
    const double exact = kl_diag_gaussian(mu, lv);
    double acc = 0;
    const int n = 1000000;
    for (int s = 0; s < n; ++s) {
      double r = 0;
      for (int d = 0; d < 16; ++d) {
        const double eps = rng.normal();
        const double z = mu(d) + std::exp(0.5 * lv(d)) * eps;
        r += -0.5 * (lv(d) + eps * eps) + 0.5 * z * z;
      }
      acc += r;
    }
    worst = std::max(worst, std::fabs(acc / n - exact) / exact);
  }
  return {worst < 0.01, "20 pairs, worst relative error " + num(worst)};
}

// --- 4. gradient check -------------------------------------------------------------

template <typename Prior>
double grad_error(Variant v, std::uint64_t seed, const Prior& prior) {
  const ArchConfig arch{{8, 8, 2}, {2, 2, 2, 2}, 2};
  Rng rng(seed);
  auto params = init_model<double>(arch, rng);
  ImageBatch<double> x(3, arch.input);
  for (auto& p : x.values()) p = rng.uniform();
  VariantConfig cfg;
  cfg.variant = v;
  cfg.permute_channels = true;
  const auto draws = draw_step(x, cfg, 2, rng);
  std::vector<double> grad(params.values.size(), 0.0);
  elbo_with_draws<double, Prior>(params, x, cfg, draws, grad, prior);
  double num2 = 0, den = 0;
  const double h = 1e-6;
  for (std::size_t k = 0; k < params.values.size(); ++k) {
    const double keep = params.values[k];
    params.values[k] = keep + h;
    const double up = elbo_with_draws<double, Prior>(params, x, cfg, draws, {}, prior).objective;
    params.values[k] = keep - h;
    const double down = elbo_with_draws<double, Prior>(params, x, cfg, draws, {}, prior).objective;
    params.values[k] = keep;
    const double fd = (up - down) / (2 * h);
    num2 += (fd - grad[k]) * (fd - grad[k]);
    den += std::max(fd * fd, grad[k] * grad[k]);
  }
  return std::sqrt(num2 / den);
}

Outcome gradient_check() {
  const Network net(ArchConfig{{8, 8, 2}, {2, 2, 2, 2}, 2});
  if (net.param_count() > 1000) return {false, "model has " + std::to_string(net.param_count()) + " parameters"};
  MixtureLatentState s;
  s.component_means.resize(3, 2);
  s.component_means << 0.5, -0.3, -1.0, 0.8, 2.0, 2.0;
  s.component_log_variances.resize(3, 2);
  s.component_log_variances << -0.5, 0.2, 0.1, -0.3, 0.0, 0.0;
  s.mixture_weights = {0.6, 0.4, 0.0};
  double worst = 0;
  std::string where;
  for (auto v : kAllVariants) {
    for (int prior = 0; prior < 2; ++prior) {
      const double e = prior ? grad_error(v, 300, MixturePrior{&s}) : grad_error(v, 300, StandardNormalPrior{});
      if (e > worst) {
        worst = e;
        where = std::string(to_string(v)) + (prior ? "+mixture" : "");
      }
    }
  }
  return {worst < 1e-4, std::to_string(net.param_count()) + " params, 6 variants x 2 priors, worst " + num(worst) + " (" +
                            where + ")"};
}

// --- 5. jigsaw with the identity group ------------------------------------------------

Outcome jigsaw_reduces_to_vae() {
  const ArchConfig arch{{28, 28, 3}, {8, 8, 16, 16}, 16};
  Rng rng(derive_seed(1, "acceptance", 5, "jigsaw"));
  const auto params = init_model<float>(arch, rng);
  ImageBatch<float> x(16, arch.input);
  for (auto& p : x.values()) p = static_cast<float>(rng.uniform());
  VariantConfig jig;
  jig.variant = Variant::jigsaw_vae;
  jig.grid_divisions = 1;
  jig.permute_channels = false;
  const auto dj = draw_step(x, jig, 16, rng);
  StepDraws<float> dv;
  dv.noise = dj.noise;
  const auto a = elbo_with_draws<float>(params, x, jig, dj);
  const auto b = elbo_with_draws<float>(params, x, VariantConfig{}, dv);
  return {a.objective == b.objective, "jigsaw " + num(a.objective) + " vae " + num(b.objective)};
}

// --- 6-8. experiments --------------------------------------------------------------------

ExperimentConfig load_config(const std::string& name, const fs::path& out) {
  auto cfg = ExperimentConfig::load(g_source / "configs" / "acceptance" / name);
  cfg.output_dir = out;
  cfg.mnist_dir = g_source / "data" / "mnist";
  cfg.cache_dir = g_work / "cache";
  return cfg;
}

std::map<std::string, double> medians(const fs::path& csv, const std::string& column) {
  const auto t = median_table(CsvTable::parse(io::read_text(csv)));
  std::map<std::string, double> out;
  for (const auto& r : t.rows) out[r[0]] = std::stod(r[t.column(column)]);
  return out;
}

Outcome clustering_experiment() {
  const auto cfg = load_config("clustering.ini", g_work / "clustering");
  run_clustering(cfg);
  const auto multi = medians(cfg.output_dir / "table2.csv", "nmi_multi");
  const auto single = medians(cfg.output_dir / "table2.csv", "nmi_single_median");
  std::ostringstream d;
  for (const auto& [v, m] : multi) d << v << " multi " << num(m) << " single " << num(single.at(v)) << "; ";
  const double jig_multi = multi.at("jigsaw_vae"), jig_single = single.at("jigsaw_vae");
  bool pass = jig_multi >= multi.at("vae") + 0.02;
  for (const auto& [v, s] : single)
    if (v != "jigsaw_vae" && v != "jigsaw_beta_vae") pass = pass && jig_single > s;
  return {pass, d.str()};
}

Outcome feature_experiment() {
  const auto cfg = load_config("feature_inspection.ini", g_work / "feature_inspection");
  run_feature_inspection(cfg);
  const auto col = "fpm_" + cfg.minority_feature();
  const auto fpm = medians(cfg.output_dir / "table1.csv", col);
  const auto clf = CsvTable::parse(io::read_text(cfg.output_dir / "classifiers.csv"));
  double worst_acc = 1.0;
  for (const auto& r : clf.rows) worst_acc = std::min(worst_acc, std::stod(r[1]));
  const bool pass = fpm.at("jigsaw_vae") <= fpm.at("vae") && worst_acc >= 0.95;
  return {pass, col + " median: jigsaw_vae " + num(fpm.at("jigsaw_vae")) + " vae " + num(fpm.at("vae")) +
                    "; lowest classifier accuracy " + num(worst_acc)};
}

std::vector<fs::path> run_files(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension();
    if (ext == ".csv" || ext == ".f32" || ext == ".manifest" || ext == ".json") out.push_back(fs::relative(e.path(), root));
  }
  std::sort(out.begin(), out.end());
  return out;
}

Outcome determinism() {
  std::size_t compared = 0;
  for (const auto& [name, kind] : {std::pair<std::string, int>{"determinism_clustering.ini", 0},
                                   std::pair<std::string, int>{"determinism_features.ini", 1}}) {
    fs::path dirs[2];
    for (int rep = 0; rep < 2; ++rep) {
      dirs[rep] = g_work / "determinism" / (std::to_string(kind) + "_" + std::to_string(rep));
      fs::remove_all(dirs[rep]);
      const auto cfg = load_config(name, dirs[rep]);
      if (kind == 0)
        run_clustering(cfg);
      else
        run_feature_inspection(cfg);
    }
    const auto fa = run_files(dirs[0]), fb = run_files(dirs[1]);
    if (fa != fb) return {false, name + ": different file sets"};
    for (const auto& f : fa) {
      if (f.filename() == "run_record.json") continue;  // holds absolute paths
      if (io::read_text(dirs[0] / f) != io::read_text(dirs[1] / f)) return {false, name + ": " + f.string() + " differs"};
      ++compared;
    }
  }
  return {true, std::to_string(compared) + " CSV/JSON/checkpoint files bit-identical across repeats"};
}

// --- 9. interpolation ---------------------------------------------------------------------

Outcome interpolation_contract() {
  const ArchConfig arch{{32, 32, 3}, {8, 8, 16, 16}, 16};
  Rng rng(derive_seed(1, "acceptance", 9, "interp"));
  const auto params = init_model<float>(arch, rng);
  ImageBatch<float> a(1, arch.input), b(1, arch.input);
  for (auto& p : a.values()) p = static_cast<float>(rng.uniform());
  for (auto& p : b.values()) p = static_cast<float>(rng.uniform());
  for (std::size_t steps : {2u, 8u, 13u}) {
    const auto strip = interpolate(params, a, b, steps);
    if (strip.size() != steps) return {false, "frame count " + std::to_string(strip.size()) + " != " + std::to_string(steps)};
    if (strip.slice(0, 1) != reconstruct(params, a) || strip.slice(steps - 1, steps) != reconstruct(params, b))
      return {false, "endpoint mismatch at steps = " + std::to_string(steps)};
  }
  return {true, "steps 2, 8, 13: endpoints bit-equal, frame counts match"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted{1, 2, 3, 4, 5, 6, 7, 8, 9};
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--criteria" && i + 1 < argc) {
      wanted.clear();
      for (auto c : io::split_as<int>(argv[++i])) wanted.insert(c);
    } else if (arg == "--work-dir" && i + 1 < argc) {
      g_work = argv[++i];
    } else {
      std::cerr << "usage: acceptance [--criteria 1,2,...] [--work-dir DIR]\n";
      return 2;
    }
  }
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"FPM matches recount from raw flags", fpm_oracle},
      {"permutation bijectivity, conservation, uniformity", permutation_suite},
      {"closed-form KL vs Monte Carlo", kl_monte_carlo},
      {"ELBO gradients vs central differences", gradient_check},
      {"jigsaw with 1x1 grid equals VAE", jigsaw_reduces_to_vae},
      {"colored MNIST clustering NMI", clustering_experiment},
      {"synthetic minority-feature FPM", feature_experiment},
      {"determinism of full runs", determinism},
      {"interpolation endpoints and frame count", interpolation_contract},
  };
  int failures = 0;
  for (int c : wanted) {
    if (c < 1 || c > static_cast<int>(criteria.size())) {
      std::cerr << "unknown criterion " << c << "\n";
      return 2;
    }
    Outcome o;
    try {
      o = criteria[static_cast<std::size_t>(c - 1)].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c << ": " << criteria[static_cast<std::size_t>(c - 1)].first
              << " (" << o.detail << ")" << std::endl;
  }
  return failures ? 1 : 0;
}
