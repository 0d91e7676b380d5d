#pragma once

// Experiment orchestration: configuration, dataset preparation, the feature
// inspection / clustering / interpolation protocols and their artefacts.
//
// Output layout under <output_dir>:
//   <variant>/seed<i>/checkpoint.{manifest,params.f32}, training_log.csv, ...
//   table1.csv / table2.csv            one row per variant x seed
//   table1_median.csv / table2_median.csv
//   run_record.json

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "checkpoint.hpp"
#include "clustering.hpp"
#include "datasets.hpp"
#include "io.hpp"
#include "metrics.hpp"
#include "models.hpp"
#include "random.hpp"

namespace jigsaw_vae {

namespace fs = std::filesystem;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class MissingCheckpoint : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ExperimentKind { feature_inspection, clustering, interpolation };

inline std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::feature_inspection: return "feature-inspection";
    case ExperimentKind::clustering: return "clustering";
    case ExperimentKind::interpolation: return "interpolation";
  }
  return "?";
}

inline ExperimentKind parse_kind(const std::string& s) {
  if (s == "feature-inspection") return ExperimentKind::feature_inspection;
  if (s == "clustering") return ExperimentKind::clustering;
  if (s == "interpolation") return ExperimentKind::interpolation;
  throw ConfigError("unknown experiment kind '" + s + "'");
}

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::clustering;
  std::vector<Variant> variants{Variant::vae, Variant::jigsaw_vae};
  std::size_t seeds = 5;
  std::uint64_t root_seed = 20190621;
  fs::path output_dir = "runs/default";

  // data
  fs::path mnist_dir = "data/mnist";
  fs::path cache_dir = "data/cache";
  std::size_t train_limit = 0;  // 0 = everything
  std::size_t test_limit = 0;
  std::size_t synthetic_train = 4000;
  std::size_t synthetic_test = 1000;
  std::size_t classifier_train = 4000;
  std::string minority_shape = "triangle";
  double minority_fraction = 0.1;

  VariantConfig variant;  // shared variant hyperparameters; .variant unused
  std::vector<std::size_t> conv_channels{32, 32, 64, 64};
  std::size_t latent_dim = 16;
  TrainSettings train;
  ClusterSettings cluster;

  // audit
  std::size_t generated = 5000;
  ClassifierSettings classifier;

  // interpolation
  std::size_t steps = 8;
  std::string pair_feature = "shape_triangle";
  fs::path checkpoint_root = "runs/feature_inspection";
  std::size_t interpolation_seed_index = 0;

  // figures
  std::size_t grid_images = 40;
  int figure_color = 5;

  ImageShape input_shape() const {
    return kind == ExperimentKind::clustering ? ImageShape{28, 28, 3} : ImageShape{kSynthSide, kSynthSide, 3};
  }
  ArchConfig arch() const { return {input_shape(), conv_channels, latent_dim}; }

  VariantConfig variant_config(Variant v) const {
    VariantConfig c = variant;
    c.variant = v;
    return c;
  }

  std::size_t minority_shape_index() const {
    for (std::size_t i = 0; i < kGlyphNames.size(); ++i)
      if (minority_shape == kGlyphNames[i]) return i;
    throw ConfigError("unknown shape '" + minority_shape + "'");
  }
  std::string minority_feature() const { return "shape_" + minority_shape; }

  void validate() const;
  std::string canonical() const;  // resolved "[section]\nkey = value" text
  std::uint64_t hash() const { return fnv1a64(canonical()); }
  /// Hash of everything that influences trained weights.
  std::uint64_t training_hash() const;

  static ExperimentConfig from_ini(const std::string& text);
  static ExperimentConfig load(const fs::path& path) { return from_ini(io::read_text(path)); }
};

namespace detail {

template <typename V>
std::string fmt(const V& v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string fmt(bool b) { return b ? "true" : "false"; }
inline std::string fmt(const fs::path& p) { return p.generic_string(); }

template <typename V>
void parse_into(const std::string& text, V& out) {
  std::istringstream is(text);
  V v{};
  is >> v;
  if (is.fail() || !(is >> std::ws).eof()) throw ConfigError("cannot parse value '" + text + "'");
  out = v;
}

inline void parse_into(const std::string& text, std::string& out) { out = text; }
inline void parse_into(const std::string& text, fs::path& out) { out = text; }
inline void parse_into(const std::string& text, bool& out) {
  if (text == "true" || text == "1") out = true;
  else if (text == "false" || text == "0") out = false;
  else throw ConfigError("expected true/false, got '" + text + "'");
}

inline std::string join_variants(const std::vector<Variant>& vs) {
  std::string s;
  for (std::size_t i = 0; i < vs.size(); ++i) s += (i ? "," : "") + std::string(to_string(vs[i]));
  return s;
}

struct Binding {
  std::string section, key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

#define JVAE_FIELD(SECTION, KEY, MEMBER)                                                  \
  Binding {                                                                               \
    SECTION, KEY, [](const ExperimentConfig& c) { return fmt(c.MEMBER); },                \
        [](ExperimentConfig& c, const std::string& v) { parse_into(v, c.MEMBER); }        \
  }

inline const std::vector<Binding>& bindings() {
  static const std::vector<Binding> table{
      {"experiment", "kind", [](const ExperimentConfig& c) { return to_string(c.kind); },
       [](ExperimentConfig& c, const std::string& v) { c.kind = parse_kind(v); }},
      {"experiment", "variants", [](const ExperimentConfig& c) { return join_variants(c.variants); },
       [](ExperimentConfig& c, const std::string& v) {
         c.variants.clear();
         for (const auto& name : io::split_as<std::string>(v)) c.variants.push_back(parse_variant(name));
       }},
      JVAE_FIELD("experiment", "seeds", seeds),
      JVAE_FIELD("experiment", "root_seed", root_seed),
      JVAE_FIELD("experiment", "output_dir", output_dir),
      JVAE_FIELD("data", "mnist_dir", mnist_dir),
      JVAE_FIELD("data", "cache_dir", cache_dir),
      JVAE_FIELD("data", "train_limit", train_limit),
      JVAE_FIELD("data", "test_limit", test_limit),
      JVAE_FIELD("data", "synthetic_train", synthetic_train),
      JVAE_FIELD("data", "synthetic_test", synthetic_test),
      JVAE_FIELD("data", "classifier_train", classifier_train),
      JVAE_FIELD("data", "minority_shape", minority_shape),
      JVAE_FIELD("data", "minority_fraction", minority_fraction),
      JVAE_FIELD("variant", "beta", variant.beta),
      JVAE_FIELD("variant", "noise_std", variant.noise_std),
      JVAE_FIELD("variant", "mixup_alpha", variant.mixup_alpha),
      JVAE_FIELD("variant", "grid_divisions", variant.grid_divisions),
      JVAE_FIELD("variant", "permute_channels", variant.permute_channels),
      {"model", "conv_channels", [](const ExperimentConfig& c) { return io::join(c.conv_channels); },
       [](ExperimentConfig& c, const std::string& v) { c.conv_channels = io::split_as<std::size_t>(v); }},
      JVAE_FIELD("model", "latent_dim", latent_dim),
      JVAE_FIELD("train", "epochs", train.epochs),
      JVAE_FIELD("train", "batch_size", train.batch_size),
      JVAE_FIELD("train", "learning_rate", train.learning_rate),
      JVAE_FIELD("cluster", "components", cluster.components),
      JVAE_FIELD("cluster", "truncation_threshold", cluster.truncation_threshold),
      JVAE_FIELD("cluster", "warmup_epochs", cluster.warmup_epochs),
      JVAE_FIELD("cluster", "init_em_iterations", cluster.init_em_iterations),
      JVAE_FIELD("audit", "generated", generated),
      JVAE_FIELD("audit", "classifier_epochs", classifier.epochs),
      JVAE_FIELD("audit", "classifier_batch_size", classifier.batch_size),
      JVAE_FIELD("audit", "classifier_learning_rate", classifier.learning_rate),
      JVAE_FIELD("interpolation", "steps", steps),
      JVAE_FIELD("interpolation", "pair_feature", pair_feature),
      JVAE_FIELD("interpolation", "checkpoint_root", checkpoint_root),
      JVAE_FIELD("interpolation", "seed_index", interpolation_seed_index),
      JVAE_FIELD("figures", "grid_images", grid_images),
      JVAE_FIELD("figures", "figure_color", figure_color),
  };
  return table;
}

#undef JVAE_FIELD

}  // namespace detail

inline ExperimentConfig ExperimentConfig::from_ini(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  ExperimentConfig c;
  const auto& table = detail::bindings();
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config: key '" + section + "' outside a section");
    for (const auto& [key, value] : body) {
      auto it = std::find_if(table.begin(), table.end(),
                             [&](const detail::Binding& b) { return b.section == section && b.key == key; });
      if (it == table.end()) throw ConfigError("config: unknown key [" + section + "] " + key);
      try {
        it->set(c, value.get_value<std::string>());
      } catch (const ConfigError& e) {
        throw ConfigError("config: [" + section + "] " + key + ": " + e.what());
      } catch (const std::invalid_argument& e) {
        throw ConfigError("config: [" + section + "] " + key + ": " + e.what());
      }
    }
  }
  c.validate();
  return c;
}

inline std::string ExperimentConfig::canonical() const {
  std::string out, section;
  for (const auto& b : detail::bindings()) {
    if (b.section != section) {
      out += (out.empty() ? "[" : "\n[") + b.section + "]\n";
      section = b.section;
    }
    out += b.key + " = " + b.get(*this) + "\n";
  }
  return out;
}

inline std::uint64_t ExperimentConfig::training_hash() const {
  static const std::set<std::string> relevant{"data", "variant", "model", "train", "cluster"};
  std::string key = "kind=" + to_string(kind) + ";root_seed=" + std::to_string(root_seed) + ";";
  for (const auto& b : detail::bindings())
    if (relevant.count(b.section) && b.key != "cache_dir") key += b.section + "." + b.key + "=" + b.get(*this) + ";";
  return fnv1a64(key);
}

inline void ExperimentConfig::validate() const {
  if (variants.empty()) throw ConfigError("config: at least one variant is required");
  if (seeds == 0) throw ConfigError("config: at least one seed is required");
  for (auto v : variants) variant_config(v).validate();
  if (train.batch_size == 0) throw ConfigError("config: batch_size must be positive");
  if (!(train.learning_rate > 0.0)) throw ConfigError("config: learning_rate must be positive");
  if (conv_channels.empty() || latent_dim == 0) throw ConfigError("config: invalid model shape");
  if (kind == ExperimentKind::clustering) {
    if (cluster.components < 2) throw ConfigError("config: cluster.components must be at least 2");
    if (!(cluster.truncation_threshold > 0.0 && cluster.truncation_threshold < 1.0))
      throw ConfigError("config: truncation_threshold must lie in (0, 1)");
    if (train.epochs <= cluster.warmup_epochs) throw ConfigError("config: epochs must exceed cluster.warmup_epochs");
    if (figure_color < 0 || figure_color > 9) throw ConfigError("config: figure_color must be 0-9");
  } else {
    minority_shape_index();
    if (!(minority_fraction > 0.0 && minority_fraction < 1.0)) throw ConfigError("config: minority_fraction in (0, 1)");
    if (synthetic_train == 0 || synthetic_test == 0 || classifier_train == 0)
      throw ConfigError("config: synthetic set sizes must be positive");
  }
  if (kind == ExperimentKind::interpolation && steps < 2) throw ConfigError("config: steps must be at least 2");
  const auto shape = input_shape();
  if (std::any_of(variants.begin(), variants.end(), [](Variant v) { return v == Variant::jigsaw_vae || v == Variant::jigsaw_beta_vae; }))
    make_grid(shape.height, shape.width, variant.grid_divisions);
}

// ---------------------------------------------------------------------------
// Small utilities

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty list");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::string fmt_metric(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

/// Comma-separated table with a header row; cells are kept as text.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string str() const {
    std::string out = io::join(header) + "\n";
    for (const auto& r : rows) out += io::join(r) + "\n";
    return out;
  }

  static CsvTable parse(const std::string& text) {
    CsvTable t;
    std::istringstream is(text);
    std::string line;
    auto split = [](const std::string& s) {
      std::vector<std::string> cells;
      std::stringstream ss(s);
      std::string c;
      while (std::getline(ss, c, ',')) cells.push_back(c);
      return cells;
    };
    if (!std::getline(is, line)) throw io::FormatError("csv: empty");
    t.header = split(line);
    while (std::getline(is, line))
      if (!line.empty()) t.rows.push_back(split(line));
    return t;
  }

  std::size_t column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw io::FormatError("csv: no column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
};

/// Per-variant medians over seeds of every numeric column after "seed".
inline CsvTable median_table(const CsvTable& per_seed) {
  const auto vcol = per_seed.column("variant"), scol = per_seed.column("seed");
  CsvTable out;
  out.header.push_back("variant");
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < per_seed.header.size(); ++c)
    if (c != vcol && c != scol) {
      cols.push_back(c);
      out.header.push_back(per_seed.header[c]);
    }
  std::vector<std::string> order;
  std::map<std::string, std::vector<const std::vector<std::string>*>> groups;
  for (const auto& r : per_seed.rows) {
    if (!groups.count(r[vcol])) order.push_back(r[vcol]);
    groups[r[vcol]].push_back(&r);
  }
  for (const auto& v : order) {
    std::vector<std::string> row{v};
    for (auto c : cols) {
      std::vector<double> vals;
      for (const auto* r : groups[v]) vals.push_back(std::stod((*r)[c]));
      row.push_back(fmt_metric(median(vals)));
    }
    out.rows.push_back(std::move(row));
  }
  return out;
}

inline void write_json(const fs::path& path, const nlohmann::ordered_json& j) { io::write_text_atomic(path, j.dump(2) + "\n"); }

inline std::string hex64(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline fs::path run_dir(const fs::path& root, Variant v, std::size_t seed_index) {
  return root / std::string(to_string(v)) / ("seed" + std::to_string(seed_index));
}

// ---------------------------------------------------------------------------
// Data

struct ColoredMnistData {
  LabeledImageSet train;
  LabeledImageSet test;
  std::vector<LabeledImageSet> single_color;  // index = palette class
};

struct SyntheticData {
  LabeledImageSet train;       // imbalanced
  LabeledImageSet test;        // same distribution, held out
  LabeledImageSet classifier;  // balanced, for presence classifiers
};

inline LabeledImageSet limit(LabeledImageSet s, std::size_t n) { return n && n < s.size() ? s.head(n) : s; }

inline bool cache_exists(const fs::path& stem) { return fs::exists(with_suffix(stem, ".manifest")); }

/// Loads colored MNIST from the cache when present, building it from the
/// grayscale IDX files otherwise.
inline ColoredMnistData colored_mnist_data(const ExperimentConfig& cfg, bool write_cache = false) {
  const auto palette = ColorPalette::standard();
  const auto stem = [&](const std::string& name) { return cfg.cache_dir / name; };
  ColoredMnistData d;
  bool cached = cache_exists(stem("colored_mnist_train")) && cache_exists(stem("colored_mnist_test"));
  for (int k = 0; k < 10 && cached; ++k) cached = cache_exists(stem("single_color_test_" + std::to_string(k)));
  if (cached && !write_cache) {
    d.train = load_dataset(stem("colored_mnist_train"));
    d.test = load_dataset(stem("colored_mnist_test"));
    for (int k = 0; k < 10; ++k) d.single_color.push_back(load_dataset(stem("single_color_test_" + std::to_string(k))));
  } else {
    const auto gray_train = load_mnist(cfg.mnist_dir, "train");
    const auto gray_test = load_mnist(cfg.mnist_dir, "t10k");
    d.train = build_colored_mnist(gray_train, palette);
    d.test = build_colored_mnist(gray_test, palette);
    for (int k = 0; k < 10; ++k) d.single_color.push_back(build_single_color_test(gray_test, palette, k));
    if (write_cache) {
      save_dataset(stem("colored_mnist_train"), d.train, {palette.serialize(), 0, "colored MNIST train"});
      save_dataset(stem("colored_mnist_test"), d.test, {palette.serialize(), 0, "colored MNIST test, multi-color"});
      for (int k = 0; k < 10; ++k)
        save_dataset(stem("single_color_test_" + std::to_string(k)), d.single_color[k],
                     {palette.serialize(), 0, "colored MNIST test, all digits in the colour of class " + std::to_string(k)});
    }
  }
  d.train = limit(std::move(d.train), cfg.train_limit);
  d.test = limit(std::move(d.test), cfg.test_limit);
  for (auto& s : d.single_color) s = limit(std::move(s), cfg.test_limit);
  return d;
}

/// Synthetic sets are a pure function of the config, so they are always
/// rebuilt; `write_cache` additionally stores them.
inline SyntheticData synthetic_data(const ExperimentConfig& cfg, bool write_cache = false) {
  const auto imbalanced = ImbalanceConfig::minority_shape(cfg.minority_shape_index(), cfg.minority_fraction);
  const auto seed = [&](const char* purpose) { return derive_seed(cfg.root_seed, "data", 0, purpose); };
  SyntheticData d;
  Rng r_train(seed("synthetic-train")), r_test(seed("synthetic-test")), r_clf(seed("classifier-data"));
  d.train = build_two_factor_synthetic(imbalanced, cfg.synthetic_train, r_train);
  d.test = build_two_factor_synthetic(imbalanced, cfg.synthetic_test, r_test);
  d.classifier = build_two_factor_synthetic(ImbalanceConfig{}, cfg.classifier_train, r_clf);
  if (write_cache) {
    save_dataset(cfg.cache_dir / "synthetic_train", d.train, {"", seed("synthetic-train"), "two-factor synthetic, train"});
    save_dataset(cfg.cache_dir / "synthetic_test", d.test, {"", seed("synthetic-test"), "two-factor synthetic, test"});
    save_dataset(cfg.cache_dir / "synthetic_classifier", d.classifier,
                 {"", seed("classifier-data"), "two-factor synthetic, balanced, classifier training"});
  }
  return d;
}

/// `prepare-data`: writes every dataset cache the configured experiment needs.
inline std::vector<fs::path> prepare_data(const ExperimentConfig& cfg) {
  if (cfg.kind == ExperimentKind::clustering) {
    colored_mnist_data(cfg, true);
    std::vector<fs::path> out{cfg.cache_dir / "colored_mnist_train", cfg.cache_dir / "colored_mnist_test"};
    for (int k = 0; k < 10; ++k) out.push_back(cfg.cache_dir / ("single_color_test_" + std::to_string(k)));
    return out;
  }
  synthetic_data(cfg, true);
  return {cfg.cache_dir / "synthetic_train", cfg.cache_dir / "synthetic_test", cfg.cache_dir / "synthetic_classifier"};
}

// ---------------------------------------------------------------------------
// Training with per-epoch checkpoints; finished checkpoints are reused when
// their training hash matches.

inline std::optional<Checkpoint> finished_checkpoint(const fs::path& stem, const ExperimentConfig& cfg) {
  if (!fs::exists(with_suffix(stem, ".manifest"))) return std::nullopt;
  auto c = load_checkpoint(stem);
  if (c.extra.get_or("training_hash", "") != hex64(cfg.training_hash()) || c.epoch != cfg.train.epochs) return std::nullopt;
  return c;
}

inline ModelParams<float> train_or_load_vae(const ExperimentConfig& cfg, Variant v, std::size_t seed_index,
                                            const ImageBatch<float>& data) {
  const auto dir = run_dir(cfg.output_dir, v, seed_index);
  const auto stem = dir / "checkpoint";
  if (auto c = finished_checkpoint(stem, cfg)) return std::move(c->params);
  const auto seed = derive_seed(cfg.root_seed, to_string(v), seed_index, "train");
  Rng rng(seed);
  auto params = init_model<float>(cfg.arch(), rng);
  io::Manifest extra;
  extra.set("training_hash", hex64(cfg.training_hash()));
  extra.set("seed_index", seed_index);
  const auto variant = cfg.variant_config(v);
  std::vector<EpochLog> log;
  try {
    log = train(params, data, variant, cfg.train, rng, [&](const EpochLog& e, const ModelParams<float>& p) {
      save_checkpoint(stem, {p, variant, seed, e.epoch, extra});
    });
  } catch (const TrainingDiverged& e) {
    throw TrainingDiverged(std::string(to_string(v)) + " seed " + std::to_string(seed_index) + ": " + e.what());
  }
  if (cfg.train.epochs == 0) save_checkpoint(stem, {params, variant, seed, 0, extra});
  io::write_text_atomic(dir / "training_log.csv", training_log_csv(log));
  return params;
}

inline ClusterModel train_or_load_cluster(const ExperimentConfig& cfg, Variant v, std::size_t seed_index,
                                          const ImageBatch<float>& data) {
  const auto dir = run_dir(cfg.output_dir, v, seed_index);
  const auto stem = dir / "checkpoint";
  if (finished_checkpoint(stem, cfg)) return load_cluster_model(stem);
  const auto seed = derive_seed(cfg.root_seed, to_string(v), seed_index, "train");
  Rng rng(seed);
  io::Manifest extra;
  extra.set("training_hash", hex64(cfg.training_hash()));
  extra.set("seed_index", seed_index);
  ClusterTrainLog log;
  ClusterModel model;
  try {
    model = train_cluster_vae(data, cfg.arch(), cfg.variant_config(v), cfg.cluster, cfg.train, rng, &log,
                              [&](std::size_t epoch, const ClusterModel& m) { save_cluster_model(stem, m, seed, epoch, extra); });
  } catch (const TrainingDiverged& e) {
    throw TrainingDiverged(std::string(to_string(v)) + " seed " + std::to_string(seed_index) + ": " + e.what());
  }
  io::write_text_atomic(dir / "training_log.csv", training_log_csv(log.epochs));
  std::string active = "epoch,active_components\n";
  for (std::size_t i = 0; i < log.active_after_epoch.size(); ++i)
    active += std::to_string(i + 1) + "," + std::to_string(log.active_after_epoch[i]) + "\n";
  io::write_text_atomic(dir / "mixture_log.csv", active);
  return model;
}

// ---------------------------------------------------------------------------
// Run records

struct RunEntry {
  Variant variant = Variant::vae;
  std::size_t seed_index = 0;
  std::vector<std::pair<std::string, double>> metrics;
  fs::path checkpoint;
  std::vector<fs::path> artifacts;
};

struct RunRecord {
  std::string config_hash;
  ExperimentKind kind = ExperimentKind::clustering;
  std::vector<RunEntry> entries;
  std::vector<fs::path> tables;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["config_hash"] = config_hash;
    j["kind"] = to_string(kind);
    j["tables"] = nlohmann::ordered_json::array();
    for (const auto& t : tables) j["tables"].push_back(t.generic_string());
    j["runs"] = nlohmann::ordered_json::array();
    for (const auto& e : entries) {
      nlohmann::ordered_json r;
      r["variant"] = std::string(to_string(e.variant));
      r["seed_index"] = e.seed_index;
      r["checkpoint"] = e.checkpoint.generic_string();
      nlohmann::ordered_json m = nlohmann::ordered_json::object();
      for (const auto& [k, v] : e.metrics) m[k] = v;
      r["metrics"] = m;
      r["artifacts"] = nlohmann::ordered_json::array();
      for (const auto& a : e.artifacts) r["artifacts"].push_back(a.generic_string());
      j["runs"].push_back(r);
    }
    return j;
  }
};

inline void write_config_copy(const ExperimentConfig& cfg) {
  io::write_text_atomic(cfg.output_dir / "config.ini", cfg.canonical());
}

// ---------------------------------------------------------------------------
// Feature inspection

inline std::vector<PresenceClassifier> train_classifiers(const ExperimentConfig& cfg, const LabeledImageSet& labeled,
                                                         const fs::path& out_dir) {
  std::vector<PresenceClassifier> out;
  CsvTable summary{{"feature", "heldout_accuracy", "threshold"}, {}};
  io::Manifest m;
  for (const auto& feature : labeled.feature_names) {
    Rng rng(derive_seed(cfg.root_seed, "shared", 0, "classifier/" + feature));
    out.push_back(train_presence_classifier(labeled, feature, rng, cfg.classifier));
    io::write_f32(out_dir / "classifiers" / (feature + ".params.f32"), out.back().params);
    m.set(feature + ".threshold", out.back().threshold);
    m.set(feature + ".heldout_accuracy", out.back().heldout_accuracy);
    summary.rows.push_back({feature, fmt_metric(out.back().heldout_accuracy), fmt_metric(out.back().threshold)});
  }
  m.write(out_dir / "classifiers" / "classifiers.manifest");
  io::write_text_atomic(out_dir / "classifiers.csv", summary.str());
  return out;
}

inline std::string audit_csv(const AuditResult& a) {
  CsvTable t{{"feature", "N_gf", "N_g", "N_tf", "N_t", "fpm"}, {}};
  for (const auto& f : a.features)
    t.rows.push_back({f.feature, std::to_string(f.n_generated_with), std::to_string(f.n_generated),
                      std::to_string(f.n_train_with), std::to_string(f.n_train), fmt_metric(f.fpm)});
  return t.str();
}

inline nlohmann::ordered_json audit_json(const AuditResult& a, double mse) {
  nlohmann::ordered_json j;
  j["features"] = nlohmann::ordered_json::array();
  for (const auto& f : a.features)
    j["features"].push_back({{"feature", f.feature},
                             {"N_gf", f.n_generated_with},
                             {"N_g", f.n_generated},
                             {"N_tf", f.n_train_with},
                             {"N_t", f.n_train},
                             {"fpm", f.fpm}});
  j["AVG"] = a.average_fpm;
  j["mse"] = mse;
  return j;
}

/// Train / sample / audit for every variant x seed. Emits table1.csv with
/// columns variant, seed, mse, fpm_<feature>..., AVG.
inline RunRecord run_feature_inspection(const ExperimentConfig& cfg) {
  if (cfg.kind != ExperimentKind::feature_inspection) throw ConfigError("run_feature_inspection: wrong experiment kind");
  cfg.validate();
  write_config_copy(cfg);
  const auto data = synthetic_data(cfg);
  const auto classifiers = train_classifiers(cfg, data.classifier, cfg.output_dir);

  RunRecord rec{hex64(cfg.hash()), cfg.kind, {}, {}};
  CsvTable table;
  table.header = {"variant", "seed", "mse"};
  for (const auto& f : data.train.feature_names) table.header.push_back("fpm_" + f);
  table.header.push_back("AVG");

  for (auto v : cfg.variants)
    for (std::size_t s = 0; s < cfg.seeds; ++s) {
      const auto dir = run_dir(cfg.output_dir, v, s);
      const auto params = train_or_load_vae(cfg, v, s, data.train.images);
      Rng sample_rng(derive_seed(cfg.root_seed, to_string(v), s, "sample"));
      const auto generated = sample_prior(params, cfg.generated, sample_rng);
      const auto audit = audit_features(classifiers, generated, data.train);
      const double mse = reconstruction_mse(params, data.test.images);

      io::write_text_atomic(dir / "audit.csv", audit_csv(audit));
      write_json(dir / "audit.json", audit_json(audit, mse));
      const auto shown = std::min(cfg.grid_images, generated.size());
      if (shown) io::write_png_grid(dir / "samples.png", generated.slice(0, shown), 10);
      const auto inputs = data.test.images.slice(0, std::min<std::size_t>(10, data.test.size()));
      auto pair = inputs;
      pair.append(reconstruct(params, inputs));
      io::write_png_grid(dir / "reconstructions.png", pair, 10);

      std::vector<std::string> row{std::string(to_string(v)), std::to_string(s), fmt_metric(mse)};
      RunEntry e{v, s, {{"mse", mse}}, dir / "checkpoint", {dir / "audit.csv", dir / "audit.json", dir / "samples.png"}};
      for (const auto& f : audit.features) {
        row.push_back(fmt_metric(f.fpm));
        e.metrics.emplace_back("fpm_" + f.feature, f.fpm);
      }
      row.push_back(fmt_metric(audit.average_fpm));
      e.metrics.emplace_back("AVG", audit.average_fpm);
      table.rows.push_back(std::move(row));
      rec.entries.push_back(std::move(e));
    }

  io::write_text_atomic(cfg.output_dir / "table1.csv", table.str());
  io::write_text_atomic(cfg.output_dir / "table1_median.csv", median_table(table).str());
  rec.tables = {cfg.output_dir / "table1.csv", cfg.output_dir / "table1_median.csv", cfg.output_dir / "classifiers.csv"};
  write_json(cfg.output_dir / "run_record.json", rec.to_json());
  return rec;
}

// ---------------------------------------------------------------------------
// Clustering

inline std::string assignment_csv(const std::vector<ClusterAssignment>& a) {
  std::string out = "sample_id,hard_label,max_responsibility\n";
  for (const auto& x : a)
    out += std::to_string(x.sample_id) + "," + std::to_string(x.hard_label) + "," +
           fmt_metric(x.responsibilities[x.hard_label]) + "\n";
  return out;
}

/// Multi-color and ten single-color NMIs per variant x seed. Emits
/// table2.csv (variant, seed, nmi_multi, nmi_single_median, nmi_single_0..9),
/// nmi.json and per-run assignment dumps and reconstruction grids.
inline RunRecord run_clustering(const ExperimentConfig& cfg) {
  if (cfg.kind != ExperimentKind::clustering) throw ConfigError("run_clustering: wrong experiment kind");
  cfg.validate();
  write_config_copy(cfg);
  const auto data = colored_mnist_data(cfg);
  RunRecord rec{hex64(cfg.hash()), cfg.kind, {}, {}};
  CsvTable table{{"variant", "seed", "nmi_multi", "nmi_single_median"}, {}};
  for (int k = 0; k < 10; ++k) table.header.push_back("nmi_single_" + std::to_string(k));
  nlohmann::ordered_json nmi_json = nlohmann::ordered_json::object();

  for (auto v : cfg.variants)
    for (std::size_t s = 0; s < cfg.seeds; ++s) {
      const auto dir = run_dir(cfg.output_dir, v, s);
      const auto model = train_or_load_cluster(cfg, v, s, data.train.images);
      RunEntry e{v, s, {}, dir / "checkpoint", {}};

      const auto multi = assign(model, data.test.images);
      const double nmi_multi = nmi(data.test.class_labels, hard_labels(multi));
      io::write_text_atomic(dir / "assignments_multi.csv", assignment_csv(multi));
      e.artifacts.push_back(dir / "assignments_multi.csv");

      std::vector<double> single;
      for (int k = 0; k < 10; ++k) {
        const auto& set = data.single_color[static_cast<std::size_t>(k)];
        const auto a = assign(model, set.images);
        single.push_back(nmi(set.class_labels, hard_labels(a)));
        const auto name = "assignments_single_" + std::to_string(k) + ".csv";
        io::write_text_atomic(dir / name, assignment_csv(a));
        e.artifacts.push_back(dir / name);
      }
      const double single_median = median(single);

      const auto n_fig = std::min<std::size_t>(20, data.test.size());
      auto multi_fig = data.test.images.slice(0, n_fig);
      multi_fig.append(reconstruct_via_cluster(model, data.test.images.slice(0, n_fig)));
      io::write_png_grid(dir / "reconstructions_multi.png", multi_fig, 10);
      const auto& fig_set = data.single_color[static_cast<std::size_t>(cfg.figure_color)];
      auto single_fig = fig_set.images.slice(0, n_fig);
      single_fig.append(reconstruct_via_cluster(model, fig_set.images.slice(0, n_fig)));
      io::write_png_grid(dir / "reconstructions_single.png", single_fig, 10);
      e.artifacts.push_back(dir / "reconstructions_multi.png");
      e.artifacts.push_back(dir / "reconstructions_single.png");

      std::vector<std::string> row{std::string(to_string(v)), std::to_string(s), fmt_metric(nmi_multi),
                                   fmt_metric(single_median)};
      for (double x : single) row.push_back(fmt_metric(x));
      table.rows.push_back(std::move(row));

      auto& jv = nmi_json[std::string(to_string(v))]["seed" + std::to_string(s)];
      jv["multi"] = nmi_multi;
      for (int k = 0; k < 10; ++k) jv["single"][std::to_string(k)] = single[static_cast<std::size_t>(k)];
      jv["single_median"] = single_median;
      jv["active_components"] = model.mixture.active_count();

      e.metrics = {{"nmi_multi", nmi_multi}, {"nmi_single_median", single_median},
                   {"active_components", static_cast<double>(model.mixture.active_count())}};
      for (int k = 0; k < 10; ++k) e.metrics.emplace_back("nmi_single_" + std::to_string(k), single[static_cast<std::size_t>(k)]);
      rec.entries.push_back(std::move(e));
    }

  io::write_text_atomic(cfg.output_dir / "table2.csv", table.str());
  io::write_text_atomic(cfg.output_dir / "table2_median.csv", median_table(table).str());
  write_json(cfg.output_dir / "nmi.json", nmi_json);
  rec.tables = {cfg.output_dir / "table2.csv", cfg.output_dir / "table2_median.csv", cfg.output_dir / "nmi.json"};
  write_json(cfg.output_dir / "run_record.json", rec.to_json());
  return rec;
}

// ---------------------------------------------------------------------------
// Interpolation

/// Picks (a, b) from a labelled set; the same pair is used for every variant.
using PairSelector = std::function<std::pair<std::size_t, std::size_t>(const LabeledImageSet&)>;

/// First image with `feature` and the first image without it that shares the
/// first image's other flags as far as possible.
inline PairSelector feature_pair_selector(const std::string& feature) {
  return [feature](const LabeledImageSet& set) {
    const auto f = set.feature_index(feature);
    std::optional<std::size_t> a;
    for (std::size_t i = 0; i < set.size() && !a; ++i)
      if (set.flag(i, f)) a = i;
    if (!a) throw std::invalid_argument("pair selector: no image has feature '" + feature + "'");
    std::optional<std::size_t> b;
    std::size_t best_shared = 0;
    for (std::size_t i = 0; i < set.size(); ++i) {
      if (set.flag(i, f)) continue;
      std::size_t shared = 0;
      for (std::size_t g = 0; g < set.feature_names.size(); ++g)
        if (g != f && set.flag(i, g) && set.flag(*a, g)) ++shared;
      if (!b || shared > best_shared) {
        b = i;
        best_shared = shared;
      }
    }
    if (!b) throw std::invalid_argument("pair selector: every image has feature '" + feature + "'");
    return std::pair{*a, *b};
  };
}

/// One strip per variant from checkpoints under checkpoint_root (as written
/// by a feature-inspection run with the same data settings).
inline RunRecord run_interpolation(const ExperimentConfig& cfg, const PairSelector& select) {
  cfg.validate();
  write_config_copy(cfg);
  const auto data = synthetic_data(cfg);
  const auto [ia, ib] = select(data.test);
  const auto a = data.test.images.slice(ia, ia + 1), b = data.test.images.slice(ib, ib + 1);
  RunRecord rec{hex64(cfg.hash()), ExperimentKind::interpolation, {}, {}};
  nlohmann::ordered_json j;
  j["pair"] = {ia, ib};
  j["steps"] = cfg.steps;
  for (auto v : cfg.variants) {
    const auto stem = run_dir(cfg.checkpoint_root, v, cfg.interpolation_seed_index) / "checkpoint";
    if (!fs::exists(with_suffix(stem, ".manifest")))
      throw MissingCheckpoint("interpolation: missing checkpoint " + stem.string());
    const auto ckpt = load_checkpoint(stem);
    const auto strip = interpolate(ckpt.params, a, b, cfg.steps);
    const auto ra = reconstruct(ckpt.params, a), rb = reconstruct(ckpt.params, b);
    const bool endpoints = strip.slice(0, 1) == ra && strip.slice(cfg.steps - 1, cfg.steps) == rb;
    const auto name = std::string(to_string(v)) + "_strip";
    io::write_png_grid(cfg.output_dir / (name + ".png"), strip, cfg.steps);
    io::write_f32(cfg.output_dir / (name + ".f32"), strip.values());
    j["variants"][std::string(to_string(v))] = {{"frames", strip.size()}, {"endpoints_match_reconstruction", endpoints}};
    rec.entries.push_back({v, cfg.interpolation_seed_index, {{"frames", static_cast<double>(strip.size())},
                                                            {"endpoints_match", endpoints ? 1.0 : 0.0}},
                           stem, {cfg.output_dir / (name + ".png"), cfg.output_dir / (name + ".f32")}});
  }
  write_json(cfg.output_dir / "interpolation.json", j);
  rec.tables = {cfg.output_dir / "interpolation.json"};
  write_json(cfg.output_dir / "run_record.json", rec.to_json());
  return rec;
}

inline RunRecord run_interpolation(const ExperimentConfig& cfg) {
  return run_interpolation(cfg, feature_pair_selector(cfg.pair_feature));
}

// ---------------------------------------------------------------------------
// Report

/// Markdown summary recomputed from the per-seed tables in `dir`.
inline std::string build_report(const fs::path& dir) {
  std::ostringstream md;
  md << "# Results\n";
  const auto emit = [&](const std::string& title, const fs::path& csv) {
    if (!fs::exists(csv)) return;
    const auto med = median_table(CsvTable::parse(io::read_text(csv)));
    md << "\n## " << title << " (median over seeds)\n\n|";
    for (const auto& h : med.header) md << ' ' << h << " |";
    md << "\n|";
    for (std::size_t i = 0; i < med.header.size(); ++i) md << " --- |";
    md << "\n";
    for (const auto& r : med.rows) {
      md << "|";
      for (const auto& c : r) md << ' ' << c << " |";
      md << "\n";
    }
  };
  emit("Feature presence (FPM) and reconstruction MSE", dir / "table1.csv");
  emit("Clustering NMI", dir / "table2.csv");
  if (fs::exists(dir / "classifiers.csv")) {
    md << "\n## Presence classifiers\n\n| feature | held-out accuracy | threshold |\n| --- | --- | --- |\n";
    for (const auto& r : CsvTable::parse(io::read_text(dir / "classifiers.csv")).rows)
      md << "| " << r[0] << " | " << r[1] << " | " << r[2] << " |\n";
  }
  if (fs::exists(dir / "interpolation.json")) md << "\n## Interpolation\n\n```json\n" << io::read_text(dir / "interpolation.json") << "```\n";
  return md.str();
}

}  // namespace jigsaw_vae
