#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "image.hpp"
#include "io.hpp"
#include "random.hpp"

namespace jigsaw_vae {

using Rgb = std::array<float, 3>;

class UnknownFeature : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Class label -> colour.
struct ColorPalette {
  std::map<int, Rgb> class_to_color;

  /// The pinned 10-colour palette (digit 5 is yellow).
  static ColorPalette standard() {
    return {{{0, {1.0f, 0.0f, 0.0f}},    // red
             {1, {0.0f, 1.0f, 0.0f}},    // green
             {2, {0.0f, 0.0f, 1.0f}},    // blue
             {3, {0.0f, 1.0f, 1.0f}},    // cyan
             {4, {1.0f, 0.0f, 1.0f}},    // magenta
             {5, {1.0f, 1.0f, 0.0f}},    // yellow
             {6, {1.0f, 1.0f, 1.0f}},    // white
             {7, {1.0f, 0.5f, 0.0f}},    // orange
             {8, {0.5f, 0.0f, 1.0f}},    // violet
             {9, {0.0f, 1.0f, 0.5f}}}};  // spring green
  }

  const Rgb& color(int cls) const {
    auto it = class_to_color.find(cls);
    if (it == class_to_color.end()) throw std::out_of_range("palette has no colour for class " + std::to_string(cls));
    return it->second;
  }

  void validate() const {
    for (auto a = class_to_color.begin(); a != class_to_color.end(); ++a) {
      for (float v : a->second)
        if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("palette colour outside [0,1]");
      for (auto b = std::next(a); b != class_to_color.end(); ++b)
        if (a->second == b->second) throw std::invalid_argument("palette colours must be pairwise distinct");
    }
  }

  std::string serialize() const {
    std::string out;
    for (const auto& [cls, c] : class_to_color) {
      if (!out.empty()) out += ';';
      out += std::to_string(cls) + "=" + io::join(std::vector<float>(c.begin(), c.end()));
    }
    return out;
  }
};

inline std::string color_feature(int cls) { return "color_" + std::to_string(cls); }

/// Images with class labels and named per-image boolean features.
struct LabeledImageSet {
  ImageBatch<float> images;
  std::vector<int> class_labels;
  std::vector<std::string> feature_names;
  std::vector<std::uint8_t> feature_flags;  // size() x feature_names.size(), row-major

  std::size_t size() const { return images.size(); }

  std::size_t feature_index(const std::string& name) const {
    for (std::size_t f = 0; f < feature_names.size(); ++f)
      if (feature_names[f] == name) return f;
    throw UnknownFeature("unknown feature '" + name + "'");
  }

  bool flag(std::size_t sample, std::size_t feature) const {
    return feature_flags[sample * feature_names.size() + feature] != 0;
  }

  std::vector<std::uint8_t> feature_column(const std::string& name) const {
    const auto f = feature_index(name);
    std::vector<std::uint8_t> col(size());
    for (std::size_t i = 0; i < size(); ++i) col[i] = flag(i, f) ? 1 : 0;
    return col;
  }

  void validate() const {
    if (class_labels.size() != images.size() || feature_flags.size() != images.size() * feature_names.size())
      throw DimensionMismatch("LabeledImageSet: array lengths disagree");
    for (float v : images.values())
      if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("LabeledImageSet: pixel outside [0,1]");
  }

  LabeledImageSet subset(std::span<const std::size_t> indices) const {
    LabeledImageSet out;
    out.images = images.gather(indices);
    out.feature_names = feature_names;
    const std::size_t F = feature_names.size();
    for (auto i : indices) {
      out.class_labels.push_back(class_labels[i]);
      out.feature_flags.insert(out.feature_flags.end(), feature_flags.begin() + static_cast<std::ptrdiff_t>(i * F),
                               feature_flags.begin() + static_cast<std::ptrdiff_t>((i + 1) * F));
    }
    return out;
  }

  LabeledImageSet head(std::size_t n) const {
    std::vector<std::size_t> idx(std::min(n, size()));
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return subset(idx);
  }

  friend bool operator==(const LabeledImageSet&, const LabeledImageSet&) = default;
};

/// MNIST IDX pair from `dir` ("train" or "t10k" prefix), single channel.
inline LabeledImageSet load_mnist(const std::filesystem::path& dir, const std::string& split) {
  LabeledImageSet s;
  auto find = [&](const std::string& stem) {
    for (const char* ext : {".gz", ""}) {
      auto p = dir / (stem + ext);
      if (std::filesystem::exists(p)) return p;
    }
    throw io::FormatError("missing MNIST file " + (dir / stem).string() + "[.gz]");
  };
  s.images = io::read_idx_images(find(split + "-images-idx3-ubyte"));
  s.class_labels = io::read_idx_labels(find(split + "-labels-idx1-ubyte"));
  if (s.class_labels.size() != s.images.size()) throw io::FormatError("MNIST image/label counts differ");
  return s;
}

namespace detail {

inline LabeledImageSet colorize(const LabeledImageSet& gray, const ColorPalette& palette,
                                std::optional<int> fixed_class) {
  if (gray.images.shape().channels != 1) throw DimensionMismatch("colorize: grayscale source required");
  palette.validate();
  const auto& s = gray.images.shape();
  LabeledImageSet out;
  out.images = ImageBatch<float>(gray.size(), {s.height, s.width, 3});
  out.class_labels = gray.class_labels;
  for (const auto& [cls, c] : palette.class_to_color) out.feature_names.push_back(color_feature(cls));
  out.feature_flags.assign(gray.size() * out.feature_names.size(), 0);
  for (std::size_t i = 0; i < gray.size(); ++i) {
    const int cls = fixed_class ? *fixed_class : gray.class_labels[i];
    const Rgb& c = palette.color(cls);
    auto src = gray.images.image(i);
    auto dst = out.images.image(i);
    for (std::size_t p = 0; p < src.size(); ++p)
      for (std::size_t k = 0; k < 3; ++k) dst[p * 3 + k] = src[p] * c[k];
    out.feature_flags[i * out.feature_names.size() + out.feature_index(color_feature(cls))] = 1;
  }
  return out;
}

}  // namespace detail

/// Each pixel becomes intensity x the colour of the image's class.
inline LabeledImageSet build_colored_mnist(const LabeledImageSet& gray, const ColorPalette& palette) {
  return detail::colorize(gray, palette, std::nullopt);
}

/// Every image drawn in the colour of `chosen_class`; true labels are kept.
inline LabeledImageSet build_single_color_test(const LabeledImageSet& gray, const ColorPalette& palette,
                                               int chosen_class) {
  if (chosen_class < 0 || chosen_class > 9 || !palette.class_to_color.count(chosen_class))
    throw std::out_of_range("build_single_color_test: invalid class " + std::to_string(chosen_class));
  return detail::colorize(gray, palette, chosen_class);
}

// ---------------------------------------------------------------------------
// Two-factor synthetic set: shape x colour with configurable imbalance.

enum class Glyph { square, disc, triangle, cross };
inline constexpr std::array<const char*, 4> kGlyphNames{"square", "disc", "triangle", "cross"};
inline constexpr std::array<const char*, 4> kSynthColorNames{"red", "green", "blue", "yellow"};
inline constexpr std::array<Rgb, 4> kSynthColors{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}}};
inline constexpr std::size_t kSynthSide = 32;

/// Sampling weights over shape x colour combinations, shape-major
/// (index = shape * 4 + colour).
struct ImbalanceConfig {
  std::vector<std::string> factor_names{"shape", "color"};
  std::vector<double> weights = std::vector<double>(16, 1.0 / 16.0);

  void validate() const {
    if (factor_names.size() != 2) throw std::invalid_argument("ImbalanceConfig: two factors expected");
    if (weights.size() != kGlyphNames.size() * kSynthColorNames.size())
      throw std::invalid_argument("ImbalanceConfig: one weight per shape x colour combination required");
    double sum = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw std::invalid_argument("ImbalanceConfig: weights must be nonnegative");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("ImbalanceConfig: weights must sum to 1");
  }

  /// One shape drawn with probability `fraction`, the others sharing the rest
  /// equally; colours uniform and independent of shape.
  static ImbalanceConfig minority_shape(std::size_t shape, double fraction) {
    ImbalanceConfig c;
    const double others = (1.0 - fraction) / 3.0;
    for (std::size_t s = 0; s < 4; ++s)
      for (std::size_t k = 0; k < 4; ++k) c.weights[s * 4 + k] = (s == shape ? fraction : others) / 4.0;
    return c;
  }
};

inline std::vector<std::string> synthetic_feature_names() {
  std::vector<std::string> names;
  for (auto g : kGlyphNames) names.push_back(std::string("shape_") + g);
  for (auto c : kSynthColorNames) names.push_back(std::string("color_") + c);
  return names;
}

namespace detail {

inline bool glyph_contains(Glyph g, double x, double y, double r) {
  switch (g) {
    case Glyph::square: return std::abs(x) <= 0.8 * r && std::abs(y) <= 0.8 * r;
    case Glyph::disc: return x * x + y * y <= r * r;
    case Glyph::triangle: {
      // apex up, base at y = +0.8r (image y grows downward)
      if (y < -r || y > 0.8 * r) return false;
      const double half = (y + r) / (1.8 * r) * r;
      return std::abs(x) <= half;
    }
    case Glyph::cross: return (std::abs(x) <= 0.3 * r && std::abs(y) <= r) || (std::abs(y) <= 0.3 * r && std::abs(x) <= r);
  }
  return false;
}

/// Anti-aliased glyph (4x4 supersampling), centred at (cx, cy).
inline void render_glyph(Glyph g, const Rgb& color, double cx, double cy, double r, std::span<float> out) {
  for (std::size_t py = 0; py < kSynthSide; ++py)
    for (std::size_t px = 0; px < kSynthSide; ++px) {
      int hits = 0;
      for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx) {
          const double x = static_cast<double>(px) + (sx + 0.5) / 4.0 - cx;
          const double y = static_cast<double>(py) + (sy + 0.5) / 4.0 - cy;
          hits += glyph_contains(g, x, y, r) ? 1 : 0;
        }
      const float a = static_cast<float>(hits) / 16.0f;
      for (std::size_t k = 0; k < 3; ++k) out[(py * kSynthSide + px) * 3 + k] = a * color[k];
    }
}

}  // namespace detail

/// `n` 32x32 RGB glyph images; combination drawn from the config weights,
/// position and size jittered.
inline LabeledImageSet build_two_factor_synthetic(const ImbalanceConfig& config, std::size_t n, Rng& rng) {
  config.validate();
  if (n == 0) throw std::invalid_argument("build_two_factor_synthetic: n must be positive");
  LabeledImageSet out;
  out.images = ImageBatch<float>(n, {kSynthSide, kSynthSide, 3});
  out.feature_names = synthetic_feature_names();
  out.feature_flags.assign(n * out.feature_names.size(), 0);
  out.class_labels.resize(n);
  std::size_t last_positive = 0;
  for (std::size_t k = 0; k < config.weights.size(); ++k)
    if (config.weights[k] > 0.0) last_positive = k;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform();
    double acc = 0.0;
    std::size_t combo = last_positive;
    for (std::size_t k = 0; k < config.weights.size(); ++k) {
      acc += config.weights[k];
      if (config.weights[k] > 0.0 && u < acc) {
        combo = k;
        break;
      }
    }
    const std::size_t shape = combo / 4, color = combo % 4;
    const double r = 7.0 + 4.0 * rng.uniform();
    const double cx = 16.0 + (rng.uniform() * 8.0 - 4.0);
    const double cy = 16.0 + (rng.uniform() * 8.0 - 4.0);
    detail::render_glyph(static_cast<Glyph>(shape), kSynthColors[color], cx, cy, r, out.images.image(i));
    out.class_labels[i] = static_cast<int>(combo);
    out.feature_flags[i * out.feature_names.size() + shape] = 1;
    out.feature_flags[i * out.feature_names.size() + 4 + color] = 1;
  }
  return out;
}

/// N_tf / N_t for one named feature.
inline double train_feature_frequency(const LabeledImageSet& set, const std::string& feature) {
  const auto f = set.feature_index(feature);
  if (set.size() == 0) throw std::invalid_argument("train_feature_frequency: empty set");
  std::size_t with = 0;
  for (std::size_t i = 0; i < set.size(); ++i) with += set.flag(i, f) ? 1 : 0;
  return static_cast<double>(with) / static_cast<double>(set.size());
}

// ---------------------------------------------------------------------------
// Cache: <stem>.manifest (key: value) + <stem>.f32 (little-endian float32, NHWC)

struct DatasetCacheInfo {
  std::string palette;  // serialized palette, empty when not applicable
  std::uint64_t seed = 0;
  std::string description;
};

inline void save_dataset(const std::filesystem::path& stem, const LabeledImageSet& set,
                         const DatasetCacheInfo& info = {}) {
  set.validate();
  io::Manifest m;
  m.set("format", "jigsaw-vae-dataset-v1");
  m.set("description", info.description);
  m.set("dtype", "float32-le");
  m.set("layout", "NHWC");
  m.set("count", set.size());
  m.set("height", set.images.shape().height);
  m.set("width", set.images.shape().width);
  m.set("channels", set.images.shape().channels);
  m.set("labels", io::join(set.class_labels));
  m.set("feature_names", io::join(set.feature_names));
  std::string flags;
  const std::size_t F = set.feature_names.size();
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (i) flags += ',';
    for (std::size_t f = 0; f < F; ++f) flags += set.flag(i, f) ? '1' : '0';
  }
  m.set("feature_flags", flags);
  m.set("palette", info.palette);
  m.set("seed", info.seed);
  auto data = stem;
  data += ".f32";
  io::write_f32(data, set.images.values());
  auto man = stem;
  man += ".manifest";
  m.write(man);
}

inline LabeledImageSet load_dataset(const std::filesystem::path& stem) {
  auto man = stem;
  man += ".manifest";
  auto data = stem;
  data += ".f32";
  const auto m = io::Manifest::read(man);
  if (m.get("format") != "jigsaw-vae-dataset-v1") throw io::FormatError(man.string() + ": unknown format");
  LabeledImageSet s;
  const auto n = m.get_as<std::size_t>("count");
  const ImageShape shape{m.get_as<std::size_t>("height"), m.get_as<std::size_t>("width"),
                         m.get_as<std::size_t>("channels")};
  s.images = ImageBatch<float>(n, shape, io::read_f32(data));
  s.class_labels = io::split_as<int>(m.get("labels"));
  s.feature_names = io::split_as<std::string>(m.get("feature_names"));
  const auto rows = io::split_as<std::string>(m.get("feature_flags"));
  if (!s.feature_names.empty()) {
    if (rows.size() != n) throw io::FormatError(man.string() + ": feature_flags row count mismatch");
    for (const auto& r : rows) {
      if (r.size() != s.feature_names.size()) throw io::FormatError(man.string() + ": feature_flags width mismatch");
      for (char c : r) s.feature_flags.push_back(c == '1' ? 1 : 0);
    }
  }
  s.validate();
  return s;
}

}  // namespace jigsaw_vae
