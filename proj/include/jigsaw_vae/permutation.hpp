#pragma once

// Jigsaw permutations: a uniformly drawn reordering of the tiles of a regular
// grid, optionally combined with an independent reordering of colour channels.
// Tiles are indexed row-major over the grid.

#include <cstdint>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "image.hpp"
#include "random.hpp"

namespace jigsaw_vae {

struct TileGrid {
  std::size_t rows = 1;
  std::size_t cols = 1;
  std::size_t tile_height = 1;
  std::size_t tile_width = 1;

  std::size_t tiles() const noexcept { return rows * cols; }
  std::size_t image_height() const noexcept { return rows * tile_height; }
  std::size_t image_width() const noexcept { return cols * tile_width; }
  friend bool operator==(const TileGrid&, const TileGrid&) = default;
};

/// Square grid of `divisions` x `divisions` tiles. No padding or cropping.
inline TileGrid make_grid(std::size_t image_height, std::size_t image_width, std::size_t divisions) {
  if (divisions == 0) throw DimensionMismatch("make_grid: divisions must be positive");
  if (image_height == 0 || image_width == 0) throw DimensionMismatch("make_grid: empty image");
  if (image_height % divisions != 0 || image_width % divisions != 0)
    throw DimensionMismatch("make_grid: " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                            " is not divisible into " + std::to_string(divisions) + " tiles per side");
  return TileGrid{divisions, divisions, image_height / divisions, image_width / divisions};
}

inline bool is_permutation_of_range(const std::vector<std::size_t>& order, std::size_t n) {
  if (order.size() != n) return false;
  std::vector<bool> seen(n, false);
  for (auto v : order) {
    if (v >= n || seen[v]) return false;
    seen[v] = true;
  }
  return true;
}

struct PermutationSpec {
  TileGrid grid;
  std::vector<std::size_t> tile_order;                  // output tile k <- input tile tile_order[k]
  std::optional<std::vector<std::size_t>> channel_order;  // output channel c <- input channel channel_order[c]
  std::uint64_t seed_id = 0;

  static PermutationSpec identity(const TileGrid& grid, std::optional<std::size_t> channels = std::nullopt) {
    PermutationSpec s;
    s.grid = grid;
    s.tile_order.resize(grid.tiles());
    std::iota(s.tile_order.begin(), s.tile_order.end(), std::size_t{0});
    if (channels) {
      s.channel_order.emplace(*channels);
      std::iota(s.channel_order->begin(), s.channel_order->end(), std::size_t{0});
    }
    return s;
  }

  bool is_identity() const {
    for (std::size_t k = 0; k < tile_order.size(); ++k)
      if (tile_order[k] != k) return false;
    if (channel_order)
      for (std::size_t c = 0; c < channel_order->size(); ++c)
        if ((*channel_order)[c] != c) return false;
    return true;
  }

  void validate() const {
    if (!is_permutation_of_range(tile_order, grid.tiles()))
      throw std::invalid_argument("PermutationSpec: tile_order is not a bijection on the grid tiles");
    if (channel_order && !is_permutation_of_range(*channel_order, channel_order->size()))
      throw std::invalid_argument("PermutationSpec: channel_order is not a bijection");
  }

  /// Single-line record, e.g.
  ///   grid=4x4 tile=7x7 tiles=3,0,...,15 channels=2,0,1 seed_id=17
  /// `channels=-` marks an absent channel permutation.
  std::string serialize() const {
    std::ostringstream os;
    os << "grid=" << grid.rows << 'x' << grid.cols << " tile=" << grid.tile_height << 'x' << grid.tile_width
       << " tiles=";
    for (std::size_t k = 0; k < tile_order.size(); ++k) os << (k ? "," : "") << tile_order[k];
    os << " channels=";
    if (channel_order) {
      for (std::size_t c = 0; c < channel_order->size(); ++c) os << (c ? "," : "") << (*channel_order)[c];
    } else {
      os << '-';
    }
    os << " seed_id=" << seed_id;
    return os.str();
  }

  static PermutationSpec parse(const std::string& line) {
    auto parse_list = [](const std::string& v) {
      std::vector<std::size_t> out;
      std::stringstream ss(v);
      std::string item;
      while (std::getline(ss, item, ',')) out.push_back(std::stoul(item));
      return out;
    };
    auto parse_pair = [](const std::string& v, std::size_t& a, std::size_t& b) {
      const auto x = v.find('x');
      if (x == std::string::npos) throw std::invalid_argument("PermutationSpec::parse: bad pair '" + v + "'");
      a = std::stoul(v.substr(0, x));
      b = std::stoul(v.substr(x + 1));
    };
    PermutationSpec s;
    std::istringstream is(line);
    std::string field;
    bool have_grid = false, have_tile = false, have_tiles = false;
    while (is >> field) {
      const auto eq = field.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("PermutationSpec::parse: bad field '" + field + "'");
      const auto key = field.substr(0, eq);
      const auto value = field.substr(eq + 1);
      if (key == "grid") {
        parse_pair(value, s.grid.rows, s.grid.cols);
        have_grid = true;
      } else if (key == "tile") {
        parse_pair(value, s.grid.tile_height, s.grid.tile_width);
        have_tile = true;
      } else if (key == "tiles") {
        s.tile_order = parse_list(value);
        have_tiles = true;
      } else if (key == "channels") {
        if (value != "-") s.channel_order = parse_list(value);
      } else if (key == "seed_id") {
        s.seed_id = std::stoull(value);
      } else {
        throw std::invalid_argument("PermutationSpec::parse: unknown key '" + key + "'");
      }
    }
    if (!have_grid || !have_tile || !have_tiles)
      throw std::invalid_argument("PermutationSpec::parse: missing grid, tile or tiles field");
    s.validate();
    return s;
  }

  friend bool operator==(const PermutationSpec&, const PermutationSpec&) = default;
};

/// Uniform draw over all tile orderings (and channel orderings when
/// `channels` is given). The identity is part of the support.
inline PermutationSpec sample_permutation(const TileGrid& grid, std::optional<std::size_t> channels, Rng& rng) {
  if (grid.rows == 0 || grid.cols == 0) throw DimensionMismatch("sample_permutation: empty grid");
  PermutationSpec s = PermutationSpec::identity(grid, channels);
  s.seed_id = rng.draw_count();
  rng.shuffle(std::span<std::size_t>(s.tile_order));
  if (s.channel_order) rng.shuffle(std::span<std::size_t>(*s.channel_order));
  return s;
}

inline PermutationSpec invert(const PermutationSpec& spec) {
  PermutationSpec inv = spec;
  for (std::size_t k = 0; k < spec.tile_order.size(); ++k) inv.tile_order[spec.tile_order[k]] = k;
  if (spec.channel_order)
    for (std::size_t c = 0; c < spec.channel_order->size(); ++c) (*inv.channel_order)[(*spec.channel_order)[c]] = c;
  return inv;
}

namespace detail {

inline void check_geometry(const PermutationSpec& spec, const ImageShape& shape) {
  if (shape.height != spec.grid.image_height() || shape.width != spec.grid.image_width())
    throw DimensionMismatch("permutation grid covers " + std::to_string(spec.grid.image_height()) + "x" +
                            std::to_string(spec.grid.image_width()) + " but images are " + to_string(shape));
  if (spec.tile_order.size() != spec.grid.tiles())
    throw DimensionMismatch("permutation tile_order length does not match grid");
  if (spec.channel_order && spec.channel_order->size() != shape.channels)
    throw DimensionMismatch("permutation channel_order length " + std::to_string(spec.channel_order->size()) +
                            " does not match " + std::to_string(shape.channels) + " image channels");
}

template <typename T>
void permute_image(const PermutationSpec& spec, const ImageShape& shape, std::span<const T> src, std::span<T> dst) {
  const auto& g = spec.grid;
  const std::size_t C = shape.channels;
  const std::size_t row_len = g.tile_width * C;
  for (std::size_t k = 0; k < g.tiles(); ++k) {
    const std::size_t from = spec.tile_order[k];
    const std::size_t dy = (k / g.cols) * g.tile_height, dx = (k % g.cols) * g.tile_width;
    const std::size_t sy = (from / g.cols) * g.tile_height, sx = (from % g.cols) * g.tile_width;
    for (std::size_t r = 0; r < g.tile_height; ++r) {
      const T* in = src.data() + ((sy + r) * shape.width + sx) * C;
      T* out = dst.data() + ((dy + r) * shape.width + dx) * C;
      if (!spec.channel_order) {
        std::copy(in, in + row_len, out);
      } else {
        const auto& co = *spec.channel_order;
        for (std::size_t p = 0; p < g.tile_width; ++p)
          for (std::size_t c = 0; c < C; ++c) out[p * C + c] = in[p * C + co[c]];
      }
    }
  }
}

}  // namespace detail

/// Applies one spec to every image of the batch.
template <typename T>
ImageBatch<T> apply(const PermutationSpec& spec, const ImageBatch<T>& batch) {
  detail::check_geometry(spec, batch.shape());
  ImageBatch<T> out(batch.size(), batch.shape());
  for (std::size_t i = 0; i < batch.size(); ++i) detail::permute_image<T>(spec, batch.shape(), batch.image(i), out.image(i));
  return out;
}

template <typename T>
struct PermutedBatch {
  ImageBatch<T> images;
  std::vector<PermutationSpec> specs;
};

/// Draws an independent spec for every sample.
template <typename T>
PermutedBatch<T> apply_per_sample(const ImageBatch<T>& batch, const TileGrid& grid,
                                  std::optional<std::size_t> channels, Rng& rng) {
  PermutedBatch<T> out{ImageBatch<T>(batch.size(), batch.shape()), {}};
  out.specs.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto spec = sample_permutation(grid, channels, rng);
    detail::check_geometry(spec, batch.shape());
    detail::permute_image<T>(spec, batch.shape(), batch.image(i), out.images.image(i));
    out.specs.push_back(std::move(spec));
  }
  return out;
}

/// Applies specs[i] to sample i.
template <typename T>
ImageBatch<T> apply_each(std::span<const PermutationSpec> specs, const ImageBatch<T>& batch) {
  if (specs.size() != batch.size()) throw DimensionMismatch("apply_each: one spec per sample required");
  ImageBatch<T> out(batch.size(), batch.shape());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    detail::check_geometry(specs[i], batch.shape());
    detail::permute_image<T>(specs[i], batch.shape(), batch.image(i), out.image(i));
  }
  return out;
}

}  // namespace jigsaw_vae
