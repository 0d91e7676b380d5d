#pragma once

// On-disk formats: UTF-8 "key: value" manifests, raw little-endian float32
// arrays, MNIST IDX files (optionally gzipped) and PNG image grids.

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "image.hpp"

namespace jigsaw_vae::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes via a temporary file and rename, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open " + tmp.string() + " for writing");
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
    if (!f) throw FormatError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, text.data(), text.size());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// Ordered "key: value" lines. Keys are unique; '#' starts a comment line.
class Manifest {
 public:
  void set(const std::string& key, const std::string& value) {
    if (key.find(':') != std::string::npos || key.find('\n') != std::string::npos ||
        value.find('\n') != std::string::npos)
      throw FormatError("manifest: invalid key or value for '" + key + "'");
    for (auto& [k, v] : entries_)
      if (k == key) {
        v = value;
        return;
      }
    entries_.emplace_back(key, value);
  }

  template <typename V>
  void set(const std::string& key, const V& value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    set(key, os.str());
  }

  bool has(const std::string& key) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == key; });
  }

  const std::string& get(const std::string& key) const {
    for (const auto& [k, v] : entries_)
      if (k == key) return v;
    throw FormatError("manifest: missing key '" + key + "'");
  }

  std::string get_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? get(key) : fallback;
  }

  template <typename V>
  V get_as(const std::string& key) const {
    std::istringstream is(get(key));
    V v{};
    is >> v;
    if (is.fail()) throw FormatError("manifest: cannot parse '" + key + "'");
    return v;
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  std::string str() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + ": " + v + "\n";
    return out;
  }

  static Manifest parse(const std::string& text) {
    Manifest m;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      const auto colon = line.find(':');
      if (colon == std::string::npos) throw FormatError("manifest: malformed line '" + line + "'");
      std::string value = line.substr(colon + 1);
      if (!value.empty() && value[0] == ' ') value.erase(0, 1);
      m.set(line.substr(0, colon), value);
    }
    return m;
  }

  void write(const std::filesystem::path& path) const { write_text_atomic(path, str()); }
  static Manifest read(const std::filesystem::path& path) { return parse(read_text(path)); }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

template <typename T>
std::string join(const std::vector<T>& values, char sep = ',') {
  std::ostringstream os;
  for (std::size_t i = 0; i < values.size(); ++i) os << (i ? std::string(1, sep) : "") << values[i];
  return os.str();
}

template <typename T>
std::vector<T> split_as(const std::string& text, char sep = ',') {
  std::vector<T> out;
  if (text.empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, sep)) {
    std::istringstream is(item);
    T v{};
    is >> v;
    if (is.fail()) throw FormatError("cannot parse list item '" + item + "'");
    out.push_back(v);
  }
  return out;
}

inline void write_f32(const std::filesystem::path& path, std::span<const float> values) {
  std::vector<std::uint32_t> words(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t w = std::bit_cast<std::uint32_t>(values[i]);
    if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
    words[i] = w;
  }
  write_file_atomic(path, words.data(), words.size() * sizeof(std::uint32_t));
}

inline std::vector<float> read_f32(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw FormatError("cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(f.tellg());
  if (bytes % 4 != 0) throw FormatError(path.string() + ": size is not a multiple of 4 bytes");
  f.seekg(0);
  std::vector<std::uint32_t> words(bytes / 4);
  f.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(bytes));
  std::vector<float> out(words.size());
  for (std::size_t i = 0; i < words.size(); ++i) {
    std::uint32_t w = words[i];
    if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
    out[i] = std::bit_cast<float>(w);
  }
  return out;
}

/// Reads a whole file through zlib (plain files pass through unchanged).
inline std::vector<unsigned char> read_maybe_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw FormatError("cannot open " + path.string());
  std::vector<unsigned char> out;
  unsigned char buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw FormatError("decompression failed: " + path.string());
  return out;
}

inline std::uint32_t read_be32(const unsigned char* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

/// IDX3 unsigned-byte images scaled to [0, 1], as single-channel images.
inline ImageBatch<float> read_idx_images(const std::filesystem::path& path) {
  const auto raw = read_maybe_gzip(path);
  if (raw.size() < 16 || read_be32(raw.data()) != 0x00000803) throw FormatError(path.string() + ": not an IDX3 file");
  const std::size_t n = read_be32(raw.data() + 4), h = read_be32(raw.data() + 8), w = read_be32(raw.data() + 12);
  if (raw.size() != 16 + n * h * w) throw FormatError(path.string() + ": truncated IDX3 payload");
  std::vector<float> data(n * h * w);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(raw[16 + i]) / 255.0f;
  return ImageBatch<float>(n, {h, w, 1}, std::move(data));
}

inline std::vector<int> read_idx_labels(const std::filesystem::path& path) {
  const auto raw = read_maybe_gzip(path);
  if (raw.size() < 8 || read_be32(raw.data()) != 0x00000801) throw FormatError(path.string() + ": not an IDX1 file");
  const std::size_t n = read_be32(raw.data() + 4);
  if (raw.size() != 8 + n) throw FormatError(path.string() + ": truncated IDX1 payload");
  return std::vector<int>(raw.begin() + 8, raw.end());
}

/// Tiles images into a `columns`-wide grid with a 1-pixel gap and writes an
/// 8-bit RGB PNG. Single-channel images are rendered grey.
inline void write_png_grid(const std::filesystem::path& path, const ImageBatch<float>& images, std::size_t columns) {
  if (images.empty()) throw FormatError("write_png_grid: no images");
  const auto& s = images.shape();
  if (s.channels != 1 && s.channels != 3) throw FormatError("write_png_grid: need 1 or 3 channels");
  columns = std::max<std::size_t>(1, std::min(columns, images.size()));
  const std::size_t rows = (images.size() + columns - 1) / columns;
  const std::size_t W = columns * (s.width + 1) + 1, H = rows * (s.height + 1) + 1;
  std::vector<unsigned char> rgb(W * H * 3, 64);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::size_t oy = (i / columns) * (s.height + 1) + 1, ox = (i % columns) * (s.width + 1) + 1;
    for (std::size_t y = 0; y < s.height; ++y)
      for (std::size_t x = 0; x < s.width; ++x)
        for (std::size_t c = 0; c < 3; ++c) {
          const float v = images.at(i, y, x, s.channels == 1 ? 0 : c);
          rgb[((oy + y) * W + ox + x) * 3 + c] =
              static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
        }
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  FILE* fp = std::fopen(tmp.string().c_str(), "wb");
  if (!fp) throw FormatError("cannot open " + tmp.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw FormatError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < H; ++y) png_write_row(png, rgb.data() + y * W * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
  std::filesystem::rename(tmp, path);
}

}  // namespace jigsaw_vae::io
