#pragma once

#include <algorithm>
#include <cstddef>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace jigsaw_vae {

class DimensionMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Allocator returning 64-byte aligned blocks. Eigen picks the start of its
/// vectorized loops from the address, so reductions over mapped storage only
/// sum in a fixed order when every buffer starts on the same boundary.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

struct ImageShape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;

  std::size_t pixels() const noexcept { return height * width * channels; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

inline std::string to_string(const ImageShape& s) {
  return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.channels);
}

/// A batch of H x W x C images stored contiguously, sample-major then
/// row-major with channels innermost (NHWC).
template <typename T = float>
class ImageBatch {
 public:
  ImageBatch() = default;
  ImageBatch(std::size_t count, ImageShape shape)
      : count_(count), shape_(shape), data_(count * shape.pixels(), T(0)) {}
  ImageBatch(std::size_t count, ImageShape shape, AlignedVector<T> data)
      : count_(count), shape_(shape), data_(std::move(data)) {
    if (data_.size() != count_ * shape_.pixels())
      throw DimensionMismatch("ImageBatch: data size does not match count x shape");
  }
  ImageBatch(std::size_t count, ImageShape shape, const std::vector<T>& data)
      : count_(count), shape_(shape), data_(data.begin(), data.end()) {
    if (data_.size() != count_ * shape_.pixels())
      throw DimensionMismatch("ImageBatch: data size does not match count x shape");
  }

  std::size_t size() const noexcept { return count_; }
  bool empty() const noexcept { return count_ == 0; }
  const ImageShape& shape() const noexcept { return shape_; }
  std::size_t stride() const noexcept { return shape_.pixels(); }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  AlignedVector<T>& storage() noexcept { return data_; }
  const AlignedVector<T>& storage() const noexcept { return data_; }

  std::span<T> image(std::size_t i) { return std::span<T>(data_).subspan(i * stride(), stride()); }
  std::span<const T> image(std::size_t i) const {
    return std::span<const T>(data_).subspan(i * stride(), stride());
  }

  T& at(std::size_t i, std::size_t y, std::size_t x, std::size_t c) {
    return data_[i * stride() + (y * shape_.width + x) * shape_.channels + c];
  }
  const T& at(std::size_t i, std::size_t y, std::size_t x, std::size_t c) const {
    return data_[i * stride() + (y * shape_.width + x) * shape_.channels + c];
  }

  /// Copies of the selected samples, in the given order.
  ImageBatch gather(std::span<const std::size_t> indices) const {
    ImageBatch out(indices.size(), shape_);
    for (std::size_t k = 0; k < indices.size(); ++k) {
      auto src = image(indices[k]);
      std::copy(src.begin(), src.end(), out.image(k).begin());
    }
    return out;
  }

  ImageBatch slice(std::size_t begin, std::size_t end) const {
    ImageBatch out(end - begin, shape_);
    std::copy(data_.begin() + begin * stride(), data_.begin() + end * stride(), out.data_.begin());
    return out;
  }

  void append(std::span<const T> img) {
    if (img.size() != stride()) throw DimensionMismatch("ImageBatch::append: wrong image size");
    data_.insert(data_.end(), img.begin(), img.end());
    ++count_;
  }

  void append(const ImageBatch& other) {
    if (other.shape_ != shape_) throw DimensionMismatch("ImageBatch::append: shape mismatch");
    data_.insert(data_.end(), other.data_.begin(), other.data_.end());
    count_ += other.count_;
  }

  template <typename U>
  ImageBatch<U> cast() const {
    return ImageBatch<U>(count_, shape_, AlignedVector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const ImageBatch&, const ImageBatch&) = default;

 private:
  std::size_t count_ = 0;
  ImageShape shape_{};
  AlignedVector<T> data_;
};

}  // namespace jigsaw_vae
