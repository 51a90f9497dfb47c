#pragma once

#include <algorithm>
#include <cstddef>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "drpca/errors.hpp"

namespace drpca {

/// Dimensions of a rank-4 [batch, channels, height, width] array.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  [[nodiscard]] constexpr std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  [[nodiscard]] constexpr std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  [[nodiscard]] constexpr std::size_t sample() const { return static_cast<std::size_t>(c) * h * w; }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);
std::ostream& operator<<(std::ostream& os, const Shape& s);

/// Dense row-major NCHW array. Value type; copies are deep.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.size(), fill) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
      throw ShapeError("negative tensor dimension in " + to_string(shape));
    }
  }
  Tensor(Shape shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
    if (data_.size() != shape.size()) {
      throw ShapeError("value count " + std::to_string(data_.size()) + " does not match " + to_string(shape));
    }
  }

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  [[nodiscard]] T* data() { return data_.data(); }
  [[nodiscard]] const T* data() const { return data_.data(); }
  [[nodiscard]] std::span<T> values() { return data_; }
  [[nodiscard]] std::span<const T> values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }

  /// Contiguous view of one sample [c, h, w].
  std::span<T> sample(int n) { return {data_.data() + n * shape_.sample(), shape_.sample()}; }
  std::span<const T> sample(int n) const { return {data_.data() + n * shape_.sample(), shape_.sample()}; }

  /// Contiguous view of one [h, w] plane.
  std::span<T> plane(int n, int c) {
    return {data_.data() + (static_cast<std::size_t>(n) * shape_.c + c) * shape_.plane(), shape_.plane()};
  }
  std::span<const T> plane(int n, int c) const {
    return {data_.data() + (static_cast<std::size_t>(n) * shape_.c + c) * shape_.plane(), shape_.plane()};
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Same data viewed under a new shape with equal element count.
  [[nodiscard]] Tensor reshaped(Shape s) const {
    if (s.size() != shape_.size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(s));
    }
    Tensor out = *this;
    out.shape_ = s;
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  [[nodiscard]] std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  Shape shape_{};
  std::vector<T> data_;
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& src) {
  Tensor<To> out(src.shape());
  std::transform(src.values().begin(), src.values().end(), out.values().begin(),
                 [](From v) { return static_cast<To>(v); });
  return out;
}

/// Extract samples [first, first + count) along the batch axis.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& src, int first, int count) {
  const Shape s = src.shape();
  if (first < 0 || count < 0 || first + count > s.n) {
    throw ShapeError("batch slice out of range for " + to_string(s));
  }
  Tensor<T> out({count, s.c, s.h, s.w});
  std::copy_n(src.data() + first * s.sample(), count * s.sample(), out.data());
  return out;
}

/// Stack equally-shaped tensors along the batch axis.
template <typename T>
Tensor<T> concat_batch(std::span<const Tensor<T>> parts) {
  if (parts.empty()) return {};
  Shape s = parts.front().shape();
  int total = 0;
  for (const auto& p : parts) {
    const Shape ps = p.shape();
    if (ps.c != s.c || ps.h != s.h || ps.w != s.w) {
      throw ShapeError("concat_batch: " + to_string(ps) + " vs " + to_string(s));
    }
    total += ps.n;
  }
  s.n = total;
  Tensor<T> out(s);
  T* dst = out.data();
  for (const auto& p : parts) dst = std::copy(p.values().begin(), p.values().end(), dst);
  return out;
}

void require_same_shape(const Shape& a, const Shape& b, const char* what);

}  // namespace drpca
