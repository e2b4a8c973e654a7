#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cogdist/error.hpp"

namespace cogdist {

/// NCHW shape. Flat vectors use c = h = w = 1 with the length in n or c.
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t per_item() const { return c * h * w; }
  std::size_t numel() const { return n * c * h * w; }
  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

/// Dense row-major NCHW tensor with value semantics.
template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{}) : shape_(shape), data_(shape.numel(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("Tensor: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }

  /// The i-th item (image or row) as a contiguous span.
  std::span<T> item(std::size_t i) {
    return {data_.data() + i * shape_.per_item(), shape_.per_item()};
  }
  std::span<const T> item(std::size_t i) const {
    return {data_.data() + i * shape_.per_item(), shape_.per_item()};
  }

  /// Reinterprets the buffer under a new shape with the same element count.
  void reshape(Shape s) {
    if (s.numel() != data_.size()) throw ShapeError("reshape: " + shape_.str() + " -> " + s.str());
    shape_ = s;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using FloatTensor = Tensor<float>;
using Batch = Tensor<double>;

/// Copies items `indices` of `src` into a new double batch.
template <class T>
Batch gather_batch(const Tensor<T>& src, std::span<const std::size_t> indices) {
  Shape s = src.shape();
  s.n = indices.size();
  Batch out(s);
  const std::size_t per = s.per_item();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    auto from = src.item(indices[k]);
    for (std::size_t j = 0; j < per; ++j) out[k * per + j] = static_cast<double>(from[j]);
  }
  return out;
}

template <class T>
Batch to_batch(const Tensor<T>& src) {
  Batch out(src.shape());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = static_cast<double>(src[i]);
  return out;
}

}  // namespace cogdist
