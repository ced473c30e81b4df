#pragma once

#include <array>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace crpn {

/// Raised for incompatible extents; the message names the offending dims.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Up to rank 4, row-major. Layout convention is (C, H, W) with an optional
/// leading extent.
class Shape {
 public:
  static constexpr int kMaxRank = 4;

  Shape() = default;
  Shape(std::initializer_list<int> dims);
  explicit Shape(std::span<const int> dims);

  int rank() const { return rank_; }
  int operator[](int axis) const { return dims_[static_cast<std::size_t>(axis)]; }
  std::size_t numel() const;
  std::span<const int> dims() const { return {dims_.data(), static_cast<std::size_t>(rank_)}; }
  std::string str() const;

  friend bool operator==(const Shape& a, const Shape& b);

 private:
  std::array<int, kMaxRank> dims_{};
  int rank_ = 0;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {}
  Tensor(Shape shape, std::vector<T> data);

  const Shape& shape() const { return shape_; }
  int rank() const { return shape_.rank(); }
  int dim(int axis) const { return shape_[axis]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // rank-3 (C, H, W) accessors
  T& operator()(int c, int h, int w) { return data_[index3(c, h, w)]; }
  const T& operator()(int c, int h, int w) const { return data_[index3(c, h, w)]; }

  // rank-4 accessors
  T& operator()(int n, int c, int h, int w) { return data_[index4(n, c, h, w)]; }
  const T& operator()(int n, int c, int h, int w) const { return data_[index4(n, c, h, w)]; }

  /// Same data, new extents of equal element count.
  Tensor reshaped(Shape shape) const;

  void fill(T value);

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t index3(int c, int h, int w) const {
    return (static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w;
  }
  std::size_t index4(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  Shape shape_;
  std::vector<T> data_;
};

/// A trainable tensor and its accumulated gradient.
template <typename T>
struct ParamTensor {
  Tensor<T> value;
  Tensor<T> grad;

  ParamTensor() = default;
  explicit ParamTensor(Tensor<T> v) : value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T(0)); }
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace crpn
