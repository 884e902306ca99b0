#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace targetforge {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);

/// Dense row-major float32 array. Images are stored NHWC.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  /// Elements per leading-axis entry (per sample for batched tensors).
  std::size_t row_size() const;

  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }

  std::span<float> row(std::size_t i);
  std::span<const float> row(std::size_t i) const;

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  /// Same data, new shape; the element count must match.
  Tensor reshaped(Shape shape) const;

  /// Rows `indices` of the leading axis, in order.
  Tensor gather_rows(std::span<const std::size_t> indices) const;
  Tensor slice_rows(std::size_t begin, std::size_t end) const;
  void set_rows(std::size_t begin, const Tensor& rows);

  /// Stacks along the leading axis; trailing dimensions must agree.
  static Tensor concat_rows(std::initializer_list<const Tensor*> parts);

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<float> data_;
};

/// Bitwise equality, distinguishing -0 from +0 and comparing NaN payloads.
bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace targetforge
