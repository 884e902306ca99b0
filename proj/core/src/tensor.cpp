#include "targetforge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>

#include "targetforge/error.hpp"

namespace targetforge {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw ShapeError(-1, shape_, {data_.size()}, "element count does not match shape");
  }
}

std::size_t Tensor::row_size() const {
  if (shape_.empty() || shape_[0] == 0) return 0;
  return data_.size() / shape_[0];
}

std::span<float> Tensor::row(std::size_t i) {
  std::size_t n = row_size();
  return std::span<float>(data_).subspan(i * n, n);
}

std::span<const float> Tensor::row(std::size_t i) const {
  std::size_t n = row_size();
  return std::span<const float>(data_).subspan(i * n, n);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw ShapeError(-1, shape, shape_, "reshape changes element count");
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::gather_rows(std::span<const std::size_t> indices) const {
  Shape out_shape = shape_;
  out_shape.at(0) = indices.size();
  Tensor out(out_shape);
  std::size_t n = row_size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= shape_[0]) {
      throw Error(ErrorKind::State, "row index " + std::to_string(indices[i]) + " out of range");
    }
    std::copy_n(data_.data() + indices[i] * n, n, out.data_.data() + i * n);
  }
  return out;
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  Shape out_shape = shape_;
  out_shape.at(0) = end - begin;
  std::size_t n = row_size();
  return Tensor(out_shape, std::vector<float>(data_.begin() + begin * n, data_.begin() + end * n));
}

void Tensor::set_rows(std::size_t begin, const Tensor& rows) {
  std::size_t n = row_size();
  if (rows.row_size() != n || begin + rows.shape_.at(0) > shape_.at(0)) {
    throw ShapeError(-1, shape_, rows.shape_, "set_rows does not fit");
  }
  std::copy(rows.data_.begin(), rows.data_.end(), data_.begin() + begin * n);
}

Tensor Tensor::concat_rows(std::initializer_list<const Tensor*> parts) {
  if (parts.size() == 0) return {};
  Shape out_shape = (*parts.begin())->shape_;
  out_shape.at(0) = 0;
  for (const Tensor* p : parts) {
    if (!std::equal(p->shape_.begin() + 1, p->shape_.end(), out_shape.begin() + 1, out_shape.end())) {
      throw ShapeError(-1, out_shape, p->shape_, "concat_rows trailing dimensions differ");
    }
    out_shape[0] += p->shape_[0];
  }
  std::vector<float> data;
  data.reserve(shape_size(out_shape));
  for (const Tensor* p : parts) data.insert(data.end(), p->data_.begin(), p->data_.end());
  return Tensor(out_shape, std::move(data));
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace targetforge
