#pragma once

#include "cast/core.hpp"

#include <initializer_list>
#include <utility>

namespace cast {

/// Dense row-major tensor. The last axis is the "column" axis; all leading
/// axes fold into rows when the tensor is viewed as a matrix.
template <class Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_extents();
    data_ = Vector<Scalar>::Zero(numel(shape_));
  }

  Tensor(Shape shape, Vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (numel(shape_) != data_.size())
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values) : shape_(std::move(shape)) {
    check_extents();
    if (numel(shape_) != static_cast<Index>(values.size()))
      throw DimensionError("initializer of length " + std::to_string(values.size()) +
                           " does not match shape " + shape_string(shape_));
    data_.resize(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar v : values) data_[i++] = v;
  }

  static Tensor scalar(Scalar v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }
  Index dim(Index axis) const {
    if (axis < 0) axis += rank();
    return shape_.at(static_cast<std::size_t>(axis));
  }

  /// Product of all leading extents.
  Index rows() const { return shape_.empty() ? 0 : size() / shape_.back(); }
  Index cols() const { return shape_.empty() ? 0 : shape_.back(); }

  Vector<Scalar>& data() { return data_; }
  const Vector<Scalar>& data() const { return data_; }
  Scalar* ptr() { return data_.data(); }
  const Scalar* ptr() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  MatrixMap<Scalar> matrix() { return MatrixMap<Scalar>(data_.data(), rows(), cols()); }
  ConstMatrixMap<Scalar> matrix() const { return ConstMatrixMap<Scalar>(data_.data(), rows(), cols()); }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size())
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  template <class Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  void check_extents() const {
    for (Index d : shape_)
      if (d <= 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape_));
  }

  Shape shape_;
  Vector<Scalar> data_;
};

}  // namespace cast
