#pragma once

// Dense row-major n-dimensional arrays backed by an Eigen column vector.
//
// Broadcasting follows the usual trailing-dimension rule: shapes are aligned
// on their last axis, and two extents are compatible when they are equal or
// one of them is 1. Missing leading axes are treated as 1. The result extent
// is the larger of the two.

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mdlm/errors.hpp"

namespace mdlm {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1},
                         std::multiplies<Index>());
}

inline Shape row_major_strides(const Shape& shape) {
  Shape strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    strides[i] = strides[i + 1] * shape[i + 1];
  }
  return strides;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const Index da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const Index db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast shapes " + shape_string(a) + " and " +
                       shape_string(b));
    }
    out[rank - 1 - i] = std::max(da, db);
  }
  return out;
}

// Maps linear indices of a broadcast output shape onto offsets of an input
// that was broadcast to it.
class BroadcastIndexer {
 public:
  BroadcastIndexer(const Shape& input, const Shape& output)
      : output_(output), strides_(output.size(), 0) {
    const Shape in_strides = row_major_strides(input);
    const std::size_t lead = output.size() - input.size();
    for (std::size_t i = 0; i < input.size(); ++i) {
      strides_[lead + i] = input[i] == 1 ? 0 : in_strides[i];
    }
  }

  // Calls fn(output_linear_index, input_offset) for every output element.
  template <typename Fn>
  void for_each(Fn&& fn) const {
    const Index total = shape_numel(output_);
    const std::size_t rank = output_.size();
    std::vector<Index> counter(rank, 0);
    Index offset = 0;
    for (Index linear = 0; linear < total; ++linear) {
      fn(linear, offset);
      for (int axis = static_cast<int>(rank) - 1; axis >= 0; --axis) {
        if (++counter[axis] < output_[axis]) {
          offset += strides_[axis];
          break;
        }
        offset -= strides_[axis] * (output_[axis] - 1);
        counter[axis] = 0;
      }
    }
  }

 private:
  Shape output_;
  Shape strides_;
};

template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Buffer = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  // Rank-0 scalar holding zero.
  Tensor() : data_(Buffer::Zero(1)) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(Buffer::Zero(checked_numel(shape_))) {}

  Tensor(Shape shape, Buffer data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_numel(shape_)) {
      throw ShapeError("buffer of length " + std::to_string(data_.size()) +
                       " does not fit shape " + shape_string(shape_));
    }
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), Buffer::Map(values.begin(),
                                             static_cast<Index>(values.size()))) {}

  static Tensor Zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor Constant(Shape shape, Scalar value) {
    Tensor out(std::move(shape));
    out.data_.setConstant(value);
    return out;
  }
  static Tensor Scalar0(Scalar value) {
    Tensor out;
    out.data_[0] = value;
    return out;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index size() const { return data_.size(); }
  Index dim(int axis) const {
    return shape_.at(axis < 0 ? shape_.size() + axis : axis);
  }

  Buffer& data() { return data_; }
  const Buffer& data() const { return data_; }
  Scalar* raw() { return data_.data(); }
  const Scalar* raw() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar item() const {
    if (size() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    }
    return data_[0];
  }

  // [numel / last, last] view; rank-0 tensors view as 1x1.
  MatrixMap matrix() { return MatrixMap(raw(), rows(), cols()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(raw(), rows(), cols()); }

  Index cols() const { return shape_.empty() ? 1 : shape_.back(); }
  Index rows() const { return cols() == 0 ? 0 : size() / cols(); }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " +
                       shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const { return data_.allFinite(); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

 private:
  static Index checked_numel(const Shape& shape) {
    for (Index d : shape) {
      if (d < 0) throw ShapeError("negative extent in shape " + shape_string(shape));
    }
    return shape_numel(shape);
  }

  Shape shape_;
  Buffer data_;
};

template <typename Scalar>
Tensor<Scalar> broadcast_to(const Tensor<Scalar>& x, const Shape& shape) {
  if (broadcast_shape(x.shape(), shape) != shape) {
    throw ShapeError("cannot broadcast " + shape_string(x.shape()) + " to " +
                     shape_string(shape));
  }
  if (x.shape() == shape) return x;
  Tensor<Scalar> out(shape);
  BroadcastIndexer(x.shape(), shape).for_each(
      [&](Index o, Index i) { out[o] = x[i]; });
  return out;
}

// Sums `x` down to `shape`, undoing a broadcast. Used for gradients.
template <typename Scalar>
Tensor<Scalar> sum_to(const Tensor<Scalar>& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  Tensor<Scalar> out(shape);
  // Trailing-suffix fast path: bias-style broadcasts of [..., n] onto [m, n].
  const bool suffix =
      shape.size() <= x.shape().size() &&
      std::equal(shape.begin(), shape.end(),
                 x.shape().end() - static_cast<long>(shape.size())) ;
  if (suffix) {
    const Index inner = shape_numel(shape);
    const Index outer = inner == 0 ? 0 : x.size() / inner;
    Eigen::Map<const typename Tensor<Scalar>::RowMatrix> view(x.raw(), outer, inner);
    out.data() = view.colwise().sum().transpose();
    return out;
  }
  BroadcastIndexer(shape, x.shape()).for_each(
      [&](Index o, Index i) { out[i] += x[o]; });
  return out;
}

}  // namespace mdlm
