#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace bm {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using RowMatrixXf = RowMatrix<float>;

/// Dense row-major array with an explicit shape. Rank-3 tensors are laid
/// out [channels, height, width].
template <typename Scalar>
class BasicTensor {
 public:
  using Shape = std::vector<std::size_t>;
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  BasicTensor(Shape shape, std::vector<Scalar> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != element_count(shape_)) {
      throw std::invalid_argument("tensor data length does not match shape");
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<Scalar> data() noexcept { return data_; }
  std::span<const Scalar> data() const noexcept { return data_; }

  Scalar& operator()(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  Scalar operator()(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  /// Rank-3 tensor viewed as channels x (height*width).
  MatrixMap channels() {
    return MatrixMap(data_.data(), Eigen::Index(shape_.at(0)), Eigen::Index(plane_size()));
  }
  ConstMatrixMap channels() const {
    return ConstMatrixMap(data_.data(), Eigen::Index(shape_.at(0)), Eigen::Index(plane_size()));
  }

  /// One channel of a rank-3 tensor as a height x width matrix.
  ConstMatrixMap plane(std::size_t c) const {
    return ConstMatrixMap(data_.data() + c * plane_size(), Eigen::Index(shape_.at(1)),
                          Eigen::Index(shape_.at(2)));
  }

  bool all_finite() const {
    for (Scalar v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  bool operator==(const BasicTensor&) const = default;

  static std::size_t element_count(const Shape& shape) {
    for (std::size_t d : shape) {
      if (d == 0) throw std::invalid_argument("tensor dimensions must be positive");
    }
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

 private:
  std::size_t plane_size() const { return shape_.at(1) * shape_.at(2); }

  Shape shape_;
  std::vector<Scalar> data_;
};

using Tensor = BasicTensor<float>;

}  // namespace bm
