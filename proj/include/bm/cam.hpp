#pragma once

#include "bm/image.hpp"
#include "bm/tensor.hpp"

#include <array>
#include <cstdint>
#include <stdexcept>

namespace bm {

template <typename Scalar>
struct BasicCamGrid {
  RowMatrix<Scalar> values;
  std::size_t class_index = 0;
  bool normalized = false;
};
using CamGrid = BasicCamGrid<float>;

/// Scores for every class at every spatial position: [classes x H x W].
template <typename Scalar>
struct BasicPositionScores {
  BasicTensor<Scalar> values;
};
using PositionScores = BasicPositionScores<float>;

/// values[c, y, x] = bias[c] + sum_k weights[c, k] * features[k, y, x]
template <typename Scalar, typename WeightsDerived, typename BiasDerived>
BasicPositionScores<Scalar> per_position_scores(const BasicTensor<Scalar>& features,
                                                const Eigen::MatrixBase<WeightsDerived>& weights,
                                                const Eigen::MatrixBase<BiasDerived>& bias) {
  if (features.rank() != 3 || std::size_t(weights.cols()) != features.dim(0) ||
      bias.size() != weights.rows()) {
    throw std::invalid_argument("per_position_scores: dimension mismatch");
  }
  // Accumulate in double so float inputs keep per-position scores within
  // float rounding of the exact sums.
  BasicTensor<Scalar> out({std::size_t(weights.rows()), features.dim(1), features.dim(2)});
  RowMatrix<double> acc = weights.template cast<double>() * features.channels().template cast<double>();
  acc.colwise() += bias.template cast<double>();
  out.channels() = acc.template cast<Scalar>();
  return {std::move(out)};
}

/// Class activation map without the head bias.
template <typename Scalar, typename WeightsDerived>
BasicCamGrid<Scalar> compute_cam(const BasicTensor<Scalar>& features,
                                 const Eigen::MatrixBase<WeightsDerived>& weights,
                                 std::size_t class_index) {
  if (class_index >= std::size_t(weights.rows())) {
    throw std::out_of_range("compute_cam: class index out of range");
  }
  if (features.rank() != 3 || std::size_t(weights.cols()) != features.dim(0)) {
    throw std::invalid_argument("compute_cam: dimension mismatch");
  }
  const auto h = Eigen::Index(features.dim(1));
  const auto w = Eigen::Index(features.dim(2));
  const RowMatrix<double> flat =
      weights.row(Eigen::Index(class_index)).template cast<double>() * features.channels().template cast<double>();
  BasicCamGrid<Scalar> grid;
  grid.values = Eigen::Map<const RowMatrix<double>>(flat.data(), h, w).template cast<Scalar>();
  grid.class_index = class_index;
  return grid;
}

/// Min-max scaling into [0, 1]; a constant grid becomes all zeros.
template <typename Scalar>
BasicCamGrid<Scalar> normalize_cam(BasicCamGrid<Scalar> grid) {
  const Scalar lo = grid.values.minCoeff();
  const Scalar hi = grid.values.maxCoeff();
  if (hi > lo) {
    grid.values = (grid.values.array() - lo) / (hi - lo);
  } else {
    grid.values.setZero();
  }
  grid.normalized = true;
  return grid;
}

RowMatrixXf upsample_bilinear(const CamGrid& grid, std::size_t out_h, std::size_t out_w);

/// Blue (0) -> yellow (0.5) -> red (1), linear per channel, rounded.
std::array<std::uint8_t, 3> heat_colormap(float value);

/// Per pixel, blends heat_colormap(v) over the base frame with weight
/// alpha * v. Output alpha channel is opaque.
RgbaImage render_heatmap(const Eigen::Ref<const RowMatrixXf>& overlay, const RgbImage& base,
                         float alpha);

}  // namespace bm
