#pragma once

#include "bm/image.hpp"
#include "bm/tensor.hpp"

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace bm {

struct Conv2d {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
  /// out_channels x (in_channels / groups * kernel * kernel), row-major
  /// over [in, ky, kx] within a group.
  RowMatrixXf weights;
  Vector<float> bias;

  std::size_t output_size(std::size_t input) const {
    return (input + 2 * padding - kernel) / stride + 1;
  }
};

struct Relu6 {};
struct GlobalAvgPool {};

struct Linear {
  RowMatrixXf weights;  // num_classes x channels
  Vector<float> bias;
};

using Layer = std::variant<Conv2d, Relu6, GlobalAvgPool, Linear>;

/// Validated CNN: conv/relu6 backbone, one global average pool, linear head.
/// Construct through Model::create or load_model; both reject any model
/// that breaks the layer-ordering or channel invariants.
class Model {
 public:
  static Model create(std::vector<Layer> layers, std::vector<std::string> labels,
                      std::size_t input_size);

  const std::vector<Layer>& layers() const noexcept { return layers_; }
  const std::vector<std::string>& labels() const noexcept { return labels_; }
  std::size_t input_size() const noexcept { return input_size_; }
  std::size_t num_classes() const noexcept { return labels_.size(); }

  const RowMatrixXf& head_weights() const { return head().weights; }
  const Vector<float>& head_bias() const { return head().bias; }

  /// Shape of the last convolution output for a conforming input.
  std::size_t feature_channels() const noexcept { return feature_channels_; }
  std::size_t feature_size() const noexcept { return feature_size_; }

  /// Mutable head access for tests that probe softmax shift invariance.
  Linear& head_mut();

 private:
  Model() = default;
  const Linear& head() const { return std::get<Linear>(layers_.back()); }

  std::vector<Layer> layers_;
  std::vector<std::string> labels_;
  std::size_t input_size_ = 0;
  std::size_t feature_channels_ = 0;
  std::size_t feature_size_ = 0;
};

class ModelFormatError : public std::runtime_error {
 public:
  enum class Kind { MalformedHeader, ByteLength, ChannelMismatch, UnsupportedLayer, NonFinite, Topology };

  ModelFormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Parses a BMNet ("BMN1") container.
Model load_model(std::span<const std::uint8_t> bytes);
Model load_model_file(const std::string& path);

/// Serializes a model to the BMNet container; load_model(save_model(m))
/// reproduces m exactly.
std::vector<std::uint8_t> save_model(const Model& model);

/// The desk-scale reference network: 56x56x3 input, three 3x3 stride-2
/// convolutions (8, 16, 32 channels) with relu6, GAP, linear head.
/// Weights are drawn from a seeded generator.
Model make_tiny_model(std::uint64_t seed, std::vector<std::string> labels);

struct ClassificationResult {
  Vector<double> probs;
  Vector<float> logits;
  Tensor feature_maps;  // final convolution activation, before pooling
  std::size_t top_label = 0;
  double top_confidence = 0.0;
};

/// RGB raster -> [3 x target x target] tensor in [-1, 1].
Tensor preprocess(const RgbImage& image, std::size_t target);

ClassificationResult forward(const Model& model, const Tensor& input);

/// Max-subtracted softmax. Throws std::invalid_argument on empty input.
Vector<double> softmax(const Eigen::Ref<const Vector<float>>& logits);

/// Lowest index among maximal entries.
template <typename Derived>
std::size_t argmax(const Eigen::DenseBase<Derived>& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return std::size_t(best);
}

/// Align-corners bilinear resampling of one plane.
RowMatrixXf resize_bilinear(const Eigen::Ref<const RowMatrixXf>& src, std::size_t out_h,
                            std::size_t out_w);

}  // namespace bm
