#include "bm/nn.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace bm {
namespace {

[[noreturn]] void reject(ModelFormatError::Kind kind, const std::string& what) {
  throw ModelFormatError(kind, "model: " + what);
}

bool finite(const RowMatrixXf& m) { return m.allFinite(); }

Tensor run_conv(const Conv2d& conv, const Tensor& input) {
  const std::size_t height = input.dim(1);
  const std::size_t width = input.dim(2);
  const std::size_t out_h = conv.output_size(height);
  const std::size_t out_w = conv.output_size(width);
  const std::size_t in_per_group = conv.in_channels / conv.groups;
  const std::size_t out_per_group = conv.out_channels / conv.groups;
  const std::size_t k = conv.kernel;

  Tensor output({conv.out_channels, out_h, out_w});
  RowMatrixXf columns(Eigen::Index(in_per_group * k * k), Eigen::Index(out_h * out_w));
  const auto in = input.data();

  for (std::size_t g = 0; g < conv.groups; ++g) {
    for (std::size_t ci = 0; ci < in_per_group; ++ci) {
      const float* plane = in.data() + (g * in_per_group + ci) * height * width;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          float* row = columns.row(Eigen::Index((ci * k + ky) * k + kx)).data();
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const auto iy = std::ptrdiff_t(oy * conv.stride + ky) - std::ptrdiff_t(conv.padding);
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const auto ix = std::ptrdiff_t(ox * conv.stride + kx) - std::ptrdiff_t(conv.padding);
              const bool inside = iy >= 0 && ix >= 0 && iy < std::ptrdiff_t(height) &&
                                  ix < std::ptrdiff_t(width);
              row[oy * out_w + ox] = inside ? plane[std::size_t(iy) * width + std::size_t(ix)] : 0.0f;
            }
          }
        }
      }
    }
    const auto rows = Eigen::Index(g * out_per_group);
    const auto count = Eigen::Index(out_per_group);
    output.channels().middleRows(rows, count).noalias() =
        conv.weights.middleRows(rows, count) * columns;
  }
  output.channels().colwise() += conv.bias;
  return output;
}

void run_relu6(Tensor& t) {
  for (float& v : t.data()) v = std::clamp(v, 0.0f, 6.0f);
}

}  // namespace

Model Model::create(std::vector<Layer> layers, std::vector<std::string> labels,
                    std::size_t input_size) {
  using Kind = ModelFormatError::Kind;
  if (input_size == 0) reject(Kind::Topology, "input_size must be positive");
  if (labels.empty()) reject(Kind::Topology, "at least one label is required");

  std::size_t channels = 3;
  std::size_t spatial = input_size;
  std::size_t convs = 0;
  std::size_t pools = 0;

  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& layer = layers[i];
    const std::string where = "layer " + std::to_string(i);
    if (const auto* conv = std::get_if<Conv2d>(&layer)) {
      if (pools != 0) reject(Kind::Topology, where + ": convolution after global pool");
      if (conv->in_channels != channels) {
        reject(Kind::ChannelMismatch, where + ": expects " + std::to_string(conv->in_channels) +
                                          " input channels, previous layer emits " +
                                          std::to_string(channels));
      }
      if (conv->groups == 0 || conv->in_channels % conv->groups != 0 ||
          conv->out_channels % conv->groups != 0 || conv->out_channels == 0) {
        reject(Kind::ChannelMismatch, where + ": groups do not divide channel counts");
      }
      if (conv->kernel == 0 || conv->stride == 0) reject(Kind::Topology, where + ": zero kernel or stride");
      if (spatial + 2 * conv->padding < conv->kernel) reject(Kind::Topology, where + ": kernel exceeds input");
      const std::size_t patch = conv->in_channels / conv->groups * conv->kernel * conv->kernel;
      if (std::size_t(conv->weights.rows()) != conv->out_channels ||
          std::size_t(conv->weights.cols()) != patch ||
          std::size_t(conv->bias.size()) != conv->out_channels) {
        reject(Kind::ChannelMismatch, where + ": weight shape does not match descriptor");
      }
      if (!finite(conv->weights) || !conv->bias.allFinite()) reject(Kind::NonFinite, where + ": non-finite weight");
      channels = conv->out_channels;
      spatial = conv->output_size(spatial);
      ++convs;
    } else if (std::holds_alternative<Relu6>(layer)) {
      if (pools != 0) reject(Kind::Topology, where + ": activation after global pool");
    } else if (std::holds_alternative<GlobalAvgPool>(layer)) {
      if (convs == 0) reject(Kind::Topology, "global pool before any convolution");
      ++pools;
    } else {
      const auto& head = std::get<Linear>(layer);
      if (pools != 1 || i + 1 != layers.size()) {
        reject(Kind::Topology, "the linear head must be the only layer after the global pool");
      }
      if (std::size_t(head.weights.cols()) != channels) {
        reject(Kind::ChannelMismatch, "head expects " + std::to_string(head.weights.cols()) +
                                          " channels, backbone emits " + std::to_string(channels));
      }
      if (std::size_t(head.weights.rows()) != labels.size() || head.bias.size() != head.weights.rows()) {
        reject(Kind::ChannelMismatch, "head rows do not match label count");
      }
      if (!finite(head.weights) || !head.bias.allFinite()) reject(Kind::NonFinite, "head: non-finite weight");
    }
  }
  if (pools != 1) reject(Kind::Topology, "exactly one global pool is required");
  if (layers.empty() || !std::holds_alternative<Linear>(layers.back())) {
    reject(Kind::Topology, "model must end with a linear head");
  }

  Model model;
  model.layers_ = std::move(layers);
  model.labels_ = std::move(labels);
  model.input_size_ = input_size;
  model.feature_channels_ = channels;
  model.feature_size_ = spatial;
  return model;
}

Linear& Model::head_mut() { return std::get<Linear>(layers_.back()); }

Model make_tiny_model(std::uint64_t seed, std::vector<std::string> labels) {
  std::mt19937_64 rng(seed);
  auto fill = [&rng](auto& m, float bound) {
    std::uniform_real_distribution<float> dist(-bound, bound);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  };

  std::vector<Layer> layers;
  std::size_t in = 3;
  for (std::size_t out : {8u, 16u, 32u}) {
    Conv2d conv;
    conv.in_channels = in;
    conv.out_channels = out;
    conv.kernel = 3;
    conv.stride = 2;
    conv.padding = 1;
    conv.weights.resize(Eigen::Index(out), Eigen::Index(in * 9));
    conv.bias.resize(Eigen::Index(out));
    fill(conv.weights, std::sqrt(6.0f / float(in * 9)));
    fill(conv.bias, 0.1f);
    layers.emplace_back(std::move(conv));
    layers.emplace_back(Relu6{});
    in = out;
  }
  layers.emplace_back(GlobalAvgPool{});

  Linear head;
  head.weights.resize(Eigen::Index(labels.size()), Eigen::Index(in));
  head.bias.resize(Eigen::Index(labels.size()));
  fill(head.weights, 2.0f);
  fill(head.bias, 0.5f);
  layers.emplace_back(std::move(head));
  return Model::create(std::move(layers), std::move(labels), 56);
}

RowMatrixXf resize_bilinear(const Eigen::Ref<const RowMatrixXf>& src, std::size_t out_h,
                            std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("resize: zero output dimension");
  if (src.size() == 0) throw std::invalid_argument("resize: empty source");

  struct Tap {
    Eigen::Index lo;
    Eigen::Index hi;
    double frac;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> result(out);
    for (std::size_t i = 0; i < out; ++i) {
      const double pos = out == 1 ? 0.0 : double(i) * double(in - 1) / double(out - 1);
      const auto lo = std::min<std::size_t>(std::size_t(pos), in - 1);
      const auto hi = std::min<std::size_t>(lo + 1, in - 1);
      result[i] = {Eigen::Index(lo), Eigen::Index(hi), pos - double(lo)};
    }
    return result;
  };
  const auto ys = taps(std::size_t(src.rows()), out_h);
  const auto xs = taps(std::size_t(src.cols()), out_w);

  RowMatrixXf out{Eigen::Index(out_h), Eigen::Index(out_w)};
  for (std::size_t y = 0; y < out_h; ++y) {
    const Tap& ty = ys[y];
    for (std::size_t x = 0; x < out_w; ++x) {
      const Tap& tx = xs[x];
      const double top = (1.0 - tx.frac) * src(ty.lo, tx.lo) + tx.frac * src(ty.lo, tx.hi);
      const double bottom = (1.0 - tx.frac) * src(ty.hi, tx.lo) + tx.frac * src(ty.hi, tx.hi);
      out(Eigen::Index(y), Eigen::Index(x)) = float((1.0 - ty.frac) * top + ty.frac * bottom);
    }
  }
  return out;
}

Tensor preprocess(const RgbImage& image, std::size_t target) {
  if (image.empty()) throw std::invalid_argument("preprocess: zero-dimension image");
  if (target == 0) throw std::invalid_argument("preprocess: zero target size");

  const auto h = Eigen::Index(image.height());
  const auto w = Eigen::Index(image.width());
  Tensor out({3, target, target});
  RowMatrixXf plane{h, w};
  const auto px = image.pixels();
  for (std::size_t c = 0; c < 3; ++c) {
    for (Eigen::Index y = 0; y < h; ++y) {
      for (Eigen::Index x = 0; x < w; ++x) {
        plane(y, x) = float(px[std::size_t(y * w + x) * 3 + c]) / 255.0f;
      }
    }
    const RowMatrixXf resized = resize_bilinear(plane, target, target);
    auto dst = out.channels().row(Eigen::Index(c));
    dst = (Eigen::Map<const Eigen::RowVectorXf>(resized.data(), resized.size()).array() - 0.5f) / 0.5f;
  }
  return out;
}

Vector<double> softmax(const Eigen::Ref<const Vector<float>>& logits) {
  if (logits.size() == 0) throw std::invalid_argument("softmax: empty input");
  const Vector<double> shifted = logits.cast<double>().array() - double(logits.maxCoeff());
  Vector<double> e = shifted.array().exp();
  return e / e.sum();
}

ClassificationResult forward(const Model& model, const Tensor& input) {
  const std::size_t s = model.input_size();
  if (input.rank() != 3 || input.dim(0) != 3 || input.dim(1) != s || input.dim(2) != s) {
    throw std::invalid_argument("forward: input must be [3 x " + std::to_string(s) + " x " +
                                std::to_string(s) + "]");
  }
  if (!input.all_finite()) throw std::invalid_argument("forward: non-finite input");

  Tensor activation = input;
  ClassificationResult result;
  for (const Layer& layer : model.layers()) {
    if (const auto* conv = std::get_if<Conv2d>(&layer)) {
      activation = run_conv(*conv, activation);
    } else if (std::holds_alternative<Relu6>(layer)) {
      run_relu6(activation);
    } else if (std::holds_alternative<GlobalAvgPool>(layer)) {
      result.feature_maps = activation;
    } else {
      const auto& head = std::get<Linear>(layer);
      const Vector<double> pooled = result.feature_maps.channels().cast<double>().rowwise().mean();
      result.logits = (head.weights.cast<double>() * pooled + head.bias.cast<double>()).cast<float>();
    }
  }
  result.probs = softmax(result.logits);
  result.top_label = argmax(result.probs);
  result.top_confidence = result.probs(Eigen::Index(result.top_label));
  return result;
}

}  // namespace bm
