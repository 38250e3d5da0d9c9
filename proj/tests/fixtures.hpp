#pragma once

#include "bm/image.hpp"
#include "bm/nn.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace bm::fixtures {

inline std::vector<std::string> labels(std::size_t n = 4) {
  static const std::vector<std::string> names = {"doctor", "bear", "astronaut", "banana",
                                                 "guitar", "teapot", "zebra", "umbrella"};
  return {names.begin(), names.begin() + long(n)};
}

/// Smooth seeded image: a few coloured blobs over a gradient, so that
/// confidences spread more than they would on white noise.
inline RgbImage synthetic_frame(std::uint64_t seed, std::size_t w = 56, std::size_t h = 56) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RgbImage img(w, h);
  struct Blob {
    double cx, cy, r, rgb[3];
  };
  std::vector<Blob> blobs(4);
  for (auto& b : blobs) b = {u(rng) * double(w), u(rng) * double(h), (0.1 + 0.3 * u(rng)) * double(w),
                             {u(rng), u(rng), u(rng)}};
  const double base[3] = {u(rng), u(rng), u(rng)};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double px[3];
      for (int c = 0; c < 3; ++c) px[c] = base[c] * (0.5 + 0.5 * double(x + y) / double(w + h));
      for (const auto& b : blobs) {
        const double d = std::hypot(double(x) - b.cx, double(y) - b.cy);
        const double a = std::exp(-(d * d) / (2 * b.r * b.r));
        for (int c = 0; c < 3; ++c) px[c] = px[c] * (1 - a) + b.rgb[c] * a;
      }
      img.set(x, y, {std::uint8_t(std::lround(255 * px[0])), std::uint8_t(std::lround(255 * px[1])),
                     std::uint8_t(std::lround(255 * px[2]))});
    }
  }
  return img;
}

inline RgbImage checkerboard(std::size_t size, std::size_t cell) {
  RgbImage img(size, size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const bool on = ((x / cell) + (y / cell)) % 2 == 0;
      img.set(x, y, on ? std::array<std::uint8_t, 3>{255, 255, 255} : std::array<std::uint8_t, 3>{0, 0, 0});
    }
  }
  return img;
}

inline Tensor random_input(std::uint64_t seed, std::size_t size = 56) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Tensor t({3, size, size});
  for (float& v : t.data()) v = u(rng);
  return t;
}

}  // namespace bm::fixtures

namespace bm::fixtures {

/// Two-class model whose class-0 confidence is a monotone function of the
/// frame's mean red level: p0 = sigmoid(4 * (mean_red_norm + 1) - 4).
/// Lets tests dial in target confidences with uniform frames.
inline Model calibrated_model(std::size_t input_size = 8) {
  Conv2d conv{3, 1, 1, 1, 0, 1, RowMatrixXf(1, 3), Vector<float>(1)};
  conv.weights << 1.0f, 0.0f, 0.0f;
  conv.bias << 1.0f;
  Linear head{RowMatrixXf(2, 1), Vector<float>(2)};
  head.weights << 4.0f, 0.0f;
  head.bias << -4.0f, 0.0f;
  return Model::create({conv, Relu6{}, GlobalAvgPool{}, head}, {"target", "other"}, input_size);
}

/// Uniform frame whose class-0 confidence under calibrated_model is close
/// to p (8-bit quantization moves it slightly; read the true value back
/// from forward()).
inline RgbImage frame_for_confidence(double p, std::size_t size = 8) {
  const double logit = std::log(p / (1.0 - p));
  const double red_norm = (logit + 4.0) / 4.0 - 1.0;
  const double px = std::clamp((red_norm * 0.5 + 0.5) * 255.0, 0.0, 255.0);
  RgbImage img(size, size, 0);
  for (std::size_t i = 0; i < size * size; ++i) img.pixels()[i * 3] = std::uint8_t(std::lround(px));
  return img;
}

}  // namespace bm::fixtures
