#include "bm/cam.hpp"

#include "bm/nn.hpp"

#include <algorithm>
#include <cmath>

namespace bm {

RowMatrixXf upsample_bilinear(const CamGrid& grid, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("upsample: zero output dimension");
  if (out_h < std::size_t(grid.values.rows()) || out_w < std::size_t(grid.values.cols())) {
    throw std::invalid_argument("upsample: output smaller than grid");
  }
  return resize_bilinear(grid.values, out_h, out_w);
}

std::array<std::uint8_t, 3> heat_colormap(float value) {
  const float v = std::clamp(value, 0.0f, 1.0f);
  auto channel = [](float x) { return std::uint8_t(std::lround(std::clamp(x, 0.0f, 255.0f))); };
  if (v <= 0.5f) {
    const float t = v * 2.0f;  // blue -> yellow
    return {channel(255.0f * t), channel(255.0f * t), channel(255.0f * (1.0f - t))};
  }
  const float t = (v - 0.5f) * 2.0f;  // yellow -> red
  return {255, channel(255.0f * (1.0f - t)), 0};
}

RgbaImage render_heatmap(const Eigen::Ref<const RowMatrixXf>& overlay, const RgbImage& base,
                         float alpha) {
  if (std::size_t(overlay.rows()) != base.height() || std::size_t(overlay.cols()) != base.width()) {
    throw std::invalid_argument("render_heatmap: overlay and frame dimensions differ");
  }
  if (!(alpha >= 0.0f && alpha <= 1.0f)) throw std::invalid_argument("render_heatmap: alpha outside [0, 1]");

  RgbaImage out;
  out.width = base.width();
  out.height = base.height();
  out.pixels.resize(out.width * out.height * 4);
  for (std::size_t y = 0; y < out.height; ++y) {
    for (std::size_t x = 0; x < out.width; ++x) {
      const float v = std::clamp(overlay(Eigen::Index(y), Eigen::Index(x)), 0.0f, 1.0f);
      const float weight = alpha * v;
      const auto heat = heat_colormap(v);
      const auto rgb = base.at(x, y);
      std::uint8_t* dst = out.pixels.data() + (y * out.width + x) * 4;
      for (std::size_t c = 0; c < 3; ++c) {
        if (weight == 0.0f) {
          dst[c] = rgb[c];
        } else {
          const float mixed = float(rgb[c]) * (1.0f - weight) + float(heat[c]) * weight;
          dst[c] = std::uint8_t(std::lround(std::clamp(mixed, 0.0f, 255.0f)));
        }
      }
      dst[3] = 255;
    }
  }
  return out;
}

}  // namespace bm
