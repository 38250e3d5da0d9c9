#include "bm/image.hpp"

#include "bm/nn.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>

namespace bm {
namespace {

std::atomic<std::size_t> g_live_buffers{0};

}  // namespace

RgbImage::RgbImage() noexcept = default;

RgbImage::RgbImage(std::size_t width, std::size_t height, std::uint8_t fill)
    : width_(width), height_(height), pixels_(width * height * 3, fill) {
  track(!pixels_.empty());
}

RgbImage::RgbImage(std::size_t width, std::size_t height, std::vector<std::uint8_t> pixels)
    : width_(width), height_(height), pixels_(std::move(pixels)) {
  if (pixels_.size() != width * height * 3) {
    throw std::invalid_argument("RgbImage: pixel buffer does not match dimensions");
  }
  track(!pixels_.empty());
}

RgbImage::RgbImage(const RgbImage& other)
    : width_(other.width_), height_(other.height_), pixels_(other.pixels_) {
  track(!pixels_.empty());
}

RgbImage::RgbImage(RgbImage&& other) noexcept
    : width_(other.width_), height_(other.height_), pixels_(std::move(other.pixels_)),
      counted_(other.counted_) {
  other.width_ = other.height_ = 0;
  other.pixels_.clear();
  other.counted_ = false;
}

RgbImage& RgbImage::operator=(const RgbImage& other) {
  if (this != &other) {
    width_ = other.width_;
    height_ = other.height_;
    pixels_ = other.pixels_;
    track(!pixels_.empty());
  }
  return *this;
}

RgbImage& RgbImage::operator=(RgbImage&& other) noexcept {
  if (this != &other) {
    track(false);
    width_ = other.width_;
    height_ = other.height_;
    pixels_ = std::move(other.pixels_);
    counted_ = other.counted_;
    other.width_ = other.height_ = 0;
    other.pixels_.clear();
    other.counted_ = false;
  }
  return *this;
}

RgbImage::~RgbImage() { track(false); }

std::size_t RgbImage::live_buffers() noexcept { return g_live_buffers.load(); }

void RgbImage::track(bool holds) noexcept {
  if (holds && !counted_) {
    g_live_buffers.fetch_add(1);
  } else if (!holds && counted_) {
    g_live_buffers.fetch_sub(1);
  }
  counted_ = holds;
}

RgbImage make_thumbnail(const RgbImage& image, std::size_t max_side) {
  const std::size_t longest = std::max(image.width(), image.height());
  if (image.empty() || longest <= max_side) return image;

  const double scale = double(max_side) / double(longest);
  const auto out_w = std::max<std::size_t>(1, std::size_t(std::lround(image.width() * scale)));
  const auto out_h = std::max<std::size_t>(1, std::size_t(std::lround(image.height() * scale)));

  RgbImage out(out_w, out_h);
  RowMatrixXf plane{Eigen::Index(image.height()), Eigen::Index(image.width())};
  for (int c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < image.height(); ++y) {
      for (std::size_t x = 0; x < image.width(); ++x) {
        plane(Eigen::Index(y), Eigen::Index(x)) = image.at(x, y)[std::size_t(c)];
      }
    }
    const RowMatrixXf small = resize_bilinear(plane, out_h, out_w);
    for (std::size_t y = 0; y < out_h; ++y) {
      for (std::size_t x = 0; x < out_w; ++x) {
        const float v = std::clamp(small(Eigen::Index(y), Eigen::Index(x)), 0.0f, 255.0f);
        out.pixels()[(y * out_w + x) * 3 + std::size_t(c)] = std::uint8_t(std::lround(v));
      }
    }
  }
  return out;
}

}  // namespace bm
