#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace bm {

/// Interleaved 8-bit RGB raster. Every live instance is counted so the
/// server can prove that no image data survives a purged session.
class RgbImage {
 public:
  RgbImage() noexcept;
  RgbImage(std::size_t width, std::size_t height, std::uint8_t fill = 0);
  RgbImage(std::size_t width, std::size_t height, std::vector<std::uint8_t> pixels);
  RgbImage(const RgbImage& other);
  RgbImage(RgbImage&& other) noexcept;
  RgbImage& operator=(const RgbImage& other);
  RgbImage& operator=(RgbImage&& other) noexcept;
  ~RgbImage();

  std::size_t width() const noexcept { return width_; }
  std::size_t height() const noexcept { return height_; }
  bool empty() const noexcept { return width_ == 0 || height_ == 0; }

  std::span<std::uint8_t> pixels() noexcept { return pixels_; }
  std::span<const std::uint8_t> pixels() const noexcept { return pixels_; }

  std::array<std::uint8_t, 3> at(std::size_t x, std::size_t y) const {
    const std::size_t i = (y * width_ + x) * 3;
    return {pixels_[i], pixels_[i + 1], pixels_[i + 2]};
  }
  void set(std::size_t x, std::size_t y, std::array<std::uint8_t, 3> rgb) {
    const std::size_t i = (y * width_ + x) * 3;
    pixels_[i] = rgb[0];
    pixels_[i + 1] = rgb[1];
    pixels_[i + 2] = rgb[2];
  }

  bool operator==(const RgbImage& other) const {
    return width_ == other.width_ && height_ == other.height_ && pixels_ == other.pixels_;
  }

  /// Number of RgbImage objects currently holding pixel data in this process.
  static std::size_t live_buffers() noexcept;

 private:
  void track(bool holds) noexcept;

  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<std::uint8_t> pixels_;
  bool counted_ = false;
};

struct RgbaImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  std::array<std::uint8_t, 4> at(std::size_t x, std::size_t y) const {
    const std::size_t i = (y * width + x) * 4;
    return {pixels[i], pixels[i + 1], pixels[i + 2], pixels[i + 3]};
  }
};

/// Bilinear downscale so the longer side is at most max_side. Smaller
/// images are returned unchanged.
RgbImage make_thumbnail(const RgbImage& image, std::size_t max_side);

}  // namespace bm
