#pragma once

#include "bm/image.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace bm {

using Bytes = std::vector<std::uint8_t>;

// All decoders throw bm::Error(ErrorCode::UndecodableFrame) on bad input.
RgbImage decode_jpeg(std::span<const std::uint8_t> bytes);
Bytes encode_jpeg(const RgbImage& image, int quality = 90);

RgbImage decode_png(std::span<const std::uint8_t> bytes);
Bytes encode_png(const RgbaImage& image);
Bytes encode_png(const RgbImage& image);

/// Sniffs JPEG or PNG magic and dispatches.
RgbImage decode_image(std::span<const std::uint8_t> bytes);

std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Strict standard-alphabet decode; returns false on any malformed input.
bool base64_decode(std::string_view text, Bytes& out);

}  // namespace bm
