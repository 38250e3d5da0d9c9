#include "bm/codec.hpp"

#include "bm/errors.hpp"

#include <jpeglib.h>
#include <openssl/evp.h>
#include <png.h>

#include <csetjmp>
#include <cstring>

namespace bm {
namespace {

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr info) {
  auto* mgr = reinterpret_cast<JpegErrorManager*>(info->err);
  std::longjmp(mgr->jump, 1);
}

void jpeg_silence(j_common_ptr, int) {}

[[noreturn]] void undecodable(const char* what) { throw Error(ErrorCode::UndecodableFrame, what); }

struct PngReadCursor {
  std::span<const std::uint8_t> bytes;
  std::size_t offset = 0;
};

void png_read_from_span(png_structp png, png_bytep out, png_size_t length) {
  auto* cursor = static_cast<PngReadCursor*>(png_get_io_ptr(png));
  if (cursor->offset + length > cursor->bytes.size()) {
    png_error(png, "truncated png");
  }
  std::memcpy(out, cursor->bytes.data() + cursor->offset, length);
  cursor->offset += length;
}

void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<Bytes*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void png_flush_noop(png_structp) {}

void png_warning_noop(png_structp, png_const_charp) {}

bool png_encode_into(std::size_t width, std::size_t height, int color_type, int channels,
                     const std::uint8_t* pixels, Bytes* out) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warning_noop);
  if (png == nullptr) return false;
  png_infop info = png_create_info_struct(png);
  if (info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_set_write_fn(png, out, png_write_to_vector, png_flush_noop);
  png_set_IHDR(png, info, png_uint_32(width), png_uint_32(height), 8, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(pixels + y * width * std::size_t(channels)));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

Bytes encode_png_raw(std::size_t width, std::size_t height, int color_type, int channels,
                     const std::uint8_t* pixels) {
  Bytes out;
  if (!png_encode_into(width, height, color_type, channels, pixels, &out)) {
    throw std::runtime_error("png: encode failed");
  }
  return out;
}

// The setjmp landing sites below live in functions that hold no C++
// objects of their own; results are written through pointers owned by the
// caller so a longjmp never skips a destructor or reads a clobbered local.
bool jpeg_decode_into(std::span<const std::uint8_t> bytes, std::vector<std::uint8_t>* pixels,
                      std::size_t* width, std::size_t* height) {
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  err.base.emit_message = jpeg_silence;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  *width = cinfo.output_width;
  *height = cinfo.output_height;
  pixels->resize(std::size_t(cinfo.output_width) * cinfo.output_height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = pixels->data() + std::size_t(cinfo.output_scanline) * cinfo.output_width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return true;
}

bool jpeg_encode_into(const RgbImage& image, int quality, Bytes* out) {
  jpeg_compress_struct cinfo{};
  JpegErrorManager err{};
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  err.base.emit_message = jpeg_silence;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::free(buffer);
    return false;
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &buffer, &size);
  cinfo.image_width = JDIMENSION(image.width());
  cinfo.image_height = JDIMENSION(image.height());
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    auto* row = const_cast<JSAMPROW>(image.pixels().data() +
                                     std::size_t(cinfo.next_scanline) * image.width() * 3);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  out->assign(buffer, buffer + size);
  jpeg_destroy_compress(&cinfo);
  std::free(buffer);
  return true;
}

bool png_decode_into(PngReadCursor* cursor, std::vector<std::uint8_t>* pixels, std::size_t* width,
                     std::size_t* height) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warning_noop);
  if (png == nullptr) return false;
  png_infop info = png_create_info_struct(png);
  if (info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_set_read_fn(png, cursor, png_read_from_span);
  png_read_info(png, info);
  *width = png_get_image_width(png, info);
  *height = png_get_image_height(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  pixels->resize(std::size_t(png_get_image_width(png, info)) * png_get_image_height(png, info) * 3);
  for (png_uint_32 y = 0; y < png_get_image_height(png, info); ++y) {
    png_read_row(png, pixels->data() + std::size_t(y) * png_get_image_width(png, info) * 3, nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

}  // namespace

RgbImage decode_jpeg(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || bytes[0] != 0xFF || bytes[1] != 0xD8) undecodable("not a jpeg stream");
  std::vector<std::uint8_t> pixels;
  std::size_t width = 0;
  std::size_t height = 0;
  if (!jpeg_decode_into(bytes, &pixels, &width, &height)) undecodable("corrupt jpeg stream");
  if (width == 0 || height == 0) undecodable("empty jpeg");
  return RgbImage(width, height, std::move(pixels));
}

Bytes encode_jpeg(const RgbImage& image, int quality) {
  if (image.empty()) throw std::invalid_argument("encode_jpeg: empty image");
  Bytes out;
  if (!jpeg_encode_into(image, quality, &out)) throw std::runtime_error("jpeg: encode failed");
  return out;
}

RgbImage decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) undecodable("not a png stream");
  PngReadCursor cursor{bytes, 0};
  std::vector<std::uint8_t> pixels;
  std::size_t width = 0;
  std::size_t height = 0;
  if (!png_decode_into(&cursor, &pixels, &width, &height)) undecodable("corrupt png stream");
  if (width == 0 || height == 0) undecodable("empty png");
  return RgbImage(width, height, std::move(pixels));
}

Bytes encode_png(const RgbaImage& image) {
  return encode_png_raw(image.width, image.height, PNG_COLOR_TYPE_RGBA, 4, image.pixels.data());
}

Bytes encode_png(const RgbImage& image) {
  return encode_png_raw(image.width(), image.height(), PNG_COLOR_TYPE_RGB, 3, image.pixels().data());
}

RgbImage decode_image(std::span<const std::uint8_t> bytes) {
  if (bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0) return decode_png(bytes);
  return decode_jpeg(bytes);
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), int(bytes.size()));
  out.resize(std::size_t(n));
  return out;
}

bool base64_decode(std::string_view text, Bytes& out) {
  if (text.size() % 4 != 0) return false;
  std::size_t padding = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    const bool alnum = (ch >= 'A' && ch <= 'Z') || (ch >= 'a' && ch <= 'z') || (ch >= '0' && ch <= '9');
    if (ch == '=') {
      if (i + 2 < text.size()) return false;
      ++padding;
    } else if (padding > 0 || !(alnum || ch == '+' || ch == '/')) {
      return false;
    }
  }
  out.assign(text.size() / 4 * 3, 0);
  if (text.empty()) return true;
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), int(text.size()));
  if (n < 0) return false;
  out.resize(std::size_t(n) - padding);
  return true;
}

}  // namespace bm
