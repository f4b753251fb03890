#pragma once

#include <png.h>

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <vector>

#include "rcpilot/core.hpp"

namespace rcpilot::png {

/// 8-bit image, row-major, `channels` interleaved (1 = gray, 3 = RGB).
struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<std::uint8_t> pixels;
};

namespace detail {

struct WriteCtx {
  std::vector<std::uint8_t>* out;
  char error[256];
};

struct ReadCtx {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos;
  char error[256];
};

inline void write_fn(png_structp p, png_bytep data, png_size_t len) {
  auto* ctx = static_cast<WriteCtx*>(png_get_io_ptr(p));
  ctx->out->insert(ctx->out->end(), data, data + len);
}

inline void flush_fn(png_structp) {}

inline void read_fn(png_structp p, png_bytep data, png_size_t len) {
  auto* ctx = static_cast<ReadCtx*>(png_get_io_ptr(p));
  if (ctx->pos + len > ctx->size) png_error(p, "unexpected end of PNG data");
  std::memcpy(data, ctx->data + ctx->pos, len);
  ctx->pos += len;
}

// libpng reports errors by longjmp; messages are stashed in the io context.
inline void error_fn(png_structp p, png_const_charp msg) {
  auto* err = static_cast<char*>(png_get_error_ptr(p));
  std::snprintf(err, 256, "%s", msg);
  png_longjmp(p, 1);
}
inline void warn_fn(png_structp, png_const_charp) {}

// The setjmp frames below hold only trivially destructible locals.
inline bool encode_rows(WriteCtx* ctx, const std::uint8_t* pixels, int width, int height, int channels, int level) {
  png_structp p = png_create_write_struct(PNG_LIBPNG_VER_STRING, ctx->error, error_fn, warn_fn);
  if (p == nullptr) return false;
  png_infop info = png_create_info_struct(p);
  if (setjmp(png_jmpbuf(p))) {
    png_destroy_write_struct(&p, &info);
    return false;
  }
  png_set_write_fn(p, ctx, write_fn, flush_fn);
  png_set_compression_level(p, level);
  png_set_IHDR(p, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(p, info);
  const std::size_t stride = static_cast<std::size_t>(width) * static_cast<std::size_t>(channels);
  for (int y = 0; y < height; ++y)
    png_write_row(p, const_cast<png_bytep>(pixels + stride * static_cast<std::size_t>(y)));
  png_write_end(p, nullptr);
  png_destroy_write_struct(&p, &info);
  return true;
}

struct DecodedHeader {
  int width;
  int height;
  int channels;
};

using RowAllocator = std::uint8_t* (*)(void* user, const DecodedHeader&);

inline bool decode_rows(ReadCtx* ctx, RowAllocator alloc, void* user) {
  png_structp p = png_create_read_struct(PNG_LIBPNG_VER_STRING, ctx->error, error_fn, warn_fn);
  if (p == nullptr) return false;
  png_infop info = png_create_info_struct(p);
  if (setjmp(png_jmpbuf(p))) {
    png_destroy_read_struct(&p, &info, nullptr);
    return false;
  }
  png_set_read_fn(p, ctx, read_fn);
  png_read_info(p, info);
  const auto color = png_get_color_type(p, info);
  const auto depth = png_get_bit_depth(p, info);
  if (depth == 16) png_set_strip_16(p);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(p);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(p);
  if (png_get_valid(p, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(p);
  png_set_strip_alpha(p);
  png_read_update_info(p, info);
  DecodedHeader h{static_cast<int>(png_get_image_width(p, info)), static_cast<int>(png_get_image_height(p, info)),
                  static_cast<int>(png_get_channels(p, info))};
  if (h.channels == 2) h.channels = 1;
  std::uint8_t* dst = alloc(user, h);
  const std::size_t stride = png_get_rowbytes(p, info);
  for (int y = 0; y < h.height; ++y) png_read_row(p, dst + stride * static_cast<std::size_t>(y), nullptr);
  png_read_end(p, nullptr);
  png_destroy_read_struct(&p, &info, nullptr);
  return true;
}

}  // namespace detail

/// Encodes 8-bit gray or RGB (no alpha). Low default compression level:
/// frames are written at loop rate.
inline std::vector<std::uint8_t> encode(const Image& img, int compression_level = 1) {
  require(img.width > 0 && img.height > 0 && (img.channels == 1 || img.channels == 3), Errc::invalid_argument,
          "png encode: bad image geometry");
  require(img.pixels.size() == static_cast<std::size_t>(img.width) * img.height * img.channels,
          Errc::invalid_argument, "png encode: pixel buffer size mismatch");
  std::vector<std::uint8_t> out;
  detail::WriteCtx ctx{&out, {}};
  if (!detail::encode_rows(&ctx, img.pixels.data(), img.width, img.height, img.channels, compression_level))
    throw Error(Errc::io, std::string("png encode: ") + ctx.error);
  return out;
}

/// Decodes any PNG into 8-bit gray or RGB (alpha stripped, palettes expanded).
inline Image decode(std::span<const std::uint8_t> bytes) {
  require(bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0, Errc::parse, "not a PNG");
  detail::ReadCtx ctx{bytes.data(), bytes.size(), 0, {}};
  Image img;
  auto alloc = [](void* user, const detail::DecodedHeader& h) -> std::uint8_t* {
    auto* im = static_cast<Image*>(user);
    im->width = h.width;
    im->height = h.height;
    im->channels = h.channels;
    im->pixels.assign(static_cast<std::size_t>(h.width) * h.height * h.channels, 0);
    return im->pixels.data();
  };
  if (!detail::decode_rows(&ctx, alloc, &img)) throw Error(Errc::parse, std::string("png decode: ") + ctx.error);
  return img;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace rcpilot::png
