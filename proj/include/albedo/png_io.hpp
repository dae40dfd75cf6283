#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "albedo/error.hpp"
#include "albedo/image.hpp"

namespace albedo {

inline constexpr double kPng16Max = 65535.0;

// Value stored in a 16-bit PNG sample for v in [0, scale].
inline std::uint16_t quantize16(double v, double scale = 1.0) {
  double q = std::round(std::clamp(v / scale, 0.0, 1.0) * kPng16Max);
  return static_cast<std::uint16_t>(q);
}

inline double dequantize16(std::uint16_t q, double scale = 1.0) { return q / kPng16Max * scale; }

inline double snap16(double v, double scale = 1.0) { return dequantize16(quantize16(v, scale), scale); }

inline ImageTensor snapped16(ImageTensor image, double scale = 1.0) {
  for (double& v : image.values()) v = snap16(v, scale);
  return image;
}

namespace detail {

struct PngWriteBuffer {
  std::vector<unsigned char>* out;
};

inline void png_buffer_write(png_structp png, png_bytep data, png_size_t length) {
  auto* buf = static_cast<PngWriteBuffer*>(png_get_io_ptr(png));
  buf->out->insert(buf->out->end(), data, data + length);
}

inline void png_buffer_flush(png_structp) {}

struct PngReadBuffer {
  const unsigned char* data;
  std::size_t size;
  std::size_t offset;
};

inline void png_buffer_read(png_structp png, png_bytep data, png_size_t length) {
  auto* buf = static_cast<PngReadBuffer*>(png_get_io_ptr(png));
  if (buf->offset + length > buf->size) png_error(png, "truncated png stream");
  std::copy_n(buf->data + buf->offset, length, data);
  buf->offset += length;
}

inline void png_error_throw(png_structp, png_const_charp msg) { throw Error(ErrorCode::io, std::string("png: ") + msg); }

inline void png_warning_ignore(png_structp, png_const_charp) {}

}  // namespace detail

// Encodes image/scale as RGB PNG, 16 bits per sample by default.
inline std::vector<unsigned char> encode_png(const ImageTensor& image, double scale = 1.0, int bit_depth = 16) {
  require(bit_depth == 8 || bit_depth == 16, ErrorCode::invalid_argument, "png bit depth must be 8 or 16");
  std::vector<unsigned char> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_throw,
                                            detail::png_warning_ignore);
  require(png != nullptr, ErrorCode::io, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_write_struct(p, i); }
  } guard{&png, &info};

  detail::PngWriteBuffer buf{&out};
  png_set_write_fn(png, &buf, detail::png_buffer_write, detail::png_buffer_flush);
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width()), static_cast<png_uint_32>(image.height()), bit_depth,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  const int bytes = bit_depth / 8;
  std::vector<unsigned char> row(static_cast<std::size_t>(image.width()) * 3 * bytes);
  for (int y = 0; y < image.height(); ++y) {
    std::size_t k = 0;
    for (int x = 0; x < image.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        std::uint16_t q = quantize16(image.at(y, x, c), scale);
        if (bit_depth == 16) {
          row[k++] = static_cast<unsigned char>(q >> 8);
          row[k++] = static_cast<unsigned char>(q & 0xFF);
        } else {
          row[k++] = static_cast<unsigned char>(std::lround(q / 257.0));
        }
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  return out;
}

inline ImageTensor decode_png(const std::vector<unsigned char>& bytes, double scale = 1.0) {
  require(bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0, ErrorCode::io, "not a png stream");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_throw,
                                           detail::png_warning_ignore);
  require(png != nullptr, ErrorCode::io, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};

  detail::PngReadBuffer buf{bytes.data(), bytes.size(), 0};
  png_set_read_fn(png, &buf, detail::png_buffer_read);
  png_read_info(png, info);
  const auto width = static_cast<int>(png_get_image_width(png, info));
  const auto height = static_cast<int>(png_get_image_height(png, info));
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  require(color == PNG_COLOR_TYPE_RGB, ErrorCode::io, "expected an RGB png");
  require(depth == 8 || depth == 16, ErrorCode::io, "unsupported png bit depth");

  ImageTensor image(height, width);
  const int bytes_per = depth / 8;
  std::vector<unsigned char> row(static_cast<std::size_t>(width) * 3 * bytes_per);
  for (int y = 0; y < height; ++y) {
    png_read_row(png, row.data(), nullptr);
    std::size_t k = 0;
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < 3; ++c) {
        std::uint16_t q;
        if (depth == 16) {
          q = static_cast<std::uint16_t>((row[k] << 8) | row[k + 1]);
          k += 2;
        } else {
          q = static_cast<std::uint16_t>(row[k++] * 257);
        }
        image.at(y, x, c) = dequantize16(q, scale);
      }
    }
  }
  png_read_end(png, nullptr);
  return image;
}

inline void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::unique_ptr<FILE, decltype(&std::fclose)> f(std::fopen(path.c_str(), "wb"), &std::fclose);
  require(f != nullptr, ErrorCode::io, "cannot write " + path);
  require(std::fwrite(bytes.data(), 1, bytes.size(), f.get()) == bytes.size(), ErrorCode::io, "short write to " + path);
}

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::unique_ptr<FILE, decltype(&std::fclose)> f(std::fopen(path.c_str(), "rb"), &std::fclose);
  require(f != nullptr, ErrorCode::io, "cannot read " + path);
  std::vector<unsigned char> bytes;
  unsigned char chunk[1 << 14];
  std::size_t n;
  while ((n = std::fread(chunk, 1, sizeof(chunk), f.get())) > 0) bytes.insert(bytes.end(), chunk, chunk + n);
  return bytes;
}

inline void write_png(const std::string& path, const ImageTensor& image, double scale = 1.0) {
  write_file(path, encode_png(image, scale));
}

inline ImageTensor read_png(const std::string& path, double scale = 1.0) { return decode_png(read_file(path), scale); }

}  // namespace albedo
