#pragma once

// 8-bit image files: PNG through libpng's simplified API, binary and ASCII
// PPM/PGM parsed directly.

#include <png.h>

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "exuseg/container.hpp"
#include "exuseg/error.hpp"

namespace exuseg {

struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;  // row-major, interleaved channels

  Image8() = default;
  Image8(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  std::uint8_t& at(std::size_t row, std::size_t col, std::size_t ch = 0) {
    return pixels[(row * width + col) * channels + ch];
  }
  std::uint8_t at(std::size_t row, std::size_t col, std::size_t ch = 0) const {
    return pixels[(row * width + col) * channels + ch];
  }

  friend bool operator==(const Image8&, const Image8&) = default;
};

namespace detail {

inline Image8 decode_png(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    throw FormatError("cannot decode PNG '" + origin + "': " + img.message);
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 out(img.width, img.height, color ? 3 : 1);
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw FormatError("cannot decode PNG '" + origin + "': " + msg);
  }
  return out;
}

inline Image8 decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  std::size_t pos = 2;
  auto fail = [&](const std::string& why) -> FormatError {
    return FormatError("cannot decode PNM '" + origin + "': " + why);
  };
  auto next_int = [&]() -> std::size_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw fail("malformed header");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 24)) throw fail("header value out of range");
      ++pos;
    }
    return v;
  };
  const char kind = static_cast<char>(bytes[1]);
  const bool ascii = kind == '2' || kind == '3';
  const std::size_t channels = (kind == '3' || kind == '6') ? 3 : 1;
  const std::size_t w = next_int(), h = next_int(), maxval = next_int();
  if (w == 0 || h == 0) throw fail("zero extent");
  if (maxval == 0 || maxval > 255) throw fail("only 8-bit images (maxval <= 255) are supported");
  Image8 out(w, h, channels);
  const std::size_t n = w * h * channels;
  auto scale = [&](std::size_t v) -> std::uint8_t {
    if (v > maxval) throw fail("sample exceeds maxval");
    return static_cast<std::uint8_t>((v * 255 + maxval / 2) / maxval);
  };
  if (ascii) {
    for (std::size_t i = 0; i < n; ++i) out.pixels[i] = scale(next_int());
  } else {
    ++pos;  // single whitespace after maxval
    if (bytes.size() < pos || bytes.size() - pos < n) throw fail("pixel data truncated");
    for (std::size_t i = 0; i < n; ++i) out.pixels[i] = scale(bytes[pos + i]);
  }
  return out;
}

}  // namespace detail

inline Image8 decode_image(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  static constexpr std::uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  if (bytes.size() >= 8 && std::equal(kPngSig, kPngSig + 8, bytes.begin())) return detail::decode_png(bytes, origin);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] >= '2' && bytes[1] <= '6' && bytes[1] != '4')
    return detail::decode_pnm(bytes, origin);
  throw FormatError("unsupported image format '" + origin + "' (expected PNG, PPM or PGM)");
}

inline Image8 read_image(const std::filesystem::path& path) { return decode_image(read_file(path), path.string()); }

inline std::vector<std::uint8_t> encode_png(const Image8& im) {
  if (im.channels != 1 && im.channels != 3) throw Error("encode_png: channels must be 1 or 3");
  if (im.pixels.size() != im.width * im.height * im.channels) throw Error("encode_png: pixel buffer size mismatch");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = im.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, im.pixels.data(), 0, nullptr))
    throw Error(std::string("PNG encode failed: ") + img.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, im.pixels.data(), 0, nullptr))
    throw Error(std::string("PNG encode failed: ") + img.message);
  out.resize(size);
  return out;
}

inline void write_png(const std::filesystem::path& path, const Image8& im) { write_file(path, encode_png(im)); }

// Binary PGM (1 channel) or PPM (3 channels).
inline std::vector<std::uint8_t> encode_pnm(const Image8& im) {
  std::ostringstream hdr;
  hdr << (im.channels == 3 ? "P6" : "P5") << '\n' << im.width << ' ' << im.height << "\n255\n";
  const std::string h = hdr.str();
  std::vector<std::uint8_t> out(h.begin(), h.end());
  out.insert(out.end(), im.pixels.begin(), im.pixels.end());
  return out;
}

}  // namespace exuseg
