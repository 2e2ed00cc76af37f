#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "mspm/data/patch_set.hpp"
#include "mspm/errors.hpp"

namespace mspm {

struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;                  // 1 gray, 3 RGB
  std::vector<std::uint8_t> pixels;  // row-major, channels interleaved

  std::uint8_t at(int y, int x, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

// Luminance 0.299 R + 0.587 G + 0.114 B, rounded.
inline Image to_gray(const Image& img) {
  if (img.channels == 1) return img;
  if (img.channels != 3) throw InvalidArgument("gray conversion needs 1 or 3 channels");
  Image g{img.width, img.height, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(img.width) * img.height)};
  for (std::size_t i = 0; i < g.pixels.size(); ++i) {
    const double y = 0.299 * img.pixels[3 * i] + 0.587 * img.pixels[3 * i + 1] + 0.114 * img.pixels[3 * i + 2];
    g.pixels[i] = static_cast<std::uint8_t>(y + 0.5);
  }
  return g;
}

// Binary PGM (P5) with maxval 255.
inline std::vector<std::uint8_t> encode_pgm(const Image& img) {
  if (img.channels != 1) throw InvalidArgument("PGM holds one channel");
  const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

inline Image decode_pgm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&] {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw FormatError("malformed PGM header");
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > 1 << 20) throw FormatError("PGM dimension too large");
    }
    return static_cast<int>(v);
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw FormatError("not a binary PGM file");
  pos = 2;
  Image img;
  img.width = number();
  img.height = number();
  const int maxval = number();
  if (maxval < 1 || maxval > 255) throw FormatError("only 8-bit PGM is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("malformed PGM header");
  ++pos;
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  if (bytes.size() - pos < n) throw CorruptFileError("PGM pixel data truncated");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  if (maxval != 255) {
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(std::min(255, p * 255 / maxval));
  }
  return img;
}

inline void write_pgm(const std::string& path, const Image& img) { detail::write_file(path, encode_pgm(img)); }

inline Image read_pgm(const std::string& path) { return decode_pgm(detail::read_file(path)); }

inline void write_png(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw InvalidArgument("PNG output needs 1 or 3 channels");
  png_image p;
  std::memset(&p, 0, sizeof p);
  p.version = PNG_IMAGE_VERSION;
  p.width = static_cast<png_uint_32>(img.width);
  p.height = static_cast<png_uint_32>(img.height);
  p.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&p, path.c_str(), 0, img.pixels.data(), 0, nullptr)) {
    throw InvalidArgument("cannot write PNG '" + path + "': " + p.message);
  }
}

// Reads a PNG as gray when it has no color, otherwise as RGB. Alpha is
// composited away.
inline Image read_png(const std::string& path) {
  png_image p;
  std::memset(&p, 0, sizeof p);
  p.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&p, path.c_str())) {
    throw FormatError("cannot read PNG '" + path + "': " + p.message);
  }
  const bool color = p.format & PNG_FORMAT_FLAG_COLOR;
  p.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image img{static_cast<int>(p.width), static_cast<int>(p.height), color ? 3 : 1, {}};
  img.pixels.resize(PNG_IMAGE_SIZE(p));
  if (!png_image_finish_read(&p, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&p);
    throw CorruptFileError("cannot decode PNG '" + path + "': " + p.message);
  }
  return img;
}

// PGM or PNG, chosen by the file signature.
inline Image read_image(const std::string& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0) return read_png(path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') return decode_pgm(bytes);
  throw FormatError("'" + path + "' is neither PGM (P5) nor PNG");
}

}  // namespace mspm
