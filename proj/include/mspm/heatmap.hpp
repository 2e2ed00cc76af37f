#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mspm/data/image_io.hpp"
#include "mspm/model/model.hpp"

namespace mspm {

inline constexpr std::int64_t kHeatmapScale = 8;
inline constexpr float kDegenerateRange = 1e-12f;

// Token query row of the last encoder layer at the s x s scale, self entry
// dropped, averaged over heads. Returns s*s values in raster order.
inline std::vector<float> token_attention(const AttentionRecord& record, std::int64_t sample = 0,
                                          std::int64_t scale = kHeatmapScale) {
  if (!record.has_scale(scale)) {
    throw InvalidArgument("attention record has no " + std::to_string(scale) + "x" + std::to_string(scale) + " scale");
  }
  const Tensor& w = record.last_layer(scale);
  const std::int64_t n = w.dim(0), heads = w.dim(1), len = w.dim(2);
  if (len != scale * scale + 1) throw DimensionMismatch("attention length does not match the scale");
  if (sample < 0 || sample >= n) throw InvalidArgument("sample index out of range");
  std::vector<float> map(static_cast<std::size_t>(scale * scale), 0.0f);
  const auto d = w.data();
  for (std::int64_t h = 0; h < heads; ++h) {
    const std::int64_t row = ((sample * heads + h) * len) * len;
    for (std::int64_t j = 1; j < len; ++j) map[j - 1] += d[row + j];
  }
  for (auto& v : map) v /= static_cast<float>(heads);
  return map;
}

// Min-max to [0, 1]; a range below 1e-12 maps everything to 0.
inline std::vector<float> minmax_normalize(std::vector<float> v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const float a = *lo, range = *hi - *lo;
  for (auto& x : v) x = range < kDegenerateRange ? 0.0f : (x - a) / range;
  return v;
}

// Bilinear resize of a square map with corner pixels aligned.
inline std::vector<float> upsample_bilinear(const std::vector<float>& src, int in, int out) {
  if (in < 1 || out < 1 || src.size() != static_cast<std::size_t>(in) * in) {
    throw InvalidArgument("upsample_bilinear: bad sizes");
  }
  std::vector<float> dst(static_cast<std::size_t>(out) * out);
  const double scale = out > 1 ? static_cast<double>(in - 1) / (out - 1) : 0.0;
  for (int y = 0; y < out; ++y) {
    const double fy = y * scale;
    const int y0 = std::min(static_cast<int>(fy), in - 1), y1 = std::min(y0 + 1, in - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out; ++x) {
      const double fx = x * scale;
      const int x0 = std::min(static_cast<int>(fx), in - 1), x1 = std::min(x0 + 1, in - 1);
      const double wx = fx - x0;
      const double top = (1 - wx) * src[y0 * in + x0] + wx * src[y0 * in + x1];
      const double bot = (1 - wx) * src[y1 * in + x0] + wx * src[y1 * in + x1];
      dst[static_cast<std::size_t>(y) * out + x] = static_cast<float>((1 - wy) * top + wy * bot);
    }
  }
  return dst;
}

inline std::vector<float> heatmap_values(const AttentionRecord& record, std::int64_t sample = 0, int size = 64) {
  const auto m = minmax_normalize(token_attention(record, sample));
  return upsample_bilinear(m, static_cast<int>(kHeatmapScale), size);
}

inline Image heatmap_image(const std::vector<float>& values, int size) {
  Image img{size, size, 1, std::vector<std::uint8_t>(values.size())};
  for (std::size_t i = 0; i < values.size(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(values[i], 0.0f, 1.0f) * 255.0f));
  }
  return img;
}

// Blue-cyan-yellow-red ramp.
inline std::array<std::uint8_t, 3> heat_color(float v) {
  static constexpr float stops[4][3] = {{0, 0, 255}, {0, 255, 255}, {255, 255, 0}, {255, 0, 0}};
  const float t = std::clamp(v, 0.0f, 1.0f) * 3.0f;
  const int i = std::min(static_cast<int>(t), 2);
  const float f = t - static_cast<float>(i);
  std::array<std::uint8_t, 3> c{};
  for (int k = 0; k < 3; ++k) c[k] = static_cast<std::uint8_t>(std::lround(stops[i][k] * (1 - f) + stops[i + 1][k] * f));
  return c;
}

inline Image heatmap_overlay(const std::vector<float>& values, const Image& patch) {
  if (patch.width * patch.height != static_cast<int>(values.size())) {
    throw DimensionMismatch("overlay patch does not match the heatmap size");
  }
  Image out{patch.width, patch.height, 3, std::vector<std::uint8_t>(values.size() * 3)};
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto c = heat_color(values[i]);
    for (int k = 0; k < 3; ++k) {
      const int src = patch.pixels[i * patch.channels + (patch.channels == 3 ? k : 0)];
      out.pixels[i * 3 + k] = static_cast<std::uint8_t>((c[k] + src + 1) / 2);
    }
  }
  return out;
}

// Writes the 64x64 grayscale map as PGM and, when requested, a color overlay
// PNG over `patch`.
inline std::vector<float> export_heatmap(const AttentionRecord& record, const Image& patch, const std::string& pgm_path,
                                         const std::optional<std::string>& overlay_png = std::nullopt,
                                         std::int64_t sample = 0) {
  if (patch.width != patch.height) throw InvalidArgument("heatmap patch must be square");
  const auto values = heatmap_values(record, sample, patch.width);
  write_pgm(pgm_path, heatmap_image(values, patch.width));
  if (overlay_png) write_png(*overlay_png, heatmap_overlay(values, patch));
  return values;
}

}  // namespace mspm
