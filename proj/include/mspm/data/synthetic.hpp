#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mspm/data/patch_set.hpp"
#include "mspm/random.hpp"

namespace mspm {

struct SyntheticOptions {
  int size = 64;
  int blur_radius = 2;
  int blur_passes = 3;
  int min_shapes = 3;
  int max_shapes = 6;
  float gamma_lo = 0.5f;
  float gamma_hi = 2.0f;
  float noise_std = 0.02f;
};

namespace detail {

// Separable box blur with edge clamping.
inline void box_blur(std::vector<float>& img, int size, int radius) {
  std::vector<float> tmp(img.size());
  const float norm = 1.0f / static_cast<float>(2 * radius + 1);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      float s = 0.0f;
      for (int d = -radius; d <= radius; ++d) s += img[y * size + std::clamp(x + d, 0, size - 1)];
      tmp[y * size + x] = s * norm;
    }
  }
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      float s = 0.0f;
      for (int d = -radius; d <= radius; ++d) s += tmp[std::clamp(y + d, 0, size - 1) * size + x];
      img[y * size + x] = s * norm;
    }
  }
}

// Smoothed noise texture with a few flat rectangles and discs, in [0, 1].
inline std::vector<float> synthetic_base(Rng& rng, const SyntheticOptions& o) {
  const int n = o.size;
  std::vector<float> img(static_cast<std::size_t>(n) * n);
  for (auto& v : img) v = rng.normal();
  for (int i = 0; i < o.blur_passes; ++i) box_blur(img, n, o.blur_radius);
  double mean = 0.0, sq = 0.0;
  for (float v : img) {
    mean += v;
    sq += static_cast<double>(v) * v;
  }
  mean /= static_cast<double>(img.size());
  const double sd = std::sqrt(std::max(sq / static_cast<double>(img.size()) - mean * mean, 1e-12));
  for (auto& v : img) v = static_cast<float>(0.5 + 0.15 * (v - mean) / sd);
  const auto shapes = rng.integer(o.min_shapes, o.max_shapes);
  for (std::int64_t s = 0; s < shapes; ++s) {
    const bool disc = rng.bernoulli(0.5);
    const float level = rng.uniform();
    const float cx = rng.uniform(0.0f, static_cast<float>(n)), cy = rng.uniform(0.0f, static_cast<float>(n));
    const float rx = rng.uniform(4.0f, n / 3.0f), ry = disc ? rx : rng.uniform(4.0f, n / 3.0f);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        const float dx = (x + 0.5f - cx) / rx, dy = (y + 0.5f - cy) / ry;
        const bool inside = disc ? dx * dx + dy * dy <= 1.0f : std::fabs(dx) <= 1.0f && std::fabs(dy) <= 1.0f;
        if (inside) img[y * n + x] = 0.6f * level + 0.4f * img[y * n + x];
      }
    }
  }
  for (auto& v : img) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

// Second modality: inverted gamma remap 1 - v^gamma, a light blur and
// additive noise.
inline std::vector<float> remap_modality(std::vector<float> img, Rng& rng, const SyntheticOptions& o) {
  const float gamma = rng.uniform(o.gamma_lo, o.gamma_hi);
  for (auto& v : img) v = 1.0f - std::pow(v, gamma);
  box_blur(img, o.size, 1);
  for (auto& v : img) v = std::clamp(v + rng.normal(0.0f, o.noise_std), 0.0f, 1.0f);
  return img;
}

inline std::vector<std::uint8_t> quantize(const std::vector<float>& img) {
  std::vector<std::uint8_t> out(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = static_cast<std::uint8_t>(std::lround(img[i] * 255.0f));
  return out;
}

}  // namespace detail

// Labeled single-channel pairs. Matches share a base texture between the two
// modalities, non-matches draw B from a different base. round(n *
// negative_fraction) pairs are non-matches, placed by a seeded shuffle.
inline PatchPairSet gen_synthetic(std::size_t n_pairs, std::uint64_t seed, float negative_fraction,
                                  const SyntheticOptions& opt = {}) {
  if (n_pairs < 1) throw InvalidArgument("n_pairs must be at least 1");
  if (!(negative_fraction >= 0.0f && negative_fraction <= 1.0f)) {
    throw InvalidArgument("negative_fraction must lie in [0, 1]");
  }
  Rng rng(seed);
  const auto n_neg = static_cast<std::size_t>(std::lround(static_cast<double>(n_pairs) * negative_fraction));
  std::vector<Label> labels(n_pairs, Label::Match);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_neg), Label::NonMatch);
  std::shuffle(labels.begin(), labels.end(), rng.engine());
  PatchPairSet set;
  set.height = set.width = opt.size;
  set.channels = 1;
  set.labeled = true;
  set.pairs.reserve(n_pairs);
  for (std::size_t i = 0; i < n_pairs; ++i) {
    Rng pr(rng.next());
    const auto base = detail::synthetic_base(pr, opt);
    const auto other = labels[i] == Label::Match ? base : detail::synthetic_base(pr, opt);
    set.pairs.push_back({detail::quantize(base), detail::quantize(detail::remap_modality(other, pr, opt)), labels[i]});
  }
  return set;
}

}  // namespace mspm
