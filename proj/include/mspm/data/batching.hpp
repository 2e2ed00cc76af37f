#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "mspm/data/patch_set.hpp"
#include "mspm/random.hpp"
#include "mspm/tensor.hpp"

namespace mspm {

enum class Normalization { PerPatch, Dataset };

inline constexpr float kStdFloor = 1e-6f;

struct BatchSpec {
  int batch_size = 16;
  std::uint64_t seed = 0;
  bool shuffle = true;
  bool hflip = true;
  bool rot90 = true;
  bool drop_last = true;
  bool matches_only = true;
  Normalization normalization = Normalization::PerPatch;

  // Ordered, unaugmented, keeps the last partial batch, accepts any label.
  static BatchSpec evaluation(int batch_size) {
    BatchSpec s;
    s.batch_size = batch_size;
    s.shuffle = s.hflip = s.rot90 = s.drop_last = s.matches_only = false;
    return s;
  }
};

struct Batch {
  Tensor x;  // [b, C, H, W], modality A
  Tensor y;  // [b, C, H, W], modality B
  std::vector<std::size_t> indices;
};

// Mean and std over every pixel of one modality.
struct ModalityStats {
  float mean = 0.0f;
  float std = 1.0f;
};

struct DatasetStats {
  ModalityStats a, b;
};

inline DatasetStats dataset_stats(const PatchPairSet& set) {
  auto stats = [&](bool first) {
    double s = 0.0, sq = 0.0, n = 0.0;
    for (const auto& p : set.pairs) {
      for (auto v : first ? p.a : p.b) {
        s += v;
        sq += static_cast<double>(v) * v;
      }
      n += static_cast<double>(set.patch_bytes());
    }
    const double mean = s / n;
    const double var = std::max(sq / n - mean * mean, 0.0);
    return ModalityStats{static_cast<float>(mean), std::max(static_cast<float>(std::sqrt(var)), kStdFloor)};
  };
  if (set.pairs.empty()) throw InvalidArgument("cannot compute statistics of an empty set");
  return {stats(true), stats(false)};
}

namespace detail {

// Source pixel for output (y, x) after an optional horizontal flip followed by
// `quarter_turns` counter-clockwise rotations of a square patch.
inline std::pair<int, int> transformed_source(int y, int x, int n, bool flip, int quarter_turns) {
  for (int k = 0; k < quarter_turns; ++k) {
    const int sy = x, sx = n - 1 - y;
    y = sy;
    x = sx;
  }
  if (flip) x = n - 1 - x;
  return {y, x};
}

// HWC bytes to CHW floats with the given spatial transform, then
// standardization either per patch or with fixed statistics.
inline void load_patch(const std::vector<std::uint8_t>& src, const PatchPairSet& set, bool flip, int turns,
                       const ModalityStats* fixed, float* out) {
  const int h = set.height, w = set.width, c = set.channels;
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const auto [sy, sx] = (flip || turns) ? transformed_source(y, x, w, flip, turns) : std::pair{y, x};
        out[(static_cast<std::size_t>(ch) * h + y) * w + x] = src[(static_cast<std::size_t>(sy) * w + sx) * c + ch];
      }
    }
  }
  const std::size_t n = set.patch_bytes();
  float mean, sd;
  if (fixed) {
    mean = fixed->mean;
    sd = fixed->std;
  } else {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += out[i];
    const double m = s / static_cast<double>(n);
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) sq += (out[i] - m) * (out[i] - m);
    mean = static_cast<float>(m);
    sd = std::max(static_cast<float>(std::sqrt(sq / static_cast<double>(n))), kStdFloor);
  }
  for (std::size_t i = 0; i < n; ++i) out[i] = (out[i] - mean) / sd;
}

}  // namespace detail

// Single-consumer batch sequence over a pair set. The order and the
// augmentation draws depend only on the spec seed.
class BatchStream {
 public:
  BatchStream(const PatchPairSet& set, BatchSpec spec) : set_(set), spec_(spec), rng_(spec.seed) {
    if (set.pairs.empty()) throw InvalidArgument("cannot batch an empty set");
    if (spec.batch_size < 1) throw InvalidArgument("batch_size must be positive");
    if ((spec.hflip || spec.rot90) && set.height != set.width) {
      throw InvalidArgument("augmentation needs square patches");
    }
    if (spec.matches_only) {
      for (const auto& p : set.pairs) {
        if (p.label == Label::NonMatch) throw InvalidArgument("training batches take matching pairs only");
      }
    }
    if (spec.normalization == Normalization::Dataset) stats_ = dataset_stats(set);
    order_.resize(set.pairs.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (spec.shuffle) std::shuffle(order_.begin(), order_.end(), rng_.engine());
  }

  std::size_t batch_count() const {
    const auto n = order_.size(), b = static_cast<std::size_t>(spec_.batch_size);
    return spec_.drop_last ? n / b : (n + b - 1) / b;
  }

  bool next(Batch& batch) {
    if (cursor_ >= batch_count()) return false;
    const auto b = static_cast<std::size_t>(spec_.batch_size);
    const auto begin = cursor_ * b;
    const auto end = std::min(begin + b, order_.size());
    ++cursor_;
    const auto count = static_cast<std::int64_t>(end - begin);
    const Shape shape{count, set_.channels, set_.height, set_.width};
    batch.x = Tensor::zeros(shape);
    batch.y = Tensor::zeros(shape);
    batch.indices.assign(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                         order_.begin() + static_cast<std::ptrdiff_t>(end));
    auto xd = batch.x.data();
    auto yd = batch.y.data();
    const std::size_t pb = set_.patch_bytes();
    const bool fixed = spec_.normalization == Normalization::Dataset;
    for (std::size_t i = 0; i < batch.indices.size(); ++i) {
      const auto& pair = set_.pairs[batch.indices[i]];
      const bool flip = spec_.hflip && rng_.bernoulli(0.5);
      const int turns = spec_.rot90 ? static_cast<int>(rng_.integer(0, 3)) : 0;
      detail::load_patch(pair.a, set_, flip, turns, fixed ? &stats_.a : nullptr, xd.data() + i * pb);
      detail::load_patch(pair.b, set_, flip, turns, fixed ? &stats_.b : nullptr, yd.data() + i * pb);
    }
    return true;
  }

 private:
  const PatchPairSet& set_;
  BatchSpec spec_;
  Rng rng_;
  DatasetStats stats_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

inline std::vector<Batch> make_batches(const PatchPairSet& set, const BatchSpec& spec) {
  BatchStream stream(set, spec);
  std::vector<Batch> out;
  Batch b;
  while (stream.next(b)) out.push_back(b);
  return out;
}

}  // namespace mspm
