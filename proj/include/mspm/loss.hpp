#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mspm/errors.hpp"
#include "mspm/ops.hpp"
#include "mspm/random.hpp"

namespace mspm {

enum class MiningStrategy { Random, Hardest };

inline std::string to_string(MiningStrategy s) { return s == MiningStrategy::Random ? "random" : "hardest"; }

struct MiningConfig {
  MiningStrategy strategy = MiningStrategy::Hardest;
  float margin = 1.0f;
  float duplicate_floor = 0.0f;  // candidates closer than this are ignored

  void validate() const {
    if (!(margin > 0.0f)) throw InvalidArgument("margin must be positive");
    if (!(duplicate_floor >= 0.0f)) throw InvalidArgument("duplicate_floor must be non-negative");
  }
};

struct MinedNegatives {
  std::vector<std::int64_t> for_anchor;    // closest B_j to A_i, j != i
  std::vector<std::int64_t> for_positive;  // closest A_j to B_i, j != i
};

// D[i][j] = ||A_i - B_j|| from the Gram expansion in f64, with negative
// radicands clamped to zero. Not differentiable; used for mining only.
template <typename T>
BasicTensor<T> pairwise_distances(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw InvalidArgument("pairwise_distances: incompatible banks " + to_string(a.shape()) + " and " +
                          to_string(b.shape()));
  }
  const std::int64_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  auto sq = [d](const BasicTensor<T>& t, std::int64_t i) {
    double s = 0.0;
    for (std::int64_t k = 0; k < d; ++k) s += static_cast<double>(t[i * d + k]) * t[i * d + k];
    return s;
  };
  std::vector<double> na(static_cast<std::size_t>(n)), nb(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < n; ++i) na[i] = sq(a, i);
  for (std::int64_t j = 0; j < m; ++j) nb[j] = sq(b, j);
  BasicTensor<T> out({n, m});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < m; ++j) {
      double dot = 0.0;
      for (std::int64_t k = 0; k < d; ++k) dot += static_cast<double>(a[i * d + k]) * b[j * d + k];
      const double sq_dist = na[i] + nb[j] - 2.0 * dot;
      out[i * m + j] = static_cast<T>(std::sqrt(sq_dist < 0.0 ? 0.0 : sq_dist));
    }
  }
  return out;
}

// HardNet-style in-batch mining on a square distance matrix. Ties go to the
// lowest index. When the floor excludes every candidate of a row, the plain
// argmin over j != i is used.
template <typename T>
MinedNegatives mine_hard_negatives(const BasicTensor<T>& dist, const MiningConfig& cfg) {
  if (dist.rank() != 2 || dist.dim(0) != dist.dim(1)) {
    throw InvalidArgument("mine_hard_negatives expects a square matrix, got " + to_string(dist.shape()));
  }
  const std::int64_t n = dist.dim(0);
  if (n < 2) throw InvalidArgument("mining needs at least 2 pairs");
  auto pick = [&](std::int64_t i, bool by_row) {
    std::int64_t best = -1, fallback = -1;
    T best_d = std::numeric_limits<T>::infinity(), fallback_d = std::numeric_limits<T>::infinity();
    for (std::int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const T d = by_row ? dist[i * n + j] : dist[j * n + i];
      if (d < fallback_d || fallback < 0) {
        fallback_d = d;
        fallback = j;
      }
      if (d >= cfg.duplicate_floor && (d < best_d || best < 0)) {
        best_d = d;
        best = j;
      }
    }
    return best >= 0 ? best : fallback;
  };
  MinedNegatives r;
  for (std::int64_t i = 0; i < n; ++i) {
    r.for_anchor.push_back(pick(i, true));
    r.for_positive.push_back(pick(i, false));
  }
  return r;
}

// Uniform draw of one j != i per row.
inline std::vector<std::int64_t> random_negatives(std::int64_t n, Rng& rng) {
  if (n < 2) throw InvalidArgument("mining needs at least 2 pairs");
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t j = rng.integer(0, n - 2);
    if (j >= i) ++j;
    idx[i] = j;
  }
  return idx;
}

// sum_i max(0, m + d(a_i, p_i) - d(a_i, p_neg[i]))
template <typename T>
BasicTensor<T> triplet_loss(const BasicTensor<T>& a, const BasicTensor<T>& p, const std::vector<std::int64_t>& neg,
                            float margin) {
  if (a.rank() != 2 || a.shape() != p.shape()) {
    throw InvalidArgument("triplet_loss: banks " + to_string(a.shape()) + " and " + to_string(p.shape()));
  }
  const std::int64_t n = a.dim(0);
  if (static_cast<std::int64_t>(neg.size()) != n) throw InvalidArgument("triplet_loss: one negative per anchor needed");
  for (std::int64_t i = 0; i < n; ++i) {
    if (neg[i] < 0 || neg[i] >= n || neg[i] == i) {
      throw InvalidArgument("triplet_loss: invalid negative index " + std::to_string(neg[i]) + " for anchor " +
                            std::to_string(i));
    }
  }
  const auto d_pos = row_distance(a, p);
  const auto d_neg = row_distance(a, gather_rows(p, neg));
  return sum(relu(add_scalar(sub(d_pos, d_neg), margin)));
}

template <typename T>
BasicTensor<T> symmetric_triplet_loss(const BasicTensor<T>& x, const BasicTensor<T>& y, const MiningConfig& cfg,
                                      Rng* rng = nullptr) {
  cfg.validate();
  if (x.rank() != 2 || x.shape() != y.shape()) {
    throw InvalidArgument("symmetric_triplet_loss: banks " + to_string(x.shape()) + " and " + to_string(y.shape()));
  }
  MinedNegatives neg;
  if (cfg.strategy == MiningStrategy::Hardest) {
    neg = mine_hard_negatives(pairwise_distances(x, y), cfg);
  } else {
    if (rng == nullptr) throw InvalidArgument("random mining needs a random generator");
    neg.for_anchor = random_negatives(x.dim(0), *rng);
    neg.for_positive = random_negatives(x.dim(0), *rng);
  }
  return add(triplet_loss(x, y, neg.for_anchor, cfg.margin), triplet_loss(y, x, neg.for_positive, cfg.margin));
}

}  // namespace mspm
