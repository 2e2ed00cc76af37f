#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mspm/model/config.hpp"
#include "mspm/nn/param_store.hpp"
#include "mspm/ops.hpp"

namespace mspm {

// Standard sinusoidal table: entry (p, 2i) = sin(p / 10000^(2i/d)),
// (p, 2i+1) = cos of the same angle.
template <typename T>
BasicTensor<T> sinusoid_table(std::int64_t n, std::int64_t d) {
  BasicTensor<T> t({n, d});
  for (std::int64_t p = 0; p < n; ++p) {
    for (std::int64_t c = 0; c < d; ++c) {
      const double freq = std::pow(10000.0, -static_cast<double>(c - c % 2) / static_cast<double>(d));
      const double a = static_cast<double>(p) * freq;
      t[p * d + c] = static_cast<T>(c % 2 == 0 ? std::sin(a) : std::cos(a));
    }
  }
  return t;
}

// Positional code of one h x w scale. The 2d variants hold a row table
// indexed by i and a column table indexed by j, each dim/2 wide; cell (i, j)
// gets [row(i); col(j)]. The 1d variants hold one table over the row-major
// cell index.
template <typename T>
struct PositionalEncoding {
  PosEncoding variant = PosEncoding::None;
  std::int64_t h = 0, w = 0, dim = 0;
  BasicTensor<T> row, col;  // 2d variants
  BasicTensor<T> table;     // 1d variants

  PositionalEncoding() = default;
  PositionalEncoding(BasicParamStore<T>& store, const std::string& prefix, PosEncoding v, std::int64_t h_,
                     std::int64_t w_, std::int64_t dim_)
      : variant(v), h(h_), w(w_), dim(dim_) {
    if (h < 1 || w < 1) throw InvalidArgument("positional encoding needs a non-empty grid");
    switch (variant) {
      case PosEncoding::Learned2d:
      case PosEncoding::Fixed2d:
        if (dim % 2 != 0) throw InvalidArgument("2d positional encoding needs an even width, got " + std::to_string(dim));
        if (variant == PosEncoding::Learned2d) {
          row = store.add(prefix + "/row", {h, dim / 2}, ParamRole::Embedding);
          col = store.add(prefix + "/col", {w, dim / 2}, ParamRole::Embedding);
        } else {
          row = sinusoid_table<T>(h, dim / 2);
          col = sinusoid_table<T>(w, dim / 2);
        }
        break;
      case PosEncoding::Learned1d:
        table = store.add(prefix + "/table", {h * w, dim}, ParamRole::Embedding);
        break;
      case PosEncoding::Fixed1d:
        table = sinusoid_table<T>(h * w, dim);
        break;
      case PosEncoding::None:
        break;
    }
  }

  bool enabled() const { return variant != PosEncoding::None; }
};

// The [h*w, dim] encoding of every cell in row-major order, or an undefined
// tensor for variant none.
template <typename T>
BasicTensor<T> build_positional_encoding(const PositionalEncoding<T>& pe) {
  if (!pe.enabled()) return {};
  if (pe.variant == PosEncoding::Learned1d || pe.variant == PosEncoding::Fixed1d) return pe.table;
  std::vector<std::int64_t> rows, cols;
  for (std::int64_t i = 0; i < pe.h; ++i) {
    for (std::int64_t j = 0; j < pe.w; ++j) {
      rows.push_back(i);
      cols.push_back(j);
    }
  }
  return concat<T>({gather_rows(pe.row, rows), gather_rows(pe.col, cols)}, 1);
}

// map[N, C, h, w] -> [N, 1 + h*w, C]: the token at index 0 with no positional
// code, then the cells in row-major order (i outer, j inner) plus their
// encoding.
template <typename T>
BasicTensor<T> flatten_with_token(const BasicTensor<T>& map, const PositionalEncoding<T>& pe,
                                  const BasicTensor<T>& token) {
  if (map.rank() != 4) throw InvalidArgument("flatten_with_token expects a [N, C, h, w] map");
  const std::int64_t n = map.dim(0), c = map.dim(1), h = map.dim(2), w = map.dim(3);
  if (token.numel() != c) {
    throw InvalidArgument("map has " + std::to_string(c) + " channels but the token has " +
                          std::to_string(token.numel()));
  }
  if (pe.enabled() && (pe.h != h || pe.w != w || pe.dim != c)) {
    throw InvalidArgument("positional encoding does not match map " + to_string(map.shape()));
  }
  auto seq = reshape(permute(map, {0, 2, 3, 1}), {n, h * w, c});
  if (pe.enabled()) seq = add(seq, build_positional_encoding(pe));
  auto tok = reshape(repeat_leading(reshape(token, {c}), n), {n, 1, c});
  return concat<T>({tok, seq}, 1);
}

}  // namespace mspm
