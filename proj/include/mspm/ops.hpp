#pragma once

// Differentiable primitives. Every op computes its forward value eagerly and,
// when a tape is active and an input carries gradient, records a closure that
// pushes the output gradient back to its inputs.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "mspm/random.hpp"
#include "mspm/tensor.hpp"

namespace mspm {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Extents of a shape around one axis: (outer, axis length, inner).
struct AxisSplit {
  std::int64_t outer = 1;
  std::int64_t len = 1;
  std::int64_t inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw InvalidArgument(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                          to_string(b.shape()));
  }
}

// b broadcasts against a when b's shape is a suffix of a's shape.
inline bool is_suffix_shape(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

template <typename T, typename Container>
void accumulate(T* dst, const Container& src) {
  for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
}

// Hash of the branch taken at every non-differentiable point (relu, hinge)
// during a forward pass, collected only while a BranchTrace is alive. Two
// evaluations with equal hashes lie on the same smooth piece.
struct BranchTraceState {
  bool active = false;
  std::uint64_t hash = 0;
};

inline thread_local BranchTraceState branch_trace;

inline void trace_branch(bool taken) {
  if (branch_trace.active) branch_trace.hash = (branch_trace.hash ^ (taken ? 0x9e3779b97f4a7c15ULL : 0x7f4a7c15ULL)) * 0x100000001b3ULL;
}

}  // namespace detail

class BranchTrace {
 public:
  BranchTrace() : prev_(detail::branch_trace) { detail::branch_trace = {true, 0xcbf29ce484222325ULL}; }
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;
  ~BranchTrace() { detail::branch_trace = prev_; }

  std::uint64_t signature() const { return detail::branch_trace.hash; }

 private:
  detail::BranchTraceState prev_;
};

template <typename T>
using Scalar = std::type_identity_t<T>;

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw InvalidArgument("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  BasicTensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (Tape* tape = detail::recording_tape({x})) {
    tape->record("reshape", {x}, out, [xi = x.impl().get(), oi = out.impl().get()] {
      if (T* g = detail::grad_sink(xi)) detail::accumulate(g, oi->grad);
    });
  }
  return out;
}

// Collapses every axis from `start` onwards into one.
template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& x, int start = 1) {
  const std::size_t a = x.normalize_axis(start);
  Shape s(x.shape().begin(), x.shape().begin() + static_cast<std::ptrdiff_t>(a));
  std::int64_t rest = 1;
  for (std::size_t i = a; i < x.rank(); ++i) rest *= x.shape()[i];
  s.push_back(rest);
  return reshape(x, std::move(s));
}

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<int>& axes) {
  const std::size_t r = x.rank();
  if (axes.size() != r) throw InvalidArgument("permute: axis count does not match rank");
  std::vector<bool> seen(r, false);
  for (int a : axes) {
    if (a < 0 || static_cast<std::size_t>(a) >= r || seen[static_cast<std::size_t>(a)]) {
      throw InvalidArgument("permute: invalid axis list");
    }
    seen[static_cast<std::size_t>(a)] = true;
  }
  Shape out_shape(r);
  std::vector<std::int64_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.shape()[i];
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.shape()[static_cast<std::size_t>(axes[i])];
  // src[k] is the flat input index of output element k
  const auto n = static_cast<std::size_t>(x.numel());
  std::vector<std::int64_t> src(n);
  std::vector<std::int64_t> idx(r, 0);
  for (std::size_t k = 0; k < n; ++k) {
    std::int64_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_stride[static_cast<std::size_t>(axes[i])];
    src[k] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  BasicTensor<T> out(out_shape);
  for (std::size_t k = 0; k < n; ++k) out[k] = x[static_cast<std::size_t>(src[k])];
  if (Tape* tape = detail::recording_tape({x})) {
    tape->record("permute", {x}, out, [xi = x.impl().get(), oi = out.impl().get(), src = std::move(src)] {
      if (T* g = detail::grad_sink(xi)) {
        for (std::size_t k = 0; k < src.size(); ++k) g[src[k]] += oi->grad[k];
      }
    });
  }
  return out;
}

// Stacks `n` copies of x along a new leading axis.
template <typename T>
BasicTensor<T> repeat_leading(const BasicTensor<T>& x, std::int64_t n) {
  Shape s{n};
  s.insert(s.end(), x.shape().begin(), x.shape().end());
  BasicTensor<T> out(s);
  const auto m = static_cast<std::size_t>(x.numel());
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy(x.data().begin(), x.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i) * static_cast<std::ptrdiff_t>(m));
  }
  if (Tape* tape = detail::recording_tape({x})) {
    tape->record("repeat_leading", {x}, out, [xi = x.impl().get(), oi = out.impl().get(), m] {
      if (T* g = detail::grad_sink(xi)) {
        for (std::size_t k = 0; k < oi->grad.size(); ++k) g[k % m] += oi->grad[k];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis) {
  if (parts.empty()) throw InvalidArgument("concat: no inputs");
  const std::size_t a = parts[0].normalize_axis(axis);
  Shape out_shape = parts[0].shape();
  out_shape[a] = 0;
  for (const auto& p : parts) {
    if (p.rank() != out_shape.size()) throw InvalidArgument("concat: rank mismatch");
    for (std::size_t i = 0; i < p.rank(); ++i) {
      if (i != a && p.shape()[i] != parts[0].shape()[i]) {
        throw InvalidArgument("concat: shape mismatch " + to_string(p.shape()) + " vs " +
                              to_string(parts[0].shape()));
      }
    }
    out_shape[a] += p.shape()[a];
  }
  const auto split = detail::split_at(out_shape, a);
  BasicTensor<T> out(out_shape);
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::int64_t chunk = p.shape()[a] * split.inner;
    for (std::int64_t o = 0; o < split.outer; ++o) {
      std::copy_n(p.data().begin() + o * chunk, chunk, out.data().begin() + (o * split.len + off) * split.inner);
    }
    off += p.shape()[a];
  }
  std::span<const BasicTensor<T>> inputs(parts);
  if (Tape* tape = detail::recording_tape(inputs)) {
    std::vector<detail::TensorImpl<T>*> ins;
    for (const auto& p : parts) ins.push_back(p.impl().get());
    tape->record("concat", inputs, out,
                 [ins = std::move(ins), offsets = std::move(offsets), split, a, oi = out.impl().get()] {
                   for (std::size_t pi = 0; pi < ins.size(); ++pi) {
                     T* g = detail::grad_sink(ins[pi]);
                     if (!g) continue;
                     const std::int64_t chunk = ins[pi]->shape[a] * split.inner;
                     for (std::int64_t o = 0; o < split.outer; ++o) {
                       const T* src = oi->grad.data() + (o * split.len + offsets[pi]) * split.inner;
                       for (std::int64_t k = 0; k < chunk; ++k) g[o * chunk + k] += src[k];
                     }
                   }
                 });
  }
  return out;
}

// Contiguous range [start, start + length) along an axis.
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, int axis, std::int64_t start, std::int64_t length) {
  const std::size_t a = x.normalize_axis(axis);
  if (start < 0 || length < 0 || start + length > x.shape()[a]) {
    throw InvalidArgument("slice: range out of bounds for shape " + to_string(x.shape()));
  }
  const auto split = detail::split_at(x.shape(), a);
  Shape s = x.shape();
  s[a] = length;
  BasicTensor<T> out(s);
  const std::int64_t chunk = length * split.inner;
  for (std::int64_t o = 0; o < split.outer; ++o) {
    std::copy_n(x.data().begin() + (o * split.len + start) * split.inner, chunk, out.data().begin() + o * chunk);
  }
  if (Tape* tape = detail::recording_tape({x})) {
    tape->record("slice", {x}, out, [xi = x.impl().get(), oi = out.impl().get(), split, start, chunk] {
      T* g = detail::grad_sink(xi);
      if (!g) return;
      for (std::int64_t o = 0; o < split.outer; ++o) {
        T* dst = g + (o * split.len + start) * split.inner;
        const T* src = oi->grad.data() + o * chunk;
        for (std::int64_t k = 0; k < chunk; ++k) dst[k] += src[k];
      }
    });
  }
  return out;
}

// Rows idx[i] of a rank-2 tensor.
template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, const std::vector<std::int64_t>& idx) {
  if (x.rank() != 2) throw InvalidArgument("gather_rows: expected rank-2 input");
  const std::int64_t n = x.dim(0), d = x.dim(1);
  for (auto i : idx) {
    if (i < 0 || i >= n) throw InvalidArgument("gather_rows: index " + std::to_string(i) + " out of range");
  }
  BasicTensor<T> out({static_cast<std::int64_t>(idx.size()), d});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(x.data().begin() + idx[r] * d, d, out.data().begin() + static_cast<std::int64_t>(r) * d);
  }
  if (Tape* tape = detail::recording_tape({x})) {
    tape->record("gather_rows", {x}, out, [xi = x.impl().get(), oi = out.impl().get(), idx, d] {
      T* g = detail::grad_sink(xi);
      if (!g) return;
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::int64_t k = 0; k < d; ++k) g[idx[r] * d + k] += oi->grad[static_cast<std::int64_t>(r) * d + k];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

// a + b, where b's shape equals a's shape or a suffix of it.
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (!detail::is_suffix_shape(a.shape(), b.shape())) {
    throw InvalidArgument("add: cannot broadcast " + to_string(b.shape()) + " onto " + to_string(a.shape()));
  }
  const auto nb = static_cast<std::size_t>(b.numel());
  BasicTensor<T> out(a.shape());
  for (std::size_t k = 0; k < static_cast<std::size_t>(a.numel()); ++k) out[k] = a[k] + b[k % nb];
  if (Tape* tape = detail::recording_tape({a, b})) {
    tape->record("add", {a, b}, out, [ai = a.impl().get(), bi = b.impl().get(), oi = out.impl().get(), nb] {
      const auto& go = oi->grad;
      if (T* g = detail::grad_sink(ai)) detail::accumulate(g, go);
      if (T* g = detail::grad_sink(bi)) {
        for (std::size_t k = 0; k < go.size(); ++k) g[k % nb] += go[k];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  BasicTensor<T> out(a.shape());
  for (std::size_t k = 0; k < static_cast<std::size_t>(a.numel()); ++k) out[k] = a[k] - b[k];
  if (Tape* tape = detail::recording_tape({a, b})) {
    tape->record("sub", {a, b}, out, [ai = a.impl().get(), bi = b.impl().get(), oi = out.impl().get()] {
      const auto& go = oi->grad;
      if (T* g = detail::grad_sink(ai)) detail::accumulate(g, go);
      if (T* g = detail::grad_sink(bi)) {
        for (std::size_t k = 0; k < go.size(); ++k) g[k] -= go[k];
      }
    });
  }
  return out;
}

// a * b elementwise; b equal-shaped or a suffix broadcast.
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (!detail::is_suffix_shape(a.shape(), b.shape())) {
    throw InvalidArgument("mul: cannot broadcast " + to_string(b.shape()) + " onto " + to_string(a.shape()));
  }
  const auto nb = static_cast<std::size_t>(b.numel());
  BasicTensor<T> out(a.shape());
  for (std::size_t k = 0; k < static_cast<std::size_t>(a.numel()); ++k) out[k] = a[k] * b[k % nb];
  if (Tape* tape = detail::recording_tape({a, b})) {
    tape->record("mul", {a, b}, out, [ai = a.impl().get(), bi = b.impl().get(), oi = out.impl().get(), nb] {
      const auto& go = oi->grad;
      if (T* g = detail::grad_sink(ai)) {
        for (std::size_t k = 0; k < go.size(); ++k) g[k] += go[k] * bi->data[k % nb];
      }
      if (T* g = detail::grad_sink(bi)) {
        for (std::size_t k = 0; k < go.size(); ++k) g[k % nb] += go[k] * ai->data[k];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, Scalar<T> s) {
  BasicTensor<T> out(x.shape());
  for (std::size_t k = 0; k < static_cast<std::size_t>(x.numel()); ++k) out[k] = x[k] * s;
  if (Tape* tape = detail::recording_tape({x})) {
    tape->record("scale", {x}, out, [xi = x.impl().get(), oi = out.impl().get(), s] {
      if (T* g = detail::grad_sink(xi)) {
        for (std::size_t k = 0; k < oi->grad.size(); ++k) g[k] += oi->grad[k] * s;
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, Scalar<T> s) {
  BasicTensor<T> out(x.shape());
  for (std::size_t k = 0; k < static_cast<std::size_t>(x.numel()); ++k) out[k] = x[k] + s;
  if (Tape* tape = detail::recording_tape({x})) {
    tape->record("add_scalar", {x}, out, [xi = x.impl().get(), oi = out.impl().get()] {
      if (T* g = detail::grad_sink(xi)) detail::accumulate(g, oi->grad);
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  // NaN passes through so a diverged run stays visible downstream
  for (std::size_t k = 0; k < static_cast<std::size_t>(x.numel()); ++k) out[k] = x[k] <= T(0) ? T(0) : x[k];
  if (detail::branch_trace.active) {
    for (T v : x.data()) detail::trace_branch(v > T(0));
  }
  if (Tape* tape = detail::recording_tape({x})) {
    tape->record("relu", {x}, out, [xi = x.impl().get(), oi = out.impl().get()] {
      if (T* g = detail::grad_sink(xi)) {
        for (std::size_t k = 0; k < oi->grad.size(); ++k) {
          if (xi->data[k] > T(0)) g[k] += oi->grad[k];
        }
      }
    });
  }
  return out;
}

// Inverted dropout: kept activations are scaled by 1/(1-p). Identity when
// `train` is false or p is 0.
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, float p, Rng& rng, bool train) {
  if (p < 0.0f || p >= 1.0f) throw InvalidArgument("dropout: p must lie in [0, 1)");
  if (!train || p == 0.0f) return x;
  const T keep_scale = T(1) / (T(1) - T(p));
  std::vector<T> mask(static_cast<std::size_t>(x.numel()));
  for (auto& m : mask) m = rng.uniform() < p ? T(0) : keep_scale;
  BasicTensor<T> out(x.shape());
  for (std::size_t k = 0; k < mask.size(); ++k) out[k] = x[k] * mask[k];
  if (Tape* tape = detail::recording_tape({x})) {
    tape->record("dropout", {x}, out, [xi = x.impl().get(), oi = out.impl().get(), mask = std::move(mask)] {
      if (T* g = detail::grad_sink(xi)) {
        for (std::size_t k = 0; k < mask.size(); ++k) g[k] += oi->grad[k] * mask[k];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += static_cast<double>(v);
  auto out = BasicTensor<T>::scalar(static_cast<T>(acc));
  if (Tape* tape = detail::recording_tape({x})) {
    tape->record("sum", {x}, out, [xi = x.impl().get(), oi = out.impl().get()] {
      if (T* g = detail::grad_sink(xi)) {
        const T go = oi->grad[0];
        for (std::size_t k = 0; k < xi->data.size(); ++k) g[k] += go;
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  if (x.numel() == 0) throw InvalidArgument("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Σ x ⊙ w for equal-shaped x and w, accumulated in f64; w receives no
// gradient. Useful as a generic smooth scalar probe of a tensor function.
template <typename T>
BasicTensor<T> weighted_sum(const BasicTensor<T>& x, const BasicTensor<T>& w) {
  detail::require_same_shape(x, w, "weighted_sum");
  double acc = 0.0;
  for (std::size_t k = 0; k < static_cast<std::size_t>(x.numel()); ++k) acc += static_cast<double>(x[k]) * w[k];
  auto out = BasicTensor<T>::scalar(static_cast<T>(acc));
  if (Tape* tape = detail::recording_tape({x})) {
    tape->record("weighted_sum", {x}, out, [xi = x.impl().get(), wi = w.impl(), oi = out.impl().get()] {
      if (T* g = detail::grad_sink(xi)) {
        for (std::size_t k = 0; k < xi->data.size(); ++k) g[k] += oi->grad[0] * wi->data[k];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

// x[..., in] · weightᵀ + bias with weight shaped [out, in]; bias may be
// undefined.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  if (x.rank() < 1 || weight.rank() != 2 || x.dim(-1) != weight.dim(1)) {
    throw InvalidArgument("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                          to_string(weight.shape()));
  }
  const std::int64_t in = weight.dim(1), out_f = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_f)) {
    throw InvalidArgument("linear: bias shape " + to_string(bias.shape()));
  }
  const std::int64_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  BasicTensor<T> out(out_shape);
  {
    detail::ConstMatMap<T> X(x.data().data(), rows, in);
    detail::ConstMatMap<T> W(weight.data().data(), out_f, in);
    detail::MatMap<T> Y(out.data().data(), rows, out_f);
    Y.noalias() = X * W.transpose();
    if (bias.defined()) {
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.data().data(), out_f);
      Y.rowwise() += b;
    }
  }
  if (Tape* tape = detail::recording_tape({x, weight, bias})) {
    tape->record("linear", {x, weight, bias}, out,
                 [xi = x.impl().get(), wi = weight.impl().get(), bi = detail::impl_or_null(bias),
                  oi = out.impl().get(), rows, in, out_f] {
                   detail::ConstMatMap<T> GY(oi->grad.data(), rows, out_f);
                   if (T* g = detail::grad_sink(xi)) {
                     detail::MatMap<T>(g, rows, in).noalias() += GY * detail::ConstMatMap<T>(wi->data.data(), out_f, in);
                   }
                   if (T* g = detail::grad_sink(wi)) {
                     detail::MatMap<T>(g, out_f, in).noalias() +=
                         GY.transpose() * detail::ConstMatMap<T>(xi->data.data(), rows, in);
                   }
                   if (T* g = detail::grad_sink(bi)) {
                     Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(g, out_f);
                     gb += GY.colwise().sum();
                   }
                 });
  }
  return out;
}

// Batched product a[B, M, K] · b[B, K, N], or a · bᵀ with b[B, N, K] when
// transpose_b is set.
template <typename T>
BasicTensor<T> bmm(const BasicTensor<T>& a, const BasicTensor<T>& b, bool transpose_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw InvalidArgument("bmm: expected matching rank-3 batches, got " + to_string(a.shape()) + " and " +
                          to_string(b.shape()));
  }
  const std::int64_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::int64_t n = transpose_b ? b.dim(1) : b.dim(2);
  if ((transpose_b ? b.dim(2) : b.dim(1)) != k) {
    throw InvalidArgument("bmm: inner dimensions differ for " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  BasicTensor<T> out({batch, m, n});
  for (std::int64_t i = 0; i < batch; ++i) {
    detail::ConstMatMap<T> A(a.data().data() + i * m * k, m, k);
    detail::MatMap<T> C(out.data().data() + i * m * n, m, n);
    if (transpose_b) {
      C.noalias() = A * detail::ConstMatMap<T>(b.data().data() + i * n * k, n, k).transpose();
    } else {
      C.noalias() = A * detail::ConstMatMap<T>(b.data().data() + i * k * n, k, n);
    }
  }
  if (Tape* tape = detail::recording_tape({a, b})) {
    tape->record("bmm", {a, b}, out,
                 [ai = a.impl().get(), bi = b.impl().get(), oi = out.impl().get(), batch, m, k, n, transpose_b] {
                   T* ga = detail::grad_sink(ai);
                   T* gb = detail::grad_sink(bi);
                   for (std::int64_t i = 0; i < batch; ++i) {
                     detail::ConstMatMap<T> GC(oi->grad.data() + i * m * n, m, n);
                     detail::ConstMatMap<T> A(ai->data.data() + i * m * k, m, k);
                     if (transpose_b) {
                       detail::ConstMatMap<T> B(bi->data.data() + i * n * k, n, k);
                       if (ga) detail::MatMap<T>(ga + i * m * k, m, k).noalias() += GC * B;
                       if (gb) detail::MatMap<T>(gb + i * n * k, n, k).noalias() += GC.transpose() * A;
                     } else {
                       detail::ConstMatMap<T> B(bi->data.data() + i * k * n, k, n);
                       if (ga) detail::MatMap<T>(ga + i * m * k, m, k).noalias() += GC * B.transpose();
                       if (gb) detail::MatMap<T>(gb + i * k * n, k, n).noalias() += A.transpose() * GC;
                     }
                   }
                 });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalizations

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, int axis = -1) {
  const std::size_t a = x.normalize_axis(axis);
  const auto sp = detail::split_at(x.shape(), a);
  BasicTensor<T> out(x.shape());
  std::vector<double> e(static_cast<std::size_t>(sp.len));
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      const std::int64_t base = o * sp.len * sp.inner + i;
      T mx = x[base];
      for (std::int64_t j = 1; j < sp.len; ++j) mx = std::max(mx, x[base + j * sp.inner]);
      double z = 0.0;
      for (std::int64_t j = 0; j < sp.len; ++j) {
        e[j] = std::exp(static_cast<double>(x[base + j * sp.inner]) - mx);
        z += e[j];
      }
      for (std::int64_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] = static_cast<T>(e[j] / z);
    }
  }
  if (Tape* tape = detail::recording_tape({x})) {
    tape->record("softmax", {x}, out, [xi = x.impl().get(), oi = out.impl().get(), sp] {
      T* g = detail::grad_sink(xi);
      if (!g) return;
      const auto& y = oi->data;
      const auto& gy = oi->grad;
      for (std::int64_t o = 0; o < sp.outer; ++o) {
        for (std::int64_t i = 0; i < sp.inner; ++i) {
          const std::int64_t base = o * sp.len * sp.inner + i;
          double dot = 0.0;
          for (std::int64_t j = 0; j < sp.len; ++j) {
            dot += static_cast<double>(gy[base + j * sp.inner]) * y[base + j * sp.inner];
          }
          for (std::int64_t j = 0; j < sp.len; ++j) {
            const auto p = base + j * sp.inner;
            g[p] += static_cast<T>(y[p] * (gy[p] - dot));
          }
        }
      }
    });
  }
  return out;
}

// Normalizes over the last axis, then applies gamma/beta when defined.
template <typename T>
BasicTensor<T> layernorm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                         double eps = 1e-5) {
  const std::int64_t d = x.dim(-1);
  if ((gamma.defined() && gamma.numel() != d) || (beta.defined() && beta.numel() != d)) {
    throw InvalidArgument("layernorm: scale/shift size does not match feature size " + std::to_string(d));
  }
  const std::int64_t rows = d == 0 ? 0 : x.numel() / d;
  BasicTensor<T> out(x.shape());
  std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    double m = 0.0;
    for (std::int64_t j = 0; j < d; ++j) m += xr[j];
    m /= static_cast<double>(d);
    double v = 0.0;
    for (std::int64_t j = 0; j < d; ++j) v += (xr[j] - m) * (xr[j] - m);
    v /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(v + eps);
    inv_std[r] = is;
    for (std::int64_t j = 0; j < d; ++j) {
      const double h = (xr[j] - m) * is;
      xhat[r * d + j] = static_cast<T>(h);
      double y = h;
      if (gamma.defined()) y *= gamma[j];
      if (beta.defined()) y += beta[j];
      out[r * d + j] = static_cast<T>(y);
    }
  }
  if (Tape* tape = detail::recording_tape({x, gamma, beta})) {
    tape->record("layernorm", {x, gamma, beta}, out,
                 [xi = x.impl().get(), gi = detail::impl_or_null(gamma), bi = detail::impl_or_null(beta),
                  oi = out.impl().get(), xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d] {
                   const auto& gy = oi->grad;
                   T* gx = detail::grad_sink(xi);
                   T* gg = detail::grad_sink(gi);
                   T* gb = detail::grad_sink(bi);
                   std::vector<double> gh(static_cast<std::size_t>(d));
                   for (std::int64_t r = 0; r < rows; ++r) {
                     double mean_gh = 0.0, mean_ghx = 0.0;
                     for (std::int64_t j = 0; j < d; ++j) {
                       const auto p = r * d + j;
                       if (gg) gg[j] += gy[p] * xhat[p];
                       if (gb) gb[j] += gy[p];
                       gh[j] = gi ? static_cast<double>(gy[p]) * gi->data[j] : static_cast<double>(gy[p]);
                       mean_gh += gh[j];
                       mean_ghx += gh[j] * xhat[p];
                     }
                     if (!gx) continue;
                     mean_gh /= static_cast<double>(d);
                     mean_ghx /= static_cast<double>(d);
                     for (std::int64_t j = 0; j < d; ++j) {
                       const auto p = r * d + j;
                       gx[p] += static_cast<T>(inv_std[r] * (gh[j] - mean_gh - xhat[p] * mean_ghx));
                     }
                   }
                 });
  }
  return out;
}

// x / max(||x||, eps) along the last axis.
template <typename T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& x, double eps = 1e-12) {
  const std::int64_t d = x.dim(-1);
  const std::int64_t rows = d == 0 ? 0 : x.numel() / d;
  BasicTensor<T> out(x.shape());
  std::vector<double> norms(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::int64_t j = 0; j < d; ++j) ss += static_cast<double>(x[r * d + j]) * x[r * d + j];
    const double nrm = std::max(std::sqrt(ss), eps);
    norms[r] = nrm;
    for (std::int64_t j = 0; j < d; ++j) out[r * d + j] = static_cast<T>(x[r * d + j] / nrm);
  }
  if (Tape* tape = detail::recording_tape({x})) {
    tape->record("l2_normalize", {x}, out,
                 [xi = x.impl().get(), oi = out.impl().get(), norms = std::move(norms), rows, d, eps] {
                   T* g = detail::grad_sink(xi);
                   if (!g) return;
                   const auto& y = oi->data;
                   const auto& gy = oi->grad;
                   for (std::int64_t r = 0; r < rows; ++r) {
                     const double nrm = norms[r];
                     if (nrm <= eps) {
                       for (std::int64_t j = 0; j < d; ++j) g[r * d + j] += static_cast<T>(gy[r * d + j] / nrm);
                       continue;
                     }
                     double dot = 0.0;
                     for (std::int64_t j = 0; j < d; ++j) dot += static_cast<double>(gy[r * d + j]) * y[r * d + j];
                     for (std::int64_t j = 0; j < d; ++j) {
                       const auto p = r * d + j;
                       g[p] += static_cast<T>((gy[p] - y[p] * dot) / nrm);
                     }
                   }
                 });
  }
  return out;
}

// Row-wise Euclidean distances ||a_i - b_i|| of rank-2 inputs. The
// subgradient at a zero distance is taken as zero.
template <typename T>
BasicTensor<T> row_distance(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "row_distance");
  if (a.rank() != 2) throw InvalidArgument("row_distance: expected rank-2 inputs");
  const std::int64_t n = a.dim(0), d = a.dim(1);
  BasicTensor<T> out({n});
  for (std::int64_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double diff = static_cast<double>(a[i * d + j]) - b[i * d + j];
      ss += diff * diff;
    }
    out[i] = static_cast<T>(std::sqrt(ss));
  }
  if (Tape* tape = detail::recording_tape({a, b})) {
    tape->record("row_distance", {a, b}, out, [ai = a.impl().get(), bi = b.impl().get(), oi = out.impl().get(), n, d] {
      T* ga = detail::grad_sink(ai);
      T* gb = detail::grad_sink(bi);
      for (std::int64_t i = 0; i < n; ++i) {
        const T dist = oi->data[i];
        if (dist <= T(0)) continue;
        const T s = oi->grad[i] / dist;
        for (std::int64_t j = 0; j < d; ++j) {
          const auto p = i * d + j;
          const T v = s * (ai->data[p] - bi->data[p]);
          if (ga) ga[p] += v;
          if (gb) gb[p] -= v;
        }
      }
    });
  }
  return out;
}

}  // namespace mspm
