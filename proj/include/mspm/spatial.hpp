#pragma once

// NCHW image operators: convolution, batch normalization and adaptive
// average pooling.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mspm/ops.hpp"
#include "mspm/tensor.hpp"

namespace mspm {

enum class ConvAlgorithm {
  Direct,  // nested loops, f64 accumulation; the reference path
  Gemm,    // im2col + f32 matrix product; must agree with Direct within 1e-5
};

struct Conv2dOptions {
  int stride = 1;
  int pad = 0;
  int dilation = 1;
  ConvAlgorithm algorithm = ConvAlgorithm::Gemm;
};

// Output extent of a convolution along one spatial axis.
inline std::int64_t conv_output_size(std::int64_t in, std::int64_t kernel, int stride, int pad, int dilation) {
  const std::int64_t span = in + 2 * pad - static_cast<std::int64_t>(dilation) * (kernel - 1) - 1;
  if (span < 0) return 0;
  return span / stride + 1;
}

namespace detail {

struct ConvGeometry {
  std::int64_t n, c_in, h, w, c_out, k, h_out, w_out;
  int stride, pad, dilation;
};

// Gathers the receptive fields of one sample into a [c_in*k*k, h_out*w_out]
// matrix.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::int64_t hw_out = g.h_out * g.w_out;
  for (std::int64_t ci = 0; ci < g.c_in; ++ci) {
    for (std::int64_t ky = 0; ky < g.k; ++ky) {
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((ci * g.k + ky) * g.k + kx) * hw_out;
        for (std::int64_t oy = 0; oy < g.h_out; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky * g.dilation;
          for (std::int64_t ox = 0; ox < g.w_out; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx * g.dilation;
            row[oy * g.w_out + ox] =
                (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) ? x[(ci * g.h + iy) * g.w + ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* dx) {
  const std::int64_t hw_out = g.h_out * g.w_out;
  for (std::int64_t ci = 0; ci < g.c_in; ++ci) {
    for (std::int64_t ky = 0; ky < g.k; ++ky) {
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((ci * g.k + ky) * g.k + kx) * hw_out;
        for (std::int64_t oy = 0; oy < g.h_out; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky * g.dilation;
          if (iy < 0 || iy >= g.h) continue;
          for (std::int64_t ox = 0; ox < g.w_out; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx * g.dilation;
            if (ix >= 0 && ix < g.w) dx[(ci * g.h + iy) * g.w + ix] += row[oy * g.w_out + ox];
          }
        }
      }
    }
  }
}

template <typename T>
void conv_forward_direct(const T* x, const T* w, const T* b, const ConvGeometry& g, T* y) {
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t co = 0; co < g.c_out; ++co) {
      for (std::int64_t oy = 0; oy < g.h_out; ++oy) {
        for (std::int64_t ox = 0; ox < g.w_out; ++ox) {
          double acc = b ? b[co] : 0.0;
          for (std::int64_t ci = 0; ci < g.c_in; ++ci) {
            for (std::int64_t ky = 0; ky < g.k; ++ky) {
              const std::int64_t iy = oy * g.stride - g.pad + ky * g.dilation;
              if (iy < 0 || iy >= g.h) continue;
              for (std::int64_t kx = 0; kx < g.k; ++kx) {
                const std::int64_t ix = ox * g.stride - g.pad + kx * g.dilation;
                if (ix < 0 || ix >= g.w) continue;
                acc += static_cast<double>(x[((n * g.c_in + ci) * g.h + iy) * g.w + ix]) *
                       w[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
              }
            }
          }
          y[((n * g.c_out + co) * g.h_out + oy) * g.w_out + ox] = static_cast<T>(acc);
        }
      }
    }
  }
}

template <typename T>
void conv_backward_direct(const T* x, const T* w, const T* gy, const ConvGeometry& g,
                                 T* gx, T* gw, T* gb) {
  std::vector<double> dx(gx ? static_cast<std::size_t>(g.n * g.c_in * g.h * g.w) : 0, 0.0);
  std::vector<double> dw(gw ? static_cast<std::size_t>(g.c_out * g.c_in * g.k * g.k) : 0, 0.0);
  std::vector<double> db(gb ? static_cast<std::size_t>(g.c_out) : 0, 0.0);
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t co = 0; co < g.c_out; ++co) {
      for (std::int64_t oy = 0; oy < g.h_out; ++oy) {
        for (std::int64_t ox = 0; ox < g.w_out; ++ox) {
          const double go = gy[((n * g.c_out + co) * g.h_out + oy) * g.w_out + ox];
          if (gb) db[co] += go;
          for (std::int64_t ci = 0; ci < g.c_in; ++ci) {
            for (std::int64_t ky = 0; ky < g.k; ++ky) {
              const std::int64_t iy = oy * g.stride - g.pad + ky * g.dilation;
              if (iy < 0 || iy >= g.h) continue;
              for (std::int64_t kx = 0; kx < g.k; ++kx) {
                const std::int64_t ix = ox * g.stride - g.pad + kx * g.dilation;
                if (ix < 0 || ix >= g.w) continue;
                const auto xi = ((n * g.c_in + ci) * g.h + iy) * g.w + ix;
                const auto wi = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                if (gw) dw[wi] += go * x[xi];
                if (gx) dx[xi] += go * w[wi];
              }
            }
          }
        }
      }
    }
  }
  for (std::size_t i = 0; i < dx.size(); ++i) gx[i] += static_cast<T>(dx[i]);
  for (std::size_t i = 0; i < dw.size(); ++i) gw[i] += static_cast<T>(dw[i]);
  for (std::size_t i = 0; i < db.size(); ++i) gb[i] += static_cast<T>(db[i]);
}

template <typename T>
void conv_forward_gemm(const T* x, const T* w, const T* b, const ConvGeometry& g, T* y) {
  const std::int64_t kk = g.c_in * g.k * g.k, hw_out = g.h_out * g.w_out;
  Buffer<T> cols(static_cast<std::size_t>(kk * hw_out));
  ConstMatMap<T> W(w, g.c_out, kk);
  for (std::int64_t n = 0; n < g.n; ++n) {
    im2col(x + n * g.c_in * g.h * g.w, g, cols.data());
    MatMap<T> Y(y + n * g.c_out * hw_out, g.c_out, hw_out);
    Y.noalias() = W * ConstMatMap<T>(cols.data(), kk, hw_out);
    if (b) {
      for (std::int64_t co = 0; co < g.c_out; ++co) Y.row(co).array() += b[co];
    }
  }
}

template <typename T>
void conv_backward_gemm(const T* x, const T* w, const T* gy, const ConvGeometry& g,
                               T* gx, T* gw, T* gb) {
  const std::int64_t kk = g.c_in * g.k * g.k, hw_out = g.h_out * g.w_out;
  Buffer<T> cols(static_cast<std::size_t>(kk * hw_out));
  ConstMatMap<T> W(w, g.c_out, kk);
  for (std::int64_t n = 0; n < g.n; ++n) {
    ConstMatMap<T> GY(gy + n * g.c_out * hw_out, g.c_out, hw_out);
    if (gb) {
      for (std::int64_t co = 0; co < g.c_out; ++co) gb[co] += GY.row(co).sum();
    }
    if (gw) {
      im2col(x + n * g.c_in * g.h * g.w, g, cols.data());
      MatMap<T>(gw, g.c_out, kk).noalias() += GY * ConstMatMap<T>(cols.data(), kk, hw_out).transpose();
    }
    if (gx) {
      MatMap<T>(cols.data(), kk, hw_out).noalias() = W.transpose() * GY;
      col2im_add(cols.data(), g, gx + n * g.c_in * g.h * g.w);
    }
  }
}

}  // namespace detail

// Cross-correlation of input[N, C_in, H, W] with weight[C_out, C_in, k, k].
// bias may be undefined.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias, const Conv2dOptions& opt = {}) {
  if (input.rank() != 4 || weight.rank() != 4) {
    throw InvalidArgument("conv2d: expected rank-4 input and weight, got " + to_string(input.shape()) +
                          " and " + to_string(weight.shape()));
  }
  if (weight.dim(2) != weight.dim(3)) throw InvalidArgument("conv2d: kernel must be square");
  if (opt.stride < 1 || opt.pad < 0 || opt.dilation < 0 || weight.dim(2) < 1) {
    throw InvalidArgument("conv2d: need kernel, stride >= 1 and pad, dilation >= 0");
  }
  if (input.dim(1) != weight.dim(1)) {
    throw InvalidArgument("conv2d: input has " + std::to_string(input.dim(1)) + " channels, weight expects " +
                          std::to_string(weight.dim(1)));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != weight.dim(0))) {
    throw InvalidArgument("conv2d: bias shape " + to_string(bias.shape()));
  }
  detail::ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0), weight.dim(2),
                         0, 0, opt.stride, opt.pad, opt.dilation};
  g.h_out = conv_output_size(g.h, g.k, opt.stride, opt.pad, opt.dilation);
  g.w_out = conv_output_size(g.w, g.k, opt.stride, opt.pad, opt.dilation);
  if (g.h_out < 1 || g.w_out < 1) {
    throw InvalidArgument("conv2d: empty output for input " + to_string(input.shape()));
  }
  BasicTensor<T> out({g.n, g.c_out, g.h_out, g.w_out});
  const T* b = bias.defined() ? bias.data().data() : nullptr;
  if (opt.algorithm == ConvAlgorithm::Direct) {
    detail::conv_forward_direct(input.data().data(), weight.data().data(), b, g, out.data().data());
  } else {
    detail::conv_forward_gemm(input.data().data(), weight.data().data(), b, g, out.data().data());
  }
  if (Tape* tape = detail::recording_tape({input, weight, bias})) {
    tape->record("conv2d", {input, weight, bias}, out,
                 [xi = input.impl().get(), wi = weight.impl().get(),
                  bi = detail::impl_or_null(bias), oi = out.impl().get(), g,
                  algo = opt.algorithm] {
                   T* gx = detail::grad_sink(xi);
                   T* gw = detail::grad_sink(wi);
                   T* gb = detail::grad_sink(bi);
                   if (algo == ConvAlgorithm::Direct) {
                     detail::conv_backward_direct(xi->data.data(), wi->data.data(), oi->grad.data(), g, gx, gw, gb);
                   } else {
                     detail::conv_backward_gemm(xi->data.data(), wi->data.data(), oi->grad.data(), g, gx, gw, gb);
                   }
                 });
  }
  return out;
}

enum class Mode { Train, Eval };

struct BatchNormOptions {
  float eps = 1e-5f;
  float momentum = 0.1f;
};

// Per-channel normalization of input[N, C, H, W]. Train mode normalizes with
// the batch statistics and folds them into the running buffers (unbiased
// variance); eval mode reads the running buffers.
template <typename T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& input, const BasicTensor<T>& gamma, const BasicTensor<T>& beta, BasicTensor<T>& running_mean,
                          BasicTensor<T>& running_var, Mode mode, const BatchNormOptions& opt = {}) {
  if (input.rank() != 4) throw InvalidArgument("batchnorm2d: expected rank-4 input");
  const std::int64_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  for (const BasicTensor<T>* t : {&gamma, &beta, static_cast<const BasicTensor<T>*>(&running_mean), static_cast<const BasicTensor<T>*>(&running_var)}) {
    if (t->numel() != c) throw InvalidArgument("batchnorm2d: per-channel tensor size mismatch");
  }
  const std::int64_t count = n * hw;
  if (mode == Mode::Train && count < 2) {
    throw InvalidArgument("batchnorm2d: training needs at least 2 values per channel, got " +
                          std::to_string(count));
  }
  std::vector<T> mean(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));
  for (std::int64_t ch = 0; ch < c; ++ch) {
    if (mode == Mode::Train) {
      double s = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const T* p = input.data().data() + (i * c + ch) * hw;
        for (std::int64_t k = 0; k < hw; ++k) s += p[k];
      }
      const double m = s / static_cast<double>(count);
      double v = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const T* p = input.data().data() + (i * c + ch) * hw;
        for (std::int64_t k = 0; k < hw; ++k) v += (p[k] - m) * (p[k] - m);
      }
      const double biased = v / static_cast<double>(count);
      const double unbiased = v / static_cast<double>(count - 1);
      mean[ch] = static_cast<T>(m);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(biased + opt.eps));
      running_mean[ch] = static_cast<T>((1.0 - opt.momentum) * running_mean[ch] + opt.momentum * m);
      running_var[ch] = static_cast<T>((1.0 - opt.momentum) * running_var[ch] + opt.momentum * unbiased);
    } else {
      mean[ch] = running_mean[ch];
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[ch]) + opt.eps));
    }
  }
  BasicTensor<T> out(input.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T* p = input.data().data() + (i * c + ch) * hw;
      T* q = out.data().data() + (i * c + ch) * hw;
      const T a = inv_std[ch] * gamma[ch];
      for (std::int64_t k = 0; k < hw; ++k) q[k] = (p[k] - mean[ch]) * a + beta[ch];
    }
  }
  if (Tape* tape = detail::recording_tape({input, gamma, beta})) {
    tape->record("batchnorm2d", {input, gamma, beta}, out,
                 [xi = input.impl().get(), gi = gamma.impl().get(), bi = beta.impl().get(),
                  oi = out.impl().get(), mean = std::move(mean), inv_std = std::move(inv_std), n, c, hw,
                  train = mode == Mode::Train] {
                   T* gx = detail::grad_sink(xi);
                   T* gg = detail::grad_sink(gi);
                   T* gb = detail::grad_sink(bi);
                   const auto count = static_cast<double>(n * hw);
                   for (std::int64_t ch = 0; ch < c; ++ch) {
                     double sum_gy = 0.0, sum_gy_xhat = 0.0;
                     for (std::int64_t i = 0; i < n; ++i) {
                       const T* x = xi->data.data() + (i * c + ch) * hw;
                       const T* gy = oi->grad.data() + (i * c + ch) * hw;
                       for (std::int64_t k = 0; k < hw; ++k) {
                         sum_gy += gy[k];
                         sum_gy_xhat += static_cast<double>(gy[k]) * (x[k] - mean[ch]) * inv_std[ch];
                       }
                     }
                     if (gg) gg[ch] += static_cast<T>(sum_gy_xhat);
                     if (gb) gb[ch] += static_cast<T>(sum_gy);
                     if (!gx) continue;
                     const double a = static_cast<double>(gi->data[ch]) * inv_std[ch];
                     for (std::int64_t i = 0; i < n; ++i) {
                       const T* x = xi->data.data() + (i * c + ch) * hw;
                       const T* gy = oi->grad.data() + (i * c + ch) * hw;
                       T* dx = gx + (i * c + ch) * hw;
                       for (std::int64_t k = 0; k < hw; ++k) {
                         if (train) {
                           const double xhat = (x[k] - mean[ch]) * inv_std[ch];
                           dx[k] += static_cast<T>(a * (gy[k] - sum_gy / count - xhat * sum_gy_xhat / count));
                         } else {
                           dx[k] += static_cast<T>(a * gy[k]);
                         }
                       }
                     }
                   }
                 });
  }
  return out;
}

namespace detail {

// Bin i of an adaptive pooling over `in` cells into `out` bins.
inline std::pair<std::int64_t, std::int64_t> adaptive_bin(std::int64_t i, std::int64_t in, std::int64_t out) {
  const std::int64_t start = (i * in) / out;
  const std::int64_t end = ((i + 1) * in + out - 1) / out;
  return {start, end};
}

}  // namespace detail

// Averages input[N, C, H, W] over the standard adaptive bins down to
// [N, C, out_h, out_w].
template <typename T>
BasicTensor<T> adaptive_avg_pool2d(const BasicTensor<T>& input, std::int64_t out_h, std::int64_t out_w) {
  if (input.rank() != 4) throw InvalidArgument("adaptive_avg_pool2d: expected rank-4 input");
  const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (out_h < 1 || out_h > h || out_w < 1 || out_w > w) {
    throw InvalidArgument("adaptive_avg_pool2d: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                          " outside input " + std::to_string(h) + "x" + std::to_string(w));
  }
  BasicTensor<T> out({n, c, out_h, out_w});
  for (std::int64_t plane = 0; plane < n * c; ++plane) {
    const T* p = input.data().data() + plane * h * w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const auto [y0, y1] = detail::adaptive_bin(oy, h, out_h);
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const auto [x0, x1] = detail::adaptive_bin(ox, w, out_w);
        double s = 0.0;
        for (std::int64_t y = y0; y < y1; ++y) {
          for (std::int64_t x = x0; x < x1; ++x) s += p[y * w + x];
        }
        out[static_cast<std::size_t>((plane * out_h + oy) * out_w + ox)] =
            static_cast<T>(s / static_cast<double>((y1 - y0) * (x1 - x0)));
      }
    }
  }
  if (Tape* tape = detail::recording_tape({input})) {
    tape->record("adaptive_avg_pool2d", {input}, out,
                 [xi = input.impl().get(), oi = out.impl().get(), n, c, h, w, out_h, out_w] {
                   T* g = detail::grad_sink(xi);
                   if (!g) return;
                   for (std::int64_t plane = 0; plane < n * c; ++plane) {
                     for (std::int64_t oy = 0; oy < out_h; ++oy) {
                       const auto [y0, y1] = detail::adaptive_bin(oy, h, out_h);
                       for (std::int64_t ox = 0; ox < out_w; ++ox) {
                         const auto [x0, x1] = detail::adaptive_bin(ox, w, out_w);
                         const T share = oi->grad[static_cast<std::size_t>((plane * out_h + oy) * out_w + ox)] /
                                             static_cast<T>((y1 - y0) * (x1 - x0));
                         for (std::int64_t y = y0; y < y1; ++y) {
                           for (std::int64_t x = x0; x < x1; ++x) g[plane * h * w + y * w + x] += share;
                         }
                       }
                     }
                   }
                 });
  }
  return out;
}

}  // namespace mspm
