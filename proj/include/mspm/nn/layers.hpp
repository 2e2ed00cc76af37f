#pragma once

#include <cstdint>
#include <string>

#include "mspm/nn/param_store.hpp"
#include "mspm/ops.hpp"
#include "mspm/random.hpp"
#include "mspm/spatial.hpp"

namespace mspm {

// Per-call forward settings. Dropout in train mode draws from `rng`.
struct Context {
  Mode mode = Mode::Eval;
  Rng* rng = nullptr;

  bool training() const { return mode == Mode::Train; }
};

template <typename T>
BasicTensor<T> maybe_dropout(const BasicTensor<T>& x, float p, const Context& ctx) {
  if (!ctx.training() || p == 0.0f) return x;
  if (ctx.rng == nullptr) throw InvalidArgument("dropout in train mode needs a random generator");
  return dropout(x, p, *ctx.rng, true);
}

template <typename T>
struct Linear {
  BasicTensor<T> weight;  // [out, in]
  BasicTensor<T> bias;    // [out]

  Linear() = default;
  Linear(BasicParamStore<T>& store, const std::string& prefix, std::int64_t in, std::int64_t out)
      : weight(store.add(prefix + "/weight", {out, in}, ParamRole::LinearWeight, in)),
        bias(store.add(prefix + "/bias", {out}, ParamRole::Bias)) {}

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return linear(x, weight, bias); }
};

template <typename T>
struct LayerNorm {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;

  LayerNorm() = default;
  LayerNorm(BasicParamStore<T>& store, const std::string& prefix, std::int64_t dim)
      : gamma(store.add(prefix + "/gamma", {dim}, ParamRole::NormScale)),
        beta(store.add(prefix + "/beta", {dim}, ParamRole::NormShift)) {}

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return layernorm(x, gamma, beta); }
};

struct ConvSpec {
  std::int64_t out_channels;
  int kernel;
  int stride;
  int pad;
  int dilation;
};

// conv -> batchnorm -> relu
template <typename T>
struct ConvBlock {
  ConvSpec spec{};
  ConvAlgorithm algorithm = ConvAlgorithm::Gemm;
  BasicTensor<T> weight, bias, gamma, beta, running_mean, running_var;

  ConvBlock() = default;
  ConvBlock(BasicParamStore<T>& store, const std::string& prefix, std::int64_t in_channels, const ConvSpec& s)
      : spec(s) {
    const std::int64_t k = s.kernel;
    weight = store.add(prefix + "/weight", {s.out_channels, in_channels, k, k}, ParamRole::ConvWeight,
                       in_channels * k * k);
    bias = store.add(prefix + "/bias", {s.out_channels}, ParamRole::Bias);
    gamma = store.add(prefix + "/bn/gamma", {s.out_channels}, ParamRole::NormScale);
    beta = store.add(prefix + "/bn/beta", {s.out_channels}, ParamRole::NormShift);
    running_mean = store.add(prefix + "/bn/running_mean", {s.out_channels}, ParamRole::RunningMean);
    running_var = store.add(prefix + "/bn/running_var", {s.out_channels}, ParamRole::RunningVar);
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x, const Context& ctx) {
    auto y = conv2d(x, weight, bias, {spec.stride, spec.pad, spec.dilation, algorithm});
    return relu(batchnorm2d(y, gamma, beta, running_mean, running_var, ctx.mode));
  }
};

}  // namespace mspm
