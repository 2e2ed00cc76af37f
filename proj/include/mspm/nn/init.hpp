#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "mspm/nn/param_store.hpp"
#include "mspm/random.hpp"

namespace mspm {

inline constexpr float kEmbeddingInitStd = 0.02f;

// Fills every registered tensor from one seeded stream, in registration order.
// Weights: N(0, 2/fan_in). Biases and shifts: 0. Scales: 1. Embeddings:
// N(0, 0.02^2). Running mean 0, running variance 1.
template <typename T>
void init_params(BasicParamStore<T>& store, std::uint64_t seed) {
  Rng rng(seed);
  for (const auto& e : store.entries()) {
    BasicTensor<T> t = e.tensor;
    auto data = t.data();
    switch (e.role) {
      case ParamRole::ConvWeight:
      case ParamRole::LinearWeight: {
        if (e.fan_in < 1) throw InvalidArgument("parameter '" + e.name + "' has no fan-in");
        const float sd = std::sqrt(2.0f / static_cast<float>(e.fan_in));
        for (auto& v : data) v = static_cast<T>(rng.normal(0.0f, sd));
        break;
      }
      case ParamRole::Embedding:
        for (auto& v : data) v = static_cast<T>(rng.normal(0.0f, kEmbeddingInitStd));
        break;
      case ParamRole::NormScale:
      case ParamRole::RunningVar:
        std::fill(data.begin(), data.end(), T(1));
        break;
      case ParamRole::Bias:
      case ParamRole::NormShift:
      case ParamRole::RunningMean:
        std::fill(data.begin(), data.end(), T(0));
        break;
    }
  }
}

}  // namespace mspm
