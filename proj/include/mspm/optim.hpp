#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mspm/errors.hpp"
#include "mspm/nn/param_store.hpp"

namespace mspm {

struct TrainSchedule {
  float base_lr = 0.1f;
  int warmup_epochs = 8;
  int plateau_patience = 3;
  float plateau_factor = 10.0f;
  int mining_switch_patience = 3;
  int epochs = 70;
  int batch_size = 48;

  void validate() const {
    if (!(base_lr > 0.0f)) throw InvalidArgument("base_lr must be positive");
    if (warmup_epochs < 0) throw InvalidArgument("warmup_epochs must be non-negative");
    if (plateau_patience < 1 || mining_switch_patience < 1) throw InvalidArgument("patience must be positive");
    if (!(plateau_factor > 1.0f)) throw InvalidArgument("plateau_factor must exceed 1");
    if (epochs < 1) throw InvalidArgument("epochs must be positive");
    if (batch_size < 2) throw InvalidArgument("batch_size must be at least 2");
  }
};

inline TrainSchedule paper_schedule() { return {}; }

inline TrainSchedule toy_schedule() {
  TrainSchedule s;
  s.base_lr = 1e-3f;
  s.warmup_epochs = 2;
  s.epochs = 20;
  s.batch_size = 16;
  return s;
}

inline TrainSchedule schedule_preset(const std::string& name) {
  if (name == "paper") return paper_schedule();
  if (name == "toy") return toy_schedule();
  throw InvalidArgument("unknown schedule preset '" + name + "'");
}

// Linear warmup to base_lr over warmup_epochs (epoch 0 already runs at
// base_lr / warmup_epochs), then base_lr / factor^plateau_count.
inline float lr_at(int epoch, const TrainSchedule& s, int plateau_count) {
  if (epoch < 0) throw InvalidArgument("epoch must be non-negative");
  if (epoch < s.warmup_epochs) {
    return s.base_lr * static_cast<float>(std::max(epoch, 1)) / static_cast<float>(s.warmup_epochs);
  }
  return static_cast<float>(s.base_lr / std::pow(static_cast<double>(s.plateau_factor), plateau_count));
}

// True when none of the last `patience` values improves strictly on the best
// value seen before them.
inline bool plateau_monitor(const std::vector<float>& history, int patience) {
  if (patience < 1 || history.size() <= static_cast<std::size_t>(patience)) return false;
  const auto split = history.end() - patience;
  const float best_before = *std::min_element(history.begin(), split);
  return std::none_of(split, history.end(), [&](float v) { return v < best_before; });
}

struct AdamOptions {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct AdamState {
  AdamOptions opt;
  std::int64_t step = 0;
  std::vector<std::vector<float>> m, v;  // one pair per trainable tensor
};

// One Adam update with bias correction on every trainable tensor. Gradients
// are left in place.
inline void adam_step(ParamStore& store, AdamState& state, float lr) {
  const auto params = store.trainable();
  const auto names = store.trainable_names();
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(static_cast<std::size_t>(p.numel()), 0.0f);
      state.v.emplace_back(static_cast<std::size_t>(p.numel()), 0.0f);
    }
  }
  if (state.m.size() != params.size()) throw DimensionMismatch("optimizer state does not match the parameter store");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) throw NoGradError("parameter '" + names[i] + "' has no gradient");
  }
  ++state.step;
  const auto& o = state.opt;
  const double c1 = 1.0 - std::pow(static_cast<double>(o.beta1), static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(static_cast<double>(o.beta2), static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    auto g = p.grad();
    auto w = p.data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = o.beta1 * m[k] + (1.0f - o.beta1) * g[k];
      v[k] = o.beta2 * v[k] + (1.0f - o.beta2) * g[k] * g[k];
      const double mh = m[k] / c1;
      const double vh = v[k] / c2;
      w[k] -= static_cast<float>(lr * mh / (std::sqrt(vh) + o.eps));
    }
  }
}

}  // namespace mspm
