#pragma once

// Helpers and oracles shared by the unit tests and the acceptance binary.
// Nothing here depends on the test framework.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "mspm/mspm.hpp"

namespace mspm::testing {

inline constexpr int kSeeds = 20;

inline Tensor randn(Shape shape, Rng& rng, float sd = 1.0f) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.normal(0.0f, sd);
  return t;
}

// Fixed random projection to a scalar, identical in both precisions.
template <typename T>
BasicTensor<T> project(const BasicTensor<T>& x, std::uint64_t seed = 4242) {
  Rng rng(seed);
  BasicTensor<T> w(x.shape());
  for (auto& v : w.data()) v = static_cast<T>(rng.normal());
  return weighted_sum(x, w);
}

// Analytic f32 gradients against f64 central differences of the same
// generic function. `fn` receives the input list of either precision.
template <typename Fn>
GradCheckReport check_mixed(Fn fn, std::vector<Tensor> inputs, const GradCheckOptions& opt = {},
                            const std::vector<std::string>& names = {}) {
  std::vector<TensorD> ref;
  for (const auto& t : inputs) ref.emplace_back(t.shape());
  std::function<Tensor()> f = [&] { return fn(inputs); };
  std::function<TensorD()> g = [&] { return fn(ref); };
  return grad_check(f, inputs, g, ref, opt, names);
}

// Adds N(0, sd) to every trainable value so scales and shifts leave 1 and 0.
template <typename T>
void jitter(BasicParamStore<T>& store, std::uint64_t seed, float sd = 0.1f) {
  Rng rng(seed);
  for (auto& t : store.trainable()) {
    for (auto& v : t.data()) v += static_cast<T>(rng.normal(0.0f, sd));
  }
}

// Gradient check of a module built twice, in f32 and f64. `build(store)`
// registers the module, `fwd(module, xs)` returns a scalar. Inputs are the
// given tensors followed by every trainable parameter.
template <typename Build, typename Fwd>
GradCheckReport check_module(Build build, Fwd fwd, std::vector<Tensor> xs, std::uint64_t seed,
                             const GradCheckOptions& opt = {}) {
  ParamStore s;
  BasicParamStore<double> sd;
  auto m = build(s);
  auto md = build(sd);
  init_params(s, seed);
  jitter(s, seed + 1);
  sd.copy_values_from(s);
  std::vector<TensorD> xd;
  for (const auto& x : xs) xd.emplace_back(x.shape());
  std::vector<Tensor> inputs = xs;
  std::vector<TensorD> ref = xd;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < xs.size(); ++i) names.push_back("x" + std::to_string(i));
  for (const auto& t : s.trainable()) inputs.push_back(t);
  for (const auto& t : sd.trainable()) ref.push_back(t);
  for (const auto& n : s.trainable_names()) names.push_back(n);
  std::function<Tensor()> f = [&] { return fwd(m, xs); };
  std::function<TensorD()> g = [&] { return fwd(md, xd); };
  return grad_check(f, inputs, g, ref, opt, names);
}

inline std::string describe(const GradCheckReport& r) {
  std::string s;
  for (const auto& e : r.entries) {
    s += e.name + ": rel " + std::to_string(e.max_rel_error) + " abs " + std::to_string(e.max_abs_error) +
         " checked " + std::to_string(e.checked) + " skipped " + std::to_string(e.skipped) + "\n";
  }
  return s;
}

inline std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "mspm_tests";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

// Reduced model used by gradient and plumbing tests: 16x16 input, width 8.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.width = 8;
  c.patch_size = 16;
  c.pyramid = {5, 4, 2, 1};
  c.descriptor_dim = 8;
  c.dropout = 0.0f;
  return c;
}

struct GradCase {
  std::string name;
  std::function<GradCheckReport(int seed)> run;
};

// One entry per layer type of the network, each checked on small inputs.
inline const std::vector<GradCase>& layer_grad_cases() {
  static const std::vector<GradCase> cases = [] {
    std::vector<GradCase> c;
    c.push_back({"linear", [](int seed) {
                   Rng rng(100 + seed);
                   return check_module([](auto& s) { return Linear(s, "fc", 6, 4); },
                                       [](auto& m, auto& xs) { return project(m(xs[0])); }, {randn({3, 6}, rng)},
                                       seed);
                 }});
    c.push_back({"layernorm", [](int seed) {
                   Rng rng(200 + seed);
                   return check_module([](auto& s) { return LayerNorm(s, "ln", 8); },
                                       [](auto& m, auto& xs) { return project(m(xs[0])); },
                                       {randn({2, 3, 8}, rng, 2.0f)}, seed);
                 }});
    for (Mode mode : {Mode::Train, Mode::Eval}) {
      c.push_back({mode == Mode::Train ? "conv block train" : "conv block eval", [mode](int seed) {
                     Rng rng(300 + seed);
                     return check_module(
                         [](auto& s) { return ConvBlock(s, "conv", 2, ConvSpec{3, 3, 1, 1, 1}); },
                         [mode](auto& m, auto& xs) { return project(m(xs[0], Context{mode, nullptr})); },
                         {randn({2, 2, 5, 5}, rng)}, seed);
                   }});
    }
    c.push_back({"dilated strided conv block", [](int seed) {
                   Rng rng(350 + seed);
                   return check_module(
                       [](auto& s) { return ConvBlock(s, "conv", 2, ConvSpec{3, 3, 2, 1, 2}); },
                       [](auto& m, auto& xs) { return project(m(xs[0], Context{Mode::Train, nullptr})); },
                       {randn({2, 2, 7, 7}, rng)}, seed);
                 }});
    c.push_back({"adaptive pool", [](int seed) {
                   Rng rng(370 + seed);
                   return check_mixed(
                       [](auto& v) {
                         auto total = project(adaptive_avg_pool2d(v[0], 1, 1));
                         for (std::int64_t o : {2, 3, 4, 7}) total = add(total, project(adaptive_avg_pool2d(v[0], o, o)));
                         return total;
                       },
                       {randn({2, 2, 7, 7}, rng)});
                 }});
    c.push_back({"attention", [](int seed) {
                   Rng rng(400 + seed);
                   return check_module([](auto& s) { return MultiheadAttention(s, "attn", 8, 2); },
                                       [](auto& m, auto& xs) { return project(m(xs[0]).out); },
                                       {randn({2, 5, 8}, rng)}, seed);
                 }});
    c.push_back({"feed-forward", [](int seed) {
                   Rng rng(500 + seed);
                   return check_module([](auto& s) { return FeedForward(s, "ffn", 8, 16); },
                                       [](auto& m, auto& xs) { return project(m(xs[0])); }, {randn({5, 8}, rng)},
                                       seed);
                 }});
    for (NormPlacement norm : {NormPlacement::Pre, NormPlacement::Post}) {
      c.push_back({norm == NormPlacement::Pre ? "encoder layer pre-norm" : "encoder layer post-norm", [norm](int seed) {
                     EncoderLayerConfig cfg;
                     cfg.model_dim = 32;
                     cfg.ffn_dim = 64;
                     cfg.dropout = 0.0f;
                     cfg.norm = norm;
                     Rng rng(600 + seed);
                     return check_module([cfg](auto& s) { return EncoderLayer(s, "enc", cfg); },
                                         [](auto& m, auto& xs) { return project(m(xs[0], Context{}).out); },
                                         {randn({5, 32}, rng)}, seed);
                   }});
    }
    c.push_back({"encoder stack with dropout", [](int seed) {
                   EncoderLayerConfig cfg;
                   cfg.model_dim = 8;
                   cfg.ffn_dim = 16;
                   cfg.dropout = 0.2f;
                   Rng rng(700 + seed);
                   return check_module([cfg](auto& s) { return Encoder(s, "enc", 2, cfg); },
                                       [seed](auto& m, auto& xs) {
                                         Rng drop(seed);  // same mask on every evaluation
                                         return project(m(xs[0], Context{Mode::Train, &drop}).out);
                                       },
                                       {randn({2, 4, 8}, rng)}, seed);
                 }});
    for (MiningStrategy st : {MiningStrategy::Hardest, MiningStrategy::Random}) {
      c.push_back({"symmetric triplet loss " + to_string(st), [st](int seed) {
                     Rng rng(800 + seed);
                     const MiningConfig cfg{st, 1.0f};
                     const std::uint64_t mining_seed = 50 + static_cast<std::uint64_t>(seed);
                     return check_mixed(
                         [cfg, mining_seed](auto& v) {
                           Rng r(mining_seed);
                           return symmetric_triplet_loss(l2_normalize(v[0]), l2_normalize(v[1]), cfg, &r);
                         },
                         {randn({6, 8}, rng), randn({6, 8}, rng)});
                   }});
    }
    return c;
  }();
  return cases;
}

// Full pipeline: backbone, pyramid, encoder, head, normalization, both
// branches, every trainable parameter, at the reduced configuration.
inline GradCheckReport pipeline_grad_check(int seed) {
  const auto cfg = tiny_config();
  Model m(cfg);
  BasicModel<double> md(cfg);
  m.init(static_cast<std::uint64_t>(seed));
  md.params().copy_values_from(m.params());
  Rng rng(100 + seed);
  auto x = randn({2, 1, 16, 16}, rng), y = randn({2, 1, 16, 16}, rng), proj = randn({4, 8}, rng);
  const auto xd = x.cast<double>(), yd = y.cast<double>(), pd = proj.cast<double>();
  const Context train{Mode::Train, nullptr};
  std::function<Tensor()> f = [&] {
    return weighted_sum(concat<float>({m.embed(x, train).desc, m.embed(y, train).desc}, 0), proj);
  };
  std::function<TensorD()> g = [&] {
    return weighted_sum(concat<double>({md.embed(xd, train).desc, md.embed(yd, train).desc}, 0), pd);
  };
  GradCheckOptions opt;
  opt.refinements = 2;
  return grad_check(f, m.params().trainable(), g, md.params().trainable(), opt, m.params().trainable_names());
}

inline std::size_t total_checked(const GradCheckReport& r) {
  std::size_t n = 0;
  for (const auto& e : r.entries) n += e.checked;
  return n;
}

inline std::size_t total_skipped(const GradCheckReport& r) {
  std::size_t n = 0;
  for (const auto& e : r.entries) n += e.skipped;
  return n;
}

// Closed-form parameter count, written out independently of the model code.
inline std::int64_t expected_parameters(const ModelConfig& c) {
  const std::int64_t w = c.width;
  const std::int64_t ch[] = {w / 4, w / 4, w / 2, w / 2, w, w, w, w};
  std::int64_t n = 0, in = c.in_channels;
  for (auto out : ch) {
    n += out * in * 9 + out + 2 * out;  // weight, bias, bn gamma and beta
    in = out;
  }
  std::vector<std::int64_t> scales;
  if (c.spp) {
    scales.assign(c.pyramid.begin(), c.pyramid.end());
  } else {
    scales = {c.map_size()};
  }
  std::int64_t head_in = 0;
  if (c.encoder) {
    const std::int64_t f = c.ffn_dim > 0 ? c.ffn_dim : 4 * w;
    const std::int64_t layer = 4 * w + 4 * (w * w + w) + (w * f + f) + (f * w + w);
    n += c.layers * layer;
    n += (c.per_scale_token ? static_cast<std::int64_t>(scales.size()) : 1) * w;
    for (auto s : scales) {
      if (c.pos == PosEncoding::Learned2d) n += 2 * s * (w / 2);
      if (c.pos == PosEncoding::Learned1d) n += s * s * w;
    }
    head_in = static_cast<std::int64_t>(scales.size()) * w;
    if (c.residual) {
      const auto r = *std::max_element(scales.begin(), scales.end());
      head_in += r * r * w;
    }
  } else {
    for (auto s : scales) head_in += s * s * w;
  }
  return n + head_in * c.descriptor_dim + c.descriptor_dim;
}

struct Ablation {
  const char* name;
  std::function<void(ModelConfig&)> apply;
  std::int64_t delta;
};

// The documented table of parameter-count deltas against the default model
// (2,095,840 parameters).
inline const std::vector<Ablation>& ablations() {
  static const std::vector<Ablation> table = {
      {"layers=2", [](ModelConfig& c) { c.layers = 2; }, 0},
      {"layers=4", [](ModelConfig& c) { c.layers = 4; }, 396544},
      {"heads=2", [](ModelConfig& c) { c.heads = 2; }, 0},
      {"heads=4", [](ModelConfig& c) { c.heads = 4; }, 0},
      {"residual=on", [](ModelConfig& c) { c.residual = true; }, 0},
      {"residual=off", [](ModelConfig& c) { c.residual = false; }, -1048576},
      {"spp=on", [](ModelConfig& c) { c.spp = true; }, 0},
      {"spp=off", [](ModelConfig& c) { c.spp = false; }, 12683008},
      {"pos=learned-2d", [](ModelConfig& c) { c.pos = PosEncoding::Learned2d; }, 0},
      {"pos=fixed-2d", [](ModelConfig& c) { c.pos = PosEncoding::Fixed2d; }, -1920},
      {"pos=learned-1d", [](ModelConfig& c) { c.pos = PosEncoding::Learned1d; }, 8960},
      {"pos=fixed-1d", [](ModelConfig& c) { c.pos = PosEncoding::Fixed1d; }, -1920},
      {"pos=none", [](ModelConfig& c) { c.pos = PosEncoding::None; }, -1920},
      {"descriptor_dim=64", [](ModelConfig& c) { c.descriptor_dim = 64; }, -557120},
      {"descriptor_dim=128", [](ModelConfig& c) { c.descriptor_dim = 128; }, 0},
      {"descriptor_dim=256", [](ModelConfig& c) { c.descriptor_dim = 256; }, 1114240},
  };
  return table;
}

inline constexpr std::int64_t kDefaultParameters = 2095840;

// Independent oracles.

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(float)) == 0;
}

inline double max_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(static_cast<double>(a[i]) - b[i]));
  return m;
}
inline double dist(const Tensor& a, std::int64_t i, const Tensor& b, std::int64_t j) {
  const auto d = a.dim(1);
  double s = 0.0;
  for (std::int64_t k = 0; k < d; ++k) {
    const double e = static_cast<double>(a[i * d + k]) - b[j * d + k];
    s += e * e;
  }
  return std::sqrt(s);
}

// Exhaustive scan: every candidate j != i compared with every other one.
inline std::int64_t scan(const Tensor& D, std::int64_t i, bool by_row, float floor) {
  const auto n = D.dim(0);
  auto at = [&](std::int64_t j) { return by_row ? D[i * n + j] : D[j * n + i]; };
  auto best_of = [&](bool use_floor) {
    for (std::int64_t j = 0; j < n; ++j) {
      if (j == i || (use_floor && at(j) < floor)) continue;
      bool beaten = false;
      for (std::int64_t k = 0; k < n; ++k) {
        if (k == i || k == j || (use_floor && at(k) < floor)) continue;
        if (at(k) < at(j) || (at(k) == at(j) && k < j)) beaten = true;
      }
      if (!beaten) return j;
    }
    return std::int64_t{-1};
  };
  const auto j = best_of(true);
  return j >= 0 ? j : best_of(false);
}

// Both directions of the symmetric loss written out term by term.
inline double scalar_symmetric_loss(const Tensor& x, const Tensor& y, float m) {
  const auto n = x.dim(0);
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t ja = -1, jp = -1;
    double da = 1e30, dp = 1e30;
    for (std::int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (dist(x, i, y, j) < da) {
        da = dist(x, i, y, j);
        ja = j;
      }
      if (dist(x, j, y, i) < dp) {
        dp = dist(x, j, y, i);
        jp = j;
      }
    }
    total += std::max(0.0, m + dist(x, i, y, i) - dist(x, i, y, ja));
    total += std::max(0.0, m + dist(y, i, x, i) - dist(y, i, x, jp));
  }
  return total;
}
// Sweeps every observed distance as a threshold and keeps the smallest one
// whose recall reaches percent/100; counts in integers to avoid rounding.
inline float sweep_fpr(const std::vector<float>& pos, const std::vector<float>& neg, int percent) {
  std::vector<float> cands = pos;
  cands.insert(cands.end(), neg.begin(), neg.end());
  std::sort(cands.begin(), cands.end());
  for (float t : cands) {
    const auto hit = std::count_if(pos.begin(), pos.end(), [t](float d) { return d <= t; });
    if (hit * 100 >= static_cast<std::int64_t>(percent) * static_cast<std::int64_t>(pos.size())) {
      const auto fp = std::count_if(neg.begin(), neg.end(), [t](float d) { return d <= t; });
      return static_cast<float>(static_cast<double>(fp) / static_cast<double>(neg.size()));
    }
  }
  return 1.0f;
}
// Spatially permutes every cell of the 4x4 level of a pyramid.
inline Tensor permute_cells(const Tensor& map, const std::vector<int>& perm) {
  Tensor out(map.shape());
  const std::int64_t n = map.dim(0), c = map.dim(1), cells = map.dim(2) * map.dim(3);
  for (std::int64_t a = 0; a < n * c; ++a)
    for (std::int64_t k = 0; k < cells; ++k) out[a * cells + k] = map[a * cells + perm[k]];
  return out;
}

inline double permutation_change(PosEncoding pos, std::uint64_t seed) {
  ModelConfig c;
  c.dropout = 0.0f;
  c.width = 16;
  c.ffn_dim = 32;
  c.pos = pos;
  Model m(c);
  m.init(seed);
  Rng rng(seed);
  for (const auto& e : m.params().entries()) {
    if (e.role != ParamRole::Embedding) continue;
    auto t = e.tensor;
    for (auto& v : t.data()) v = rng.normal();
  }
  std::vector<Tensor> pyr;
  for (int s : {8, 4, 2, 1}) pyr.push_back(randn({2, 16, s, s}, rng));
  const auto base = m.aggregate(pyr, Context{Mode::Eval, nullptr}).outputs[1];
  std::vector<int> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    auto shuffled = pyr;
    shuffled[1] = permute_cells(pyr[1], perm);
    worst = std::max(worst, max_diff(base, m.aggregate(shuffled, Context{Mode::Eval, nullptr}).outputs[1]));
  }
  return worst;
}


}  // namespace mspm::testing
