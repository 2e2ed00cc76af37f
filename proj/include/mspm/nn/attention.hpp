#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mspm/nn/layers.hpp"

namespace mspm {

enum class NormPlacement { Pre, Post };

struct EncoderLayerConfig {
  std::int64_t model_dim = 128;
  int heads = 2;
  std::int64_t ffn_dim = 512;
  float dropout = 0.1f;
  NormPlacement norm = NormPlacement::Pre;

  void validate() const {
    if (heads < 1) throw InvalidArgument("attention needs at least one head");
    if (model_dim < 1 || model_dim % heads != 0) {
      throw InvalidArgument("model dimension " + std::to_string(model_dim) + " is not divisible by " +
                            std::to_string(heads) + " heads");
    }
    if (ffn_dim < 1) throw InvalidArgument("feed-forward dimension must be positive");
    if (dropout < 0.0f || dropout >= 1.0f) throw InvalidArgument("dropout must lie in [0, 1)");
  }
};

template <typename T>
struct AttentionOutput {
  BasicTensor<T> out;      // [N, L, d]
  BasicTensor<T> weights;  // [N, heads, L, L]
};

template <typename T>
struct MultiheadAttention {
  int heads = 1;
  Linear<T> q, k, v, o;

  MultiheadAttention() = default;
  MultiheadAttention(BasicParamStore<T>& store, const std::string& prefix, std::int64_t dim, int n_heads)
      : heads(n_heads),
        q(store, prefix + "/q", dim, dim),
        k(store, prefix + "/k", dim, dim),
        v(store, prefix + "/v", dim, dim),
        o(store, prefix + "/out", dim, dim) {
    if (n_heads < 1 || dim % n_heads != 0) {
      throw InvalidArgument("model dimension " + std::to_string(dim) + " is not divisible by " +
                            std::to_string(n_heads) + " heads");
    }
  }

  // Self-attention over x[N, L, d]. A rank-2 [L, d] input is treated as N = 1.
  AttentionOutput<T> operator()(const BasicTensor<T>& x) const { return (*this)(x, x, x); }

  AttentionOutput<T> operator()(const BasicTensor<T>& xq, const BasicTensor<T>& xk, const BasicTensor<T>& xv) const {
    const bool unbatched = xq.rank() == 2;
    auto as3 = [](const BasicTensor<T>& t) { return t.rank() == 2 ? reshape(t, {1, t.dim(0), t.dim(1)}) : t; };
    const auto a = as3(xq), b = as3(xk), c = as3(xv);
    if (a.rank() != 3) throw InvalidArgument("attention expects [L, d] or [N, L, d] input");
    const std::int64_t n = a.dim(0), lq = a.dim(1), lk = b.dim(1), d = a.dim(2);
    if (d % heads != 0) {
      throw InvalidArgument("model dimension " + std::to_string(d) + " is not divisible by " +
                            std::to_string(heads) + " heads");
    }
    const std::int64_t dh = d / heads;
    auto split_heads = [&](const BasicTensor<T>& t, std::int64_t len) {
      return reshape(permute(reshape(t, {n, len, heads, dh}), {0, 2, 1, 3}), {n * heads, len, dh});
    };
    const auto qh = split_heads(q(a), lq);
    const auto kh = split_heads(k(b), lk);
    const auto vh = split_heads(v(c), lk);
    const auto scores = scale(bmm(qh, kh, true), T(1) / std::sqrt(static_cast<T>(dh)));
    const auto w = softmax(scores, -1);
    const auto ctx = bmm(w, vh);
    const auto merged = reshape(permute(reshape(ctx, {n, heads, lq, dh}), {0, 2, 1, 3}), {n, lq, d});
    auto out = o(merged);
    if (unbatched) out = reshape(out, {lq, d});
    return {out, reshape(w, {n, heads, lq, lk})};
  }
};

template <typename T>
struct FeedForward {
  Linear<T> up, down;

  FeedForward() = default;
  FeedForward(BasicParamStore<T>& store, const std::string& prefix, std::int64_t dim, std::int64_t hidden)
      : up(store, prefix + "/fc1", dim, hidden), down(store, prefix + "/fc2", hidden, dim) {}

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return down(relu(up(x))); }
};

template <typename T>
struct EncoderLayer {
  EncoderLayerConfig cfg;
  LayerNorm<T> norm1, norm2;
  MultiheadAttention<T> attn;
  FeedForward<T> ffn;

  EncoderLayer() = default;
  EncoderLayer(BasicParamStore<T>& store, const std::string& prefix, const EncoderLayerConfig& c) : cfg(c) {
    cfg.validate();
    norm1 = LayerNorm<T>(store, prefix + "/norm1", cfg.model_dim);
    attn = MultiheadAttention<T>(store, prefix + "/attn", cfg.model_dim, cfg.heads);
    norm2 = LayerNorm<T>(store, prefix + "/norm2", cfg.model_dim);
    ffn = FeedForward<T>(store, prefix + "/ffn", cfg.model_dim, cfg.ffn_dim);
  }

  // Returns the layer output and its attention weights [N, heads, L, L].
  AttentionOutput<T> operator()(const BasicTensor<T>& x, const Context& ctx) const {
    if (cfg.norm == NormPlacement::Pre) {
      auto a = attn(norm1(x));
      auto y = add(x, maybe_dropout(a.out, cfg.dropout, ctx));
      auto z = add(y, maybe_dropout(ffn(norm2(y)), cfg.dropout, ctx));
      return {z, a.weights};
    }
    auto a = attn(x);
    auto y = norm1(add(x, maybe_dropout(a.out, cfg.dropout, ctx)));
    auto z = norm2(add(y, maybe_dropout(ffn(y), cfg.dropout, ctx)));
    return {z, a.weights};
  }
};

template <typename T>
struct EncoderOutput {
  BasicTensor<T> out;
  std::vector<BasicTensor<T>> weights;  // one [N, heads, L, L] per layer
};

template <typename T>
struct Encoder {
  std::vector<EncoderLayer<T>> layers;

  Encoder() = default;
  Encoder(BasicParamStore<T>& store, const std::string& prefix, int n_layers, const EncoderLayerConfig& cfg) {
    if (n_layers < 1) throw InvalidArgument("encoder needs at least one layer");
    for (int i = 0; i < n_layers; ++i) layers.emplace_back(store, prefix + "/layer" + std::to_string(i), cfg);
  }

  EncoderOutput<T> operator()(const BasicTensor<T>& x, const Context& ctx) const {
    EncoderOutput<T> r{x, {}};
    for (const auto& layer : layers) {
      auto step = layer(r.out, ctx);
      r.out = step.out;
      r.weights.push_back(step.weights);
    }
    return r;
  }
};

}  // namespace mspm
