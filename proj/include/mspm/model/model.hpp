#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mspm/model/config.hpp"
#include "mspm/model/positional.hpp"
#include "mspm/nn/attention.hpp"
#include "mspm/nn/init.hpp"
#include "mspm/nn/layers.hpp"
#include "mspm/nn/param_store.hpp"

namespace mspm {

template <typename T>
struct BackboneOutput {
  BasicTensor<T> full_map;              // [N, width, m, m]
  std::vector<BasicTensor<T>> pyramid;  // one [N, width, s, s] per scale
  std::vector<Shape> layer_shapes;      // output shape of every conv block
};

// Attention weights captured during aggregation: weights[k][l] is
// [N, heads, L_k + 1, L_k + 1] for scale k, encoder layer l.
template <typename T>
struct BasicAttentionRecord {
  std::vector<std::int64_t> scale_sizes;
  std::vector<std::vector<BasicTensor<T>>> weights;

  bool has_scale(std::int64_t size) const {
    for (auto s : scale_sizes) {
      if (s == size) return true;
    }
    return false;
  }

  // Weights of the last layer at the given scale.
  const BasicTensor<T>& last_layer(std::int64_t size) const {
    for (std::size_t k = 0; k < scale_sizes.size(); ++k) {
      if (scale_sizes[k] == size && !weights[k].empty()) return weights[k].back();
    }
    throw InvalidArgument("attention record has no " + std::to_string(size) + "x" + std::to_string(size) + " scale");
  }
};

using AttentionRecord = BasicAttentionRecord<float>;

template <typename T>
struct Aggregation {
  std::vector<BasicTensor<T>> outputs;  // O_k, each [N, width]
  BasicAttentionRecord<T> record;
};

template <typename T>
struct Embedding {
  BasicTensor<T> desc;  // [N, descriptor_dim], unit rows
  BasicAttentionRecord<T> record;
};

// The full descriptor network. Both modalities go through the same instance.
template <typename T>
class BasicModel {
 public:
  explicit BasicModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::int64_t in = cfg_.in_channels;
    for (const auto& r : kBackboneRows) {
      ConvSpec spec{cfg_.channels(r), r.kernel, r.stride, r.pad, r.dilation};
      backbone_.emplace_back(store_, std::string("backbone/") + r.name, in, spec);
      backbone_.back().algorithm = cfg_.conv_algorithm;
      in = spec.out_channels;
    }
    const auto scales = cfg_.scales();
    if (cfg_.encoder) {
      encoder_ = Encoder<T>(store_, "encoder", cfg_.layers, cfg_.encoder_layer());
      if (cfg_.per_scale_token) {
        for (std::size_t k = 0; k < scales.size(); ++k) {
          tokens_.push_back(store_.add("encoder/token" + std::to_string(k), {cfg_.width}, ParamRole::Embedding));
        }
      } else {
        tokens_.push_back(store_.add("encoder/token", {cfg_.width}, ParamRole::Embedding));
      }
      for (std::size_t k = 0; k < scales.size(); ++k) {
        positional_.emplace_back(store_, "encoder/pos/scale" + std::to_string(k), cfg_.pos, scales[k], scales[k],
                                 cfg_.width);
      }
    }
    head_ = Linear<T>(store_, "head/fc", cfg_.head_input_dim(), cfg_.descriptor_dim);
  }

  const ModelConfig& config() const { return cfg_; }
  BasicParamStore<T>& params() { return store_; }
  const BasicParamStore<T>& params() const { return store_; }

  void init(std::uint64_t seed) { init_params(store_, seed); }

  BackboneOutput<T> backbone(const BasicTensor<T>& patch, const Context& ctx) {
    if (patch.rank() != 4 || patch.dim(1) != cfg_.in_channels || patch.dim(2) != cfg_.patch_size ||
        patch.dim(3) != cfg_.patch_size) {
      throw InvalidArgument("expected patches of shape [N, " + std::to_string(cfg_.in_channels) + ", " +
                            std::to_string(cfg_.patch_size) + ", " + std::to_string(cfg_.patch_size) + "], got " +
                            to_string(patch.shape()));
    }
    BackboneOutput<T> out;
    BasicTensor<T> x = patch;
    for (auto& block : backbone_) {
      x = block(x, ctx);
      out.layer_shapes.push_back(x.shape());
    }
    out.full_map = x;
    for (auto s : cfg_.scales()) {
      out.pyramid.push_back(s == x.dim(2) && s == x.dim(3) ? x : adaptive_avg_pool2d(x, s, s));
    }
    return out;
  }

  std::pair<BackboneOutput<T>, BackboneOutput<T>> siamese(const BasicTensor<T>& x, const BasicTensor<T>& y,
                                                          const Context& ctx) {
    auto a = backbone(x, ctx);
    auto b = backbone(y, ctx);
    return {std::move(a), std::move(b)};
  }

  // Runs every scale through the shared encoder and keeps the token output.
  Aggregation<T> aggregate(const std::vector<BasicTensor<T>>& pyramid, const Context& ctx) const {
    if (!cfg_.encoder) throw InvalidArgument("aggregation needs the encoder");
    if (pyramid.size() != positional_.size()) throw InvalidArgument("pyramid does not match the configured scales");
    Aggregation<T> agg;
    for (std::size_t k = 0; k < pyramid.size(); ++k) {
      const auto& token = tokens_[cfg_.per_scale_token ? k : 0];
      auto seq = flatten_with_token(pyramid[k], positional_[k], token);
      auto enc = encoder_(seq, ctx);
      const std::int64_t n = seq.dim(0);
      agg.outputs.push_back(reshape(slice(enc.out, 1, 0, 1), {n, cfg_.width}));
      agg.record.scale_sizes.push_back(pyramid[k].dim(2));
      agg.record.weights.push_back(std::move(enc.weights));
    }
    return agg;
  }

  // Concatenates the scale summaries (and the flattened residual map when
  // enabled), applies the FC layer and L2-normalizes.
  BasicTensor<T> fuse_and_project(const std::vector<BasicTensor<T>>& parts_in, const BasicTensor<T>& residual_map) const {
    std::vector<BasicTensor<T>> parts = parts_in;
    if (cfg_.residual) {
      if (!residual_map.defined()) throw InvalidArgument("residual bypass enabled but no map given");
      parts.push_back(flatten(residual_map, 1));
    }
    auto z = concat(parts, 1);
    if (z.dim(1) != head_.weight.dim(1)) {
      throw DimensionMismatch("head expects " + std::to_string(head_.weight.dim(1)) + " inputs, got " +
                              std::to_string(z.dim(1)));
    }
    return l2_normalize(head_(z));
  }

  Embedding<T> embed(const BasicTensor<T>& patch, const Context& ctx) {
    auto bb = backbone(patch, ctx);
    Embedding<T> e;
    if (!cfg_.encoder) {
      std::vector<BasicTensor<T>> parts;
      for (const auto& p : bb.pyramid) parts.push_back(flatten(p, 1));
      e.desc = fuse_and_project(parts, {});
      return e;
    }
    auto agg = aggregate(bb.pyramid, ctx);
    BasicTensor<T> residual;
    if (cfg_.residual) {
      for (const auto& p : bb.pyramid) {
        if (p.dim(2) == cfg_.residual_size()) residual = p;
      }
    }
    e.desc = fuse_and_project(agg.outputs, residual);
    e.record = std::move(agg.record);
    return e;
  }

 private:
  ModelConfig cfg_;
  BasicParamStore<T> store_;
  std::vector<ConvBlock<T>> backbone_;
  Encoder<T> encoder_;
  std::vector<BasicTensor<T>> tokens_;
  std::vector<PositionalEncoding<T>> positional_;
  Linear<T> head_;
};

using Model = BasicModel<float>;

}  // namespace mspm
