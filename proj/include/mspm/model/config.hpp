#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "mspm/errors.hpp"
#include "mspm/nn/attention.hpp"
#include "mspm/spatial.hpp"

namespace mspm {

enum class PosEncoding { Learned2d, Fixed2d, Learned1d, Fixed1d, None };

inline std::string to_string(PosEncoding p) {
  switch (p) {
    case PosEncoding::Learned2d: return "learned-2d";
    case PosEncoding::Fixed2d: return "fixed-2d";
    case PosEncoding::Learned1d: return "learned-1d";
    case PosEncoding::Fixed1d: return "fixed-1d";
    case PosEncoding::None: return "none";
  }
  return "?";
}

inline PosEncoding parse_pos_encoding(const std::string& s) {
  for (auto p : {PosEncoding::Learned2d, PosEncoding::Fixed2d, PosEncoding::Learned1d, PosEncoding::Fixed1d,
                 PosEncoding::None}) {
    if (to_string(p) == s) return p;
  }
  throw InvalidArgument("unknown positional encoding '" + s + "'");
}

// One row of the backbone table with channels expressed relative to the
// final width: out_channels = width * num / den.
struct BackboneRow {
  const char* name;
  int num, den;
  int kernel, stride, pad, dilation;
};

inline constexpr BackboneRow kBackboneRows[] = {
    {"conv0", 1, 4, 3, 1, 1, 1}, {"conv1", 1, 4, 3, 1, 1, 1}, {"conv2", 1, 2, 3, 2, 1, 2},
    {"conv3", 1, 2, 3, 1, 1, 1}, {"conv4", 1, 1, 3, 1, 1, 2}, {"conv5", 1, 1, 3, 1, 1, 1},
    {"conv6", 1, 1, 3, 1, 1, 1}, {"conv7", 1, 1, 3, 1, 1, 1},
};

struct ModelConfig {
  int in_channels = 1;
  int patch_size = 64;
  int width = 128;  // channels of the last conv layer, also the token width
  std::vector<int> pyramid{8, 4, 2, 1};
  bool spp = true;
  bool encoder = true;
  int layers = 2;
  int heads = 2;
  int ffn_dim = 0;  // 0 means 4 * width
  float dropout = 0.1f;
  NormPlacement norm = NormPlacement::Pre;
  PosEncoding pos = PosEncoding::Learned2d;
  bool residual = true;
  int descriptor_dim = 128;
  bool per_scale_token = false;
  ConvAlgorithm conv_algorithm = ConvAlgorithm::Gemm;
  // Recognized only so that configs naming them fail loudly.
  bool decoder = false;
  bool pseudo_siamese = false;

  std::int64_t channels(const BackboneRow& r) const { return static_cast<std::int64_t>(width) * r.num / r.den; }

  std::int64_t effective_ffn_dim() const { return ffn_dim > 0 ? ffn_dim : 4 * static_cast<std::int64_t>(width); }

  // Spatial size of the backbone output for the configured patch size.
  std::int64_t map_size() const {
    std::int64_t s = patch_size;
    for (const auto& r : kBackboneRows) s = conv_output_size(s, r.kernel, r.stride, r.pad, r.dilation);
    return s;
  }

  // Spatial sizes of the scales fed to the aggregation stage.
  std::vector<std::int64_t> scales() const {
    if (!spp) return {map_size()};
    return {pyramid.begin(), pyramid.end()};
  }

  // The finest scale, which the residual bypass carries to the head.
  std::int64_t residual_size() const {
    const auto s = scales();
    return *std::max_element(s.begin(), s.end());
  }

  std::int64_t head_input_dim() const {
    const auto s = scales();
    if (!encoder) {
      std::int64_t n = 0;
      for (auto k : s) n += k * k * width;
      return n;
    }
    std::int64_t n = static_cast<std::int64_t>(s.size()) * width;
    if (residual) n += residual_size() * residual_size() * width;
    return n;
  }

  EncoderLayerConfig encoder_layer() const {
    return {width, heads, effective_ffn_dim(), dropout, norm};
  }

  void validate() const {
    if (decoder) throw InvalidArgument("the encoder+decoder variant is not supported");
    if (pseudo_siamese) throw InvalidArgument("the pseudo-Siamese variant is not supported");
    if (in_channels < 1) throw InvalidArgument("in_channels must be positive");
    if (width < 4 || width % 4 != 0) throw InvalidArgument("width must be a positive multiple of 4");
    if (descriptor_dim < 1) throw InvalidArgument("descriptor_dim must be positive");
    const std::int64_t m = map_size();
    if (m < 1) throw InvalidArgument("patch size " + std::to_string(patch_size) + " is too small for the backbone");
    if (spp) {
      if (pyramid.empty()) throw InvalidArgument("pyramid needs at least one level");
      for (std::size_t i = 0; i < pyramid.size(); ++i) {
        if (pyramid[i] < 1 || pyramid[i] > m) {
          throw InvalidArgument("pyramid level " + std::to_string(pyramid[i]) + " outside backbone map size " +
                                std::to_string(m));
        }
        for (std::size_t j = 0; j < i; ++j) {
          if (pyramid[i] == pyramid[j]) throw InvalidArgument("duplicate pyramid level");
        }
      }
    }
    if (encoder) {
      if (layers < 1) throw InvalidArgument("encoder needs at least one layer");
      encoder_layer().validate();
      if (pos != PosEncoding::None && width % 2 != 0) throw InvalidArgument("positional encoding needs even width");
    } else if (residual) {
      throw InvalidArgument("the residual bypass requires the encoder");
    }
  }
};

}  // namespace mspm
