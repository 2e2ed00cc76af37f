#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mspm/data/batching.hpp"
#include "mspm/errors.hpp"
#include "mspm/loss.hpp"
#include "mspm/model/config.hpp"
#include "mspm/optim.hpp"

namespace mspm {

struct RunConfig {
  ModelConfig model;
  std::string preset = "toy";
  TrainSchedule schedule = toy_schedule();
  float margin = 1.0f;
  Normalization normalization = Normalization::PerPatch;
  bool hflip = true;
  bool rot90 = true;
  std::string train_path;
  std::string val_path;
  std::uint64_t seed = 0;
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw InvalidArgument(key + ": expected on/off, got '" + v + "'");
}

inline std::int64_t parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  std::int64_t out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw InvalidArgument(key + ": expected an integer, got '" + v + "'");
  return out;
}

inline float parse_float(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  float out = 0.0f;
  try {
    out = std::stof(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw InvalidArgument(key + ": expected a number, got '" + v + "'");
  return out;
}

inline std::string format_float(float v) {
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}

inline std::string on_off(bool b) { return b ? "on" : "off"; }

}  // namespace detail

// "key=value" lines; '#' starts a comment line. Duplicate keys are rejected.
inline KeyValues parse_key_values(const std::string& text, const std::string& origin = "config") {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw InvalidArgument(origin + ":" + std::to_string(lineno) + ": expected key=value");
    }
    auto key = detail::trim(line.substr(0, eq));
    auto value = detail::trim(line.substr(eq + 1));
    for (const auto& [k, v] : kv) {
      if (k == key) throw InvalidArgument(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    kv.emplace_back(std::move(key), std::move(value));
  }
  return kv;
}

inline std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

// Model keys only; this is what a checkpoint carries.
inline KeyValues model_key_values(const ModelConfig& m) {
  std::string pyramid;
  for (std::size_t i = 0; i < m.pyramid.size(); ++i) pyramid += (i ? "," : "") + std::to_string(m.pyramid[i]);
  return {
      {"c_in", std::to_string(m.in_channels)},
      {"patch_size", std::to_string(m.patch_size)},
      {"width", std::to_string(m.width)},
      {"pyramid", pyramid},
      {"spp", detail::on_off(m.spp)},
      {"encoder", detail::on_off(m.encoder)},
      {"layers", std::to_string(m.layers)},
      {"heads", std::to_string(m.heads)},
      {"ffn_dim", std::to_string(m.ffn_dim)},
      {"dropout", detail::format_float(m.dropout)},
      {"norm", m.norm == NormPlacement::Pre ? "pre" : "post"},
      {"pos_encoding", to_string(m.pos)},
      {"residual", detail::on_off(m.residual)},
      {"descriptor_dim", std::to_string(m.descriptor_dim)},
      {"per_scale_token", detail::on_off(m.per_scale_token)},
      {"conv_algorithm", m.conv_algorithm == ConvAlgorithm::Gemm ? "gemm" : "direct"},
      {"decoder", detail::on_off(m.decoder)},
      {"pseudo_siamese", detail::on_off(m.pseudo_siamese)},
  };
}

// Applies one model key; returns false when the key is not a model key.
inline bool apply_model_key(ModelConfig& m, const std::string& key, const std::string& v) {
  using namespace detail;
  if (key == "c_in") {
    m.in_channels = static_cast<int>(parse_int(key, v));
  } else if (key == "patch_size") {
    m.patch_size = static_cast<int>(parse_int(key, v));
  } else if (key == "width") {
    m.width = static_cast<int>(parse_int(key, v));
  } else if (key == "pyramid") {
    m.pyramid.clear();
    std::istringstream in(v);
    std::string item;
    while (std::getline(in, item, ',')) m.pyramid.push_back(static_cast<int>(parse_int(key, trim(item))));
  } else if (key == "spp") {
    m.spp = parse_bool(key, v);
  } else if (key == "encoder") {
    m.encoder = parse_bool(key, v);
  } else if (key == "layers") {
    m.layers = static_cast<int>(parse_int(key, v));
  } else if (key == "heads") {
    m.heads = static_cast<int>(parse_int(key, v));
  } else if (key == "ffn_dim") {
    m.ffn_dim = static_cast<int>(parse_int(key, v));
  } else if (key == "dropout") {
    m.dropout = parse_float(key, v);
  } else if (key == "norm") {
    if (v != "pre" && v != "post") throw InvalidArgument("norm: expected pre or post, got '" + v + "'");
    m.norm = v == "pre" ? NormPlacement::Pre : NormPlacement::Post;
  } else if (key == "pos_encoding") {
    m.pos = parse_pos_encoding(v);
  } else if (key == "residual") {
    m.residual = parse_bool(key, v);
  } else if (key == "descriptor_dim") {
    m.descriptor_dim = static_cast<int>(parse_int(key, v));
  } else if (key == "per_scale_token") {
    m.per_scale_token = parse_bool(key, v);
  } else if (key == "conv_algorithm") {
    if (v != "gemm" && v != "direct") throw InvalidArgument("conv_algorithm: expected gemm or direct");
    m.conv_algorithm = v == "gemm" ? ConvAlgorithm::Gemm : ConvAlgorithm::Direct;
  } else if (key == "decoder") {
    m.decoder = parse_bool(key, v);
  } else if (key == "pseudo_siamese") {
    m.pseudo_siamese = parse_bool(key, v);
  } else {
    return false;
  }
  return true;
}

inline ModelConfig model_from_key_values(const KeyValues& kv) {
  ModelConfig m;
  for (const auto& [k, v] : kv) {
    if (!apply_model_key(m, k, v)) throw InvalidArgument("unknown model key '" + k + "'");
  }
  m.validate();
  return m;
}

inline KeyValues run_key_values(const RunConfig& c) {
  auto kv = model_key_values(c.model);
  const auto& s = c.schedule;
  KeyValues rest{
      {"preset", c.preset},
      {"base_lr", detail::format_float(s.base_lr)},
      {"warmup_epochs", std::to_string(s.warmup_epochs)},
      {"plateau_patience", std::to_string(s.plateau_patience)},
      {"plateau_factor", detail::format_float(s.plateau_factor)},
      {"mining_switch_patience", std::to_string(s.mining_switch_patience)},
      {"epochs", std::to_string(s.epochs)},
      {"batch_size", std::to_string(s.batch_size)},
      {"margin", detail::format_float(c.margin)},
      {"normalization", c.normalization == Normalization::PerPatch ? "per-patch" : "dataset"},
      {"hflip", detail::on_off(c.hflip)},
      {"rot90", detail::on_off(c.rot90)},
      {"train", c.train_path},
      {"val", c.val_path},
      {"seed", std::to_string(c.seed)},
  };
  kv.insert(kv.end(), rest.begin(), rest.end());
  return kv;
}

// The preset is applied first wherever it appears; the other schedule keys
// then override its fields.
inline RunConfig run_config_from_key_values(const KeyValues& kv) {
  using namespace detail;
  RunConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "preset") {
      c.schedule = schedule_preset(v);
      c.preset = v;
    }
  }
  for (const auto& [k, v] : kv) {
    if (k == "preset" || apply_model_key(c.model, k, v)) continue;
    auto& s = c.schedule;
    if (k == "base_lr") {
      s.base_lr = parse_float(k, v);
    } else if (k == "warmup_epochs") {
      s.warmup_epochs = static_cast<int>(parse_int(k, v));
    } else if (k == "plateau_patience") {
      s.plateau_patience = static_cast<int>(parse_int(k, v));
    } else if (k == "plateau_factor") {
      s.plateau_factor = parse_float(k, v);
    } else if (k == "mining_switch_patience") {
      s.mining_switch_patience = static_cast<int>(parse_int(k, v));
    } else if (k == "epochs") {
      s.epochs = static_cast<int>(parse_int(k, v));
    } else if (k == "batch_size") {
      s.batch_size = static_cast<int>(parse_int(k, v));
    } else if (k == "margin") {
      c.margin = parse_float(k, v);
    } else if (k == "normalization") {
      if (v != "per-patch" && v != "dataset") throw InvalidArgument("normalization: expected per-patch or dataset");
      c.normalization = v == "dataset" ? Normalization::Dataset : Normalization::PerPatch;
    } else if (k == "hflip") {
      c.hflip = parse_bool(k, v);
    } else if (k == "rot90") {
      c.rot90 = parse_bool(k, v);
    } else if (k == "train") {
      c.train_path = v;
    } else if (k == "val") {
      c.val_path = v;
    } else if (k == "seed") {
      c.seed = static_cast<std::uint64_t>(parse_int(k, v));
    } else {
      throw InvalidArgument("unknown config key '" + k + "'");
    }
  }
  c.model.validate();
  c.schedule.validate();
  if (!(c.margin > 0.0f)) throw InvalidArgument("margin must be positive");
  return c;
}

inline RunConfig parse_run_config(const std::string& text) { return run_config_from_key_values(parse_key_values(text)); }

inline RunConfig read_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return run_config_from_key_values(parse_key_values(ss.str(), path));
}

}  // namespace mspm
