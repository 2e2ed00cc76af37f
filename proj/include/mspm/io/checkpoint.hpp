#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "mspm/data/patch_set.hpp"
#include "mspm/io/run_config.hpp"
#include "mspm/model/model.hpp"
#include "mspm/nn/param_store.hpp"

namespace mspm {

// MSPM checkpoint, little-endian: "MSPM", version u8 = 1, tensor count u32;
// per tensor: name length u16, name bytes, ndim u8, dims u32 each, f32 data;
// then a u32 length and that many bytes of key=value config text.
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::vector<CheckpointTensor> tensors;
  KeyValues config;
};

namespace detail {

inline void put_f32(std::vector<std::uint8_t>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  const std::uint8_t* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw CorruptFileError(what_ + " truncated at byte " + std::to_string(pos_));
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint8_t u8() { return *take(1); }
  std::uint16_t u16() { return get_u16(take(2)); }
  std::uint32_t u32() { return get_u32(take(4)); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  std::vector<std::uint8_t> out{'M', 'S', 'P', 'M', kCheckpointVersion};
  detail::put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    if (t.name.size() > 0xffff) throw InvalidArgument("tensor name too long");
    if (static_cast<std::int64_t>(t.data.size()) != shape_numel(t.shape)) {
      throw DimensionMismatch("tensor '" + t.name + "' data does not match its shape");
    }
    detail::put_u16(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    out.push_back(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.data) detail::put_f32(out, v);
  }
  const auto text = format_key_values(ck.config);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 5 || std::memcmp(bytes.data(), "MSPM", 4) != 0) throw FormatError("not an MSPM checkpoint");
  if (bytes[4] != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(bytes[4]));
  detail::ByteReader r(bytes, "checkpoint");
  r.take(5);
  Checkpoint ck;
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    const auto len = r.u16();
    const auto* p = r.take(len);
    t.name.assign(reinterpret_cast<const char*>(p), len);
    const auto ndim = r.u8();
    if (ndim > kMaxRank) throw CorruptFileError("tensor '" + t.name + "' has rank " + std::to_string(ndim));
    std::size_t n = 1;
    for (int d = 0; d < ndim; ++d) {
      t.shape.push_back(r.u32());
      n *= static_cast<std::size_t>(t.shape.back());
      if (n > bytes.size() / 4) throw CorruptFileError("tensor '" + t.name + "' is larger than the file");
    }
    const auto* raw = r.take(4 * n);
    t.data.resize(n);
    for (std::size_t k = 0; k < n; ++k) t.data[k] = std::bit_cast<float>(detail::get_u32(raw + 4 * k));
    ck.tensors.push_back(std::move(t));
  }
  const auto len = r.u32();
  const auto* p = r.take(len);
  ck.config = parse_key_values(std::string(reinterpret_cast<const char*>(p), len), "checkpoint config");
  if (!r.done()) throw CorruptFileError("checkpoint has trailing bytes");
  return ck;
}

inline Checkpoint make_checkpoint(const ParamStore& store, KeyValues config) {
  Checkpoint ck;
  ck.config = std::move(config);
  for (const auto& e : store.entries()) {
    const auto d = e.tensor.data();
    ck.tensors.push_back({e.name, e.tensor.shape(), {d.begin(), d.end()}});
  }
  return ck;
}

// Copies values into a store of the same layout. Any difference in count,
// order, name or shape is reported with the offending tensor.
inline void load_into(ParamStore& store, const Checkpoint& ck) {
  const auto& entries = store.entries();
  const auto n = std::min(entries.size(), ck.tensors.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = entries[i];
    const auto& t = ck.tensors[i];
    if (e.name != t.name) {
      throw DimensionMismatch("checkpoint tensor " + std::to_string(i) + " is '" + t.name + "', model expects '" +
                              e.name + "'");
    }
    if (e.tensor.shape() != t.shape) {
      throw DimensionMismatch("tensor '" + e.name + "' has shape " + to_string(t.shape) + " in the checkpoint, model expects " +
                              to_string(e.tensor.shape()));
    }
  }
  if (entries.size() != ck.tensors.size()) {
    const auto& extra = entries.size() > n ? entries[n].name : ck.tensors[n].name;
    throw DimensionMismatch("checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, model has " +
                            std::to_string(entries.size()) + "; first unmatched tensor '" + extra + "'");
  }
  for (std::size_t i = 0; i < n; ++i) {
    Tensor t = entries[i].tensor;
    auto out = t.data();
    std::copy(ck.tensors[i].data.begin(), ck.tensors[i].data.end(), out.begin());
  }
}

inline void save_checkpoint(const std::string& path, const Model& model) {
  detail::write_file(path, encode_checkpoint(make_checkpoint(model.params(), model_key_values(model.config()))));
}

inline Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(detail::read_file(path)); }

// Rebuilds the model described by the config block and loads its values.
inline Model load_model(const Checkpoint& ck) {
  Model model(model_from_key_values(ck.config));
  load_into(model.params(), ck);
  return model;
}

}  // namespace mspm
