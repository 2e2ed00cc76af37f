#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "mspm/data/patch_set.hpp"
#include "mspm/tensor.hpp"

namespace mspm {

// Descriptor matrix, little-endian: "DESC", version u32 = 1, count u32,
// dim u32, then count * dim f32 values row by row.
inline constexpr std::uint32_t kDescVersion = 1;
inline constexpr std::size_t kDescHeaderBytes = 16;

struct DescriptorMatrix {
  std::uint32_t count = 0;
  std::uint32_t dim = 0;
  std::vector<float> values;
};

inline std::vector<std::uint8_t> encode_desc(const DescriptorMatrix& m) {
  if (m.values.size() != static_cast<std::size_t>(m.count) * m.dim) {
    throw DimensionMismatch("descriptor values do not match count x dim");
  }
  std::vector<std::uint8_t> out{'D', 'E', 'S', 'C'};
  out.reserve(kDescHeaderBytes + 4 * m.values.size());
  detail::put_u32(out, kDescVersion);
  detail::put_u32(out, m.count);
  detail::put_u32(out, m.dim);
  for (float v : m.values) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline DescriptorMatrix decode_desc(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "DESC", 4) != 0) throw FormatError("not a DESC file");
  if (bytes.size() < kDescHeaderBytes) throw CorruptFileError("DESC header truncated");
  if (detail::get_u32(&bytes[4]) != kDescVersion) throw FormatError("unsupported DESC version");
  DescriptorMatrix m;
  m.count = detail::get_u32(&bytes[8]);
  m.dim = detail::get_u32(&bytes[12]);
  const auto n = static_cast<std::size_t>(m.count) * m.dim;
  if (bytes.size() - kDescHeaderBytes != 4 * n) throw CorruptFileError("DESC payload does not match count x dim");
  m.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) m.values[i] = std::bit_cast<float>(detail::get_u32(&bytes[kDescHeaderBytes + 4 * i]));
  return m;
}

// Appends the rows of a [n, dim] tensor.
inline void append_rows(DescriptorMatrix& m, const Tensor& rows) {
  if (rows.rank() != 2) throw InvalidArgument("descriptor rows must be [n, dim]");
  if (m.count == 0 && m.values.empty()) m.dim = static_cast<std::uint32_t>(rows.dim(1));
  if (rows.dim(1) != static_cast<std::int64_t>(m.dim)) throw DimensionMismatch("descriptor width changed");
  const auto d = rows.data();
  m.values.insert(m.values.end(), d.begin(), d.end());
  m.count += static_cast<std::uint32_t>(rows.dim(0));
}

inline void write_desc(const std::string& path, const DescriptorMatrix& m) { detail::write_file(path, encode_desc(m)); }

inline DescriptorMatrix read_desc(const std::string& path) { return decode_desc(detail::read_file(path)); }

}  // namespace mspm
