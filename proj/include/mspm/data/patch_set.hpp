#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "mspm/errors.hpp"

namespace mspm {

enum class Label : std::uint8_t { NonMatch = 0, Match = 1, Unlabeled = 2 };

struct PatchPair {
  std::vector<std::uint8_t> a;  // H x W x C, row-major, channels interleaved
  std::vector<std::uint8_t> b;
  Label label = Label::Unlabeled;
};

struct PatchPairSet {
  int height = 64;
  int width = 64;
  int channels = 1;
  bool labeled = false;
  std::vector<PatchPair> pairs;

  std::size_t patch_bytes() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width) * static_cast<std::size_t>(channels);
  }
  std::size_t size() const { return pairs.size(); }

  std::size_t count(Label l) const {
    std::size_t n = 0;
    for (const auto& p : pairs) n += p.label == l;
    return n;
  }

  void validate() const {
    if (height < 1 || width < 1 || height > 65535 || width > 65535) throw InvalidArgument("patch size out of range");
    if (channels < 1 || channels > 255) throw InvalidArgument("channel count out of range");
    for (const auto& p : pairs) {
      if (p.a.size() != patch_bytes() || p.b.size() != patch_bytes()) {
        throw InvalidArgument("patch byte count does not match " + std::to_string(height) + "x" +
                              std::to_string(width) + "x" + std::to_string(channels));
      }
      if (labeled && p.label == Label::Unlabeled) throw InvalidArgument("labeled set contains an unlabeled pair");
    }
  }
};

// PPDB container, little-endian: "PPDB", version u8 = 1, count u32, H u16,
// W u16, channels u8, flags u8 (bit 0: labels present); then per pair the A
// bytes, the B bytes and, when flagged, a label byte (1 match, 0 non-match).
inline constexpr std::uint8_t kPpdbVersion = 1;
inline constexpr std::size_t kPpdbHeaderBytes = 15;

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<std::uint8_t>((v >> s) & 0xff));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t get_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidArgument("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InvalidArgument("failed writing '" + path + "'");
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_ppdb(const PatchPairSet& set) {
  set.validate();
  std::vector<std::uint8_t> out{'P', 'P', 'D', 'B', kPpdbVersion};
  detail::put_u32(out, static_cast<std::uint32_t>(set.pairs.size()));
  detail::put_u16(out, static_cast<std::uint16_t>(set.height));
  detail::put_u16(out, static_cast<std::uint16_t>(set.width));
  out.push_back(static_cast<std::uint8_t>(set.channels));
  out.push_back(set.labeled ? 1 : 0);
  out.reserve(out.size() + set.pairs.size() * (2 * set.patch_bytes() + 1));
  for (const auto& p : set.pairs) {
    out.insert(out.end(), p.a.begin(), p.a.end());
    out.insert(out.end(), p.b.begin(), p.b.end());
    if (set.labeled) out.push_back(p.label == Label::Match ? 1 : 0);
  }
  return out;
}

inline PatchPairSet decode_ppdb(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 5 || std::memcmp(bytes.data(), "PPDB", 4) != 0) throw FormatError("not a PPDB file");
  if (bytes[4] != kPpdbVersion) throw FormatError("unsupported PPDB version " + std::to_string(bytes[4]));
  if (bytes.size() < kPpdbHeaderBytes) throw CorruptFileError("PPDB header truncated");
  PatchPairSet set;
  const std::uint32_t count = detail::get_u32(&bytes[5]);
  set.height = detail::get_u16(&bytes[9]);
  set.width = detail::get_u16(&bytes[11]);
  set.channels = bytes[13];
  const std::uint8_t flags = bytes[14];
  if (flags & ~1u) throw FormatError("unknown PPDB flags");
  set.labeled = flags & 1u;
  if (set.height == 0 || set.width == 0 || set.channels == 0) throw FormatError("PPDB header has a zero dimension");
  const std::size_t pb = set.patch_bytes();
  const std::size_t record = 2 * pb + (set.labeled ? 1 : 0);
  const std::size_t payload = bytes.size() - kPpdbHeaderBytes;
  if (payload / record < count) {
    throw CorruptFileError("PPDB payload truncated: " + std::to_string(count) + " pairs declared, room for " +
                           std::to_string(payload / record));
  }
  if (payload != static_cast<std::size_t>(count) * record) throw CorruptFileError("PPDB has trailing bytes");
  set.pairs.resize(count);
  const std::uint8_t* p = bytes.data() + kPpdbHeaderBytes;
  for (auto& pair : set.pairs) {
    pair.a.assign(p, p + pb);
    pair.b.assign(p + pb, p + 2 * pb);
    p += 2 * pb;
    if (set.labeled) {
      if (*p > 1) throw CorruptFileError("PPDB label byte " + std::to_string(*p) + " is not 0 or 1");
      pair.label = *p++ ? Label::Match : Label::NonMatch;
    }
  }
  return set;
}

inline void write_ppdb(const std::string& path, const PatchPairSet& set) { detail::write_file(path, encode_ppdb(set)); }

inline PatchPairSet read_ppdb(const std::string& path) { return decode_ppdb(detail::read_file(path)); }

}  // namespace mspm
