#pragma once

#include <aeqprop/core.hpp>

#include <zlib.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace aeqprop::data {

struct ParseError : std::runtime_error {
  ParseError(const std::string& what, std::size_t at)
      : std::runtime_error(what + " (at byte " + std::to_string(at) + ")"), offset(at) {}
  std::size_t offset;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Unsigned-byte IDX tensor: big-endian header, then the raw payload.
struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;

  [[nodiscard]] std::uint32_t magic() const { return 0x00000800u | static_cast<std::uint32_t>(dims.size()); }
  [[nodiscard]] std::size_t count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return dims.empty() ? 0 : n;
  }
  /// Payload scaled to [0, 1].
  [[nodiscard]] std::vector<double> normalized() const {
    std::vector<double> out(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out[i] = static_cast<double>(data[i]) / 255.0;
    return out;
  }
};

namespace detail {

inline std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t at) {
  if (at + 4 > b.size()) throw ParseError("truncated header", at);
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

inline void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

}  // namespace detail

/// Decodes an unsigned-byte IDX file (magic 0x0000080N with N dimensions).
[[nodiscard]] inline IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw ParseError("file shorter than the magic number", bytes.size());
  if (bytes[0] != 0 || bytes[1] != 0) throw ParseError("bad magic: leading bytes must be zero", 0);
  if (bytes[2] != 0x08) throw ParseError("unsupported element type (only unsigned bytes)", 2);
  const std::size_t ndims = bytes[3];
  if (ndims == 0) throw ParseError("bad magic: zero dimensions", 3);
  IdxArray out;
  std::size_t at = 4;
  std::size_t total = 1;
  for (std::size_t d = 0; d < ndims; ++d, at += 4) {
    out.dims.push_back(detail::read_be32(bytes, at));
    total *= out.dims.back();
  }
  if (bytes.size() - at < total) throw ParseError("truncated payload", bytes.size());
  if (bytes.size() - at > total) throw ParseError("trailing bytes after payload", at + total);
  out.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(at), bytes.end());
  return out;
}

[[nodiscard]] inline std::vector<std::uint8_t> write_idx(const IdxArray& a) {
  if (a.dims.empty() || a.dims.size() > 255) throw StructuralError("write_idx: need 1..255 dimensions");
  if (a.count() != a.data.size()) throw StructuralError("write_idx: payload size does not match dimensions");
  std::vector<std::uint8_t> out;
  detail::write_be32(out, a.magic());
  for (auto d : a.dims) detail::write_be32(out, d);
  out.insert(out.end(), a.data.begin(), a.data.end());
  return out;
}

/// Reads a whole file, transparently inflating gzip content.
[[nodiscard]] inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  int n = 0;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw std::runtime_error("read error in " + path.string());
  return out;
}

/// CRC-32 of the (decompressed) content, as used for sidecar checksums.
[[nodiscard]] inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

/// Loads an IDX file (plain or .gz). When `<file>.crc32` exists next to it,
/// the decompressed content must match the hexadecimal CRC-32 it holds.
[[nodiscard]] inline IdxArray load_idx(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  auto sidecar = path;
  sidecar += ".crc32";
  if (std::filesystem::exists(sidecar)) {
    std::ifstream in(sidecar);
    std::uint32_t expected = 0;
    in >> std::hex >> expected;
    if (crc32_of(bytes) != expected) throw std::runtime_error("checksum mismatch for " + path.string());
  }
  return parse_idx(bytes);
}

}  // namespace aeqprop::data
