#pragma once

// NPZ = ZIP archive of .npy members. Reader handles stored and deflate
// members plus the zip64 extra fields NumPy emits; writer emits plain ZIP.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <span>
#include <string>

#include "ssrgnet/npy.hpp"

namespace ssrgnet {

using NpzArchive = std::map<std::string, NpyArray>;

namespace detail {

inline std::uint64_t le(std::span<const std::uint8_t> b, std::size_t off, int n) {
  if (off + static_cast<std::size_t>(n) > b.size())
    throw FormatError(FormatErrorKind::corrupt_archive, "record runs past end of archive");
  std::uint64_t v = 0;
  for (int i = n - 1; i >= 0; --i) v = (v << 8) | b[off + static_cast<std::size_t>(i)];
  return v;
}

inline void put_le(Bytes& out, std::uint64_t v, int n) {
  for (int i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline Bytes inflate_raw(std::span<const std::uint8_t> in, std::size_t expected) {
  Bytes out(expected);
  z_stream zs{};
  if (inflateInit2(&zs, -MAX_WBITS) != Z_OK)
    throw FormatError(FormatErrorKind::corrupt_archive, "inflateInit2 failed");
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  const std::size_t produced = zs.total_out;
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || produced != expected)
    throw FormatError(FormatErrorKind::corrupt_archive, "deflate stream is corrupt");
  return out;
}

inline Bytes deflate_raw(std::span<const std::uint8_t> in) {
  z_stream zs{};
  if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, -MAX_WBITS, 8, Z_DEFAULT_STRATEGY) != Z_OK)
    throw FormatError(FormatErrorKind::io, "deflateInit2 failed");
  Bytes out(deflateBound(&zs, static_cast<uLong>(in.size())));
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  out.resize(zs.total_out);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw FormatError(FormatErrorKind::io, "deflate failed");
  return out;
}

inline std::uint32_t crc32_of(std::span<const std::uint8_t> b) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, b.data(), static_cast<uInt>(b.size())));
}

}  // namespace detail

inline NpzArchive read_npz(std::span<const std::uint8_t> bytes) {
  using detail::le;
  constexpr std::uint32_t kEocd = 0x06054b50, kCentral = 0x02014b50, kLocal = 0x04034b50;
  constexpr std::uint32_t kZip64Locator = 0x07064b50, kZip64Eocd = 0x06064b50;
  if (bytes.size() < 22)
    throw FormatError(FormatErrorKind::corrupt_archive, "too short for a ZIP end record");

  std::size_t eocd = std::string::npos;
  const std::size_t lowest = bytes.size() > 22 + 65535 ? bytes.size() - 22 - 65535 : 0;
  for (std::size_t p = bytes.size() - 22 + 1; p-- > lowest;) {
    if (le(bytes, p, 4) == kEocd) { eocd = p; break; }
  }
  if (eocd == std::string::npos)
    throw FormatError(FormatErrorKind::corrupt_archive, "end of central directory not found");

  std::uint64_t entries = le(bytes, eocd + 10, 2);
  std::uint64_t cd_size = le(bytes, eocd + 12, 4);
  std::uint64_t cd_offset = le(bytes, eocd + 16, 4);
  if ((entries == 0xffff || cd_size == 0xffffffff || cd_offset == 0xffffffff) && eocd >= 20 &&
      le(bytes, eocd - 20, 4) == kZip64Locator) {
    const std::uint64_t z64 = le(bytes, eocd - 20 + 8, 8);
    if (le(bytes, z64, 4) != kZip64Eocd)
      throw FormatError(FormatErrorKind::corrupt_archive, "bad zip64 end record");
    entries = le(bytes, z64 + 32, 8);
    cd_size = le(bytes, z64 + 40, 8);
    cd_offset = le(bytes, z64 + 48, 8);
  }
  if (cd_offset + cd_size > bytes.size())
    throw FormatError(FormatErrorKind::corrupt_archive, "central directory out of bounds");

  NpzArchive out;
  std::size_t p = cd_offset;
  for (std::uint64_t e = 0; e < entries; ++e) {
    if (le(bytes, p, 4) != kCentral)
      throw FormatError(FormatErrorKind::corrupt_archive, "bad central directory signature");
    const auto method = le(bytes, p + 10, 2);
    const auto crc = static_cast<std::uint32_t>(le(bytes, p + 16, 4));
    std::uint64_t csize = le(bytes, p + 20, 4);
    std::uint64_t usize = le(bytes, p + 24, 4);
    const auto name_len = le(bytes, p + 28, 2);
    const auto extra_len = le(bytes, p + 30, 2);
    const auto comment_len = le(bytes, p + 32, 2);
    std::uint64_t local = le(bytes, p + 42, 4);
    if (p + 46 + name_len > bytes.size())
      throw FormatError(FormatErrorKind::corrupt_archive, "member name out of bounds");
    std::string name(reinterpret_cast<const char*>(bytes.data() + p + 46), name_len);

    // zip64 extra: only the saturated fields are present, in this order.
    for (std::size_t x = p + 46 + name_len; x + 4 <= p + 46 + name_len + extra_len;) {
      const auto id = le(bytes, x, 2);
      const auto sz = le(bytes, x + 2, 2);
      if (id == 0x0001) {
        std::size_t f = x + 4;
        if (usize == 0xffffffff) { usize = le(bytes, f, 8); f += 8; }
        if (csize == 0xffffffff) { csize = le(bytes, f, 8); f += 8; }
        if (local == 0xffffffff) { local = le(bytes, f, 8); }
      }
      x += 4 + sz;
    }
    p += 46 + name_len + extra_len + comment_len;

    if (le(bytes, local, 4) != kLocal)
      throw FormatError(FormatErrorKind::corrupt_archive, "bad local header for " + name);
    const std::size_t data_off = local + 30 + le(bytes, local + 26, 2) + le(bytes, local + 28, 2);
    if (data_off + csize > bytes.size())
      throw FormatError(FormatErrorKind::corrupt_archive, "member " + name + " out of bounds");
    const auto raw = bytes.subspan(data_off, csize);

    Bytes member;
    if (method == 0) {
      if (csize != usize)
        throw FormatError(FormatErrorKind::corrupt_archive, "stored member size mismatch");
      member.assign(raw.begin(), raw.end());
    } else if (method == 8) {
      member = detail::inflate_raw(raw, usize);
    } else {
      throw FormatError(FormatErrorKind::unsupported_compression,
                        "member " + name + " uses method " + std::to_string(method));
    }
    if (detail::crc32_of(member) != crc)
      throw FormatError(FormatErrorKind::corrupt_archive, "CRC mismatch for " + name);

    if (name.size() > 4 && name.ends_with(".npy")) name.resize(name.size() - 4);
    out.emplace(std::move(name), read_npy(member));
  }
  return out;
}

/// Writes `name.npy` members; deflate when `compress` is set.
inline Bytes write_npz(const NpzArchive& arrays, bool compress = false) {
  using detail::put_le;
  Bytes out;
  Bytes central;
  for (const auto& [key, array] : arrays) {
    const std::string name = key + ".npy";
    const Bytes raw = write_npy(array);
    const Bytes body = compress ? detail::deflate_raw(raw) : raw;
    const std::uint32_t crc = detail::crc32_of(raw);
    const std::uint16_t method = compress ? 8 : 0;
    const std::size_t local = out.size();
    if (local > 0xffffffffu || raw.size() > 0xffffffffu)
      throw FormatError(FormatErrorKind::io, "archive too large for plain ZIP");

    put_le(out, 0x04034b50, 4);
    put_le(out, 20, 2);      // version needed
    put_le(out, 0, 2);       // flags
    put_le(out, method, 2);
    put_le(out, 0, 2);       // mod time
    put_le(out, 0x21, 2);    // mod date 1980-01-01
    put_le(out, crc, 4);
    put_le(out, body.size(), 4);
    put_le(out, raw.size(), 4);
    put_le(out, name.size(), 2);
    put_le(out, 0, 2);
    out.insert(out.end(), name.begin(), name.end());
    out.insert(out.end(), body.begin(), body.end());

    put_le(central, 0x02014b50, 4);
    put_le(central, 20, 2);  // version made by
    put_le(central, 20, 2);
    put_le(central, 0, 2);
    put_le(central, method, 2);
    put_le(central, 0, 2);
    put_le(central, 0x21, 2);
    put_le(central, crc, 4);
    put_le(central, body.size(), 4);
    put_le(central, raw.size(), 4);
    put_le(central, name.size(), 2);
    put_le(central, 0, 2);   // extra
    put_le(central, 0, 2);   // comment
    put_le(central, 0, 2);   // disk
    put_le(central, 0, 2);   // internal attrs
    put_le(central, 0, 4);   // external attrs
    put_le(central, local, 4);
    central.insert(central.end(), name.begin(), name.end());
  }
  const std::size_t cd_offset = out.size();
  out.insert(out.end(), central.begin(), central.end());
  put_le(out, 0x06054b50, 4);
  put_le(out, 0, 2);
  put_le(out, 0, 2);
  put_le(out, arrays.size(), 2);
  put_le(out, arrays.size(), 2);
  put_le(out, central.size(), 4);
  put_le(out, cd_offset, 4);
  put_le(out, 0, 2);
  return out;
}

inline NpzArchive load_npz(const std::filesystem::path& path) {
  return read_npz(read_file_bytes(path));
}

inline void save_npz(const std::filesystem::path& path, const NpzArchive& arrays,
                     bool compress = false) {
  write_file_bytes(path, write_npz(arrays, compress));
}

}  // namespace ssrgnet
