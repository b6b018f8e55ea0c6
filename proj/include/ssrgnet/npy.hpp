#pragma once

// NPY v1.0/v2.0 reader and canonical v1.0 writer.

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "NPY/ZIP readers assume a little-endian host");

namespace ssrgnet {

enum class FormatErrorKind {
  bad_magic,
  unsupported_version,
  malformed_header,
  unsupported_dtype,
  length_mismatch,
  corrupt_archive,
  unsupported_compression,
  io,
};

inline std::string_view format_error_name(FormatErrorKind k) {
  switch (k) {
    case FormatErrorKind::bad_magic: return "bad_magic";
    case FormatErrorKind::unsupported_version: return "unsupported_version";
    case FormatErrorKind::malformed_header: return "malformed_header";
    case FormatErrorKind::unsupported_dtype: return "unsupported_dtype";
    case FormatErrorKind::length_mismatch: return "length_mismatch";
    case FormatErrorKind::corrupt_archive: return "corrupt_archive";
    case FormatErrorKind::unsupported_compression: return "unsupported_compression";
    case FormatErrorKind::io: return "io";
  }
  return "?";
}

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(format_error_name(kind)) + ": " + what), kind_(kind) {}
  FormatErrorKind kind() const noexcept { return kind_; }

 private:
  FormatErrorKind kind_;
};

enum class DType { f4, f8, i4, i8, b1, bytes, unicode };

using Bytes = std::vector<std::uint8_t>;

/// Decoded NPY payload, always row-major.
struct NpyArray {
  std::vector<std::size_t> shape;
  DType dtype = DType::f8;
  std::size_t item_size = 8;
  Bytes data;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
  }

  std::string descr() const {
    switch (dtype) {
      case DType::f4: return "<f4";
      case DType::f8: return "<f8";
      case DType::i4: return "<i4";
      case DType::i8: return "<i8";
      case DType::b1: return "|b1";
      case DType::bytes: return "|S" + std::to_string(item_size);
      case DType::unicode: return "<U" + std::to_string(item_size / 4);
    }
    return "";
  }

  template <class T>
  static NpyArray from_values(std::vector<std::size_t> shape, std::span<const T> values) {
    NpyArray a;
    a.shape = std::move(shape);
    if constexpr (std::is_same_v<T, double>) a.dtype = DType::f8;
    else if constexpr (std::is_same_v<T, float>) a.dtype = DType::f4;
    else if constexpr (std::is_same_v<T, std::int32_t>) a.dtype = DType::i4;
    else if constexpr (std::is_same_v<T, std::int64_t>) a.dtype = DType::i8;
    else static_assert(sizeof(T) == 0, "unsupported element type");
    a.item_size = sizeof(T);
    if (values.size() != a.numel())
      throw FormatError(FormatErrorKind::length_mismatch,
                        "value count " + std::to_string(values.size()) + " does not match shape");
    a.data.resize(values.size() * sizeof(T));
    if (!values.empty()) std::memcpy(a.data.data(), values.data(), a.data.size());
    return a;
  }

  static NpyArray from_doubles(std::vector<std::size_t> shape, std::span<const double> values) {
    return from_values<double>(std::move(shape), values);
  }

  static NpyArray from_bools(std::vector<std::size_t> shape, const std::vector<bool>& values) {
    NpyArray a;
    a.shape = std::move(shape);
    a.dtype = DType::b1;
    a.item_size = 1;
    if (values.size() != a.numel())
      throw FormatError(FormatErrorKind::length_mismatch, "bool count does not match shape");
    for (bool b : values) a.data.push_back(b ? 1 : 0);
    return a;
  }

  /// Fixed-width byte strings; width 0 picks the longest entry (at least 1).
  static NpyArray from_strings(const std::vector<std::string>& values, std::size_t width = 0) {
    if (width == 0) {
      width = 1;
      for (const auto& s : values) width = std::max(width, s.size());
    }
    NpyArray a;
    a.shape = {values.size()};
    a.dtype = DType::bytes;
    a.item_size = width;
    a.data.assign(values.size() * width, 0);
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (values[i].size() > width)
        throw FormatError(FormatErrorKind::length_mismatch, "string longer than field width");
      std::memcpy(a.data.data() + i * width, values[i].data(), values[i].size());
    }
    return a;
  }

  bool is_numeric() const { return dtype != DType::bytes && dtype != DType::unicode; }

  /// Numeric contents widened to double.
  std::vector<double> to_doubles() const {
    std::vector<double> out(numel());
    const std::uint8_t* p = data.data();
    for (std::size_t i = 0; i < out.size(); ++i, p += item_size) {
      switch (dtype) {
        case DType::f4: { float v; std::memcpy(&v, p, 4); out[i] = v; break; }
        case DType::f8: { std::memcpy(&out[i], p, 8); break; }
        case DType::i4: { std::int32_t v; std::memcpy(&v, p, 4); out[i] = static_cast<double>(v); break; }
        case DType::i8: { std::int64_t v; std::memcpy(&v, p, 8); out[i] = static_cast<double>(v); break; }
        case DType::b1: out[i] = *p ? 1.0 : 0.0; break;
        default:
          throw FormatError(FormatErrorKind::unsupported_dtype,
                            "array of " + descr() + " is not numeric");
      }
    }
    return out;
  }

  /// String contents with trailing NULs stripped. Unicode entries must be ASCII.
  std::vector<std::string> to_strings() const {
    std::vector<std::string> out;
    const std::size_t n = numel();
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint8_t* p = data.data() + i * item_size;
      std::string s;
      if (dtype == DType::bytes) {
        s.assign(reinterpret_cast<const char*>(p), item_size);
      } else if (dtype == DType::unicode) {
        for (std::size_t c = 0; c < item_size / 4; ++c) {
          std::uint32_t cp;
          std::memcpy(&cp, p + 4 * c, 4);
          if (cp > 0x7f)
            throw FormatError(FormatErrorKind::unsupported_dtype, "non-ASCII identifier");
          s.push_back(static_cast<char>(cp));
        }
      } else {
        throw FormatError(FormatErrorKind::unsupported_dtype,
                          "array of " + descr() + " does not hold strings");
      }
      while (!s.empty() && s.back() == '\0') s.pop_back();
      out.push_back(std::move(s));
    }
    return out;
  }
};

namespace detail {

inline constexpr std::uint8_t kNpyMagic[6] = {0x93, 'N', 'U', 'M', 'P', 'Y'};

struct NpyHeader {
  std::string descr;
  bool fortran_order = false;
  std::vector<std::size_t> shape;
  bool has_descr = false, has_order = false, has_shape = false;
};

// Parser for the python dict literal NumPy writes into the header.
class HeaderParser {
 public:
  explicit HeaderParser(std::string_view s) : s_(s) {}

  NpyHeader parse() {
    NpyHeader h;
    skip_ws();
    expect('{');
    for (;;) {
      skip_ws();
      if (peek() == '}') { ++pos_; break; }
      const std::string key = parse_string();
      skip_ws();
      expect(':');
      skip_ws();
      if (key == "descr") {
        h.descr = parse_string();
        h.has_descr = true;
      } else if (key == "fortran_order") {
        h.fortran_order = parse_bool();
        h.has_order = true;
      } else if (key == "shape") {
        h.shape = parse_tuple();
        h.has_shape = true;
      } else {
        fail("unexpected key '" + key + "'");
      }
      skip_ws();
      if (peek() == ',') ++pos_;
    }
    if (!h.has_descr || !h.has_order || !h.has_shape) fail("missing descr, fortran_order or shape");
    return h;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError(FormatErrorKind::malformed_header, msg);
  }
  char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }
  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }
  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }
  std::string parse_string() {
    const char q = peek();
    if (q != '\'' && q != '"') fail("expected string");
    ++pos_;
    const auto end = s_.find(q, pos_);
    if (end == std::string_view::npos) fail("unterminated string");
    std::string out(s_.substr(pos_, end - pos_));
    pos_ = end + 1;
    return out;
  }
  bool parse_bool() {
    if (s_.substr(pos_, 4) == "True") { pos_ += 4; return true; }
    if (s_.substr(pos_, 5) == "False") { pos_ += 5; return false; }
    fail("expected True or False");
  }
  std::vector<std::size_t> parse_tuple() {
    std::vector<std::size_t> out;
    expect('(');
    for (;;) {
      skip_ws();
      if (peek() == ')') { ++pos_; break; }
      if (!std::isdigit(static_cast<unsigned char>(peek()))) fail("expected shape extent");
      std::size_t v = 0;
      while (std::isdigit(static_cast<unsigned char>(peek()))) v = v * 10 + (s_[pos_++] - '0');
      out.push_back(v);
      skip_ws();
      if (peek() == ',') ++pos_;
      else if (peek() != ')') fail("expected ',' or ')' in shape");
    }
    return out;
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

inline void parse_descr(const std::string& d, DType& dtype, std::size_t& item_size) {
  auto bad = [&] { throw FormatError(FormatErrorKind::unsupported_dtype, "descriptor '" + d + "'"); };
  if (d.size() < 3) bad();
  const char order = d[0];
  const char kind = d[1];
  std::size_t width = 0;
  for (std::size_t i = 2; i < d.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(d[i]))) bad();
    width = width * 10 + (d[i] - '0');
  }
  const bool little = order == '<';
  const bool any = order == '|' || order == '<';
  if (kind == 'f' && little && width == 4) { dtype = DType::f4; item_size = 4; }
  else if (kind == 'f' && little && width == 8) { dtype = DType::f8; item_size = 8; }
  else if (kind == 'i' && little && width == 4) { dtype = DType::i4; item_size = 4; }
  else if (kind == 'i' && little && width == 8) { dtype = DType::i8; item_size = 8; }
  else if (kind == 'b' && any && width == 1) { dtype = DType::b1; item_size = 1; }
  else if (kind == 'S' && any && width >= 1) { dtype = DType::bytes; item_size = width; }
  else if (kind == 'U' && little && width >= 1) { dtype = DType::unicode; item_size = 4 * width; }
  else bad();
}

inline std::uint32_t read_le(const std::uint8_t* p, int n) {
  std::uint32_t v = 0;
  for (int i = n - 1; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace detail

inline NpyArray read_npy(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 6 || !std::equal(bytes.begin(), bytes.begin() + 6, detail::kNpyMagic))
    throw FormatError(FormatErrorKind::bad_magic, "missing \\x93NUMPY magic");
  if (bytes.size() < 10) throw FormatError(FormatErrorKind::length_mismatch, "truncated preamble");
  const int major = bytes[6];
  std::size_t header_len = 0, header_start = 0;
  if (major == 1) {
    header_len = detail::read_le(&bytes[8], 2);
    header_start = 10;
  } else if (major == 2 || major == 3) {
    if (bytes.size() < 12) throw FormatError(FormatErrorKind::length_mismatch, "truncated preamble");
    header_len = detail::read_le(&bytes[8], 4);
    header_start = 12;
  } else {
    throw FormatError(FormatErrorKind::unsupported_version, "NPY version " + std::to_string(major));
  }
  if (header_start + header_len > bytes.size())
    throw FormatError(FormatErrorKind::length_mismatch, "header runs past end of file");
  const std::string_view text(reinterpret_cast<const char*>(bytes.data() + header_start), header_len);
  const detail::NpyHeader header = detail::HeaderParser(text).parse();

  NpyArray a;
  a.shape = header.shape;
  detail::parse_descr(header.descr, a.dtype, a.item_size);
  const std::size_t payload = a.numel() * a.item_size;
  const std::size_t offset = header_start + header_len;
  if (bytes.size() - offset != payload)
    throw FormatError(FormatErrorKind::length_mismatch,
                      "payload has " + std::to_string(bytes.size() - offset) + " bytes, shape needs " +
                          std::to_string(payload));
  a.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end());

  if (header.fortran_order && a.shape.size() > 1) {
    // Column-major source: element (i0..in) lives at sum(i_k * prod_{j<k} d_j).
    const std::size_t rank = a.shape.size();
    std::vector<std::size_t> fstride(rank, 1);
    for (std::size_t k = 1; k < rank; ++k) fstride[k] = fstride[k - 1] * a.shape[k - 1];
    Bytes row_major(a.data.size());
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t lin = 0; lin < a.numel(); ++lin) {
      std::size_t src = 0;
      for (std::size_t k = 0; k < rank; ++k) src += idx[k] * fstride[k];
      std::memcpy(row_major.data() + lin * a.item_size, a.data.data() + src * a.item_size, a.item_size);
      for (std::size_t k = rank; k-- > 0;) {
        if (++idx[k] < a.shape[k]) break;
        idx[k] = 0;
      }
    }
    a.data = std::move(row_major);
  }
  return a;
}

/// Canonical encoding: v1.0 when the header fits, header padded with spaces to
/// a 64-byte boundary and terminated by '\n', fortran_order False.
inline Bytes write_npy(const NpyArray& a) {
  if (a.data.size() != a.numel() * a.item_size)
    throw FormatError(FormatErrorKind::length_mismatch, "array payload does not match shape");
  std::string dict = "{'descr': '" + a.descr() + "', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < a.shape.size(); ++i) {
    if (i) dict += ", ";
    dict += std::to_string(a.shape[i]);
  }
  if (a.shape.size() == 1) dict += ",";
  dict += "), }";

  auto padded_total = [&](std::size_t preamble) {
    return (preamble + dict.size() + 1 + 63) / 64 * 64;
  };
  const bool v1 = padded_total(10) - 10 <= 65535;
  const std::size_t preamble = v1 ? 10 : 12;
  const std::size_t total = preamble + dict.size() + 1;
  const std::size_t padded = padded_total(preamble);
  dict.append(padded - total, ' ');
  dict.push_back('\n');

  Bytes out(detail::kNpyMagic, detail::kNpyMagic + 6);
  out.push_back(v1 ? 1 : 2);
  out.push_back(0);
  const std::uint32_t hl = static_cast<std::uint32_t>(dict.size());
  out.push_back(hl & 0xff);
  out.push_back((hl >> 8) & 0xff);
  if (!v1) {
    out.push_back((hl >> 16) & 0xff);
    out.push_back((hl >> 24) & 0xff);
  }
  out.insert(out.end(), dict.begin(), dict.end());
  out.insert(out.end(), a.data.begin(), a.data.end());
  return out;
}

inline Bytes read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::io, "cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatErrorKind::io, "short write to " + path.string());
}

inline NpyArray load_npy(const std::filesystem::path& path) { return read_npy(read_file_bytes(path)); }

inline void save_npy(const std::filesystem::path& path, const NpyArray& a) {
  write_file_bytes(path, write_npy(a));
}

}  // namespace ssrgnet
