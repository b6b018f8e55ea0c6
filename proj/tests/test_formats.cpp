#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "ssrgnet/npz.hpp"

using namespace ssrgnet;
namespace fs = std::filesystem;

namespace {

fs::path data_dir() { return SSRGNET_TEST_DATA; }

const nlohmann::json& expected() {
  static const nlohmann::json j = [] {
    std::ifstream in(data_dir() / "expected.json");
    return nlohmann::json::parse(in);
  }();
  return j;
}

// Header authored from the format rules: magic, v1.0, u16 header length,
// dict literal padded with spaces and a final newline to a 64-byte preamble.
// The dict is written without optional whitespace so the preamble fits in 64.
Bytes handmade_2x2() {
  const std::string dict = "{'descr':'<f8','fortran_order':False,'shape':(2,2)}";
  std::string header = dict;
  while ((10 + header.size() + 1) % 64 != 0) header.push_back(' ');
  header.push_back('\n');
  Bytes b = {0x93, 'N', 'U', 'M', 'P', 'Y', 1, 0};
  b.push_back(static_cast<std::uint8_t>(header.size() & 0xff));
  b.push_back(static_cast<std::uint8_t>(header.size() >> 8));
  b.insert(b.end(), header.begin(), header.end());
  for (double v : {1.0, 2.0, 3.0, 4.0}) {
    std::uint8_t raw[8];
    std::memcpy(raw, &v, 8);
    b.insert(b.end(), raw, raw + 8);
  }
  return b;
}

std::size_t payload_offset(const Bytes& b) {
  if (b[6] == 1) return 10 + (b[8] | (b[9] << 8));
  return 12 + (b[8] | (b[9] << 8) | (b[10] << 16) | (static_cast<std::size_t>(b[11]) << 24));
}

}  // namespace

TEST(Npy, HandAuthored96ByteFile) {
  const Bytes b = handmade_2x2();
  ASSERT_EQ(b.size(), 96u);
  const NpyArray a = read_npy(b);
  EXPECT_EQ(a.shape, (std::vector<std::size_t>{2, 2}));
  EXPECT_EQ(a.dtype, DType::f8);
  EXPECT_EQ(a.to_doubles(), (std::vector<double>{1, 2, 3, 4}));
  const Bytes canon = write_npy(a);
  EXPECT_EQ(read_npy(canon).data, a.data);
  EXPECT_TRUE(std::equal(b.begin() + 64, b.end(), canon.begin() + static_cast<std::ptrdiff_t>(payload_offset(canon)),
                         canon.end()));
}

TEST(Npy, DistinctErrors) {
  Bytes b = handmade_2x2();
  Bytes bad = b;
  bad[0] = 'X';
  bad[1] = 'X';
  try {
    read_npy(bad);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::bad_magic);
  }
  Bytes trunc(b.begin(), b.end() - 8);
  try {
    read_npy(trunc);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::length_mismatch);
  }
  Bytes cplx = b;
  const std::string from = "'<f8'", to = "'<c8'";
  auto it = std::search(cplx.begin(), cplx.end(), from.begin(), from.end());
  std::copy(to.begin(), to.end(), it);
  try {
    read_npy(cplx);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::unsupported_dtype);
  }
  Bytes ver = b;
  ver[6] = 9;
  try {
    read_npy(ver);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::unsupported_version);
  }
  Bytes hdr = b;
  hdr[10] = '[';
  try {
    read_npy(hdr);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::malformed_header);
  }
}

TEST(Npy, NumpyFixturesDecodeToExpectedValues) {
  for (const auto& [name, exp] : expected().items()) {
    if (name.size() < 4 || name.substr(name.size() - 4) != ".npy") continue;
    SCOPED_TRACE(name);
    const NpyArray a = load_npy(data_dir() / name);
    EXPECT_EQ(a.shape, exp["shape"].get<std::vector<std::size_t>>());
    const std::string descr = exp["descr"];
    if (descr[1] == 'S' || descr[1] == 'U') {
      EXPECT_EQ(a.to_strings(), exp["values"].get<std::vector<std::string>>());
    } else if (descr == "|b1") {
      const auto v = a.to_doubles();
      const auto want = exp["values"].get<std::vector<bool>>();
      for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(v[i] != 0.0, want[i]);
    } else {
      const auto v = a.to_doubles();
      const auto want = exp["values"].get<std::vector<double>>();
      ASSERT_EQ(v.size(), want.size());
      for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(v[i], want[i]);
    }
    EXPECT_EQ(a.descr(), descr == "|b1" ? "|b1" : descr);
  }
}

TEST(Npy, FortranOrderIsRelaidRowMajor) {
  const NpyArray c = load_npy(data_dir() / "f8_2x3_c.npy");
  const NpyArray f = load_npy(data_dir() / "f8_2x3_fortran.npy");
  EXPECT_EQ(c.shape, f.shape);
  EXPECT_EQ(c.data, f.data);
  const NpyArray i = load_npy(data_dir() / "i4_3x4_fortran.npy");
  const auto v = i.to_doubles();
  for (std::size_t k = 0; k < 12; ++k) EXPECT_EQ(v[k], static_cast<double>(k));
}

TEST(Npy, RoundTripIsBitExactForEveryDtype) {
  for (const char* name : {"f4_3x2.npy", "f8_2x3x2.npy", "i4_vec.npy", "i8_2x2.npy", "b1_5.npy", "S5_3.npy",
                           "U4_2.npy", "f8_scalar.npy", "f8_v2.npy", "f8_2x3_fortran.npy"}) {
    SCOPED_TRACE(name);
    const Bytes original = read_file_bytes(data_dir() / name);
    const NpyArray a = read_npy(original);
    const Bytes rewritten = write_npy(a);
    const NpyArray b = read_npy(rewritten);
    EXPECT_EQ(a.shape, b.shape);
    EXPECT_EQ(a.dtype, b.dtype);
    EXPECT_EQ(a.item_size, b.item_size);
    EXPECT_EQ(a.data, b.data);
    // Canonical output is v1.0 with a 64-byte-aligned preamble.
    EXPECT_EQ(rewritten[6], 1);
    EXPECT_EQ(payload_offset(rewritten) % 64, 0u);
    EXPECT_EQ(write_npy(b), rewritten);
    // Modulo header padding the payload is unchanged, except for Fortran files.
    if (std::string(name).find("fortran") == std::string::npos) {
      EXPECT_TRUE(std::equal(original.begin() + static_cast<std::ptrdiff_t>(payload_offset(original)), original.end(),
                             rewritten.begin() + static_cast<std::ptrdiff_t>(payload_offset(rewritten)), rewritten.end()));
    }
  }
}

TEST(Npy, SpecialFloatBitsSurvive) {
  const std::vector<double> v = {0.0, -0.0, 1e-310, std::numeric_limits<double>::infinity(),
                                 -std::numeric_limits<double>::infinity(), std::nan("0x7"), 1.0 / 3.0};
  const NpyArray a = NpyArray::from_doubles({v.size()}, v);
  EXPECT_EQ(read_npy(write_npy(a)).data, a.data);
  const std::vector<std::int64_t> iv = {std::numeric_limits<std::int64_t>::min(), -1, 0,
                                        std::numeric_limits<std::int64_t>::max()};
  const NpyArray b = NpyArray::from_values<std::int64_t>({2, 2}, iv);
  EXPECT_EQ(read_npy(write_npy(b)).data, b.data);
}

TEST(Npz, TwoStoredMembers) {
  const NpzArchive z = load_npz(data_dir() / "ab_stored.npz");
  ASSERT_EQ(z.size(), 2u);
  EXPECT_EQ(z.at("a").to_doubles(), std::vector<double>{1.0});
  EXPECT_EQ(z.at("b").to_doubles(), std::vector<double>{2.0});
}

TEST(Npz, EmptyArchive) { EXPECT_TRUE(load_npz(data_dir() / "empty.npz").empty()); }

TEST(Npz, DeflateMatchesStored) {
  const NpzArchive s = load_npz(data_dir() / "mixed_stored.npz");
  const NpzArchive d = load_npz(data_dir() / "mixed_deflate.npz");
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s.at("x").data, d.at("x").data);
  EXPECT_EQ(s.at("ids").to_strings(), d.at("ids").to_strings());
  EXPECT_EQ(d.at("x").to_doubles(), expected()["mixed.npz"]["x"].get<std::vector<double>>());
  EXPECT_EQ(d.at("ids").to_strings(), (std::vector<std::string>{"P1", "P2"}));
}

TEST(Npz, UnsupportedCompressionAndCorruption) {
  try {
    load_npz(data_dir() / "bzip2.npz");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::unsupported_compression);
  }
  Bytes b = read_file_bytes(data_dir() / "ab_stored.npz");
  Bytes cut(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(b.size() / 2));
  try {
    read_npz(cut);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::corrupt_archive);
  }
  // Flip a payload byte: the CRC no longer matches.
  Bytes flipped = read_file_bytes(data_dir() / "mixed_stored.npz");
  flipped[200] ^= 0xff;
  EXPECT_THROW(read_npz(flipped), FormatError);
}

TEST(Npz, WriterRoundTripsStoredAndDeflate) {
  NpzArchive a;
  a.emplace("w", NpyArray::from_doubles({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6}));
  a.emplace("ids", NpyArray::from_strings({"P1", "LONGER"}));
  a.emplace("m", NpyArray::from_bools({3}, {true, false, true}));
  for (bool compress : {false, true}) {
    const NpzArchive b = read_npz(write_npz(a, compress));
    ASSERT_EQ(b.size(), 3u);
    for (const auto& [k, v] : a) {
      EXPECT_EQ(b.at(k).data, v.data) << k;
      EXPECT_EQ(b.at(k).shape, v.shape) << k;
    }
  }
  EXPECT_EQ(write_npz(a), write_npz(a));
}
