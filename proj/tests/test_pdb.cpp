#include <gtest/gtest.h>

#include <random>

#include "ssrgnet/pdb.hpp"

using namespace ssrgnet;

namespace {

// Fixed-column ATOM/HETATM line, columns matching the PDB v3.3 layout.
std::string atom(const char* rec, int serial, const char* name, char alt, const char* res, char chain, int seq,
                 double x, double y, double z, double occ = 1.0, char icode = ' ') {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%-6s%5d %-4s%c%3s %c%4d%c   %8.3f%8.3f%8.3f%6.2f%6.2f           C", rec, serial,
                name, alt, res, chain, seq, icode, x, y, z, occ, 0.0);
  return buf;
}

std::string ca(int seq, const char* res, double x, char chain = 'A', char alt = ' ', double occ = 1.0) {
  return atom("ATOM", seq, " CA ", alt, res, chain, seq, x, 0.0, 0.0, occ);
}

std::string chain_text(const std::string& seq, char chain = 'A', int first = 1) {
  std::string t;
  for (std::size_t i = 0; i < seq.size(); ++i)
    t += ca(first + static_cast<int>(i), one_to_three(seq[i]).c_str(), static_cast<double>(i), chain) + "\n";
  return t;
}

}  // namespace

TEST(PdbParse, FixtureLine) {
  const std::string line = "ATOM      2  CA  ALA A   1      11.000  12.500  13.250  1.00  0.00           C";
  const ChainMap m = parse_pdb(line + "\n");
  ASSERT_EQ(m.size(), 1u);
  const CalphaRecord& r = m.at('A').at(0);
  EXPECT_EQ(r.chain_id, 'A');
  EXPECT_EQ(r.residue_seq_number, 1);
  EXPECT_EQ(r.residue_name, "ALA");
  EXPECT_EQ(r.position, (Vec3{11.000, 12.500, 13.250}));
  EXPECT_EQ(r.occupancy, 1.0);
}

TEST(PdbParse, OnlyCalphaAtomsKept) {
  std::string t;
  t += atom("ATOM", 1, " N  ", ' ', "GLY", 'A', 1, 0, 0, 0) + "\n";
  t += atom("ATOM", 2, " CA ", ' ', "GLY", 'A', 1, 1, 2, 3) + "\n";
  t += atom("ATOM", 3, " C  ", ' ', "GLY", 'A', 1, 0, 0, 0) + "\n";
  t += atom("HETATM", 4, " CA ", ' ', " CA", 'A', 100, 9, 9, 9) + "\n";
  t += "REMARK   2 RESOLUTION. 2.00 ANGSTROMS.\n";
  const ChainMap m = parse_pdb(t);
  ASSERT_EQ(m.at('A').size(), 1u);
  EXPECT_EQ(m.at('A')[0].position, (Vec3{1, 2, 3}));
}

TEST(PdbParse, HetatmOnlyHasNoAlphaCarbons) {
  const std::string t = atom("HETATM", 1, " CA ", ' ', " CA", 'A', 1, 1, 1, 1) + "\n" +
                        atom("HETATM", 2, " O  ", ' ', "HOH", 'A', 2, 1, 1, 1) + "\n";
  try {
    parse_pdb(t);
    FAIL();
  } catch (const PdbError& e) {
    EXPECT_EQ(e.kind(), PdbErrorKind::no_alpha_carbons);
  }
  EXPECT_THROW(parse_pdb(std::string_view("")), PdbError);
}

TEST(PdbParse, MalformedFieldReportsLine) {
  std::string bad = ca(3, "ALA", 1.0);
  bad.replace(32, 4, "1x.0");
  const std::string t = ca(1, "ALA", 0.0) + "\n" + ca(2, "GLY", 1.0) + "\n" + bad + "\n";
  try {
    parse_pdb(t);
    FAIL();
  } catch (const PdbError& e) {
    EXPECT_EQ(e.kind(), PdbErrorKind::malformed);
    EXPECT_EQ(e.line(), 3u);
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
}

TEST(PdbParse, AltLocHighestOccupancyThenSmallestId) {
  std::string t = ca(1, "ALA", 1.0, 'A', 'A', 0.4) + "\n" + ca(1, "ALA", 2.0, 'A', 'B', 0.6) + "\n";
  EXPECT_EQ(parse_pdb(t).at('A').at(0).position[0], 2.0);
  t = ca(1, "ALA", 2.0, 'A', 'B', 0.5) + "\n" + ca(1, "ALA", 1.0, 'A', 'A', 0.5) + "\n";
  const ChainMap m = parse_pdb(t);
  ASSERT_EQ(m.at('A').size(), 1u);
  EXPECT_EQ(m.at('A')[0].position[0], 1.0);
  EXPECT_EQ(m.at('A')[0].alt_loc, 'A');
}

TEST(PdbParse, InsertionCodesAreDistinctResidues) {
  const std::string t = atom("ATOM", 1, " CA ", ' ', "ALA", 'A', 5, 0, 0, 0) + "\n" +
                        atom("ATOM", 2, " CA ", ' ', "GLY", 'A', 5, 1, 0, 0, 1.0, 'A') + "\n";
  EXPECT_EQ(parse_pdb(t).at('A').size(), 2u);
}

TEST(PdbParse, FirstModelOnly) {
  const std::string t = "MODEL        1\n" + ca(1, "ALA", 1.0) + "\nENDMDL\nMODEL        2\n" + ca(1, "ALA", 5.0) +
                        "\n" + ca(2, "GLY", 6.0) + "\nENDMDL\nEND\n";
  const ChainMap m = parse_pdb(t);
  ASSERT_EQ(m.at('A').size(), 1u);
  EXPECT_EQ(m.at('A')[0].position[0], 1.0);
}

TEST(PdbParse, TrailingWhitespaceAndCrlf) {
  const std::string a = chain_text("AGV");
  std::string b;
  for (char c : a) {
    if (c == '\n') b += "   \r\n";
    else b.push_back(c);
  }
  EXPECT_EQ(parse_pdb(a), parse_pdb(b));
}

TEST(PdbParse, EmitReparseRoundTrip) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-999.0, 999.0);
  std::string t;
  for (int i = 1; i <= 30; ++i) {
    CalphaRecord r;
    r.chain_id = i % 2 ? 'A' : 'B';
    r.residue_seq_number = i * 3 - 40;
    r.insertion_code = i % 7 == 0 ? 'B' : ' ';
    r.residue_name = one_to_three("ARNDCQEGHILKMFPSTWYV"[i % 20]);
    r.position = {std::round(u(rng) * 1000) / 1000, std::round(u(rng) * 1000) / 1000,
                  std::round(u(rng) * 1000) / 1000};
    r.occupancy = 1.0;
    t += format_atom_line(r, i) + "\n";
  }
  const ChainMap a = parse_pdb(t);
  std::string u2;
  int serial = 1;
  for (const auto& [chain, list] : a)
    for (const auto& r : list) u2 += format_atom_line(r, serial++) + "\n";
  EXPECT_EQ(parse_pdb(u2), a);
}

TEST(PdbParse, UnknownResidueNamesMapToX) {
  EXPECT_EQ(three_to_one("ALA"), 'A');
  EXPECT_EQ(three_to_one("MSE"), 'M');
  EXPECT_EQ(three_to_one("ZZZ"), 'X');
}

TEST(PdbAlign, Identity) {
  const auto a = align_to_sequence(parse_pdb(chain_text("AGV")), "AGV", 'A');
  EXPECT_EQ(a.coverage_fraction, 1.0);
  for (const auto& p : a.positions) EXPECT_TRUE(p.has_value());
}

TEST(PdbAlign, SubstringOffset) {
  const auto a = align_to_sequence(parse_pdb(chain_text("GV")), "AGV", 'A');
  EXPECT_FALSE(a.positions[0].has_value());
  ASSERT_TRUE(a.positions[1] && a.positions[2]);
  EXPECT_EQ((*a.positions[1])[0], 0.0);
  EXPECT_EQ((*a.positions[2])[0], 1.0);
  EXPECT_DOUBLE_EQ(a.coverage_fraction, 2.0 / 3.0);
  EXPECT_EQ(a.offset, 1);
}

TEST(PdbAlign, ZeroIdentityFails) {
  try {
    align_to_sequence(parse_pdb(chain_text("AAAA")), "GGGG", 'A');
    FAIL();
  } catch (const PdbError& e) {
    EXPECT_EQ(e.kind(), PdbErrorKind::alignment_failure);
    EXPECT_EQ(e.best_identity(), 0.0);
  }
}

TEST(PdbAlign, MissingChain) {
  try {
    align_to_sequence(parse_pdb(chain_text("AGV")), "AGV", 'B');
    FAIL();
  } catch (const PdbError& e) {
    EXPECT_EQ(e.kind(), PdbErrorKind::missing_chain);
  }
}

TEST(PdbAlign, MismatchesStayUnassignedAndOrderBySeqNumber) {
  // Residues listed out of order; chain reads AGWLK against AGVLK (one mismatch).
  std::string t = ca(3, "TRP", 2.0) + "\n" + ca(1, "ALA", 0.0) + "\n" + ca(2, "GLY", 1.0) + "\n" +
                  ca(5, "LYS", 4.0) + "\n" + ca(4, "LEU", 3.0) + "\n";
  const auto a = align_to_sequence(parse_pdb(t), "AGVLK", 'A');
  EXPECT_DOUBLE_EQ(a.identity, 0.8);
  EXPECT_FALSE(a.positions[2].has_value());
  for (std::size_t i : {0u, 1u, 3u, 4u}) EXPECT_EQ((*a.positions[i])[0], static_cast<double>(i));
  EXPECT_DOUBLE_EQ(a.coverage_fraction, 0.8);
}

TEST(PdbAlign, NoStructuralResidueUsedTwice) {
  std::mt19937_64 rng(5);
  const std::string alpha = "ARNDCQEGHILKMFPSTWYV";
  for (int trial = 0; trial < 200; ++trial) {
    std::string seq;
    const std::size_t n = 5 + rng() % 30;
    for (std::size_t i = 0; i < n; ++i) seq.push_back(alpha[rng() % 4]);
    const std::size_t lo = rng() % n, len = 1 + rng() % (n - lo);
    std::string sub = seq.substr(lo, len);
    if (rng() % 2) sub[rng() % sub.size()] = alpha[rng() % 20];
    CoordinateAssignment a;
    try {
      a = align_to_sequence(parse_pdb(chain_text(sub)), seq, 'A', {0.0});
    } catch (const PdbError&) {
      continue;
    }
    std::vector<double> used;
    for (const auto& p : a.positions)
      if (p) used.push_back((*p)[0]);
    std::sort(used.begin(), used.end());
    EXPECT_EQ(std::adjacent_find(used.begin(), used.end()), used.end());
    EXPECT_EQ(a.positions.size(), seq.size());
    EXPECT_DOUBLE_EQ(a.coverage_fraction, static_cast<double>(used.size()) / static_cast<double>(seq.size()));
  }
}
