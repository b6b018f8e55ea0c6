#pragma once

// Fixed-column PDB reader for alpha carbons, plus chain-to-sequence alignment.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "ssrgnet/protein.hpp"

namespace ssrgnet {

enum class PdbErrorKind { malformed, no_alpha_carbons, missing_chain, alignment_failure };

class PdbError : public std::runtime_error {
 public:
  PdbError(PdbErrorKind kind, const std::string& what, std::size_t line = 0,
           double best_identity = 0.0)
      : std::runtime_error(what), kind_(kind), line_(line), best_identity_(best_identity) {}
  PdbErrorKind kind() const noexcept { return kind_; }
  std::size_t line() const noexcept { return line_; }
  double best_identity() const noexcept { return best_identity_; }

 private:
  PdbErrorKind kind_;
  std::size_t line_;
  double best_identity_;
};

struct CalphaRecord {
  char chain_id = ' ';
  int residue_seq_number = 0;
  char insertion_code = ' ';  // ' ' when absent
  std::string residue_name;
  Vec3 position{};
  double occupancy = 1.0;
  char alt_loc = ' ';  // ' ' when absent

  friend bool operator==(const CalphaRecord&, const CalphaRecord&) = default;
};

using ChainMap = std::map<char, std::vector<CalphaRecord>>;

inline char three_to_one(std::string_view name) {
  static const std::unordered_map<std::string_view, char> table = {
      {"ALA", 'A'}, {"ARG", 'R'}, {"ASN", 'N'}, {"ASP", 'D'}, {"CYS", 'C'}, {"GLN", 'Q'},
      {"GLU", 'E'}, {"GLY", 'G'}, {"HIS", 'H'}, {"ILE", 'I'}, {"LEU", 'L'}, {"LYS", 'K'},
      {"MET", 'M'}, {"PHE", 'F'}, {"PRO", 'P'}, {"SER", 'S'}, {"THR", 'T'}, {"TRP", 'W'},
      {"TYR", 'Y'}, {"VAL", 'V'},
      // common modified residues mapped to their parent
      {"MSE", 'M'}, {"SEP", 'S'}, {"TPO", 'T'}, {"PTR", 'Y'}, {"HYP", 'P'}, {"MLY", 'K'},
      {"CSO", 'C'}, {"CME", 'C'}, {"HID", 'H'}, {"HIE", 'H'}, {"HIP", 'H'}, {"CYX", 'C'},
  };
  auto it = table.find(name);
  return it == table.end() ? 'X' : it->second;
}

inline std::string one_to_three(char c) {
  static constexpr std::string_view names[] = {"ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU",
                                               "GLY", "HIS", "ILE", "LEU", "LYS", "MET", "PHE",
                                               "PRO", "SER", "THR", "TRP", "TYR", "VAL"};
  const auto pos = kResidueAlphabet.find(c);
  return pos < 20 ? std::string(names[pos]) : std::string("UNK");
}

namespace detail {

inline std::string_view pdb_columns(std::string_view line, std::size_t first, std::size_t last) {
  // 1-based inclusive PDB column range
  if (line.size() < first) return {};
  return line.substr(first - 1, std::min(last, line.size()) - (first - 1));
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <class T>
T parse_field(std::string_view line, std::size_t first, std::size_t last, const char* what,
              std::size_t line_no) {
  const std::string_view raw = trim(pdb_columns(line, first, last));
  T value{};
  const char* b = raw.data();
  const char* e = raw.data() + raw.size();
  if (!raw.empty() && *b == '+') ++b;
  const auto [ptr, ec] = std::from_chars(b, e, value);
  if (raw.empty() || ec != std::errc() || ptr != e)
    throw PdbError(PdbErrorKind::malformed,
                   "line " + std::to_string(line_no) + ": malformed " + what + " field '" +
                       std::string(raw) + "'",
                   line_no);
  return value;
}

inline char pdb_char(std::string_view line, std::size_t col) {
  return line.size() >= col ? line[col - 1] : ' ';
}

}  // namespace detail

/// Alpha carbons of the first model, keyed by chain, in file order. Between
/// alternate locations of one residue the highest occupancy wins, ties going
/// to the smallest alt_loc character.
inline ChainMap parse_pdb(std::istream& in) {
  ChainMap chains;
  using Key = std::tuple<char, int, char>;
  std::map<Key, std::size_t> slot;  // residue key → index in its chain list
  std::string line;
  std::size_t line_no = 0;
  bool seen_model = false;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view rec = detail::pdb_columns(line, 1, 6);
    if (rec.starts_with("MODEL")) {
      if (seen_model) break;
      seen_model = true;
      continue;
    }
    if (rec.starts_with("ENDMDL")) {
      if (seen_model) break;
      continue;
    }
    if (rec != "ATOM  " && detail::trim(rec) != "ATOM") continue;
    if (detail::trim(detail::pdb_columns(line, 13, 16)) != "CA") continue;

    CalphaRecord r;
    r.alt_loc = detail::pdb_char(line, 17);
    r.residue_name = std::string(detail::trim(detail::pdb_columns(line, 18, 20)));
    r.chain_id = detail::pdb_char(line, 22);
    r.residue_seq_number = detail::parse_field<int>(line, 23, 26, "residue number", line_no);
    r.insertion_code = detail::pdb_char(line, 27);
    r.position[0] = detail::parse_field<double>(line, 31, 38, "x", line_no);
    r.position[1] = detail::parse_field<double>(line, 39, 46, "y", line_no);
    r.position[2] = detail::parse_field<double>(line, 47, 54, "z", line_no);
    for (double v : r.position)
      if (!std::isfinite(v))
        throw PdbError(PdbErrorKind::malformed,
                       "line " + std::to_string(line_no) + ": non-finite coordinate", line_no);
    if (!detail::trim(detail::pdb_columns(line, 55, 60)).empty())
      r.occupancy = detail::parse_field<double>(line, 55, 60, "occupancy", line_no);

    auto& list = chains[r.chain_id];
    const Key key{r.chain_id, r.residue_seq_number, r.insertion_code};
    auto it = slot.find(key);
    if (it == slot.end()) {
      slot.emplace(key, list.size());
      list.push_back(std::move(r));
      continue;
    }
    CalphaRecord& kept = list[it->second];
    if (r.occupancy > kept.occupancy ||
        (r.occupancy == kept.occupancy && r.alt_loc < kept.alt_loc))
      kept = std::move(r);
  }
  if (chains.empty())
    throw PdbError(PdbErrorKind::no_alpha_carbons, "no alpha carbons in PDB input");
  return chains;
}

inline ChainMap parse_pdb(std::string_view text) {
  std::istringstream in{std::string(text)};
  return parse_pdb(in);
}

/// Fixed-column ATOM line for a retained Cα.
inline std::string format_atom_line(const CalphaRecord& r, int serial) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "ATOM  %5d  CA %c%3s %c%4d%c   %8.3f%8.3f%8.3f%6.2f%6.2f           C",
                serial % 100000, r.alt_loc, r.residue_name.c_str(), r.chain_id,
                r.residue_seq_number, r.insertion_code, r.position[0], r.position[1],
                r.position[2], r.occupancy, 0.0);
  return buf;
}

struct CoordinateAssignment {
  std::vector<std::optional<Vec3>> positions;
  double coverage_fraction = 0.0;
  double identity = 0.0;
  long offset = 0;  // sequence index of the chain's first residue
};

struct AlignOptions {
  double min_identity = 0.8;
};

/// Gapless placement of a chain's residues onto `sequence`.
inline CoordinateAssignment align_to_sequence(const ChainMap& chains, std::string_view sequence,
                                              char chain, AlignOptions options = {}) {
  auto found = chains.find(chain);
  if (found == chains.end())
    throw PdbError(PdbErrorKind::missing_chain, std::string("chain '") + chain + "' not present");
  std::vector<CalphaRecord> residues = found->second;
  std::stable_sort(residues.begin(), residues.end(), [](const auto& a, const auto& b) {
    return std::tie(a.residue_seq_number, a.insertion_code) <
           std::tie(b.residue_seq_number, b.insertion_code);
  });
  std::string letters;
  for (const auto& r : residues) letters.push_back(three_to_one(r.residue_name));

  const long n = static_cast<long>(sequence.size());
  const long m = static_cast<long>(letters.size());
  long best_offset = 0;
  long best_matches = -1;
  const auto exact = sequence.find(letters);
  if (exact != std::string_view::npos && m > 0) {
    best_offset = static_cast<long>(exact);
    best_matches = m;
  } else {
    for (long off = -(m - 1); off <= n - 1; ++off) {
      long matches = 0;
      for (long k = 0; k < m; ++k) {
        const long i = off + k;
        if (i >= 0 && i < n && sequence[static_cast<std::size_t>(i)] == letters[static_cast<std::size_t>(k)]) ++matches;
      }
      if (matches > best_matches) {
        best_matches = matches;
        best_offset = off;
      }
    }
  }
  const double identity = m > 0 ? static_cast<double>(std::max(best_matches, 0L)) / static_cast<double>(m) : 0.0;
  if (identity < options.min_identity)
    throw PdbError(PdbErrorKind::alignment_failure,
                   std::string("chain '") + chain + "' aligns with identity " +
                       std::to_string(identity) + " below floor " +
                       std::to_string(options.min_identity),
                   0, identity);

  CoordinateAssignment out;
  out.positions.assign(sequence.size(), std::nullopt);
  out.identity = identity;
  out.offset = best_offset;
  std::size_t assigned = 0;
  for (long k = 0; k < m; ++k) {
    const long i = best_offset + k;
    if (i < 0 || i >= n) continue;
    if (sequence[static_cast<std::size_t>(i)] != letters[static_cast<std::size_t>(k)]) continue;
    out.positions[static_cast<std::size_t>(i)] = residues[static_cast<std::size_t>(k)].position;
    ++assigned;
  }
  out.coverage_fraction = n > 0 ? static_cast<double>(assigned) / static_cast<double>(n) : 0.0;
  return out;
}

}  // namespace ssrgnet
