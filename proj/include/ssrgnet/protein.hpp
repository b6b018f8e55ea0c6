#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ssrgnet {

/// 20 standard residues followed by the catch-all X. Token ids index this string.
inline constexpr std::string_view kResidueAlphabet = "ARNDCQEGHILKMFPSTWYV" "X";
inline constexpr std::size_t kVocabSize = kResidueAlphabet.size();

/// Maps any one-letter code to the 21-letter alphabet; B, Z, U, O and
/// anything unrecognized become X.
inline char canonical_residue(char c) {
  if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
  return kResidueAlphabet.find(c) == std::string_view::npos ? 'X' : c;
}

inline std::size_t residue_token(char c) {
  const auto pos = kResidueAlphabet.find(c);
  if (pos == std::string_view::npos)
    throw std::invalid_argument(std::string("unknown residue symbol '") + c + "'");
  return pos;
}

enum class Task { q3, q8 };

/// Class order used for logits, confusion matrices and reports.
inline constexpr std::string_view kQ3Classes = "HEC";
inline constexpr std::string_view kQ8Classes = "HECSTGBI";

inline std::string_view class_order(Task task) { return task == Task::q3 ? kQ3Classes : kQ8Classes; }
inline std::size_t class_count(Task task) { return class_order(task).size(); }

inline std::string_view task_name(Task task) { return task == Task::q3 ? "q3" : "q8"; }

inline Task parse_task(std::string_view s) {
  if (s == "q3" || s == "3") return Task::q3;
  if (s == "q8" || s == "8") return Task::q8;
  throw std::invalid_argument("unknown task '" + std::string(s) + "' (expected q3 or q8)");
}

/// DSSP 8→3 grouping: H,G,I → H; E,B → E; T,S,C → C.
inline char q8_to_q3(char c) {
  switch (c) {
    case 'H': case 'G': case 'I': return 'H';
    case 'E': case 'B': return 'E';
    case 'T': case 'S': case 'C': return 'C';
    default:
      throw std::invalid_argument(std::string("unknown 8-state label '") + c + "'");
  }
}

inline std::string q8_to_q3(std::string_view q8) {
  std::string out;
  out.reserve(q8.size());
  for (char c : q8) out.push_back(q8_to_q3(c));
  return out;
}

inline std::size_t label_index(Task task, char c) {
  const auto pos = class_order(task).find(c);
  if (pos == std::string_view::npos)
    throw std::invalid_argument(std::string("label '") + c + "' not in " +
                                std::string(class_order(task)));
  return pos;
}

using Vec3 = std::array<double, 3>;

struct ProteinRecord {
  std::string id;
  std::string sequence;
  std::string q3;
  std::string q8;
  std::vector<bool> mask;
  // Empty when the protein has no structure; otherwise one entry per residue.
  std::vector<std::optional<Vec3>> coords;
  bool truncated = false;

  std::size_t length() const noexcept { return sequence.size(); }
  bool has_coords() const noexcept { return !coords.empty(); }

  const std::string& labels(Task task) const { return task == Task::q3 ? q3 : q8; }

  std::vector<std::size_t> label_indices(Task task) const {
    std::vector<std::size_t> out;
    out.reserve(length());
    for (char c : labels(task)) out.push_back(label_index(task, c));
    return out;
  }

  std::vector<std::size_t> tokens() const {
    std::vector<std::size_t> out;
    out.reserve(length());
    for (char c : sequence) out.push_back(residue_token(c));
    return out;
  }

  /// Throws std::invalid_argument naming the violated invariant.
  void validate() const {
    const std::size_t n = sequence.size();
    if (q3.size() != n || q8.size() != n || mask.size() != n)
      throw std::invalid_argument(id + ": sequence, label and mask lengths differ");
    if (!coords.empty() && coords.size() != n)
      throw std::invalid_argument(id + ": coordinate count differs from sequence length");
    for (char c : sequence) residue_token(c);
    for (std::size_t i = 0; i < n; ++i)
      if (q8_to_q3(q8[i]) != q3[i])
        throw std::invalid_argument(id + ": q3 label disagrees with grouped q8 label at " +
                                    std::to_string(i));
  }
};

}  // namespace ssrgnet
