#pragma once

// NetSurfP-style NPZ ingestion, external embedding files, coordinate
// sidecars, and the canonical on-disk dataset directory.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssrgnet/npz.hpp"
#include "ssrgnet/protein.hpp"
#include "ssrgnet/tensor.hpp"

namespace ssrgnet {

enum class IngestErrorKind { schema_rejected, length_mismatch, missing_key, dimension, missing_protein };

class IngestError : public std::runtime_error {
 public:
  IngestError(IngestErrorKind kind, const std::string& what, double measured = 0.0)
      : std::runtime_error(what), kind_(kind), measured_(measured) {}
  IngestErrorKind kind() const noexcept { return kind_; }
  // One-hot rate for schema rejections.
  double measured() const noexcept { return measured_; }

 private:
  IngestErrorKind kind_;
  double measured_;
};

struct ColumnRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t width() const { return end - begin; }
  friend bool operator==(const ColumnRange&, const ColumnRange&) = default;
};

/// Where each per-residue block lives in the feature vector. Defaults follow
/// the NetSurfP-2.0 68-column layout.
struct ColumnSchema {
  std::string features_key = "data";
  std::string ids_key = "pdbids";
  ColumnRange amino_acids{0, 20};
  std::string amino_acid_order = "ACDEFGHIKLMNPQRSTVWY";
  std::size_t mask_column = 50;
  ColumnRange q8{57, 65};
  std::string q8_order = "GHIBESTC";
  std::optional<ColumnRange> q3;
  std::string q3_order = "HEC";
  double min_one_hot_rate = 0.99;
  std::size_t max_length = 1022;

  void validate(std::size_t width) const {
    auto fail = [](const std::string& m) { throw IngestError(IngestErrorKind::schema_rejected, m); };
    std::vector<ColumnRange> ranges = {amino_acids, q8, ColumnRange{mask_column, mask_column + 1}};
    if (q3) ranges.push_back(*q3);
    for (const auto& r : ranges)
      if (r.begin >= r.end || r.end > width)
        fail("column range [" + std::to_string(r.begin) + ", " + std::to_string(r.end) +
             ") outside feature width " + std::to_string(width));
    for (std::size_t a = 0; a < ranges.size(); ++a)
      for (std::size_t b = a + 1; b < ranges.size(); ++b)
        if (ranges[a].begin < ranges[b].end && ranges[b].begin < ranges[a].end)
          fail("schema column ranges overlap");
    if (amino_acid_order.size() != amino_acids.width()) fail("amino-acid order does not match block width");
    if (q8_order.size() != q8.width()) fail("q8 order does not match block width");
    if (q3 && q3_order.size() != q3->width()) fail("q3 order does not match block width");
    for (char c : q8_order)
      if (kQ8Classes.find(c) == std::string_view::npos) fail(std::string("bad q8 symbol '") + c + "'");
  }

  nlohmann::json to_json() const {
    nlohmann::json j = {{"features_key", features_key},
                        {"ids_key", ids_key},
                        {"amino_acids", {amino_acids.begin, amino_acids.end}},
                        {"amino_acid_order", amino_acid_order},
                        {"mask_column", mask_column},
                        {"q8", {q8.begin, q8.end}},
                        {"q8_order", q8_order},
                        {"q3_order", q3_order},
                        {"min_one_hot_rate", min_one_hot_rate},
                        {"max_length", max_length}};
    j["q3"] = q3 ? nlohmann::json{q3->begin, q3->end} : nlohmann::json(nullptr);
    return j;
  }

  static ColumnSchema from_json(const nlohmann::json& j) {
    ColumnSchema s;
    auto range = [](const nlohmann::json& r) {
      return ColumnRange{r.at(0).get<std::size_t>(), r.at(1).get<std::size_t>()};
    };
    s.features_key = j.value("features_key", s.features_key);
    s.ids_key = j.value("ids_key", s.ids_key);
    if (j.contains("amino_acids")) s.amino_acids = range(j["amino_acids"]);
    s.amino_acid_order = j.value("amino_acid_order", s.amino_acid_order);
    s.mask_column = j.value("mask_column", s.mask_column);
    if (j.contains("q8")) s.q8 = range(j["q8"]);
    s.q8_order = j.value("q8_order", s.q8_order);
    if (j.contains("q3") && !j["q3"].is_null()) s.q3 = range(j["q3"]);
    s.q3_order = j.value("q3_order", s.q3_order);
    s.min_one_hot_rate = j.value("min_one_hot_rate", s.min_one_hot_rate);
    s.max_length = j.value("max_length", s.max_length);
    return s;
  }
};

namespace detail {

inline std::size_t argmax_block(const double* row, ColumnRange r) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < r.width(); ++k)
    if (row[r.begin + k] > row[r.begin + best]) best = k;
  return best;
}

}  // namespace detail

/// Decodes the per-residue feature tensor into records, in id-array order.
inline std::vector<ProteinRecord> ingest_netsurf(const NpzArchive& npz, const ColumnSchema& schema) {
  auto feat_it = npz.find(schema.features_key);
  auto ids_it = npz.find(schema.ids_key);
  if (feat_it == npz.end())
    throw IngestError(IngestErrorKind::missing_key, "archive has no '" + schema.features_key + "' array");
  if (ids_it == npz.end())
    throw IngestError(IngestErrorKind::missing_key, "archive has no '" + schema.ids_key + "' array");
  const NpyArray& feat = feat_it->second;
  if (feat.shape.size() != 3)
    throw IngestError(IngestErrorKind::length_mismatch, "feature array must be 3-D (proteins, residues, columns)");
  const std::vector<std::string> ids = ids_it->second.to_strings();
  const std::size_t n_prot = feat.shape[0], max_len = feat.shape[1], width = feat.shape[2];
  if (ids.size() != n_prot)
    throw IngestError(IngestErrorKind::length_mismatch,
                      std::to_string(ids.size()) + " ids for " + std::to_string(n_prot) + " proteins");
  schema.validate(width);
  const std::vector<double> values = feat.to_doubles();

  std::vector<ProteinRecord> out;
  std::size_t checked = 0, one_hot = 0;
  for (std::size_t p = 0; p < n_prot; ++p) {
    const double* base = values.data() + p * max_len * width;
    std::size_t length = 0;
    for (std::size_t i = 0; i < max_len; ++i)
      if (base[i * width + schema.mask_column] > 0.5) length = i + 1;
    if (length == 0)
      throw IngestError(IngestErrorKind::length_mismatch, ids[p] + ": no masked-in residues");

    ProteinRecord r;
    r.id = ids[p];
    for (std::size_t i = 0; i < length; ++i) {
      const double* row = base + i * width;
      const bool in = row[schema.mask_column] > 0.5;
      std::size_t hot = 0;
      bool any = false;
      for (std::size_t k = schema.amino_acids.begin; k < schema.amino_acids.end; ++k) {
        if (row[k] >= 0.5) ++hot;
        if (row[k] != 0.0) any = true;
      }
      if (in) {
        ++checked;
        if (hot == 1) ++one_hot;
      }
      r.sequence.push_back(
          any ? canonical_residue(schema.amino_acid_order[detail::argmax_block(row, schema.amino_acids)])
              : 'X');
      r.q8.push_back(schema.q8_order[detail::argmax_block(row, schema.q8)]);
      r.mask.push_back(in);
    }
    r.q3 = q8_to_q3(r.q8);
    if (r.length() > schema.max_length) {
      r.sequence.resize(schema.max_length);
      r.q8.resize(schema.max_length);
      r.q3.resize(schema.max_length);
      r.mask.resize(schema.max_length);
      r.truncated = true;
    }
    out.push_back(std::move(r));
  }
  const double rate = checked ? static_cast<double>(one_hot) / static_cast<double>(checked) : 0.0;
  if (rate < schema.min_one_hot_rate)
    throw IngestError(IngestErrorKind::schema_rejected,
                      "amino-acid block is one-hot on only " + std::to_string(100.0 * rate) +
                          "% of masked residues; the column schema does not match this file",
                      rate);
  return out;
}

/// Per-residue external embeddings keyed by protein id.
struct EmbeddingFile {
  std::size_t dim = 0;
  std::map<std::string, Tensor> matrices;

  /// Rows for `record`, validated against its length. A truncated record uses
  /// the leading rows.
  Tensor for_record(const ProteinRecord& record) const {
    auto it = matrices.find(record.id);
    if (it == matrices.end())
      throw IngestError(IngestErrorKind::missing_protein, "no embedding for protein " + record.id);
    const Tensor& m = it->second;
    if (m.rows() == record.length()) return m;
    if (record.truncated && m.rows() > record.length()) {
      std::vector<double> head(m.data().begin(),
                               m.data().begin() + static_cast<std::ptrdiff_t>(record.length() * m.cols()));
      return Tensor({record.length(), m.cols()}, std::move(head));
    }
    throw IngestError(IngestErrorKind::length_mismatch,
                      record.id + ": embedding has " + std::to_string(m.rows()) + " rows for " +
                          std::to_string(record.length()) + " residues");
  }
};

inline EmbeddingFile embeddings_from_npz(const NpzArchive& npz, std::size_t d_p) {
  EmbeddingFile f;
  f.dim = d_p;
  for (const auto& [id, arr] : npz) {
    if (arr.shape.size() != 2 || arr.shape[1] != d_p)
      throw IngestError(IngestErrorKind::dimension,
                        id + ": embedding width " +
                            (arr.shape.size() == 2 ? std::to_string(arr.shape[1]) : std::string("?")) +
                            " != configured d_p " + std::to_string(d_p));
    f.matrices.emplace(id, Tensor({arr.shape[0], arr.shape[1]}, arr.to_doubles()));
  }
  return f;
}

inline EmbeddingFile load_embeddings(const std::filesystem::path& path, std::size_t d_p = 1024) {
  return embeddings_from_npz(load_npz(path), d_p);
}

// ---------------------------------------------------------------------------
// Coordinate sidecars: (L, 3) float64, NaN rows where unassigned.
// ---------------------------------------------------------------------------

inline NpyArray coords_to_npy(const std::vector<std::optional<Vec3>>& coords) {
  std::vector<double> v;
  v.reserve(coords.size() * 3);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& c : coords)
    for (int k = 0; k < 3; ++k) v.push_back(c ? (*c)[static_cast<std::size_t>(k)] : nan);
  return NpyArray::from_doubles({coords.size(), 3}, v);
}

inline std::vector<std::optional<Vec3>> coords_from_npy(const NpyArray& a) {
  if (a.shape.size() != 2 || a.shape[1] != 3)
    throw IngestError(IngestErrorKind::dimension, "coordinate sidecar must have shape (L, 3)");
  const auto v = a.to_doubles();
  std::vector<std::optional<Vec3>> out;
  for (std::size_t i = 0; i < a.shape[0]; ++i) {
    const Vec3 p{v[3 * i], v[3 * i + 1], v[3 * i + 2]};
    if (std::isnan(p[0]) || std::isnan(p[1]) || std::isnan(p[2])) out.emplace_back(std::nullopt);
    else out.emplace_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Canonical dataset directory
//
//   index.json            ids, lengths, label strings, masks, flags
//   coords/<id>.npy       optional coordinate sidecars
//   embeddings/<id>.npy   optional external embeddings
// ---------------------------------------------------------------------------

inline std::string file_stem_for(const std::string& id) {
  std::string s;
  for (char c : id) s.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.' ? c : '_');
  return s;
}

struct Dataset {
  std::vector<ProteinRecord> records;
  std::optional<EmbeddingFile> embeddings;

  const ProteinRecord* find(const std::string& id) const {
    for (const auto& r : records)
      if (r.id == id) return &r;
    return nullptr;
  }
};

inline std::string mask_string(const std::vector<bool>& mask) {
  std::string s;
  for (bool b : mask) s.push_back(b ? '1' : '0');
  return s;
}

inline std::vector<bool> parse_mask(const std::string& s) {
  std::vector<bool> m;
  for (char c : s) m.push_back(c == '1');
  return m;
}

inline void save_dataset(const std::filesystem::path& dir, const Dataset& data) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json proteins = nlohmann::json::array();
  for (const auto& r : data.records) {
    r.validate();
    nlohmann::json p = {{"id", r.id},
                        {"length", r.length()},
                        {"sequence", r.sequence},
                        {"q3", r.q3},
                        {"q8", r.q8},
                        {"mask", mask_string(r.mask)},
                        {"truncated", r.truncated},
                        {"has_coords", r.has_coords()}};
    const std::string stem = file_stem_for(r.id);
    if (r.has_coords()) {
      const auto rel = "coords/" + stem + ".npy";
      save_npy(dir / rel, coords_to_npy(r.coords));
      p["coords_file"] = rel;
    } else {
      p["coords_file"] = nullptr;
    }
    if (data.embeddings) {
      const Tensor m = data.embeddings->for_record(r);
      const auto rel = "embeddings/" + stem + ".npy";
      save_npy(dir / rel, NpyArray::from_doubles({m.rows(), m.cols()}, m.data()));
      p["embedding_file"] = rel;
    } else {
      p["embedding_file"] = nullptr;
    }
    proteins.push_back(std::move(p));
  }
  nlohmann::json index = {{"format", "ssrgnet-dataset"}, {"version", 1}, {"proteins", proteins}};
  if (data.embeddings) index["embedding_dim"] = data.embeddings->dim;
  std::ofstream(dir / "index.json") << index.dump(2) << '\n';
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw IngestError(IngestErrorKind::missing_key, "no index.json in " + dir.string());
  const nlohmann::json index = nlohmann::json::parse(in);
  if (index.value("format", "") != "ssrgnet-dataset")
    throw IngestError(IngestErrorKind::missing_key, dir.string() + " is not a dataset directory");
  Dataset d;
  bool any_embedding = false;
  EmbeddingFile emb;
  emb.dim = index.value("embedding_dim", std::size_t{0});
  for (const auto& p : index.at("proteins")) {
    ProteinRecord r;
    r.id = p.at("id").get<std::string>();
    r.sequence = p.at("sequence").get<std::string>();
    r.q3 = p.at("q3").get<std::string>();
    r.q8 = p.at("q8").get<std::string>();
    r.mask = parse_mask(p.at("mask").get<std::string>());
    r.truncated = p.value("truncated", false);
    if (p.contains("coords_file") && !p["coords_file"].is_null())
      r.coords = coords_from_npy(load_npy(dir / p["coords_file"].get<std::string>()));
    if (p.contains("embedding_file") && !p["embedding_file"].is_null()) {
      const NpyArray a = load_npy(dir / p["embedding_file"].get<std::string>());
      emb.matrices.emplace(r.id, Tensor({a.shape.at(0), a.shape.at(1)}, a.to_doubles()));
      any_embedding = true;
    }
    r.validate();
    d.records.push_back(std::move(r));
  }
  if (any_embedding) d.embeddings = std::move(emb);
  return d;
}

}  // namespace ssrgnet
