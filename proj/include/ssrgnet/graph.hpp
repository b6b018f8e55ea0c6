#pragma once

// Multi-relational residue graphs: sequential-offset, radius and kNN
// relations, diagonal batching, and the on-disk graph cache.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssrgnet/hash.hpp"
#include "ssrgnet/npy.hpp"
#include "ssrgnet/protein.hpp"
#include "ssrgnet/spatial_grid.hpp"

namespace ssrgnet {

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// R1 = sequential offsets, R2 = radius contacts, R3 = k nearest neighbours.
enum class RelationFamily { sequential, radius, knn };

struct RelationSlot {
  RelationFamily family = RelationFamily::sequential;
  int offset = 0;  // sequential only

  std::string name() const {
    switch (family) {
      case RelationFamily::radius: return "radius";
      case RelationFamily::knn: return "knn";
      case RelationFamily::sequential:
        if (offset == -1) return "seq_prev";
        if (offset == 0) return "seq_self";
        if (offset == 1) return "seq_next";
        return "seq" + std::string(offset > 0 ? "+" : "") + std::to_string(offset);
    }
    return "?";
  }

  friend bool operator==(const RelationSlot&, const RelationSlot&) = default;
};

struct RelationMask {
  bool sequential = true;
  bool radius = true;
  bool knn = true;

  bool enabled(RelationFamily f) const {
    switch (f) {
      case RelationFamily::sequential: return sequential;
      case RelationFamily::radius: return radius;
      case RelationFamily::knn: return knn;
    }
    return false;
  }

  /// "all", or a '+'-separated subset of r1, r2, r3.
  static RelationMask parse(std::string_view s) {
    if (s == "all") return {};
    RelationMask m{false, false, false};
    std::size_t start = 0;
    while (start <= s.size()) {
      const auto end = std::min(s.find('+', start), s.size());
      const auto tok = s.substr(start, end - start);
      if (tok == "r1") m.sequential = true;
      else if (tok == "r2") m.radius = true;
      else if (tok == "r3") m.knn = true;
      else throw GraphError("unknown relation '" + std::string(tok) + "' (expected r1, r2, r3 or all)");
      start = end + 1;
    }
    return m;
  }

  std::string str() const {
    if (sequential && radius && knn) return "all";
    std::string out;
    auto add = [&](bool on, const char* name) {
      if (!on) return;
      if (!out.empty()) out += '+';
      out += name;
    };
    add(sequential, "r1");
    add(radius, "r2");
    add(knn, "r3");
    return out.empty() ? "none" : out;
  }

  friend bool operator==(const RelationMask&, const RelationMask&) = default;
};

struct GraphConfig {
  int d_s = 2;
  double d_ed = 10.0;
  std::size_t k_n = 10;
  RelationMask relations;
  // Drop pairs with |i - j| < d_s from the radius and kNN relations.
  bool exclude_sequential_from_spatial = false;
  // Fail instead of keeping coordinate-less residues as sequence-only nodes.
  bool strict_coords = false;

  void validate() const {
    if (d_s < 1) throw GraphError("d_s must be >= 1");
    if (!(d_ed > 0.0) || !std::isfinite(d_ed)) throw GraphError("d_ed must be positive");
    if (k_n < 1) throw GraphError("k_n must be >= 1");
  }

  /// Slot layout: sequential offsets -(d_s-1)..+(d_s-1), then radius, then kNN.
  std::vector<RelationSlot> slots() const {
    std::vector<RelationSlot> out;
    for (int o = -(d_s - 1); o <= d_s - 1; ++o) out.push_back({RelationFamily::sequential, o});
    out.push_back({RelationFamily::radius, 0});
    out.push_back({RelationFamily::knn, 0});
    return out;
  }

  nlohmann::json to_json() const {
    return {{"d_s", d_s},
            {"d_ed", d_ed},
            {"k_n", k_n},
            {"relations", relations.str()},
            {"exclude_sequential_from_spatial", exclude_sequential_from_spatial},
            {"strict_coords", strict_coords}};
  }

  static GraphConfig from_json(const nlohmann::json& j) {
    GraphConfig c;
    c.d_s = j.at("d_s").get<int>();
    c.d_ed = j.at("d_ed").get<double>();
    c.k_n = j.at("k_n").get<std::size_t>();
    const auto rel = j.at("relations").get<std::string>();
    c.relations = rel == "none" ? RelationMask{false, false, false} : RelationMask::parse(rel);
    c.exclude_sequential_from_spatial = j.value("exclude_sequential_from_spatial", false);
    c.strict_coords = j.value("strict_coords", false);
    c.validate();
    return c;
  }

  std::string hash() const { return hex64(fnv1a64(to_json().dump())); }

  friend bool operator==(const GraphConfig&, const GraphConfig&) = default;
};

struct Edge {
  std::size_t source;
  std::size_t target;
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

using EdgeList = std::vector<Edge>;

struct ResidueGraph {
  std::size_t n_nodes = 0;
  std::vector<RelationSlot> relations;
  std::vector<EdgeList> edges;  // parallel to `relations`
  std::vector<bool> coords_present;

  std::size_t edge_count() const {
    std::size_t n = 0;
    for (const auto& e : edges) n += e.size();
    return n;
  }

  std::optional<std::size_t> slot_of(RelationSlot r) const {
    for (std::size_t i = 0; i < relations.size(); ++i)
      if (relations[i] == r) return i;
    return std::nullopt;
  }

  const EdgeList& edges_of(RelationSlot r) const {
    auto i = slot_of(r);
    if (!i) throw GraphError("graph has no relation " + r.name());
    return edges[*i];
  }

  friend bool operator==(const ResidueGraph&, const ResidueGraph&) = default;
};

struct BatchedGraph {
  ResidueGraph graph;
  std::vector<std::size_t> offsets;  // prefix sums, size = graphs + 1

  std::size_t graph_count() const { return offsets.size() - 1; }
};

namespace detail {

inline void sort_edges(EdgeList& e) { std::sort(e.begin(), e.end()); }

struct PresentPoints {
  std::vector<Vec3> points;
  std::vector<std::size_t> ids;
};

inline PresentPoints present_points(const std::vector<std::optional<Vec3>>& coords) {
  PresentPoints out;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    if (!coords[i]) continue;
    for (double v : *coords[i])
      if (!std::isfinite(v))
        throw GraphError("non-finite coordinate at node " + std::to_string(i));
    out.points.push_back(*coords[i]);
    out.ids.push_back(i);
  }
  return out;
}

inline bool sequence_close(std::size_t a, std::size_t b, int d_s) {
  const std::size_t gap = a > b ? a - b : b - a;
  return gap < static_cast<std::size_t>(d_s);
}

}  // namespace detail

/// One edge list per signed offset o with |o| < d_s: (i, i+o) for valid i.
inline std::vector<EdgeList> sequential_edges(std::size_t n, int d_s) {
  if (d_s < 1) throw GraphError("d_s must be >= 1");
  std::vector<EdgeList> out;
  for (int o = -(d_s - 1); o <= d_s - 1; ++o) {
    EdgeList list;
    for (std::size_t i = 0; i < n; ++i) {
      const long j = static_cast<long>(i) + o;
      if (j < 0 || j >= static_cast<long>(n)) continue;
      list.push_back({i, static_cast<std::size_t>(j)});
    }
    out.push_back(std::move(list));
  }
  return out;
}

/// Both directions for every pair of coordinate-bearing nodes with
/// distance strictly below d_ed.
inline EdgeList radius_edges(const std::vector<std::optional<Vec3>>& coords, double d_ed,
                             int exclude_within_d_s = 0) {
  if (!(d_ed > 0.0)) throw GraphError("d_ed must be positive");
  auto pts = detail::present_points(coords);
  EdgeList out;
  if (pts.points.size() < 2) return out;
  const SpatialGrid grid(pts.points, pts.ids, d_ed);
  for (std::size_t k = 0; k < pts.ids.size(); ++k) {
    const std::size_t i = pts.ids[k];
    for (std::size_t j : grid.within(k, d_ed)) {
      if (exclude_within_d_s > 0 && detail::sequence_close(i, j, exclude_within_d_s)) continue;
      out.push_back({i, j});
    }
  }
  detail::sort_edges(out);
  return out;
}

/// Edges (j, i) from the k_n nearest coordinate-bearing nodes j of each node
/// i; equal distances resolve to the smaller index.
inline EdgeList knn_edges(const std::vector<std::optional<Vec3>>& coords, std::size_t k_n,
                          double cell = 10.0, int exclude_within_d_s = 0) {
  if (k_n < 1) throw GraphError("k_n must be >= 1");
  auto pts = detail::present_points(coords);
  EdgeList out;
  if (pts.points.size() < 2) return out;
  const SpatialGrid grid(pts.points, pts.ids, cell);
  for (std::size_t k = 0; k < pts.ids.size(); ++k) {
    const std::size_t i = pts.ids[k];
    auto accept = [&](std::size_t j) {
      return exclude_within_d_s == 0 || !detail::sequence_close(i, j, exclude_within_d_s);
    };
    for (const auto& nb : grid.nearest(k, k_n, accept)) out.push_back({nb.index, i});
  }
  detail::sort_edges(out);
  return out;
}

inline ResidueGraph build_graph(const ProteinRecord& record, const GraphConfig& config) {
  config.validate();
  const std::size_t n = record.length();
  if (n == 0) throw GraphError(record.id + ": empty protein");

  std::vector<std::optional<Vec3>> coords = record.coords;
  if (coords.empty()) coords.assign(n, std::nullopt);
  if (coords.size() != n) throw GraphError(record.id + ": coordinate count differs from length");
  if (config.strict_coords)
    for (std::size_t i = 0; i < n; ++i)
      if (!coords[i])
        throw GraphError(record.id + ": missing coordinate at node " + std::to_string(i));

  ResidueGraph g;
  g.n_nodes = n;
  g.relations = config.slots();
  g.edges.resize(g.relations.size());
  for (std::size_t i = 0; i < n; ++i) g.coords_present.push_back(coords[i].has_value());

  const int exclude = config.exclude_sequential_from_spatial ? config.d_s : 0;
  const std::size_t n_seq = static_cast<std::size_t>(2 * config.d_s - 1);
  if (config.relations.sequential) {
    auto seq = sequential_edges(n, config.d_s);
    for (std::size_t s = 0; s < n_seq; ++s) g.edges[s] = std::move(seq[s]);
  }
  if (config.relations.radius) g.edges[n_seq] = radius_edges(coords, config.d_ed, exclude);
  if (config.relations.knn) g.edges[n_seq + 1] = knn_edges(coords, config.k_n, config.d_ed, exclude);
  return g;
}

inline BatchedGraph diagonal_batch(const std::vector<const ResidueGraph*>& graphs) {
  if (graphs.empty()) throw GraphError("diagonal_batch: empty graph list");
  BatchedGraph b;
  b.graph.relations = graphs.front()->relations;
  b.graph.edges.resize(b.graph.relations.size());
  b.offsets.push_back(0);
  for (const ResidueGraph* g : graphs) {
    if (g->relations != b.graph.relations)
      throw GraphError("diagonal_batch: graphs built with different relation layouts");
    const std::size_t off = b.offsets.back();
    for (std::size_t r = 0; r < g->edges.size(); ++r)
      for (const Edge& e : g->edges[r]) b.graph.edges[r].push_back({e.source + off, e.target + off});
    b.graph.coords_present.insert(b.graph.coords_present.end(), g->coords_present.begin(),
                                  g->coords_present.end());
    b.offsets.push_back(off + g->n_nodes);
  }
  b.graph.n_nodes = b.offsets.back();
  return b;
}

inline BatchedGraph diagonal_batch(const std::vector<ResidueGraph>& graphs) {
  std::vector<const ResidueGraph*> ptrs;
  for (const auto& g : graphs) ptrs.push_back(&g);
  return diagonal_batch(ptrs);
}

// ---------------------------------------------------------------------------
// Graph cache file
//
//   "SSRG" | u32 version=1 | u32 n_nodes | u32 n_relations
//   per relation: u32 family | i32 offset | u32 edge_count
//   per relation: edge_count × (u32 source, u32 target)
//   n_nodes × u8 coords_present
// All integers little-endian.
// ---------------------------------------------------------------------------

inline Bytes encode_graph(const ResidueGraph& g) {
  Bytes out = {'S', 'S', 'R', 'G'};
  auto u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
  };
  u32(1);
  u32(static_cast<std::uint32_t>(g.n_nodes));
  u32(static_cast<std::uint32_t>(g.relations.size()));
  for (std::size_t r = 0; r < g.relations.size(); ++r) {
    u32(static_cast<std::uint32_t>(g.relations[r].family));
    u32(static_cast<std::uint32_t>(g.relations[r].offset));
    u32(static_cast<std::uint32_t>(g.edges[r].size()));
  }
  for (const auto& list : g.edges)
    for (const Edge& e : list) {
      u32(static_cast<std::uint32_t>(e.source));
      u32(static_cast<std::uint32_t>(e.target));
    }
  for (bool b : g.coords_present) out.push_back(b ? 1 : 0);
  return out;
}

inline ResidueGraph decode_graph(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto u32 = [&]() -> std::uint32_t {
    if (pos + 4 > bytes.size()) throw GraphError("graph cache file truncated");
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | bytes[pos + static_cast<std::size_t>(i)];
    pos += 4;
    return v;
  };
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "SSRG", 4) != 0)
    throw GraphError("not a graph cache file");
  pos = 4;
  if (u32() != 1) throw GraphError("unsupported graph cache version");
  ResidueGraph g;
  g.n_nodes = u32();
  const std::uint32_t nrel = u32();
  std::vector<std::uint32_t> counts;
  for (std::uint32_t r = 0; r < nrel; ++r) {
    const std::uint32_t fam = u32();
    if (fam > 2) throw GraphError("bad relation family in graph cache");
    const auto off = static_cast<std::int32_t>(u32());
    g.relations.push_back({static_cast<RelationFamily>(fam), off});
    counts.push_back(u32());
  }
  for (std::uint32_t r = 0; r < nrel; ++r) {
    EdgeList list;
    for (std::uint32_t k = 0; k < counts[r]; ++k) {
      const std::size_t s = u32(), t = u32();
      if (s >= g.n_nodes || t >= g.n_nodes) throw GraphError("edge index out of range in graph cache");
      list.push_back({s, t});
    }
    g.edges.push_back(std::move(list));
  }
  if (pos + g.n_nodes != bytes.size()) throw GraphError("graph cache length mismatch");
  for (std::size_t i = 0; i < g.n_nodes; ++i) g.coords_present.push_back(bytes[pos + i] != 0);
  return g;
}

}  // namespace ssrgnet
