#pragma once

// Sequence encoder, relational / plain graph convolution stack, and the
// fusion classifier, all expressed as tape ops so one backward() covers the
// whole network.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssrgnet/autodiff.hpp"
#include "ssrgnet/graph.hpp"
#include "ssrgnet/protein.hpp"

namespace ssrgnet {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class EncoderMode { toy, external };
enum class FusionMode { series, parallel, cross };
enum class LayerType { rgcn, gcn };
enum class Activation { relu, identity };

inline std::string_view fusion_name(FusionMode m) {
  switch (m) {
    case FusionMode::series: return "series";
    case FusionMode::parallel: return "parallel";
    case FusionMode::cross: return "cross";
  }
  return "?";
}

inline FusionMode parse_fusion(std::string_view s) {
  if (s == "series") return FusionMode::series;
  if (s == "parallel") return FusionMode::parallel;
  if (s == "cross") return FusionMode::cross;
  throw ModelError("unknown fusion mode '" + std::string(s) + "'");
}

inline std::string_view layer_name(LayerType t) { return t == LayerType::rgcn ? "rgcn" : "gcn"; }

inline LayerType parse_layer(std::string_view s) {
  if (s == "rgcn") return LayerType::rgcn;
  if (s == "gcn") return LayerType::gcn;
  throw ModelError("unknown layer type '" + std::string(s) + "'");
}

inline std::string_view encoder_name(EncoderMode m) {
  return m == EncoderMode::toy ? "toy" : "external";
}

inline EncoderMode parse_encoder(std::string_view s) {
  if (s == "toy") return EncoderMode::toy;
  if (s == "external") return EncoderMode::external;
  throw ModelError("unknown encoder mode '" + std::string(s) + "'");
}

struct ModelConfig {
  Task task = Task::q3;
  EncoderMode encoder = EncoderMode::toy;
  std::size_t d_in = 64;    // toy token embedding width
  std::size_t d_p = 1024;   // external embedding width
  std::size_t d_g = 128;    // projected sequence feature width
  std::size_t hidden = 128; // graph layer width
  std::size_t layers = 2;
  std::size_t heads = 4;
  bool toy_attention = true;
  FusionMode fusion = FusionMode::parallel;
  LayerType layer = LayerType::rgcn;
  Activation activation = Activation::relu;
  Reduction loss_reduction = Reduction::mean;
  GraphConfig graph;
  std::uint64_t init_seed = 0;

  std::size_t classes() const { return class_count(task); }

  void validate() const {
    graph.validate();
    if (layers == 0) throw ModelError("at least one graph layer is required");
    if (d_g == 0 || hidden == 0 || d_in == 0 || d_p == 0) throw ModelError("widths must be positive");
    if ((fusion == FusionMode::series || fusion == FusionMode::cross) && hidden != d_g)
      throw ModelError(std::string(fusion_name(fusion)) + " fusion needs hidden == d_g");
    if (fusion == FusionMode::cross && d_g % heads != 0)
      throw ModelError("d_g must be divisible by the head count");
    if (encoder == EncoderMode::toy && toy_attention && d_in % heads != 0)
      throw ModelError("d_in must be divisible by the head count");
  }

  nlohmann::json to_json() const {
    return {{"task", task_name(task)},
            {"encoder", encoder_name(encoder)},
            {"d_in", d_in},
            {"d_p", d_p},
            {"d_g", d_g},
            {"hidden", hidden},
            {"layers", layers},
            {"heads", heads},
            {"toy_attention", toy_attention},
            {"fusion", fusion_name(fusion)},
            {"layer", layer_name(layer)},
            {"activation", activation == Activation::relu ? "relu" : "identity"},
            {"loss_reduction", loss_reduction == Reduction::mean ? "mean" : "sum"},
            {"graph", graph.to_json()},
            {"init_seed", init_seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.task = parse_task(j.at("task").get<std::string>());
    c.encoder = parse_encoder(j.at("encoder").get<std::string>());
    c.d_in = j.at("d_in").get<std::size_t>();
    c.d_p = j.at("d_p").get<std::size_t>();
    c.d_g = j.at("d_g").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.toy_attention = j.at("toy_attention").get<bool>();
    c.fusion = parse_fusion(j.at("fusion").get<std::string>());
    c.layer = parse_layer(j.at("layer").get<std::string>());
    c.activation = j.at("activation").get<std::string>() == "identity" ? Activation::identity
                                                                        : Activation::relu;
    c.loss_reduction = j.at("loss_reduction").get<std::string>() == "sum" ? Reduction::sum
                                                                           : Reduction::mean;
    c.graph = GraphConfig::from_json(j.at("graph"));
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Parameter construction
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor glorot(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  Tensor t({fan_in, fan_out});
  for (double& x : t.data()) x = u(rng);
  return t;
}

inline void add_attention_params(ParamStore& store, const std::string& prefix, std::size_t width,
                                 ParamGroup group, std::mt19937_64& rng) {
  for (const char* w : {"wq", "wk", "wv", "wo"}) {
    store.add(prefix + "." + w, glorot(width, width, rng), group);
    store.add(prefix + ".b" + std::string(w + 1), Tensor({width}), group);
  }
}

inline std::string rel_param_name(std::size_t layer, const RelationSlot& slot) {
  return "gnn" + std::to_string(layer) + ".w_" + slot.name();
}

}  // namespace detail

/// Glorot-uniform weights and zero biases drawn from `config.init_seed`.
inline ParamStore init_params(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.init_seed);
  ParamStore store;
  constexpr auto seq = ParamGroup::sequence;
  constexpr auto gr = ParamGroup::graph;

  if (config.encoder == EncoderMode::toy) {
    store.add("seq.embed", detail::glorot(kVocabSize, config.d_in, rng), seq);
    if (config.toy_attention) detail::add_attention_params(store, "seq.attn", config.d_in, seq, rng);
    store.add("seq.proj.w", detail::glorot(config.d_in, config.d_g, rng), seq);
  } else {
    store.add("seq.proj.w", detail::glorot(config.d_p, config.d_g, rng), seq);
  }
  store.add("seq.proj.b", Tensor({config.d_g}), seq);

  const auto slots = config.graph.slots();
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::size_t in = l == 0 ? config.d_g : config.hidden;
    if (config.layer == LayerType::rgcn) {
      for (const auto& s : slots)
        if (config.graph.relations.enabled(s.family))
          store.add(detail::rel_param_name(l, s), detail::glorot(in, config.hidden, rng), gr);
      store.add("gnn" + std::to_string(l) + ".w_self", detail::glorot(in, config.hidden, rng), gr);
    } else {
      store.add("gnn" + std::to_string(l) + ".w", detail::glorot(in, config.hidden, rng), gr);
    }
  }

  const std::size_t c = config.classes();
  switch (config.fusion) {
    case FusionMode::parallel:
      store.add("fuse.w1", detail::glorot(config.d_g + config.hidden, config.d_g, rng), gr);
      store.add("fuse.b1", Tensor({config.d_g}), gr);
      store.add("fuse.w2", detail::glorot(config.d_g, c, rng), gr);
      store.add("fuse.b2", Tensor({c}), gr);
      break;
    case FusionMode::series:
      store.add("fuse.w", detail::glorot(config.d_g, c, rng), gr);
      store.add("fuse.b", Tensor({c}), gr);
      break;
    case FusionMode::cross:
      detail::add_attention_params(store, "fuse.attn", config.d_g, gr, rng);
      store.add("fuse.w", detail::glorot(config.d_g, c, rng), gr);
      store.add("fuse.b", Tensor({c}), gr);
      break;
  }
  return store;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

inline Var activate(Var x, Activation a) { return a == Activation::relu ? relu(x) : x; }

struct AttentionParams {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
  std::size_t heads = 4;
};

inline AttentionParams bind_attention(Tape& t, const ParamStore& s, const std::string& prefix,
                                      std::size_t heads) {
  auto p = [&](const char* n) { return t.param(s, prefix + "." + n); };
  return {p("wq"), p("bq"), p("wk"), p("bk"), p("wv"), p("bv"), p("wo"), p("bo"), heads};
}

/// Multi-head attention with queries from `query_src` and keys/values from
/// `kv_src`, restricted to the row segments in `offsets`.
inline Var attention_block(Var query_src, Var kv_src, const AttentionParams& p,
                           const std::vector<std::size_t>& offsets) {
  Var q = add_bias(matmul(query_src, p.wq), p.bq);
  Var k = add_bias(matmul(kv_src, p.wk), p.bk);
  Var v = add_bias(matmul(kv_src, p.wv), p.bv);
  Var o = attention(q, k, v, p.heads, offsets);
  return add_bias(matmul(o, p.wo), p.bo);
}

struct RgcnLayerParams {
  std::vector<std::optional<Var>> relation_weights;  // parallel to graph.relations
  Var self_weight;
  Activation activation = Activation::relu;
};

struct GcnLayerParams {
  Var weight;
  Activation activation = Activation::relu;
};

namespace detail {

inline void check_graph_rows(const Var& h, const ResidueGraph& g, const char* layer) {
  if (h.value().rows() != g.n_nodes)
    throw ModelError(std::string(layer) + ": feature rows " + std::to_string(h.value().rows()) +
                     " != graph nodes " + std::to_string(g.n_nodes));
  for (const auto& list : g.edges)
    for (const Edge& e : list)
      if (e.source >= g.n_nodes || e.target >= g.n_nodes)
        throw ModelError(std::string(layer) + ": edge (" + std::to_string(e.source) + ", " +
                         std::to_string(e.target) + ") out of range for " +
                         std::to_string(g.n_nodes) + " nodes");
}

// Σ_{j∈N(x)} h_j / |N(x)| for the given edge list, as a tape op.
inline Var mean_aggregate(Var h, const EdgeList& edges, std::size_t n) {
  std::vector<double> degree(n, 0.0);
  for (const Edge& e : edges) degree[e.target] += 1.0;
  std::vector<std::size_t> src, tgt;
  std::vector<double> w;
  src.reserve(edges.size());
  tgt.reserve(edges.size());
  w.reserve(edges.size());
  for (const Edge& e : edges) {
    src.push_back(e.source);
    tgt.push_back(e.target);
    w.push_back(1.0 / degree[e.target]);
  }
  return scatter_add_rows(gather_rows(h, std::move(src)), std::move(tgt), std::move(w), n);
}

}  // namespace detail

/// out_x = σ( Σ_r (1/|N_r(x)|) Σ_{j∈N_r(x)} e_j W_r + e_x W_0 ); relations
/// with no neighbours of x add nothing.
inline Var rgcn_layer(Var h, const ResidueGraph& graph, const RgcnLayerParams& p) {
  detail::check_graph_rows(h, graph, "rgcn_layer");
  Var pre = matmul(h, p.self_weight);
  for (std::size_t r = 0; r < graph.edges.size(); ++r) {
    if (graph.edges[r].empty()) continue;
    if (r >= p.relation_weights.size() || !p.relation_weights[r])
      throw ModelError("rgcn_layer: missing weight for relation " + graph.relations[r].name());
    Var agg = detail::mean_aggregate(h, graph.edges[r], graph.n_nodes);
    pre = add(pre, matmul(agg, *p.relation_weights[r]));
  }
  return activate(pre, p.activation);
}

/// out_x = σ( ((1/deg x) Σ_{j∈N(x)} e_j + e_x) W ) over the union of all edges.
inline Var gcn_layer(Var h, const ResidueGraph& graph, const GcnLayerParams& p) {
  detail::check_graph_rows(h, graph, "gcn_layer");
  std::set<Edge> uni;
  for (const auto& list : graph.edges) uni.insert(list.begin(), list.end());
  Var x = h;
  if (!uni.empty()) {
    EdgeList edges(uni.begin(), uni.end());
    std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
      return std::tie(a.target, a.source) < std::tie(b.target, b.source);
    });
    x = add(h, detail::mean_aggregate(h, edges, graph.n_nodes));
  }
  return activate(matmul(x, p.weight), p.activation);
}

// ---------------------------------------------------------------------------
// Encoders and fusion
// ---------------------------------------------------------------------------

struct ModelInput {
  std::vector<std::size_t> tokens;     // toy mode, concatenated over the batch
  std::optional<Tensor> embeddings;    // external mode, rows × d_p
  const BatchedGraph* graph = nullptr;

  std::size_t rows() const { return graph ? graph->graph.n_nodes : 0; }
};

/// Sequence features H (rows × d_g).
inline Var encode_sequence(Tape& t, const ParamStore& s, const ModelConfig& c, const ModelInput& in,
                           const std::vector<std::size_t>& offsets) {
  Var x;
  if (c.encoder == EncoderMode::toy) {
    if (in.embeddings) throw ModelError("toy encoder given external embeddings");
    if (in.tokens.empty()) throw ModelError("toy encoder needs residue tokens");
    for (std::size_t tok : in.tokens)
      if (tok >= kVocabSize) throw ModelError("unknown residue token " + std::to_string(tok));
    x = gather_rows(t.param(s, "seq.embed"), in.tokens);
    if (c.toy_attention)
      x = add(x, attention_block(x, x, bind_attention(t, s, "seq.attn", c.heads), offsets));
  } else {
    if (!in.embeddings) throw ModelError("external encoder needs an embedding matrix");
    if (in.embeddings->rank() != 2 || in.embeddings->cols() != c.d_p)
      throw ModelError("embedding width " + std::to_string(in.embeddings->cols()) +
                       " != configured d_p " + std::to_string(c.d_p));
    x = t.constant(*in.embeddings);
  }
  return add_bias(matmul(x, t.param(s, "seq.proj.w")), t.param(s, "seq.proj.b"));
}

inline Var encode_structure(Tape& t, const ParamStore& s, const ModelConfig& c, Var h,
                            const ResidueGraph& graph) {
  for (std::size_t l = 0; l < c.layers; ++l) {
    if (c.layer == LayerType::rgcn) {
      RgcnLayerParams p;
      p.activation = c.activation;
      p.self_weight = t.param(s, "gnn" + std::to_string(l) + ".w_self");
      for (const auto& slot : graph.relations) {
        auto idx = s.find(detail::rel_param_name(l, slot));
        p.relation_weights.push_back(idx ? std::optional<Var>(t.param(s, *idx)) : std::nullopt);
      }
      h = rgcn_layer(h, graph, p);
    } else {
      h = gcn_layer(h, graph, {t.param(s, "gnn" + std::to_string(l) + ".w"), c.activation});
    }
  }
  return h;
}

/// Per-residue logits from sequence and structure features.
inline Var fuse(Tape& t, const ParamStore& s, const ModelConfig& c, Var s_seq, Var s_graph,
                const std::vector<std::size_t>& offsets) {
  if (s_seq.value().rows() != s_graph.value().rows())
    throw ModelError("fuse: row counts differ (" + std::to_string(s_seq.value().rows()) + " vs " +
                     std::to_string(s_graph.value().rows()) + ")");
  switch (c.fusion) {
    case FusionMode::parallel: {
      Var hidden = relu(add_bias(matmul(concat_cols(s_seq, s_graph), t.param(s, "fuse.w1")),
                                 t.param(s, "fuse.b1")));
      return add_bias(matmul(hidden, t.param(s, "fuse.w2")), t.param(s, "fuse.b2"));
    }
    case FusionMode::series: {
      if (s_seq.value().cols() != s_graph.value().cols())
        throw ModelError("series fusion: feature widths differ");
      return add_bias(matmul(add(s_seq, s_graph), t.param(s, "fuse.w")), t.param(s, "fuse.b"));
    }
    case FusionMode::cross: {
      if (s_seq.value().cols() != s_graph.value().cols())
        throw ModelError("cross fusion: feature widths differ");
      Var x = add(s_seq, attention_block(s_seq, s_graph, bind_attention(t, s, "fuse.attn", c.heads),
                                         offsets));
      return add_bias(matmul(x, t.param(s, "fuse.w")), t.param(s, "fuse.b"));
    }
  }
  throw ModelError("unreachable fusion mode");
}

/// Full network: logits (rows × classes).
inline Var forward(Tape& t, const ParamStore& s, const ModelConfig& c, const ModelInput& in) {
  if (!in.graph) throw ModelError("forward: no graph batch");
  const auto& offsets = in.graph->offsets;
  Var h = encode_sequence(t, s, c, in, offsets);
  if (h.value().rows() != in.graph->graph.n_nodes)
    throw ModelError("forward: sequence rows " + std::to_string(h.value().rows()) +
                     " != graph nodes " + std::to_string(in.graph->graph.n_nodes));
  Var e = encode_structure(t, s, c, h, in.graph->graph);
  return fuse(t, s, c, h, e, offsets);
}

inline std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  std::vector<std::size_t> out;
  out.reserve(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    out.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return out;
}

}  // namespace ssrgnet
