#pragma once

// Command-line front end. `run` parses argv, dispatches one subcommand and
// maps failures to a JSON error object on stderr plus a nonzero exit code.
//
// Exit codes: 0 ok, 1 internal, 2 usage, 3 missing input, 4 config-hash
// mismatch, 5 invalid data, 6 training diverged.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <list>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssrgnet/dataset.hpp"
#include "ssrgnet/graph.hpp"
#include "ssrgnet/hash.hpp"
#include "ssrgnet/metrics.hpp"
#include "ssrgnet/npz.hpp"
#include "ssrgnet/pdb.hpp"
#include "ssrgnet/synthetic.hpp"
#include "ssrgnet/trainer.hpp"

namespace ssrgnet::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kRunRootEnv = "SSRGNET_RUN_ROOT";

enum class Exit : int {
  ok = 0,
  internal = 1,
  usage = 2,
  missing_input = 3,
  config_mismatch = 4,
  invalid_data = 5,
  diverged = 6,
};

class CliError : public std::runtime_error {
 public:
  CliError(Exit code, std::string category, const std::string& what)
      : std::runtime_error(what), code_(code), category_(std::move(category)) {}
  Exit code() const noexcept { return code_; }
  const std::string& category() const noexcept { return category_; }

 private:
  Exit code_;
  std::string category_;
};

[[noreturn]] inline void missing(const std::string& what) {
  throw CliError(Exit::missing_input, "missing_input", what);
}

inline void require_file(const fs::path& p, const std::string& role) {
  if (!fs::exists(p)) missing(role + " not found: " + p.string());
}

// ---------------------------------------------------------------------------
// Settings: built-in defaults < preset < config file < flags
// ---------------------------------------------------------------------------

inline TrainConfig paper_preset() {
  TrainConfig c;  // d_s=2, d_ed=10, k_n=10, hidden 128, 2 layers, lrs 1e-5 / 3e-4
  c.max_epochs = 100;
  c.patience = 5;
  return c;
}

inline std::string scalar_text(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

/// Applies one named setting. Keys use the flag spelling without dashes,
/// with '-' or '_' accepted interchangeably.
inline void apply_setting(TrainConfig& c, std::string key, const std::string& value) {
  std::replace(key.begin(), key.end(), '-', '_');
  auto num = [&]() {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != value.size()) throw CliError(Exit::usage, "usage", "setting " + key + " expects a number, got '" + value + "'");
    return v;
  };
  auto count = [&]() {
    const double v = num();
    if (v < 0 || v != static_cast<double>(static_cast<std::uint64_t>(v)))
      throw CliError(Exit::usage, "usage", "setting " + key + " expects a non-negative integer");
    return static_cast<std::uint64_t>(v);
  };
  auto flag = [&]() {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw CliError(Exit::usage, "usage", "setting " + key + " expects true or false");
  };
  ModelConfig& m = c.model;
  if (key == "task") m.task = parse_task(value);
  else if (key == "fusion") m.fusion = parse_fusion(value);
  else if (key == "layer") m.layer = parse_layer(value);
  else if (key == "encoder") m.encoder = parse_encoder(value);
  else if (key == "relations") m.graph.relations = RelationMask::parse(value);
  else if (key == "d_s") m.graph.d_s = static_cast<int>(count());
  else if (key == "d_ed") m.graph.d_ed = num();
  else if (key == "k" || key == "k_n") m.graph.k_n = count();
  else if (key == "exclude_sequential") m.graph.exclude_sequential_from_spatial = flag();
  else if (key == "strict_coords") m.graph.strict_coords = flag();
  else if (key == "d_in") m.d_in = count();
  else if (key == "d_p") m.d_p = count();
  else if (key == "d_g") m.d_g = count();
  else if (key == "hidden") m.hidden = count();
  else if (key == "layers") m.layers = count();
  else if (key == "heads") m.heads = count();
  else if (key == "toy_attention") m.toy_attention = flag();
  else if (key == "lr_seq" || key == "lr_sequence") c.lr_sequence = num();
  else if (key == "lr_graph") c.lr_graph = num();
  else if (key == "weight_decay") c.adamw.weight_decay = num();
  else if (key == "epochs" || key == "max_epochs") c.max_epochs = count();
  else if (key == "patience") c.patience = count();
  else if (key == "batch_size") c.batch_size = count();
  else if (key == "seed") m.init_seed = c.shuffle_seed = count();
  else if (key == "shuffle_seed") c.shuffle_seed = count();
  else throw CliError(Exit::usage, "usage", "unknown setting '" + key + "'");
}

/// Flags that feed TrainConfig. Each is recorded only when given so that
/// precedence can be resolved after parsing.
struct SettingFlags {
  std::optional<std::string> preset;
  std::optional<fs::path> config_file;
  std::list<std::pair<std::string, std::optional<std::string>>> values;  // stable addresses for CLI11

  void add_graph(CLI::App* app) {
    for (const char* name : {"d-s", "d-ed", "k", "relations"}) add(app, name);
    app->add_flag("--exclude-sequential", exclude_sequential, "Drop |i-j|<d_s pairs from radius/kNN");
  }

  void add_model(CLI::App* app) {
    for (const char* name : {"task", "fusion", "layer", "encoder", "d-in", "d-p", "d-g", "hidden",
                             "layers", "heads", "lr-seq", "lr-graph", "weight-decay", "epochs",
                             "patience", "batch-size", "seed", "shuffle-seed"})
      add(app, name);
  }

  void add_common(CLI::App* app) {
    app->add_option("--preset", preset, "Named defaults: paper (published hyperparameters)");
    app->add_option("--config", config_file, "JSON settings file");
  }

  TrainConfig resolve() const {
    if (preset && *preset != "paper")
      throw CliError(Exit::usage, "usage", "unknown preset '" + *preset + "' (only 'paper')");
    TrainConfig c = paper_preset();
    if (config_file) {
      require_file(*config_file, "config file");
      std::ifstream in(*config_file);
      json j;
      try {
        j = json::parse(in);
      } catch (const json::exception& e) {
        throw CliError(Exit::invalid_data, "invalid_config", config_file->string() + ": " + e.what());
      }
      if (!j.is_object()) throw CliError(Exit::invalid_data, "invalid_config", "config file must hold an object");
      for (const auto& [k, v] : j.items()) apply_setting(c, k, scalar_text(v));
    }
    for (const auto& [name, v] : values)
      if (v) apply_setting(c, name, *v);
    if (exclude_sequential) c.model.graph.exclude_sequential_from_spatial = true;
    return c;
  }

 private:
  bool exclude_sequential = false;

  void add(CLI::App* app, const char* name) {
    values.emplace_back(name, std::nullopt);
    app->add_option(std::string("--") + name, values.back().second);
  }
};

// ---------------------------------------------------------------------------
// Run directory and manifest
// ---------------------------------------------------------------------------

inline fs::path run_root(const std::optional<fs::path>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv(kRunRootEnv); env && *env) return env;
  return "runs";
}

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline std::string file_blob_hash(const fs::path& p) { return git_blob_hash(read_file_bytes(p)); }

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_hash;
  std::vector<std::string> dataset_ids;
  json inputs = json::object();

  /// Lists every file under `dir` (except the manifest) with its git blob hash.
  void write(const fs::path& dir) const {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
      if (e.is_regular_file() && e.path().filename() != "run_manifest.json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    json artifacts = json::array();
    for (const auto& f : files)
      artifacts.push_back({{"path", fs::relative(f, dir).generic_string()},
                           {"git_blob_sha1", file_blob_hash(f)},
                           {"bytes", fs::file_size(f)}});
    const json j = {{"tool", "ssrgnet"},
                    {"command", command},
                    {"argv", argv},
                    {"config_hash", config_hash},
                    {"dataset_ids", dataset_ids},
                    {"inputs", inputs},
                    {"artifacts", artifacts},
                    {"created_utc", utc_now()}};
    std::ofstream(dir / "run_manifest.json") << j.dump(2) << '\n';
  }
};

inline std::vector<std::string> ids_of(const std::vector<ProteinRecord>& records) {
  std::vector<std::string> ids;
  for (const auto& r : records) ids.push_back(r.id);
  return ids;
}

inline void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path().empty() ? fs::path(".") : p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw CliError(Exit::internal, "io", "cannot write " + p.string());
  out << text;
}

inline void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// Helpers shared by subcommands
// ---------------------------------------------------------------------------

/// Runs fn(i) for i in [0, n) over `threads` workers; rethrows the
/// lowest-index failure.
template <class Fn>
void parallel_for(std::size_t n, unsigned threads, Fn fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline unsigned default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

inline Dataset open_store(const fs::path& dir) {
  require_file(dir / "index.json", "dataset store");
  return load_dataset(dir);
}

struct GraphCache {
  GraphConfig config;
  std::map<std::string, ResidueGraph> graphs;
};

inline void write_graph_cache(const fs::path& dir, const std::vector<ProteinRecord>& records,
                              const GraphConfig& config, unsigned threads) {
  fs::create_directories(dir / "graphs");
  std::vector<json> entries(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) {
    const auto& r = records[i];
    const ResidueGraph g = build_graph(r, config);
    const Bytes bytes = encode_graph(g);
    const std::string rel = "graphs/" + file_stem_for(r.id) + ".ssrg";
    write_file_bytes(dir / rel, bytes);
    entries[i] = {{"id", r.id},
                  {"file", rel},
                  {"n_nodes", g.n_nodes},
                  {"edges", g.edge_count()},
                  {"git_blob_sha1", git_blob_hash(bytes)}};
  });
  write_json(dir / "cache_manifest.json", {{"format", "ssrgnet-graph-cache"},
                                           {"graph_config", config.to_json()},
                                           {"config_hash", config.hash()},
                                           {"graphs", entries}});
}

/// Loads a cache, refusing it when its GraphConfig hash differs from `expected`.
inline GraphCache load_graph_cache(const fs::path& dir, const GraphConfig& expected) {
  require_file(dir / "cache_manifest.json", "graph cache manifest");
  std::ifstream in(dir / "cache_manifest.json");
  const json j = json::parse(in);
  GraphCache cache;
  cache.config = GraphConfig::from_json(j.at("graph_config"));
  const std::string stored = j.at("config_hash").get<std::string>();
  if (stored != cache.config.hash())
    throw CliError(Exit::invalid_data, "corrupt_cache", "graph cache manifest hash does not match its own config");
  if (stored != expected.hash())
    throw CliError(Exit::config_mismatch, "config_hash_mismatch",
                   "graph cache " + dir.string() + " was built with config " + stored + " " +
                       cache.config.to_json().dump() + " but " + expected.hash() + " " +
                       expected.to_json().dump() + " was requested");
  for (const auto& e : j.at("graphs")) {
    const fs::path file = dir / e.at("file").get<std::string>();
    require_file(file, "graph cache entry");
    const Bytes bytes = read_file_bytes(file);
    if (git_blob_hash(bytes) != e.at("git_blob_sha1").get<std::string>())
      throw CliError(Exit::invalid_data, "corrupt_cache", file.string() + " does not match its recorded hash");
    cache.graphs.emplace(e.at("id").get<std::string>(), decode_graph(bytes));
  }
  return cache;
}

/// Examples for `data`, from a graph cache when one is given.
inline std::vector<Example> examples_for(const Dataset& data, const ModelConfig& model,
                                         const std::optional<fs::path>& cache_dir) {
  const EmbeddingFile* emb = data.embeddings ? &*data.embeddings : nullptr;
  if (model.encoder == EncoderMode::external && !emb)
    missing("external encoder selected but the store holds no embeddings");
  if (!cache_dir) return make_examples(data.records, model, emb);
  const GraphCache cache = load_graph_cache(*cache_dir, model.graph);
  std::vector<Example> out;
  for (const auto& r : data.records) {
    auto it = cache.graphs.find(r.id);
    if (it == cache.graphs.end()) missing("graph cache has no entry for protein " + r.id);
    if (it->second.n_nodes != r.length())
      throw CliError(Exit::invalid_data, "corrupt_cache", r.id + ": cached graph size differs from sequence length");
    Example e;
    e.record = &r;
    e.graph = it->second;
    if (model.encoder == EncoderMode::external) e.embedding = emb->for_record(r);
    out.push_back(std::move(e));
  }
  return out;
}

inline std::string predictions_jsonl(const std::vector<ProteinPrediction>& preds) {
  std::string out;
  for (const auto& p : preds)
    out += json{{"id", p.id}, {"predicted", p.predicted}, {"truth", p.truth}, {"mask", mask_string(p.mask)}}
               .dump() +
           "\n";
  return out;
}

inline std::string fixed(double v, int digits = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

struct Common {
  std::optional<fs::path> run_root_flag;
  std::optional<fs::path> out;
  unsigned threads = default_threads();
  std::vector<std::string> argv;

  fs::path out_dir(const std::string& command) const {
    const fs::path dir = out ? *out : run_root(run_root_flag) / command;
    fs::create_directories(dir);
    return dir;
  }
};

struct IngestArgs {
  fs::path npz;
  std::optional<fs::path> schema;
  std::optional<fs::path> embeddings;
  std::size_t d_p = 1024;
};

inline void cmd_ingest(const Common& c, const IngestArgs& a) {
  require_file(a.npz, "NetSurfP archive");
  ColumnSchema schema;
  if (a.schema) {
    require_file(*a.schema, "schema file");
    std::ifstream in(*a.schema);
    schema = ColumnSchema::from_json(json::parse(in));
  }
  Dataset data;
  data.records = ingest_netsurf(load_npz(a.npz), schema);
  if (a.embeddings) {
    require_file(*a.embeddings, "embedding archive");
    data.embeddings = load_embeddings(*a.embeddings, a.d_p);
  }
  const fs::path out = c.out_dir("ingest");
  save_dataset(out, data);
  write_json(out / "schema.json", schema.to_json());
  RunManifest m{"ingest", c.argv, hex64(fnv1a64(schema.to_json().dump())), ids_of(data.records)};
  m.inputs = {{"npz", a.npz.string()}, {"npz_git_blob_sha1", file_blob_hash(a.npz)}};
  m.write(out);
}

struct CoordsArgs {
  fs::path store;
  fs::path pdb_dir;
  std::optional<std::string> chain;
  double min_identity = 0.8;
  bool strict = false;
};

inline std::optional<fs::path> find_pdb(const fs::path& dir, const std::string& id) {
  const std::string stem = file_stem_for(id);
  for (const std::string& name : {stem + ".pdb", stem + ".ent", "pdb" + stem + ".ent"}) {
    if (fs::exists(dir / name)) return dir / name;
  }
  return std::nullopt;
}

inline void cmd_coords(const Common& c, const CoordsArgs& a) {
  Dataset data = open_store(a.store);
  if (!fs::is_directory(a.pdb_dir)) missing("PDB directory not found: " + a.pdb_dir.string());
  std::vector<json> report(data.records.size());
  parallel_for(data.records.size(), c.threads, [&](std::size_t i) {
    ProteinRecord& r = data.records[i];
    json entry = {{"id", r.id}};
    const auto path = find_pdb(a.pdb_dir, r.id);
    if (!path) {
      if (a.strict) missing("no PDB file for protein " + r.id);
      entry["status"] = "no_pdb";
      report[i] = entry;
      return;
    }
    try {
      std::ifstream in(*path);
      const ChainMap chains = parse_pdb(in);
      std::optional<CoordinateAssignment> best;
      char best_chain = ' ';
      double best_identity = 0.0;
      for (const auto& [chain_id, residues] : chains) {
        if (a.chain && a.chain->front() != chain_id) continue;
        try {
          auto assign = align_to_sequence(chains, r.sequence, chain_id, {a.min_identity});
          if (!best || assign.coverage_fraction > best->coverage_fraction) {
            best = std::move(assign);
            best_chain = chain_id;
          }
        } catch (const PdbError& e) {
          if (e.kind() != PdbErrorKind::alignment_failure) throw;
          best_identity = std::max(best_identity, e.best_identity());
        }
      }
      if (a.chain && !chains.count(a.chain->front()))
        throw PdbError(PdbErrorKind::missing_chain, "chain '" + *a.chain + "' not present in " + path->string());
      if (!best)
        throw PdbError(PdbErrorKind::alignment_failure,
                       r.id + ": no chain aligns above identity " + fixed(a.min_identity, 2), 0, best_identity);
      r.coords = best->positions;
      entry.update({{"status", "ok"},
                    {"chain", std::string(1, best_chain)},
                    {"identity", best->identity},
                    {"coverage", best->coverage_fraction},
                    {"offset", best->offset}});
    } catch (const PdbError& e) {
      if (a.strict) throw;
      entry.update({{"status", "failed"}, {"error", e.what()}});
    }
    report[i] = entry;
  });
  const fs::path out = c.out_dir("coords");
  save_dataset(out, data);
  write_json(out / "coords_report.json", report);
  RunManifest m{"coords", c.argv, "", ids_of(data.records)};
  m.inputs = {{"store", a.store.string()}, {"pdb_dir", a.pdb_dir.string()}};
  m.write(out);
}

inline void cmd_graphs(const Common& c, const fs::path& store, const TrainConfig& cfg) {
  const Dataset data = open_store(store);
  const fs::path out = c.out_dir("graphs");
  write_graph_cache(out, data.records, cfg.model.graph, c.threads);
  RunManifest m{"graphs", c.argv, cfg.model.graph.hash(), ids_of(data.records)};
  m.inputs = {{"store", store.string()}, {"graph_config", cfg.model.graph.to_json()}};
  m.write(out);
}

struct TrainArgs {
  fs::path store;
  std::optional<fs::path> val;
  std::optional<fs::path> graphs;
  std::optional<fs::path> val_graphs;
};

inline void cmd_train(const Common& c, const TrainArgs& a, const TrainConfig& cfg) {
  cfg.validate();
  const Dataset train_data = open_store(a.store);
  const Dataset val_data = a.val ? open_store(*a.val) : train_data;
  const auto train_ex = examples_for(train_data, cfg.model, a.graphs);
  const auto val_ex = examples_for(val_data, cfg.model, a.val ? a.val_graphs : a.graphs);
  const fs::path out = c.out_dir("train");
  write_json(out / "train_config.json", cfg.to_json());
  TrainOptions opt;
  opt.out_dir = out;
  const TrainResult result = train(train_ex, val_ex, cfg, opt);
  write_json(out / "train_summary.json",
             {{"best_epoch", result.best.epoch},
              {"best_val_loss", detail::finite_or_null(result.best.best_val_loss)},
              {"epochs_run", result.log.size()},
              {"stop_reason", result.stop_reason},
              {"diverged", result.diverged}});
  RunManifest m{"train", c.argv, cfg.hash(), ids_of(train_data.records)};
  m.inputs = {{"store", a.store.string()}, {"validation_ids", ids_of(val_data.records)}};
  m.write(out);
  if (result.diverged)
    throw CliError(Exit::diverged, "diverged",
                   "loss became non-finite; best checkpoint from epoch " + std::to_string(result.best.epoch) +
                       " kept in " + (out / "checkpoint").string());
}

struct EvalArgs {
  fs::path checkpoint;
  fs::path store;
  std::optional<fs::path> graphs;
  std::optional<std::string> dataset;
};

inline Checkpoint open_checkpoint(const fs::path& dir) {
  require_file(dir / "manifest.json", "checkpoint");
  return load_checkpoint(dir);
}

inline void cmd_evaluate(const Common& c, const EvalArgs& a) {
  const Checkpoint ck = open_checkpoint(a.checkpoint);
  const Dataset data = open_store(a.store);
  const auto examples = examples_for(data, ck.config.model, a.graphs);
  const std::string name = a.dataset ? *a.dataset : a.store.filename().string();
  const Evaluation ev = evaluate(ck, examples, name);
  const fs::path out = c.out_dir("evaluate");
  write_json(out / "metrics.json", ev.report.to_json());
  write_text(out / "confusion.csv", ev.report.confusion_csv());
  write_text(out / "predictions.jsonl", predictions_jsonl(ev.predictions));
  RunManifest m{"evaluate", c.argv, ck.config.hash(), ids_of(data.records)};
  m.inputs = {{"checkpoint", a.checkpoint.string()},
              {"checkpoint_manifest_git_blob_sha1", file_blob_hash(a.checkpoint / "manifest.json")},
              {"store", a.store.string()}};
  m.write(out);
}

struct PredictArgs {
  fs::path checkpoint;
  fs::path fasta;
  std::optional<fs::path> pdb;
  std::optional<std::string> chain;
  std::optional<fs::path> embeddings;
  double min_identity = 0.8;
};

inline std::pair<std::string, std::string> read_first_fasta(const fs::path& p) {
  require_file(p, "FASTA file");
  std::ifstream in(p);
  std::string line, id, seq;
  bool seen = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '>') {
      if (seen) break;
      seen = true;
      const auto end = line.find_first_of(" \t", 1);
      id = line.substr(1, end == std::string::npos ? std::string::npos : end - 1);
      continue;
    }
    if (!seen) throw CliError(Exit::invalid_data, "invalid_fasta", "FASTA data before the first header");
    for (char ch : line)
      if (!std::isspace(static_cast<unsigned char>(ch))) seq.push_back(canonical_residue(ch));
  }
  if (!seen || seq.empty()) throw CliError(Exit::invalid_data, "invalid_fasta", p.string() + " holds no sequence");
  return {id, seq};
}

inline void cmd_predict(const Common& c, const PredictArgs& a) {
  const Checkpoint ck = open_checkpoint(a.checkpoint);
  const ModelConfig& model = ck.config.model;
  auto [id, seq] = read_first_fasta(a.fasta);
  ProteinRecord r;
  r.id = id;
  r.sequence = seq;
  r.q8.assign(seq.size(), 'C');  // placeholder labels, not scored
  r.q3.assign(seq.size(), 'C');
  r.mask.assign(seq.size(), true);
  json coverage = nullptr;
  if (a.pdb) {
    require_file(*a.pdb, "PDB file");
    std::ifstream in(*a.pdb);
    const ChainMap chains = parse_pdb(in);
    const char chain = a.chain ? a.chain->front() : chains.begin()->first;
    const auto assign = align_to_sequence(chains, seq, chain, {a.min_identity});
    r.coords = assign.positions;
    coverage = {{"chain", std::string(1, chain)}, {"identity", assign.identity}, {"coverage", assign.coverage_fraction}};
  }
  Example e;
  e.record = &r;
  e.graph = build_graph(r, model.graph);
  if (model.encoder == EncoderMode::external) {
    if (!a.embeddings) missing("external encoder checkpoint needs --embeddings");
    require_file(*a.embeddings, "embedding file");
    const NpyArray arr = load_npy(*a.embeddings);
    if (arr.shape.size() != 2 || arr.shape[0] != seq.size() || arr.shape[1] != model.d_p)
      throw IngestError(IngestErrorKind::dimension, "embedding array must have shape (" + std::to_string(seq.size()) +
                                                        ", " + std::to_string(model.d_p) + ")");
    e.embedding = Tensor({arr.shape[0], arr.shape[1]}, arr.to_doubles());
  }
  const ProteinPrediction p = predict(ck.params, model, e);
  const fs::path out = c.out_dir("predict");
  write_json(out / "prediction.json", {{"id", id},
                                       {"task", task_name(model.task)},
                                       {"class_order", std::string(class_order(model.task))},
                                       {"sequence", seq},
                                       {"labels", p.predicted},
                                       {"structure", coverage}});
  write_text(out / "prediction.fasta", ">" + id + "\n" + seq + "\n>" + id + "|" +
                                           std::string(task_name(model.task)) + "\n" + p.predicted + "\n");
  RunManifest m{"predict", c.argv, ck.config.hash(), {id}};
  m.inputs = {{"checkpoint", a.checkpoint.string()}, {"fasta", a.fasta.string()}};
  m.write(out);
}

struct AblateArgs {
  fs::path store;
  std::optional<fs::path> val;
  std::string relations = "r1,r2,r3,all";
  std::string fusions = "series,parallel,cross";
};

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  if (out.empty()) throw CliError(Exit::usage, "usage", "empty list '" + s + "'");
  return out;
}

struct AblationCell {
  std::string relations;
  std::string fusion;
  double q_accuracy = 0.0;
  double macro_f1 = 0.0;
  double best_val_loss = 0.0;
  std::size_t best_epoch = 0;
};

inline void cmd_ablate(const Common& c, const AblateArgs& a, const TrainConfig& base) {
  const auto relation_list = split_list(a.relations);
  const auto fusion_list = split_list(a.fusions);
  for (const auto& r : relation_list) RelationMask::parse(r);
  for (const auto& f : fusion_list) parse_fusion(f);
  const Dataset train_data = open_store(a.store);
  const Dataset eval_data = a.val ? open_store(*a.val) : train_data;
  const fs::path out = c.out_dir("ablate");

  std::vector<AblationCell> cells;
  for (const auto& rel : relation_list)
    for (const auto& fusion : fusion_list) {
      TrainConfig cfg = base;
      cfg.model.graph.relations = RelationMask::parse(rel);
      cfg.model.fusion = parse_fusion(fusion);
      cfg.validate();
      const auto train_ex = examples_for(train_data, cfg.model, std::nullopt);
      const auto eval_ex = examples_for(eval_data, cfg.model, std::nullopt);
      const TrainResult res = train(train_ex, eval_ex, cfg);
      if (res.diverged) throw CliError(Exit::diverged, "diverged", "ablation cell " + rel + "/" + fusion + " diverged");
      const Evaluation ev = evaluate(res.best, eval_ex, eval_data.records.empty() ? "" : "ablation");
      const fs::path cell_dir = out / "cells" / (rel + "__" + fusion);
      write_json(cell_dir / "metrics.json", ev.report.to_json());
      write_json(cell_dir / "train_config.json", cfg.to_json());
      cells.push_back({rel, fusion, ev.report.q_accuracy, ev.report.f1.macro_f1, res.best.best_val_loss, res.best.epoch});
    }

  auto reference = [&](const std::string& fusion) -> const AblationCell* {
    for (const auto& cell : cells)
      if (cell.fusion == fusion && RelationMask::parse(cell.relations) == RelationMask{}) return &cell;
    return nullptr;
  };
  const std::string q = base.model.task == Task::q3 ? "q3" : "q8";
  std::string csv = "relations,fusion," + q + "_accuracy,macro_f1,delta_" + q + "_vs_all,delta_macro_f1_vs_all\n";
  json rows = json::array();
  for (const auto& cell : cells) {
    const AblationCell* ref = reference(cell.fusion);
    csv += cell.relations + "," + cell.fusion + "," + fixed(cell.q_accuracy, 4) + "," + fixed(cell.macro_f1, 6) + ",";
    csv += ref ? fixed(cell.q_accuracy - ref->q_accuracy, 4) + "," + fixed(cell.macro_f1 - ref->macro_f1, 6) : ",";
    csv += "\n";
    json row = {{"relations", cell.relations},
                {"fusion", cell.fusion},
                {"q_accuracy", cell.q_accuracy},
                {"macro_f1", cell.macro_f1},
                {"best_epoch", cell.best_epoch},
                {"best_val_loss", detail::finite_or_null(cell.best_val_loss)}};
    if (ref) {
      row["delta_q_accuracy_vs_all"] = cell.q_accuracy - ref->q_accuracy;
      row["delta_macro_f1_vs_all"] = cell.macro_f1 - ref->macro_f1;
    }
    rows.push_back(row);
  }
  write_text(out / "ablation.csv", csv);
  write_json(out / "ablation.json", {{"task", task_name(base.model.task)}, {"base_config", base.to_json()}, {"cells", rows}});
  RunManifest m{"ablate", c.argv, base.hash(), ids_of(train_data.records)};
  m.inputs = {{"store", a.store.string()}, {"evaluation_ids", ids_of(eval_data.records)}};
  m.write(out);
}

inline void cmd_report(const Common& c, const std::vector<fs::path>& inputs) {
  std::vector<json> reports;
  std::vector<std::string> classes;
  for (const auto& p : inputs) {
    require_file(p, "metrics file");
    std::ifstream in(p);
    json j = json::parse(in);
    for (const char* key : {"task", "q_accuracy", "macro_f1", "micro_f1", "per_class", "residues"})
      if (!j.contains(key)) throw CliError(Exit::invalid_data, "invalid_metrics", p.string() + " has no '" + key + "'");
    for (char ch : j.value("class_order", std::string()))
      if (std::find(classes.begin(), classes.end(), std::string(1, ch)) == classes.end())
        classes.emplace_back(1, ch);
    j["_source"] = p.string();
    reports.push_back(std::move(j));
  }
  std::string csv = "source,dataset,task,residues,q_accuracy,macro_f1,micro_f1";
  for (const auto& cl : classes) csv += ",f1_" + cl;
  csv += "\n";
  for (const auto& j : reports) {
    csv += j["_source"].get<std::string>() + "," + j.value("dataset", std::string()) + "," +
           j["task"].get<std::string>() + "," + std::to_string(j["residues"].get<std::size_t>()) + "," +
           fixed(j["q_accuracy"].get<double>(), 4) + "," + fixed(j["macro_f1"].get<double>()) + "," +
           fixed(j["micro_f1"].get<double>());
    for (const auto& cl : classes) {
      csv += ",";
      if (j["per_class"].contains(cl)) csv += fixed(j["per_class"][cl]["f1"].get<double>());
    }
    csv += "\n";
  }
  std::string cm;
  for (const auto& j : reports) {
    cm += "# " + j["_source"].get<std::string>() + " (" + j["task"].get<std::string>() + ")\n";
    const std::string order = j.value("class_order", std::string());
    cm += "true\\pred";
    for (char ch : order) cm += std::string(",") + ch;
    cm += "\n";
    const auto& rows = j.value("confusion", json::array());
    for (std::size_t t = 0; t < rows.size(); ++t) {
      cm += t < order.size() ? std::string(1, order[t]) : std::to_string(t);
      for (const auto& v : rows[t]) cm += "," + std::to_string(v.get<std::size_t>());
      cm += "\n";
    }
  }
  const fs::path out = c.out_dir("report");
  write_text(out / "summary.csv", csv);
  write_text(out / "confusion_matrices.csv", cm);
  RunManifest m{"report", c.argv, "", {}};
  json paths = json::array();
  for (const auto& p : inputs) paths.push_back(p.string());
  m.inputs = {{"metrics", paths}};
  m.write(out);
}

struct SynthArgs {
  std::size_t count = 5;
  std::size_t length = 50;
  std::uint64_t seed = 0;
  std::size_t embedding_dim = 0;
  double masked_fraction = 0.04;
};

/// Writes per-residue features in the default 68-column NetSurfP layout.
inline NpzArchive netsurf_archive(const std::vector<ProteinRecord>& records) {
  const ColumnSchema s;
  std::size_t lmax = 0;
  for (const auto& r : records) lmax = std::max(lmax, r.length());
  const std::size_t width = 68;
  std::vector<float> data(records.size() * lmax * width, 0.0f);
  std::vector<std::string> ids;
  for (std::size_t p = 0; p < records.size(); ++p) {
    const auto& r = records[p];
    ids.push_back(r.id);
    for (std::size_t i = 0; i < r.length(); ++i) {
      float* row = data.data() + (p * lmax + i) * width;
      const auto aa = s.amino_acid_order.find(r.sequence[i]);
      if (aa != std::string::npos) row[s.amino_acids.begin + aa] = 1.0f;
      row[s.mask_column] = r.mask[i] ? 1.0f : 0.0f;
      row[s.q8.begin + s.q8_order.find(r.q8[i])] = 1.0f;
    }
    // A trailing masked-out residue keeps the length recoverable.
    if (!r.mask.empty() && !r.mask.back())
      throw CliError(Exit::internal, "internal", "synthetic protein must end on a masked-in residue");
  }
  NpzArchive a;
  a.emplace(s.features_key, NpyArray::from_values<float>({records.size(), lmax, width}, data));
  a.emplace(s.ids_key, NpyArray::from_strings(ids));
  return a;
}

inline std::string pdb_text(const ProteinRecord& r) {
  std::string out = "HEADER    SYNTHETIC " + r.id + "\n";
  int serial = 1;
  for (std::size_t i = 0; i < r.length(); ++i) {
    if (!r.coords[i]) continue;
    CalphaRecord a;
    a.chain_id = 'A';
    a.residue_seq_number = static_cast<int>(i + 1);
    a.residue_name = one_to_three(r.sequence[i]);
    a.position = *r.coords[i];
    out += format_atom_line(a, serial++) + "\n";
  }
  return out + "END\n";
}

inline void cmd_synth(const Common& c, const SynthArgs& a) {
  SyntheticOptions opt;
  opt.length = a.length;
  opt.masked_fraction = a.masked_fraction;
  auto records = synthetic_set(a.count, a.seed, opt);
  for (auto& r : records) r.mask.back() = true;
  const fs::path out = c.out_dir("synth");
  Dataset data;
  data.records = records;
  if (a.embedding_dim > 0) {
    std::mt19937_64 rng(a.seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> g(0.0, 1.0);
    EmbeddingFile emb;
    emb.dim = a.embedding_dim;
    NpzArchive npz;
    for (const auto& r : records) {
      std::vector<double> v(r.length() * a.embedding_dim);
      for (auto& x : v) x = g(rng);
      npz.emplace(r.id, NpyArray::from_doubles({r.length(), a.embedding_dim}, v));
      emb.matrices.emplace(r.id, Tensor({r.length(), a.embedding_dim}, std::move(v)));
    }
    save_npz(out / "embeddings.npz", npz);
    data.embeddings = std::move(emb);
  }
  save_dataset(out / "store", data);
  save_npz(out / "netsurf.npz", netsurf_archive(records));
  fs::create_directories(out / "pdb");
  for (const auto& r : records) write_text(out / "pdb" / (file_stem_for(r.id) + ".pdb"), pdb_text(r));
  RunManifest m{"synth", c.argv, "", ids_of(records)};
  m.inputs = {{"count", a.count}, {"length", a.length}, {"seed", a.seed}, {"embedding_dim", a.embedding_dim}};
  m.write(out);
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline void emit_error(std::ostream& err, Exit code, const std::string& category, const std::string& message) {
  err << json{{"error", {{"category", category}, {"message", message}, {"exit_code", static_cast<int>(code)}}}}.dump()
      << '\n';
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"ssrgnet: protein secondary-structure prediction from sequence and residue graphs"};
  app.require_subcommand(1);
  Common common;
  common.argv = args;
  app.add_option("--run-root", common.run_root_flag,
                 std::string("Root for default output directories (else $") + kRunRootEnv + ", else ./runs)");
  auto add_io = [&](CLI::App* sub) {
    sub->add_option("--out", common.out, "Output directory");
    sub->add_option("--threads", common.threads, "Worker threads");
  };

  IngestArgs ingest;
  auto* s_ingest = app.add_subcommand("ingest", "NetSurfP NPZ + column schema -> canonical store");
  s_ingest->add_option("--npz", ingest.npz, "Per-residue feature archive")->required();
  s_ingest->add_option("--schema", ingest.schema, "Column schema JSON");
  s_ingest->add_option("--embeddings", ingest.embeddings, "Per-protein embedding NPZ keyed by id");
  s_ingest->add_option("--d-p", ingest.d_p, "Embedding width");
  add_io(s_ingest);

  CoordsArgs coords;
  auto* s_coords = app.add_subcommand("coords", "PDB directory -> coordinate sidecars");
  s_coords->add_option("--store", coords.store)->required();
  s_coords->add_option("--pdb-dir", coords.pdb_dir)->required();
  s_coords->add_option("--chain", coords.chain);
  s_coords->add_option("--min-identity", coords.min_identity);
  s_coords->add_flag("--strict", coords.strict, "Fail on a missing or unalignable structure");
  add_io(s_coords);

  fs::path graphs_store;
  SettingFlags graph_flags;
  auto* s_graphs = app.add_subcommand("graphs", "Store + graph settings -> graph cache");
  s_graphs->add_option("--store", graphs_store)->required();
  graph_flags.add_common(s_graphs);
  graph_flags.add_graph(s_graphs);
  add_io(s_graphs);

  TrainArgs train_args;
  SettingFlags train_flags;
  auto* s_train = app.add_subcommand("train", "Train a model, writing a checkpoint and run log");
  s_train->add_option("--store", train_args.store)->required();
  s_train->add_option("--val", train_args.val, "Validation store (default: the training store)");
  s_train->add_option("--graphs", train_args.graphs, "Graph cache for the training store");
  s_train->add_option("--val-graphs", train_args.val_graphs, "Graph cache for the validation store");
  train_flags.add_common(s_train);
  train_flags.add_graph(s_train);
  train_flags.add_model(s_train);
  add_io(s_train);

  EvalArgs eval_args;
  auto* s_eval = app.add_subcommand("evaluate", "Checkpoint + store -> metrics report");
  s_eval->add_option("--checkpoint", eval_args.checkpoint)->required();
  s_eval->add_option("--store", eval_args.store)->required();
  s_eval->add_option("--graphs", eval_args.graphs);
  s_eval->add_option("--dataset", eval_args.dataset, "Dataset name recorded in the report");
  add_io(s_eval);

  PredictArgs pred_args;
  auto* s_pred = app.add_subcommand("predict", "Checkpoint + FASTA (+ PDB) -> per-residue labels");
  s_pred->add_option("--checkpoint", pred_args.checkpoint)->required();
  s_pred->add_option("--fasta", pred_args.fasta)->required();
  s_pred->add_option("--pdb", pred_args.pdb);
  s_pred->add_option("--chain", pred_args.chain);
  s_pred->add_option("--embeddings", pred_args.embeddings, "(L, d_p) NPY for external-encoder checkpoints");
  s_pred->add_option("--min-identity", pred_args.min_identity);
  add_io(s_pred);

  AblateArgs ablate_args;
  SettingFlags ablate_flags;
  auto* s_ablate = app.add_subcommand("ablate", "Relation-mask x fusion-mode sweep -> comparison table");
  s_ablate->add_option("--store", ablate_args.store)->required();
  s_ablate->add_option("--val", ablate_args.val, "Evaluation store (default: the training store)");
  s_ablate->add_option("--relation-masks", ablate_args.relations, "Comma list of r1, r2, r3, all or r1+r2 ...");
  s_ablate->add_option("--fusions", ablate_args.fusions, "Comma list of series, parallel, cross");
  ablate_flags.add_common(s_ablate);
  ablate_flags.add_graph(s_ablate);
  ablate_flags.add_model(s_ablate);
  add_io(s_ablate);

  std::vector<fs::path> report_inputs;
  auto* s_report = app.add_subcommand("report", "Merge metrics JSON files into CSV summaries");
  s_report->add_option("--inputs", report_inputs)->required();
  add_io(s_report);

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth", "Write a synthetic toy corpus (NPZ, PDBs, store)");
  s_synth->add_option("--count", synth.count);
  s_synth->add_option("--length", synth.length);
  s_synth->add_option("--seed", synth.seed);
  s_synth->add_option("--embedding-dim", synth.embedding_dim, "Also write random per-residue embeddings");
  s_synth->add_option("--masked-fraction", synth.masked_fraction);
  add_io(s_synth);

  std::vector<const char*> argv;
  argv.push_back("ssrgnet");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    emit_error(err, Exit::usage, "usage", e.what());
    return static_cast<int>(Exit::usage);
  }

  // Ablation flags for the sweep axes would be ambiguous with --relations / --fusion.
  for (const auto& [name, v] : ablate_flags.values)
    if (v && (name == "relations" || name == "fusion")) {
      emit_error(err, Exit::usage, "usage", "ablate sweeps --relation-masks and --fusions; --" + name + " is not accepted");
      return static_cast<int>(Exit::usage);
    }

  try {
    if (s_ingest->parsed()) cmd_ingest(common, ingest);
    else if (s_coords->parsed()) cmd_coords(common, coords);
    else if (s_graphs->parsed()) cmd_graphs(common, graphs_store, graph_flags.resolve());
    else if (s_train->parsed()) cmd_train(common, train_args, train_flags.resolve());
    else if (s_eval->parsed()) cmd_evaluate(common, eval_args);
    else if (s_pred->parsed()) cmd_predict(common, pred_args);
    else if (s_ablate->parsed()) cmd_ablate(common, ablate_args, ablate_flags.resolve());
    else if (s_report->parsed()) cmd_report(common, report_inputs);
    else if (s_synth->parsed()) cmd_synth(common, synth);
    return 0;
  } catch (const CliError& e) {
    emit_error(err, e.code(), e.category(), e.what());
    return static_cast<int>(e.code());
  } catch (const IngestError& e) {
    static const char* names[] = {"schema_rejected", "length_mismatch", "missing_key", "dimension", "missing_protein"};
    const auto code = e.kind() == IngestErrorKind::missing_protein ? Exit::missing_input : Exit::invalid_data;
    emit_error(err, code, names[static_cast<int>(e.kind())], e.what());
    return static_cast<int>(code);
  } catch (const FormatError& e) {
    const auto code = e.kind() == FormatErrorKind::io ? Exit::missing_input : Exit::invalid_data;
    emit_error(err, code, "format_error", e.what());
    return static_cast<int>(code);
  } catch (const PdbError& e) {
    static const char* names[] = {"pdb_malformed", "no_alpha_carbons", "missing_chain", "alignment_failure"};
    emit_error(err, Exit::invalid_data, names[static_cast<int>(e.kind())], e.what());
    return static_cast<int>(Exit::invalid_data);
  } catch (const GraphError& e) {
    emit_error(err, Exit::invalid_data, "graph_error", e.what());
    return static_cast<int>(Exit::invalid_data);
  } catch (const ModelError& e) {
    emit_error(err, Exit::usage, "invalid_model_config", e.what());
    return static_cast<int>(Exit::usage);
  } catch (const TrainError& e) {
    emit_error(err, Exit::invalid_data, "train_error", e.what());
    return static_cast<int>(Exit::invalid_data);
  } catch (const MetricsError& e) {
    emit_error(err, Exit::invalid_data, "metrics_error", e.what());
    return static_cast<int>(Exit::invalid_data);
  } catch (const json::exception& e) {
    emit_error(err, Exit::invalid_data, "invalid_json", e.what());
    return static_cast<int>(Exit::invalid_data);
  } catch (const std::invalid_argument& e) {
    emit_error(err, Exit::invalid_data, "invalid_data", e.what());
    return static_cast<int>(Exit::invalid_data);
  } catch (const std::exception& e) {
    emit_error(err, Exit::internal, "internal", e.what());
    return static_cast<int>(Exit::internal);
  }
}

}  // namespace ssrgnet::cli
