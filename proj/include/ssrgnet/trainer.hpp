#pragma once

// Training loop, checkpoints and evaluation.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssrgnet/dataset.hpp"
#include "ssrgnet/graph.hpp"
#include "ssrgnet/metrics.hpp"
#include "ssrgnet/model.hpp"
#include "ssrgnet/npy.hpp"
#include "ssrgnet/optim.hpp"

namespace ssrgnet {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  ModelConfig model;
  double lr_sequence = 1e-5;
  double lr_graph = 3e-4;
  AdamWConfig adamw;
  std::size_t batch_size = 1;  // proteins per diagonal batch
  std::size_t max_epochs = 100;
  std::size_t patience = 5;
  std::uint64_t shuffle_seed = 0;

  void validate() const {
    model.validate();
    if (!(lr_sequence > 0.0) || !(lr_graph > 0.0)) throw TrainError("learning rates must be positive");
    if (patience < 1) throw TrainError("patience must be >= 1");
    if (batch_size < 1) throw TrainError("batch size must be >= 1");
  }

  LearningRates rates() const { return {lr_sequence, lr_graph}; }

  nlohmann::json to_json() const {
    return {{"model", model.to_json()},
            {"lr_sequence", lr_sequence},
            {"lr_graph", lr_graph},
            {"beta1", adamw.beta1},
            {"beta2", adamw.beta2},
            {"eps", adamw.eps},
            {"weight_decay", adamw.weight_decay},
            {"batch_size", batch_size},
            {"max_epochs", max_epochs},
            {"patience", patience},
            {"shuffle_seed", shuffle_seed}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.model = ModelConfig::from_json(j.at("model"));
    c.lr_sequence = j.at("lr_sequence").get<double>();
    c.lr_graph = j.at("lr_graph").get<double>();
    c.adamw.beta1 = j.at("beta1").get<double>();
    c.adamw.beta2 = j.at("beta2").get<double>();
    c.adamw.eps = j.at("eps").get<double>();
    c.adamw.weight_decay = j.at("weight_decay").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.max_epochs = j.at("max_epochs").get<std::size_t>();
    c.patience = j.at("patience").get<std::size_t>();
    c.shuffle_seed = j.at("shuffle_seed").get<std::uint64_t>();
    c.validate();
    return c;
  }

  std::string hash() const { return hex64(fnv1a64(to_json().dump())); }
};

// ---------------------------------------------------------------------------
// Examples and batches
// ---------------------------------------------------------------------------

/// One protein ready for the network.
struct Example {
  const ProteinRecord* record = nullptr;
  ResidueGraph graph;
  std::optional<Tensor> embedding;  // external encoder only
};

/// Builds examples for `records`, constructing graphs with the model's
/// GraphConfig and attaching embeddings when the encoder is external.
inline std::vector<Example> make_examples(const std::vector<ProteinRecord>& records,
                                          const ModelConfig& model,
                                          const EmbeddingFile* embeddings = nullptr) {
  std::vector<Example> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    Example e;
    e.record = &r;
    e.graph = build_graph(r, model.graph);
    if (model.encoder == EncoderMode::external) {
      if (!embeddings) throw TrainError("external encoder needs an embedding file");
      if (embeddings->dim != model.d_p)
        throw TrainError("embedding width " + std::to_string(embeddings->dim) + " != d_p " +
                         std::to_string(model.d_p));
      e.embedding = embeddings->for_record(r);
    }
    out.push_back(std::move(e));
  }
  return out;
}

struct Batch {
  BatchedGraph graph;
  std::vector<std::size_t> tokens;
  std::optional<Tensor> embeddings;
  std::vector<std::size_t> labels;
  std::vector<bool> mask;

  ModelInput input() const {
    ModelInput in;
    in.tokens = tokens;
    in.embeddings = embeddings;
    in.graph = &graph;
    return in;
  }
};

inline Batch make_batch(const std::vector<const Example*>& examples, Task task) {
  if (examples.empty()) throw TrainError("empty batch");
  Batch b;
  std::vector<const ResidueGraph*> graphs;
  std::vector<double> emb;
  std::size_t emb_cols = 0;
  for (const Example* e : examples) {
    graphs.push_back(&e->graph);
    const auto toks = e->record->tokens();
    b.tokens.insert(b.tokens.end(), toks.begin(), toks.end());
    const auto labels = e->record->label_indices(task);
    b.labels.insert(b.labels.end(), labels.begin(), labels.end());
    b.mask.insert(b.mask.end(), e->record->mask.begin(), e->record->mask.end());
    if (e->embedding) {
      emb_cols = e->embedding->cols();
      emb.insert(emb.end(), e->embedding->data().begin(), e->embedding->data().end());
    }
  }
  b.graph = diagonal_batch(graphs);
  if (!emb.empty()) b.embeddings = Tensor({b.tokens.size(), emb_cols}, std::move(emb));
  return b;
}

inline Batch make_batch(const Example& e, Task task) { return make_batch({&e}, task); }

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
  static constexpr int kFormatVersion = 1;

  TrainConfig config;
  ParamStore params;
  OptimizerState optimizer;
  std::size_t epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();

  const GraphConfig& graph_config() const { return config.model.graph; }
};

namespace detail {

inline NpyArray tensor_to_npy(const Tensor& t) { return NpyArray::from_doubles(t.shape(), t.data()); }

inline Tensor npy_to_tensor(const NpyArray& a) {
  if (a.dtype != DType::f8) throw TrainError("checkpoint tensors must be float64");
  return Tensor(Shape(a.shape.begin(), a.shape.end()), a.to_doubles());
}

inline nlohmann::json finite_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

}  // namespace detail

/// Directory layout: manifest.json + params/NNN.npy + adam/m_NNN.npy, adam/v_NNN.npy.
inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "params");
  fs::create_directories(dir / "adam");
  nlohmann::json params = nlohmann::json::array();
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    const auto& p = ck.params[i];
    char stem[16];
    std::snprintf(stem, sizeof stem, "%03zu", i);
    const std::string file = std::string("params/") + stem + ".npy";
    const std::string m = std::string("adam/m_") + stem + ".npy";
    const std::string v = std::string("adam/v_") + stem + ".npy";
    save_npy(dir / file, detail::tensor_to_npy(p.value));
    save_npy(dir / m, detail::tensor_to_npy(ck.optimizer.m.at(i)));
    save_npy(dir / v, detail::tensor_to_npy(ck.optimizer.v.at(i)));
    params.push_back({{"name", p.name},
                      {"group", p.group == ParamGroup::sequence ? "sequence" : "graph"},
                      {"shape", p.value.shape()},
                      {"file", file},
                      {"adam_m", m},
                      {"adam_v", v}});
  }
  const nlohmann::json manifest = {{"format", "ssrgnet-checkpoint"},
                                   {"format_version", Checkpoint::kFormatVersion},
                                   {"epoch", ck.epoch},
                                   {"best_val_loss", detail::finite_or_null(ck.best_val_loss)},
                                   {"train_config", ck.config.to_json()},
                                   {"graph_config", ck.graph_config().to_json()},
                                   {"optimizer_step", ck.optimizer.step},
                                   {"params", params}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw TrainError("no checkpoint manifest in " + dir.string());
  const auto j = nlohmann::json::parse(in);
  if (j.value("format", "") != "ssrgnet-checkpoint")
    throw TrainError(dir.string() + " is not a checkpoint");
  if (j.at("format_version").get<int>() != Checkpoint::kFormatVersion)
    throw TrainError("unsupported checkpoint format version");
  Checkpoint ck;
  ck.config = TrainConfig::from_json(j.at("train_config"));
  if (GraphConfig::from_json(j.at("graph_config")) != ck.config.model.graph)
    throw TrainError("checkpoint graph config disagrees with its model config");
  ck.epoch = j.at("epoch").get<std::size_t>();
  ck.best_val_loss = j.at("best_val_loss").is_null() ? std::numeric_limits<double>::infinity()
                                                     : j.at("best_val_loss").get<double>();
  ck.optimizer.step = j.at("optimizer_step").get<std::size_t>();
  for (const auto& p : j.at("params")) {
    const auto group = p.at("group").get<std::string>() == "sequence" ? ParamGroup::sequence
                                                                      : ParamGroup::graph;
    ck.params.add(p.at("name").get<std::string>(),
                  detail::npy_to_tensor(load_npy(dir / p.at("file").get<std::string>())), group);
    ck.optimizer.m.push_back(detail::npy_to_tensor(load_npy(dir / p.at("adam_m").get<std::string>())));
    ck.optimizer.v.push_back(detail::npy_to_tensor(load_npy(dir / p.at("adam_v").get<std::string>())));
  }
  // The stored layout must match what this build would initialise.
  const ParamStore fresh = init_params(ck.config.model);
  if (fresh.size() != ck.params.size())
    throw TrainError("checkpoint parameter count does not match its model config");
  for (std::size_t i = 0; i < fresh.size(); ++i)
    if (fresh[i].name != ck.params[i].name || fresh[i].value.shape() != ck.params[i].value.shape())
      throw TrainError("checkpoint parameter " + ck.params[i].name + " does not match model config");
  return ck;
}

// ---------------------------------------------------------------------------
// Loss evaluation and training
// ---------------------------------------------------------------------------

inline double batch_loss(const ParamStore& params, const ModelConfig& model, const Batch& b) {
  Tape tape;
  Var logits = forward(tape, params, model, b.input());
  return masked_cross_entropy(logits, b.labels, b.mask, model.loss_reduction).value().item();
}

/// Mean of per-protein losses.
inline double mean_loss(const ParamStore& params, const ModelConfig& model,
                        const std::vector<Example>& examples) {
  if (examples.empty()) throw TrainError("mean_loss: no examples");
  double total = 0.0;
  for (const auto& e : examples) total += batch_loss(params, model, make_batch(e, model.task));
  return total / static_cast<double>(examples.size());
}

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double wall_time_s = 0.0;

  nlohmann::json to_json(std::uint64_t seed, const std::string& config_hash) const {
    return {{"epoch", epoch},
            {"train_loss", detail::finite_or_null(train_loss)},
            {"val_loss", detail::finite_or_null(val_loss)},
            {"wall_time_s", wall_time_s},
            {"seed", seed},
            {"config_hash", config_hash}};
  }
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochLog> log;
  bool diverged = false;
  std::string stop_reason;
};

struct TrainOptions {
  // When set, the best checkpoint and train_log.jsonl are written here.
  std::optional<std::filesystem::path> out_dir;
  // Called after every epoch.
  std::function<void(const EpochLog&)> on_epoch;
};

inline TrainResult train(const std::vector<Example>& train_set, const std::vector<Example>& val_set,
                         const TrainConfig& config, const TrainOptions& options = {}) {
  config.validate();
  if (train_set.empty() || val_set.empty()) throw TrainError("train and validation splits must be non-empty");

  ParamStore params = init_params(config.model);
  OptimizerState state = OptimizerState::zeros_like(params);
  std::mt19937_64 shuffle_rng(config.shuffle_seed);
  EarlyStopping stopper(config.patience);
  const std::string config_hash = config.hash();

  TrainResult result;
  result.best = Checkpoint{config, params, state, 0, std::numeric_limits<double>::infinity()};

  std::ofstream log_file;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    log_file.open(*options.out_dir / "train_log.jsonl", std::ios::trunc);
  }

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    bool diverged = false;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      std::vector<const Example*> group;
      for (std::size_t k = start; k < std::min(order.size(), start + config.batch_size); ++k)
        group.push_back(&train_set[order[k]]);
      const Batch batch = make_batch(group, config.model.task);
      Tape tape;
      Var logits = forward(tape, params, config.model, batch.input());
      Var loss = masked_cross_entropy(logits, batch.labels, batch.mask, config.model.loss_reduction);
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        diverged = true;
        break;
      }
      GradientMap grads = backward(tape, loss);
      try {
        adamw_step(params, grads, state, config.adamw, config.rates());
      } catch (const OptimizerError&) {
        // Overflow can leave the loss finite while the gradient is not.
        diverged = true;
        break;
      }
      loss_sum += value;
      ++batches;
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = batches ? loss_sum / static_cast<double>(batches)
                               : std::numeric_limits<double>::quiet_NaN();
    entry.val_loss = diverged ? std::numeric_limits<double>::quiet_NaN()
                              : mean_loss(params, config.model, val_set);
    entry.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(entry);
    if (log_file) log_file << entry.to_json(config.shuffle_seed, config_hash).dump() << '\n';
    if (options.on_epoch) options.on_epoch(entry);

    if (diverged || !std::isfinite(entry.val_loss)) {
      result.diverged = true;
      result.stop_reason = "diverged";
      break;
    }
    const bool stop = stopper.update(entry.val_loss);
    if (stopper.improved_last()) {
      result.best = Checkpoint{config, params, state, epoch, entry.val_loss};
      if (options.out_dir) save_checkpoint(*options.out_dir / "checkpoint", result.best);
    }
    if (stop) {
      result.stop_reason = "early_stopping";
      break;
    }
  }
  if (result.stop_reason.empty()) result.stop_reason = "max_epochs";
  if (options.out_dir && result.best.epoch == 0)
    save_checkpoint(*options.out_dir / "checkpoint", result.best);
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct ProteinPrediction {
  std::string id;
  std::string predicted;  // label characters, one per residue
  std::string truth;
  std::vector<bool> mask;
};

struct Evaluation {
  MetricsReport report;
  std::vector<ProteinPrediction> predictions;
};

inline ProteinPrediction predict(const ParamStore& params, const ModelConfig& model, const Example& e) {
  const Batch b = make_batch(e, model.task);
  Tape tape;
  const Var logits = forward(tape, params, model, b.input());
  const auto order = class_order(model.task);
  ProteinPrediction p;
  p.id = e.record->id;
  for (std::size_t c : argmax_rows(logits.value())) p.predicted.push_back(order[c]);
  p.truth = e.record->labels(model.task);
  p.mask = e.record->mask;
  return p;
}

inline Evaluation evaluate(const ParamStore& params, const ModelConfig& model,
                           const std::vector<Example>& examples, std::string dataset = {}) {
  if (examples.empty()) throw TrainError("evaluate: empty record list");
  Evaluation out;
  ConfusionMatrix cm(model.classes());
  for (const auto& e : examples) {
    ProteinPrediction p = predict(params, model, e);
    std::vector<std::size_t> pred, truth;
    for (char c : p.predicted) pred.push_back(label_index(model.task, c));
    for (char c : p.truth) truth.push_back(label_index(model.task, c));
    cm += confusion_matrix(pred, truth, p.mask, model.classes());
    out.predictions.push_back(std::move(p));
  }
  out.report = make_report(model.task, cm, std::move(dataset));
  return out;
}

inline Evaluation evaluate(const Checkpoint& ck, const std::vector<Example>& examples,
                           std::string dataset = {}) {
  return evaluate(ck.params, ck.config.model, examples, std::move(dataset));
}

}  // namespace ssrgnet
