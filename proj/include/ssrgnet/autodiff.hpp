#pragma once

// Reverse-mode differentiation over a linear tape of tensor ops.
//
// A Tape records every op applied in one forward pass. Parameters enter the
// tape as leaves bound to a ParamStore slot; backward() walks the tape in
// reverse and returns one gradient per store slot.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ssrgnet/tensor.hpp"

namespace ssrgnet {

enum class OpKind {
  leaf,
  matmul,
  add,
  mul,
  scale,
  relu,
  softmax_rows,
  concat_cols,
  slice_cols,
  gather_rows,
  scatter_add_rows,
  cross_entropy,
  attention,
  add_bias,
  sum,
};

inline std::string_view op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::relu: return "relu";
    case OpKind::softmax_rows: return "softmax_rows";
    case OpKind::concat_cols: return "concat_cols";
    case OpKind::slice_cols: return "slice_cols";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::scatter_add_rows: return "scatter_add_rows";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::attention: return "attention";
    case OpKind::add_bias: return "add_bias";
    case OpKind::sum: return "sum";
  }
  return "?";
}

enum class Precision { f64, f32 };

struct TapeOptions {
  Precision precision = Precision::f64;
  // Reject non-finite op inputs instead of propagating them.
  bool strict = false;
};

/// Learning-rate group a parameter belongs to.
enum class ParamGroup : std::uint8_t { sequence, graph };

struct Parameter {
  std::string name;
  Tensor value;
  ParamGroup group = ParamGroup::graph;
};

class ParamStore {
 public:
  std::size_t add(std::string name, Tensor value, ParamGroup group = ParamGroup::graph) {
    if (find(name)) throw TensorError("duplicate parameter name " + name);
    params_.push_back({std::move(name), std::move(value), group});
    return params_.size() - 1;
  }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return i;
    return std::nullopt;
  }

  std::size_t index(std::string_view name) const {
    auto i = find(name);
    if (!i) throw TensorError("unknown parameter " + std::string(name));
    return *i;
  }

  std::size_t size() const noexcept { return params_.size(); }
  bool empty() const noexcept { return params_.empty(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

 private:
  std::vector<Parameter> params_;
};

/// One gradient per ParamStore slot, shaped like the parameter.
struct GradientMap {
  std::vector<Tensor> grads;

  Tensor& operator[](std::size_t i) { return grads[i]; }
  const Tensor& operator[](std::size_t i) const { return grads[i]; }
  std::size_t size() const noexcept { return grads.size(); }
};

class Tape;

/// Handle to a tensor recorded on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

struct BackwardContext {
  const Tensor& out_value;
  const Tensor& out_grad;
  std::span<const Tensor* const> inputs;
  // nullptr where the input does not require a gradient.
  std::span<Tensor* const> grads;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

class Tape {
 public:
  explicit Tape(TapeOptions options = {}) : options_(options) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const TapeOptions& options() const noexcept { return options_; }

  /// A leaf that never receives gradients.
  Var constant(Tensor value) {
    round_to_precision(value);
    nodes_.push_back(Node{OpKind::leaf, {}, std::move(value), {}, false, -1});
    return Var(this, nodes_.size() - 1);
  }

  /// Trainable leaf for store slot `index`; repeated calls return the same node.
  Var param(const ParamStore& store, std::size_t index) {
    if (store_ && store_ != &store)
      throw TensorError("tape already bound to a different parameter store");
    store_ = &store;
    if (param_nodes_.size() < store.size()) param_nodes_.resize(store.size(), kNone);
    if (param_nodes_[index] != kNone) return Var(this, param_nodes_[index]);
    Tensor value = store[index].value;
    round_to_precision(value);
    nodes_.push_back(Node{OpKind::leaf, {}, std::move(value), {}, true,
                          static_cast<long>(index)});
    param_nodes_[index] = nodes_.size() - 1;
    return Var(this, nodes_.size() - 1);
  }

  Var param(const ParamStore& store, std::string_view name) {
    return param(store, store.index(name));
  }

  /// Records an op output. Inputs must already live on this tape.
  Var record(OpKind kind, std::vector<std::size_t> inputs, Tensor value, BackwardFn fn) {
    if (consumed_) throw TensorError("cannot record on a consumed tape");
    bool requires_grad = false;
    for (std::size_t id : inputs) requires_grad = requires_grad || nodes_.at(id).requires_grad;
    round_to_precision(value);
    nodes_.push_back(Node{kind, std::move(inputs), std::move(value),
                          requires_grad ? std::move(fn) : BackwardFn{}, requires_grad, -1});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  void check_inputs(OpKind kind, std::initializer_list<Var> vars) const {
    for (const Var& v : vars) {
      if (v.tape() != this)
        throw TensorError(std::string(op_name(kind)) + ": input belongs to another tape");
      if (!options_.strict) continue;
      for (double x : v.value().data())
        if (!std::isfinite(x))
          throw TensorError(std::string(op_name(kind)) + ": non-finite input value");
    }
  }

  friend GradientMap backward(Tape& tape, Var loss);

 private:
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    Tensor value;
    BackwardFn backward;
    bool requires_grad;
    long param_index;
  };

  void round_to_precision(Tensor& t) const {
    if (options_.precision != Precision::f32) return;
    for (double& x : t.data()) x = static_cast<double>(static_cast<float>(x));
  }

  TapeOptions options_;
  std::vector<Node> nodes_;
  std::vector<std::size_t> param_nodes_;
  const ParamStore* store_ = nullptr;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

/// Gradients of a scalar loss with respect to every bound parameter. The tape
/// is consumed; parameters the loss does not reach get all-zero gradients.
inline GradientMap backward(Tape& tape, Var loss) {
  if (tape.consumed_) throw TensorError("backward: tape already consumed");
  if (loss.tape() != &tape) throw TensorError("backward: loss recorded on another tape");
  if (loss.value().size() != 1)
    throw TensorError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  tape.consumed_ = true;

  const std::size_t n = tape.nodes_.size();
  std::vector<std::optional<Tensor>> grads(n);
  grads[loss.id()] = Tensor(loss.shape(), 1.0);

  // Each op writes into fresh buffers that are then added to the running
  // gradient, so a fan-out sum equals the sum of its branch gradients exactly.
  std::vector<const Tensor*> in_values;
  std::vector<Tensor*> in_grads;
  std::vector<std::pair<std::size_t, Tensor>> partial;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    auto& node = tape.nodes_[id];
    if (!grads[id] || !node.backward) continue;
    in_values.clear();
    in_grads.clear();
    partial.clear();
    partial.reserve(node.inputs.size());
    for (std::size_t in : node.inputs) {
      in_values.push_back(&tape.nodes_[in].value);
      if (!tape.nodes_[in].requires_grad) {
        in_grads.push_back(nullptr);
        continue;
      }
      auto seen = std::find_if(partial.begin(), partial.end(), [in](const auto& p) { return p.first == in; });
      if (seen == partial.end()) {
        partial.emplace_back(in, Tensor(tape.nodes_[in].value.shape(), 0.0));
        seen = partial.end() - 1;
      }
      in_grads.push_back(&seen->second);
    }
    node.backward(BackwardContext{node.value, *grads[id], in_values, in_grads});
    node.backward = nullptr;
    for (auto& [in, g] : partial) {
      if (!grads[in]) {
        grads[in] = std::move(g);
        continue;
      }
      auto dst = grads[in]->data();
      auto src = g.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
    grads[id].reset();
  }

  GradientMap out;
  if (tape.store_) {
    out.grads.reserve(tape.store_->size());
    for (std::size_t p = 0; p < tape.store_->size(); ++p) {
      const std::size_t node = p < tape.param_nodes_.size() ? tape.param_nodes_[p] : Tape::kNone;
      if (node != Tape::kNone && grads[node])
        out.grads.push_back(std::move(*grads[node]));
      else
        out.grads.emplace_back((*tape.store_)[p].value.shape(), 0.0);
    }
  }
  return out;
}

namespace detail {

[[noreturn]] inline void shape_error(OpKind kind, const Shape& a, const Shape& b) {
  throw TensorError(std::string(op_name(kind)) + ": shape mismatch " + shape_str(a) +
                    " vs " + shape_str(b));
}

inline void require_matrix(OpKind kind, const Tensor& t) {
  if (t.rank() != 2)
    throw TensorError(std::string(op_name(kind)) + ": expected a matrix, got shape " +
                      shape_str(t.shape()));
}

// out(m×n) += a(m×k) · b(k×n)
inline void gemm_nn(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out(m×n) += a(m×k) · b(n×k)ᵀ
inline void gemm_nt(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = pa + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = pb + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      po[i * n + j] += acc;
    }
  }
}

// out(m×n) += a(k×m)ᵀ · b(k×n)
inline void gemm_tn(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = pb + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = pa[p * m + i];
      if (av == 0.0) continue;
      double* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

inline void accumulate(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Op catalog
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape();
  t.check_inputs(OpKind::matmul, {a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_matrix(OpKind::matmul, av);
  detail::require_matrix(OpKind::matmul, bv);
  if (av.cols() != bv.rows()) detail::shape_error(OpKind::matmul, av.shape(), bv.shape());
  Tensor out({av.rows(), bv.cols()});
  detail::gemm_nn(av, bv, out);
  return t.record(OpKind::matmul, {a.id(), b.id()}, std::move(out), [](const BackwardContext& c) {
    if (c.grads[0]) detail::gemm_nt(c.out_grad, *c.inputs[1], *c.grads[0]);
    if (c.grads[1]) detail::gemm_tn(*c.inputs[0], c.out_grad, *c.grads[1]);
  });
}

inline Var add(Var a, Var b) {
  Tape& t = *a.tape();
  t.check_inputs(OpKind::add, {a, b});
  if (a.shape() != b.shape()) detail::shape_error(OpKind::add, a.shape(), b.shape());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return t.record(OpKind::add, {a.id(), b.id()}, std::move(out), [](const BackwardContext& c) {
    detail::accumulate(c.grads[0], c.out_grad);
    detail::accumulate(c.grads[1], c.out_grad);
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = *a.tape();
  t.check_inputs(OpKind::mul, {a, b});
  if (a.shape() != b.shape()) detail::shape_error(OpKind::mul, a.shape(), b.shape());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return t.record(OpKind::mul, {a.id(), b.id()}, std::move(out), [](const BackwardContext& c) {
    const Tensor& g = c.out_grad;
    if (c.grads[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*c.grads[0])[i] += g[i] * (*c.inputs[1])[i];
    if (c.grads[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*c.grads[1])[i] += g[i] * (*c.inputs[0])[i];
  });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape();
  t.check_inputs(OpKind::scale, {a});
  Tensor out = a.value();
  for (double& x : out.data()) x *= s;
  return t.record(OpKind::scale, {a.id()}, std::move(out), [s](const BackwardContext& c) {
    if (!c.grads[0]) return;
    for (std::size_t i = 0; i < c.out_grad.size(); ++i) (*c.grads[0])[i] += s * c.out_grad[i];
  });
}

inline Var relu(Var a) {
  Tape& t = *a.tape();
  t.check_inputs(OpKind::relu, {a});
  Tensor out = a.value();
  for (double& x : out.data()) x = x > 0.0 ? x : 0.0;
  return t.record(OpKind::relu, {a.id()}, std::move(out), [](const BackwardContext& c) {
    if (!c.grads[0]) return;
    const Tensor& x = *c.inputs[0];
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i] > 0.0) (*c.grads[0])[i] += c.out_grad[i];
  });
}

inline Var sum(Var a) {
  Tape& t = *a.tape();
  t.check_inputs(OpKind::sum, {a});
  double acc = 0.0;
  for (double x : a.value().data()) acc += x;
  return t.record(OpKind::sum, {a.id()}, Tensor::scalar(acc), [](const BackwardContext& c) {
    if (!c.grads[0]) return;
    const double g = c.out_grad[0];
    for (double& x : c.grads[0]->data()) x += g;
  });
}

namespace detail {

inline void softmax_row(std::span<const double> in, std::span<double> out) {
  const double mx = *std::max_element(in.begin(), in.end());
  double z = 0.0;
  for (std::size_t j = 0; j < in.size(); ++j) {
    out[j] = std::exp(in[j] - mx);
    z += out[j];
  }
  for (double& v : out) v /= z;
}

}  // namespace detail

/// Row-wise softmax with max subtraction.
inline Var softmax_rows(Var a) {
  Tape& t = *a.tape();
  t.check_inputs(OpKind::softmax_rows, {a});
  detail::require_matrix(OpKind::softmax_rows, a.value());
  Tensor out(a.shape());
  for (std::size_t r = 0; r < out.rows(); ++r) detail::softmax_row(a.value().row(r), out.row(r));
  return t.record(OpKind::softmax_rows, {a.id()}, std::move(out), [](const BackwardContext& c) {
    if (!c.grads[0]) return;
    const Tensor& p = c.out_value;
    for (std::size_t r = 0; r < p.rows(); ++r) {
      auto pr = p.row(r);
      auto gr = c.out_grad.row(r);
      double dot = 0.0;
      for (std::size_t j = 0; j < pr.size(); ++j) dot += pr[j] * gr[j];
      auto dst = c.grads[0]->row(r);
      for (std::size_t j = 0; j < pr.size(); ++j) dst[j] += pr[j] * (gr[j] - dot);
    }
  });
}

inline Var concat_cols(Var a, Var b) {
  Tape& t = *a.tape();
  t.check_inputs(OpKind::concat_cols, {a, b});
  detail::require_matrix(OpKind::concat_cols, a.value());
  detail::require_matrix(OpKind::concat_cols, b.value());
  if (a.value().rows() != b.value().rows())
    detail::shape_error(OpKind::concat_cols, a.shape(), b.shape());
  const std::size_t m = a.value().rows(), na = a.value().cols(), nb = b.value().cols();
  Tensor out({m, na + nb});
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(a.value().row(r).begin(), na, out.row(r).begin());
    std::copy_n(b.value().row(r).begin(), nb, out.row(r).begin() + na);
  }
  return t.record(OpKind::concat_cols, {a.id(), b.id()}, std::move(out),
                  [na, nb](const BackwardContext& c) {
                    for (std::size_t r = 0; r < c.out_grad.rows(); ++r) {
                      auto g = c.out_grad.row(r);
                      if (c.grads[0]) {
                        auto d = c.grads[0]->row(r);
                        for (std::size_t j = 0; j < na; ++j) d[j] += g[j];
                      }
                      if (c.grads[1]) {
                        auto d = c.grads[1]->row(r);
                        for (std::size_t j = 0; j < nb; ++j) d[j] += g[na + j];
                      }
                    }
                  });
}

/// Columns [begin, end) of a matrix.
inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  Tape& t = *a.tape();
  t.check_inputs(OpKind::slice_cols, {a});
  detail::require_matrix(OpKind::slice_cols, a.value());
  if (begin >= end || end > a.value().cols())
    throw TensorError("slice_cols: range [" + std::to_string(begin) + ", " +
                      std::to_string(end) + ") out of bounds for shape " + shape_str(a.shape()));
  const std::size_t m = a.value().rows(), w = end - begin;
  Tensor out({m, w});
  for (std::size_t r = 0; r < m; ++r)
    std::copy_n(a.value().row(r).begin() + begin, w, out.row(r).begin());
  return t.record(OpKind::slice_cols, {a.id()}, std::move(out),
                  [begin, w](const BackwardContext& c) {
                    if (!c.grads[0]) return;
                    for (std::size_t r = 0; r < c.out_grad.rows(); ++r) {
                      auto g = c.out_grad.row(r);
                      auto d = c.grads[0]->row(r);
                      for (std::size_t j = 0; j < w; ++j) d[begin + j] += g[j];
                    }
                  });
}

/// out[k] = a[index[k]]
inline Var gather_rows(Var a, std::vector<std::size_t> index) {
  Tape& t = *a.tape();
  t.check_inputs(OpKind::gather_rows, {a});
  detail::require_matrix(OpKind::gather_rows, a.value());
  const std::size_t n = a.value().cols();
  for (std::size_t i : index)
    if (i >= a.value().rows())
      throw TensorError("gather_rows: index " + std::to_string(i) + " out of range for shape " +
                        shape_str(a.shape()));
  Tensor out({index.size(), n});
  for (std::size_t k = 0; k < index.size(); ++k)
    std::copy_n(a.value().row(index[k]).begin(), n, out.row(k).begin());
  return t.record(OpKind::gather_rows, {a.id()}, std::move(out),
                  [index = std::move(index)](const BackwardContext& c) {
                    if (!c.grads[0]) return;
                    for (std::size_t k = 0; k < index.size(); ++k) {
                      auto g = c.out_grad.row(k);
                      auto d = c.grads[0]->row(index[k]);
                      for (std::size_t j = 0; j < g.size(); ++j) d[j] += g[j];
                    }
                  });
}

/// out[index[k]] += weight[k] * src[k], output has `rows` rows.
inline Var scatter_add_rows(Var src, std::vector<std::size_t> index, std::vector<double> weight,
                            std::size_t rows) {
  Tape& t = *src.tape();
  t.check_inputs(OpKind::scatter_add_rows, {src});
  detail::require_matrix(OpKind::scatter_add_rows, src.value());
  if (index.size() != src.value().rows() || weight.size() != index.size())
    throw TensorError("scatter_add_rows: " + std::to_string(index.size()) + " indices and " +
                      std::to_string(weight.size()) + " weights for source shape " +
                      shape_str(src.shape()));
  const std::size_t n = src.value().cols();
  Tensor out({rows, n});
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= rows)
      throw TensorError("scatter_add_rows: index " + std::to_string(index[k]) +
                        " out of range for " + std::to_string(rows) + " rows");
    auto s = src.value().row(k);
    auto d = out.row(index[k]);
    for (std::size_t j = 0; j < n; ++j) d[j] += weight[k] * s[j];
  }
  return t.record(OpKind::scatter_add_rows, {src.id()}, std::move(out),
                  [index = std::move(index), weight = std::move(weight)](const BackwardContext& c) {
                    if (!c.grads[0]) return;
                    for (std::size_t k = 0; k < index.size(); ++k) {
                      auto g = c.out_grad.row(index[k]);
                      auto d = c.grads[0]->row(k);
                      for (std::size_t j = 0; j < g.size(); ++j) d[j] += weight[k] * g[j];
                    }
                  });
}

/// Adds a length-n bias to every row of an m×n matrix.
inline Var add_bias(Var a, Var bias) {
  Tape& t = *a.tape();
  t.check_inputs(OpKind::add_bias, {a, bias});
  detail::require_matrix(OpKind::add_bias, a.value());
  const std::size_t n = a.value().cols();
  if (bias.value().size() != n) detail::shape_error(OpKind::add_bias, a.shape(), bias.shape());
  Tensor out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t j = 0; j < n; ++j) row[j] += bias.value()[j];
  }
  return t.record(OpKind::add_bias, {a.id(), bias.id()}, std::move(out),
                  [n](const BackwardContext& c) {
                    detail::accumulate(c.grads[0], c.out_grad);
                    if (!c.grads[1]) return;
                    for (std::size_t r = 0; r < c.out_grad.rows(); ++r) {
                      auto g = c.out_grad.row(r);
                      for (std::size_t j = 0; j < n; ++j) (*c.grads[1])[j] += g[j];
                    }
                  });
}

enum class Reduction { mean, sum };

/// Softmax cross-entropy over rows with mask[i] selecting contributing rows.
/// Mean reduction divides by the number of selected rows.
inline Var masked_cross_entropy(Var logits, std::vector<std::size_t> labels,
                                std::vector<bool> mask, Reduction reduction = Reduction::mean) {
  Tape& t = *logits.tape();
  t.check_inputs(OpKind::cross_entropy, {logits});
  const Tensor& z = logits.value();
  detail::require_matrix(OpKind::cross_entropy, z);
  if (labels.size() != z.rows() || mask.size() != z.rows())
    throw TensorError("cross_entropy: " + std::to_string(labels.size()) + " labels and " +
                      std::to_string(mask.size()) + " mask entries for logits " +
                      shape_str(z.shape()));
  const std::size_t classes = z.cols();
  std::size_t count = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!mask[i]) continue;
    if (labels[i] >= classes)
      throw TensorError("cross_entropy: label " + std::to_string(labels[i]) + " out of range for " +
                        std::to_string(classes) + " classes");
    ++count;
  }
  if (count == 0) throw TensorError("cross_entropy: every residue is masked out");

  Tensor probs(z.shape());
  double loss = 0.0;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    detail::softmax_row(z.row(i), probs.row(i));
    if (!mask[i]) continue;
    const auto row = z.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double lse = 0.0;
    for (double v : row) lse += std::exp(v - mx);
    loss += std::log(lse) + mx - row[labels[i]];
  }
  const double norm = reduction == Reduction::mean ? 1.0 / static_cast<double>(count) : 1.0;
  loss *= norm;
  return t.record(OpKind::cross_entropy, {logits.id()}, Tensor::scalar(loss),
                  [probs = std::move(probs), labels = std::move(labels), mask = std::move(mask),
                   norm](const BackwardContext& c) {
                    if (!c.grads[0]) return;
                    const double g = c.out_grad[0] * norm;
                    for (std::size_t i = 0; i < labels.size(); ++i) {
                      if (!mask[i]) continue;
                      auto p = probs.row(i);
                      auto d = c.grads[0]->row(i);
                      for (std::size_t j = 0; j < p.size(); ++j)
                        d[j] += g * (p[j] - (j == labels[i] ? 1.0 : 0.0));
                    }
                  });
}

/// Scaled dot-product attention split into `heads` column groups. Rows are
/// partitioned into segments [offsets[s], offsets[s+1]); a query row attends
/// only to key rows of its own segment.
inline Var attention(Var q, Var k, Var v, std::size_t heads, std::vector<std::size_t> offsets) {
  Tape& t = *q.tape();
  t.check_inputs(OpKind::attention, {q, k, v});
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  detail::require_matrix(OpKind::attention, qv);
  if (qv.shape() != kv.shape()) detail::shape_error(OpKind::attention, qv.shape(), kv.shape());
  if (qv.shape() != vv.shape()) detail::shape_error(OpKind::attention, qv.shape(), vv.shape());
  const std::size_t width = qv.cols();
  if (heads == 0 || width % heads != 0)
    throw TensorError("attention: width " + std::to_string(width) + " not divisible into " +
                      std::to_string(heads) + " heads");
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != qv.rows() ||
      !std::is_sorted(offsets.begin(), offsets.end()))
    throw TensorError("attention: segment offsets do not partition " +
                      std::to_string(qv.rows()) + " rows");
  const std::size_t hd = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  // Saved attention weights, one block per (segment, head), row-major len×len.
  std::vector<std::vector<double>> weights;
  Tensor out(qv.shape());
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t lo = offsets[s], len = offsets[s + 1] - lo;
    for (std::size_t h = 0; h < heads; ++h) {
      std::vector<double> a(len * len);
      const std::size_t c0 = h * hd;
      for (std::size_t i = 0; i < len; ++i) {
        auto qi = qv.row(lo + i).subspan(c0, hd);
        for (std::size_t j = 0; j < len; ++j) {
          auto kj = kv.row(lo + j).subspan(c0, hd);
          double d = 0.0;
          for (std::size_t p = 0; p < hd; ++p) d += qi[p] * kj[p];
          a[i * len + j] = d * inv_sqrt;
        }
        std::span<double> arow(a.data() + i * len, len);
        detail::softmax_row(arow, arow);
        auto oi = out.row(lo + i).subspan(c0, hd);
        for (std::size_t j = 0; j < len; ++j) {
          auto vj = vv.row(lo + j).subspan(c0, hd);
          const double w = arow[j];
          for (std::size_t p = 0; p < hd; ++p) oi[p] += w * vj[p];
        }
      }
      weights.push_back(std::move(a));
    }
  }

  return t.record(
      OpKind::attention, {q.id(), k.id(), v.id()}, std::move(out),
      [heads, hd, inv_sqrt, offsets = std::move(offsets),
       weights = std::move(weights)](const BackwardContext& c) {
        const Tensor& qv = *c.inputs[0];
        const Tensor& kv = *c.inputs[1];
        const Tensor& vv = *c.inputs[2];
        std::size_t block = 0;
        for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
          const std::size_t lo = offsets[s], len = offsets[s + 1] - lo;
          for (std::size_t h = 0; h < heads; ++h, ++block) {
            const auto& a = weights[block];
            const std::size_t c0 = h * hd;
            std::vector<double> ds(len * len);
            for (std::size_t i = 0; i < len; ++i) {
              auto gi = c.out_grad.row(lo + i).subspan(c0, hd);
              // dA_ij = gO_i · V_j ; dV_j += A_ij gO_i
              double rowdot = 0.0;
              for (std::size_t j = 0; j < len; ++j) {
                auto vj = vv.row(lo + j).subspan(c0, hd);
                double da = 0.0;
                for (std::size_t p = 0; p < hd; ++p) da += gi[p] * vj[p];
                ds[i * len + j] = da;
                rowdot += da * a[i * len + j];
                if (c.grads[2]) {
                  auto dv = c.grads[2]->row(lo + j).subspan(c0, hd);
                  const double w = a[i * len + j];
                  for (std::size_t p = 0; p < hd; ++p) dv[p] += w * gi[p];
                }
              }
              for (std::size_t j = 0; j < len; ++j)
                ds[i * len + j] = a[i * len + j] * (ds[i * len + j] - rowdot) * inv_sqrt;
            }
            for (std::size_t i = 0; i < len; ++i) {
              for (std::size_t j = 0; j < len; ++j) {
                const double d = ds[i * len + j];
                if (d == 0.0) continue;
                if (c.grads[0]) {
                  auto dq = c.grads[0]->row(lo + i).subspan(c0, hd);
                  auto kj = kv.row(lo + j).subspan(c0, hd);
                  for (std::size_t p = 0; p < hd; ++p) dq[p] += d * kj[p];
                }
                if (c.grads[1]) {
                  auto dk = c.grads[1]->row(lo + j).subspan(c0, hd);
                  auto qi = qv.row(lo + i).subspan(c0, hd);
                  for (std::size_t p = 0; p < hd; ++p) dk[p] += d * qi[p];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

struct GradCheckEntry {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  double worst_rel_error() const {
    double w = 0.0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_error);
    return w;
  }
};

struct GradCheckOptions {
  // Denominator floor for the relative error, so entries whose true gradient
  // is ~0 are judged by absolute error instead.
  double denom_floor = 1e-6;
  TapeOptions tape;
};

using LossFn = std::function<Var(Tape&)>;

/// Compares backward() against central differences for every element of
/// every parameter in `store`. `f` builds the loss on the tape it is given.
inline GradCheckReport finite_difference_check(const LossFn& f, ParamStore& store, double eps,
                                               GradCheckOptions options = {}) {
  if (!(eps > 0.0)) throw TensorError("finite_difference_check: eps must be positive");
  GradCheckReport report;
  if (store.empty()) return report;

  auto evaluate = [&] {
    Tape tape(options.tape);
    return f(tape).value().item();
  };
  const double base_a = evaluate();
  const double base_b = evaluate();
  if (base_a != base_b)
    throw TensorError("finite_difference_check: loss function is not deterministic");

  Tape tape(options.tape);
  Var loss = f(tape);
  GradientMap grads = backward(tape, loss);

  for (std::size_t p = 0; p < store.size(); ++p) {
    GradCheckEntry entry{store[p].name, store[p].value.size(), 0.0, 0.0};
    auto values = store[p].value.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = evaluate();
      values[i] = saved - eps;
      const double down = evaluate();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = grads[p][i];
      const double abs_err = std::abs(analytic - numeric);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), options.denom_floor});
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      entry.max_rel_error = std::max(entry.max_rel_error, abs_err / denom);
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace ssrgnet
