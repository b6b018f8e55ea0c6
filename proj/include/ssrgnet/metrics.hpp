#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssrgnet/protein.hpp"

namespace ssrgnet {

class MetricsError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// counts[t][p]: residues of true class t predicted as p.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::vector<std::size_t>> counts;

  explicit ConfusionMatrix(std::size_t c = 0) : classes(c), counts(c, std::vector<std::size_t>(c, 0)) {}

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& r : counts)
      for (auto v : r) n += v;
    return n;
  }
  std::size_t trace() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < classes; ++i) n += counts[i][i];
    return n;
  }
  std::size_t row_sum(std::size_t t) const {
    std::size_t n = 0;
    for (auto v : counts[t]) n += v;
    return n;
  }
  std::size_t col_sum(std::size_t p) const {
    std::size_t n = 0;
    for (std::size_t t = 0; t < classes; ++t) n += counts[t][p];
    return n;
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.classes != classes) throw MetricsError("confusion matrices differ in class count");
    for (std::size_t i = 0; i < classes; ++i)
      for (std::size_t j = 0; j < classes; ++j) counts[i][j] += o.counts[i][j];
    return *this;
  }
};

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;  // true count
  std::size_t predicted = 0;
};

struct F1Summary {
  std::vector<ClassScores> per_class;
  double macro_f1 = 0.0;
  double micro_f1 = 0.0;
  std::size_t classes_in_macro = 0;
};

namespace detail {

inline void check_lengths(std::size_t pred, std::size_t truth, std::size_t mask) {
  if (pred != truth || truth != mask)
    throw MetricsError("prediction, truth and mask lengths differ (" + std::to_string(pred) + ", " +
                       std::to_string(truth) + ", " + std::to_string(mask) + ")");
}

inline double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace detail

/// 100 · correct / evaluated over masked-in residues.
inline double q_accuracy(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth,
                         const std::vector<bool>& mask) {
  detail::check_lengths(pred.size(), truth.size(), mask.size());
  std::size_t n = 0, correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!mask[i]) continue;
    ++n;
    if (pred[i] == truth[i]) ++correct;
  }
  if (n == 0) throw MetricsError("q_accuracy: no masked-in residues");
  return 100.0 * static_cast<double>(correct) / static_cast<double>(n);
}

inline ConfusionMatrix confusion_matrix(const std::vector<std::size_t>& pred,
                                        const std::vector<std::size_t>& truth,
                                        const std::vector<bool>& mask, std::size_t classes) {
  detail::check_lengths(pred.size(), truth.size(), mask.size());
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!mask[i]) continue;
    if (pred[i] >= classes || truth[i] >= classes)
      throw MetricsError("label out of range at position " + std::to_string(i));
    ++cm.counts[truth[i]][pred[i]];
  }
  return cm;
}

/// Per-class P/R/F1 with 0/0 → 0; macro F1 averages classes present in truth.
inline F1Summary precision_recall_f1(const ConfusionMatrix& cm) {
  F1Summary s;
  double macro = 0.0;
  std::size_t tp_all = 0, fp_all = 0, fn_all = 0;
  for (std::size_t c = 0; c < cm.classes; ++c) {
    ClassScores cs;
    const std::size_t tp = cm.counts[c][c];
    cs.support = cm.row_sum(c);
    cs.predicted = cm.col_sum(c);
    const std::size_t fp = cs.predicted - tp;
    const std::size_t fn = cs.support - tp;
    cs.precision = detail::ratio(tp, tp + fp);
    cs.recall = detail::ratio(tp, tp + fn);
    cs.f1 = cs.precision + cs.recall > 0.0
                ? 2.0 * cs.precision * cs.recall / (cs.precision + cs.recall)
                : 0.0;
    if (cs.support > 0) {
      macro += cs.f1;
      ++s.classes_in_macro;
    }
    tp_all += tp;
    fp_all += fp;
    fn_all += fn;
    s.per_class.push_back(cs);
  }
  s.macro_f1 = s.classes_in_macro ? macro / static_cast<double>(s.classes_in_macro) : 0.0;
  s.micro_f1 = detail::ratio(2 * tp_all, 2 * tp_all + fp_all + fn_all);
  return s;
}

struct MetricsReport {
  Task task = Task::q3;
  std::string dataset;
  double q_accuracy = 0.0;
  F1Summary f1;
  ConfusionMatrix confusion;
  std::size_t residues = 0;

  nlohmann::json to_json() const {
    nlohmann::json per = nlohmann::json::object();
    const auto order = class_order(task);
    for (std::size_t c = 0; c < f1.per_class.size(); ++c) {
      const auto& s = f1.per_class[c];
      per[std::string(1, order[c])] = {{"precision", s.precision},
                                       {"recall", s.recall},
                                       {"f1", s.f1},
                                       {"support", s.support},
                                       {"predicted", s.predicted}};
    }
    return {{"dataset", dataset},
            {"task", task_name(task)},
            {"class_order", std::string(order)},
            {"residues", residues},
            {"q_accuracy", q_accuracy},
            {"macro_f1", f1.macro_f1},
            {"micro_f1", f1.micro_f1},
            {"per_class", per},
            {"confusion", confusion.counts},
            {"conventions",
             {{"undefined_precision_or_recall", "0"},
              {"macro_f1_classes", "present in truth"}}}};
  }

  /// Header row carries the predicted-class order; first column the true class.
  std::string confusion_csv() const {
    const auto order = class_order(task);
    std::ostringstream os;
    os << "true\\pred";
    for (char c : order) os << ',' << c;
    os << '\n';
    for (std::size_t t = 0; t < confusion.classes; ++t) {
      os << order[t];
      for (auto v : confusion.counts[t]) os << ',' << v;
      os << '\n';
    }
    return os.str();
  }
};

inline MetricsReport make_report(Task task, const ConfusionMatrix& cm, std::string dataset = {}) {
  if (cm.classes != class_count(task)) throw MetricsError("confusion matrix does not match task");
  MetricsReport r;
  r.task = task;
  r.dataset = std::move(dataset);
  r.confusion = cm;
  r.residues = cm.total();
  if (r.residues == 0) throw MetricsError("no masked-in residues to evaluate");
  r.q_accuracy = 100.0 * static_cast<double>(cm.trace()) / static_cast<double>(r.residues);
  r.f1 = precision_recall_f1(cm);
  return r;
}

}  // namespace ssrgnet
