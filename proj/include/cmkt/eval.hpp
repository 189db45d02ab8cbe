#pragma once

// Classification metrics, runtime measurement, and top-k summaries.

#include "cmkt/common.hpp"

#include <json.hpp>

#include <algorithm>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

namespace cmkt::eval {

using json = nlohmann::json;

struct ConfusionMatrix {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::size_t total() const { return tp + tn + fp + fn; }
};

// Positive class = defective = 1; predict 1 iff score >= threshold.
inline ConfusionMatrix confusion(const Vec& scores, const IVec& labels, double threshold = 0.5) {
  if (scores.size() != labels.size()) throw Error("confusion: length mismatch");
  if (scores.size() == 0) throw Error("confusion: empty input");
  ConfusionMatrix cm;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    const bool actual = labels[i] == 1;
    if (predicted && actual) {
      ++cm.tp;
    } else if (!predicted && !actual) {
      ++cm.tn;
    } else if (predicted) {
      ++cm.fp;
    } else {
      ++cm.fn;
    }
  }
  return cm;
}

inline double accuracy(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw Error("accuracy: empty confusion matrix");
  return static_cast<double>(cm.tp + cm.tn) / static_cast<double>(cm.total());
}

inline double balanced_accuracy(const ConfusionMatrix& cm) {
  if (cm.tp + cm.fn == 0 || cm.tn + cm.fp == 0) {
    throw Error("balanced_accuracy: a class is absent");
  }
  const double tpr = static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fn);
  const double tnr = static_cast<double>(cm.tn) / static_cast<double>(cm.tn + cm.fp);
  return (tpr + tnr) / 2.0;
}

// Rank-based (Mann-Whitney) with ties counted one half; equals the trapezoidal
// area under the empirical ROC curve.
inline double auc_roc(const Vec& scores, const IVec& labels) {
  if (scores.size() != labels.size()) throw Error("auc_roc: length mismatch");
  const auto n = static_cast<std::size_t>(scores.size());
  std::size_t n_pos = 0;
  for (Eigen::Index i = 0; i < labels.size(); ++i) n_pos += labels[i] == 1 ? 1 : 0;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error("auc_roc: both classes must be present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[static_cast<Eigen::Index>(a)] < scores[static_cast<Eigen::Index>(b)];
  });

  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[static_cast<Eigen::Index>(order[j + 1])] ==
                            scores[static_cast<Eigen::Index>(order[i])]) {
      ++j;
    }
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[static_cast<Eigen::Index>(order[k])] == 1) rank_sum_pos += midrank;
    }
    i = j + 1;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

struct MetricsReport {
  ConfusionMatrix confusion;
  double accuracy = 0.0;
  double balanced_accuracy = 0.0;
  double auc_roc = 0.0;
  double training_runtime_s = 0.0;
  double prediction_runtime_s = 0.0;
  std::string tag;

  json to_json() const {
    return json{{"confusion",
                 {{"tp", confusion.tp}, {"tn", confusion.tn}, {"fp", confusion.fp}, {"fn", confusion.fn}}},
                {"accuracy", accuracy},
                {"balanced_accuracy", balanced_accuracy},
                {"auc_roc", auc_roc},
                {"training_runtime_s", training_runtime_s},
                {"prediction_runtime_s", prediction_runtime_s},
                {"tag", tag}};
  }

  static MetricsReport from_json(const json& j) {
    MetricsReport r;
    const auto& c = j.at("confusion");
    r.confusion = {c.at("tp").get<std::size_t>(), c.at("tn").get<std::size_t>(),
                   c.at("fp").get<std::size_t>(), c.at("fn").get<std::size_t>()};
    r.accuracy = j.at("accuracy").get<double>();
    r.balanced_accuracy = j.at("balanced_accuracy").get<double>();
    r.auc_roc = j.at("auc_roc").get<double>();
    r.training_runtime_s = j.value("training_runtime_s", 0.0);
    r.prediction_runtime_s = j.value("prediction_runtime_s", 0.0);
    r.tag = j.value("tag", std::string{});
    return r;
  }
};

inline MetricsReport evaluate_scores(const Vec& scores, const IVec& labels,
                                     const std::string& tag = {}) {
  MetricsReport r;
  r.confusion = confusion(scores, labels);
  r.accuracy = accuracy(r.confusion);
  r.balanced_accuracy = balanced_accuracy(r.confusion);
  r.auc_roc = auc_roc(scores, labels);
  r.tag = tag;
  return r;
}

// Wall clock of exactly one full batched forward pass, after one untimed
// warm-up pass. Empty input returns 0 with a warning.
inline double measure_runtime(const std::function<void()>& forward_pass, bool empty_input = false) {
  if (empty_input) {
    std::fprintf(stderr, "measure_runtime: empty validation set, reporting 0\n");
    return 0.0;
  }
  forward_pass();  // warm-up
  Stopwatch sw;
  forward_pass();
  return sw.seconds();
}

struct MetricStats {
  double mean = 0.0, max = 0.0, min = 0.0;
};

struct TopkSummary {
  MetricStats accuracy, balanced_accuracy, auc_roc, training_runtime_s, prediction_runtime_s;
  std::size_t count = 0;

  json to_json() const {
    const auto stats = [](const MetricStats& s) {
      return json{{"mean", s.mean}, {"max", s.max}, {"min", s.min}};
    };
    return json{{"count", count},
                {"accuracy", stats(accuracy)},
                {"balanced_accuracy", stats(balanced_accuracy)},
                {"auc_roc", stats(auc_roc)},
                {"training_runtime_s", stats(training_runtime_s)},
                {"prediction_runtime_s", stats(prediction_runtime_s)}};
  }
};

inline TopkSummary summarize_topk(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw Error("summarize_topk: empty report list");
  TopkSummary s;
  s.count = reports.size();
  const auto fold = [&](MetricStats& st, const std::function<double(const MetricsReport&)>& get) {
    st.mean = 0.0;
    st.max = -std::numeric_limits<double>::infinity();
    st.min = std::numeric_limits<double>::infinity();
    for (const auto& r : reports) {
      const double v = get(r);
      st.mean += v;
      st.max = std::max(st.max, v);
      st.min = std::min(st.min, v);
    }
    st.mean /= static_cast<double>(reports.size());
  };
  fold(s.accuracy, [](const MetricsReport& r) { return r.accuracy; });
  fold(s.balanced_accuracy, [](const MetricsReport& r) { return r.balanced_accuracy; });
  fold(s.auc_roc, [](const MetricsReport& r) { return r.auc_roc; });
  fold(s.training_runtime_s, [](const MetricsReport& r) { return r.training_runtime_s; });
  fold(s.prediction_runtime_s, [](const MetricsReport& r) { return r.prediction_runtime_s; });
  return s;
}

// One-sided sign test: probability of >= wins successes among wins+losses
// fair coin flips (ties dropped).
inline double sign_test_p(std::size_t wins, std::size_t losses) {
  const std::size_t n = wins + losses;
  if (n == 0) return 1.0;
  // log-space binomial tail
  double p = 0.0;
  for (std::size_t k = wins; k <= n; ++k) {
    double log_c = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      log_c += std::log(static_cast<double>(n - j)) - std::log(static_cast<double>(j + 1));
    }
    p += std::exp(log_c - static_cast<double>(n) * std::log(2.0));
  }
  return std::min(1.0, p);
}

}  // namespace cmkt::eval
