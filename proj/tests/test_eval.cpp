#include "cmkt/eval.hpp"

#include "helpers.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <thread>

using namespace cmkt;
using namespace cmkt::eval;

namespace {

IVec labels_of(std::initializer_list<int> v) {
  IVec y(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (int x : v) y[i++] = x;
  return y;
}

Vec scores_of(std::initializer_list<double> v) {
  Vec s(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) s[i++] = x;
  return s;
}

// O(n^2) oracles written without ranks.
double accuracy_oracle(const Vec& s, const IVec& y, double thr) {
  std::size_t ok = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) ok += ((s[i] >= thr) == (y[i] == 1)) ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(s.size());
}

double balanced_oracle(const Vec& s, const IVec& y, double thr) {
  double tp = 0, fn = 0, tn = 0, fp = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    const bool pred = s[i] >= thr;
    if (y[i] == 1) {
      (pred ? tp : fn) += 1;
    } else {
      (pred ? fp : tn) += 1;
    }
  }
  return (tp / (tp + fn) + tn / (tn + fp)) / 2.0;
}

double auc_oracle(const Vec& s, const IVec& y) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (Eigen::Index j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      ++pairs;
      if (s[i] > s[j]) {
        wins += 1.0;
      } else if (s[i] == s[j]) {
        wins += 0.5;
      }
    }
  }
  return wins / static_cast<double>(pairs);
}

}  // namespace

TEST_CASE("confusion matrix") {
  auto cm = confusion(scores_of({0.9, 0.1}), labels_of({1, 0}));
  CHECK(cm.tp == 1);
  CHECK(cm.tn == 1);
  CHECK(cm.fp == 0);
  CHECK(cm.fn == 0);

  cm = confusion(scores_of({0.6, 0.4, 0.6, 0.4}), labels_of({1, 1, 0, 0}));
  CHECK(cm.tp == 1);
  CHECK(cm.fn == 1);
  CHECK(cm.fp == 1);
  CHECK(cm.tn == 1);

  cm = confusion(scores_of({0.6, 0.4, 0.6, 0.4}), labels_of({1, 1, 0, 0}), 0.0);
  CHECK(cm.fp == 2);  // everything predicted positive
  CHECK(cm.tp == 2);

  CHECK_THROWS_AS(confusion(Vec(0), IVec(0)), Error);
}

TEST_CASE("accuracy and balanced accuracy") {
  CHECK(accuracy({321, 114, 0, 0}) == 1.0);
  CHECK(accuracy({1, 1, 1, 1}) == 0.5);
  CHECK(accuracy({2, 1, 1, 0}) == 0.75);
  CHECK_THROWS_AS(accuracy({0, 0, 0, 0}), Error);

  CHECK(balanced_accuracy({10, 20, 0, 0}) == 1.0);
  CHECK(balanced_accuracy({10, 5, 5, 0}) == 0.75);  // TPR 1, TNR 0.5
  CHECK(balanced_accuracy({9, 4, 1, 1}) == Catch::Approx(0.85));
  CHECK_THROWS_AS(balanced_accuracy({3, 0, 0, 0}), Error);
}

TEST_CASE("auc_roc") {
  CHECK(auc_roc(scores_of({0.9, 0.8, 0.3, 0.1}), labels_of({1, 1, 0, 0})) == 1.0);
  CHECK(auc_roc(scores_of({0.9, 0.4, 0.6, 0.1}), labels_of({1, 0, 0, 1})) == 0.5);
  CHECK(auc_roc(scores_of({0.7, 0.7, 0.7}), labels_of({1, 0, 1})) == 0.5);
  CHECK_THROWS_AS(auc_roc(scores_of({0.5, 0.6}), labels_of({1, 1})), Error);
}

TEST_CASE("metrics agree exactly with brute-force oracles on the score grid") {
  const double grid[] = {0.1, 0.3, 0.5, 0.7, 0.9};
  // exhaustive over labels and scores for n <= 4
  for (std::size_t n = 2; n <= 4; ++n) {
    const std::size_t label_states = std::size_t{1} << n;
    std::size_t score_states = 1;
    for (std::size_t i = 0; i < n; ++i) score_states *= 5;
    for (std::size_t lbits = 0; lbits < label_states; ++lbits) {
      IVec y(static_cast<Eigen::Index>(n));
      int ones = 0;
      for (std::size_t i = 0; i < n; ++i) {
        y[static_cast<Eigen::Index>(i)] = (lbits >> i) & 1;
        ones += y[static_cast<Eigen::Index>(i)];
      }
      for (std::size_t sidx = 0; sidx < score_states; ++sidx) {
        Vec s(static_cast<Eigen::Index>(n));
        std::size_t rem = sidx;
        for (std::size_t i = 0; i < n; ++i) {
          s[static_cast<Eigen::Index>(i)] = grid[rem % 5];
          rem /= 5;
        }
        REQUIRE(accuracy(confusion(s, y)) == accuracy_oracle(s, y, 0.5));
        if (ones > 0 && ones < static_cast<int>(n)) {
          REQUIRE(balanced_accuracy(confusion(s, y)) == balanced_oracle(s, y, 0.5));
          REQUIRE(auc_roc(s, y) == auc_oracle(s, y));
        }
      }
    }
  }
}

TEST_CASE("auc invariances") {
  Rng rng(19);
  for (int rep = 0; rep < 30; ++rep) {
    const std::size_t n = 3 + rng.index(8);
    Vec s(static_cast<Eigen::Index>(n));
    IVec y(static_cast<Eigen::Index>(n));
    bool has0 = false, has1 = false;
    for (std::size_t i = 0; i < n; ++i) {
      const double grid[] = {0.1, 0.3, 0.7, 0.9};  // avoid the 0.5 boundary
      s[static_cast<Eigen::Index>(i)] = grid[rng.index(4)];
      y[static_cast<Eigen::Index>(i)] = static_cast<int>(rng.index(2));
      (y[static_cast<Eigen::Index>(i)] ? has1 : has0) = true;
    }
    if (!has0 || !has1) continue;

    const double base = auc_roc(s, y);
    // strictly monotone transform preserves the ROC
    Vec cubed = s.array().pow(3);
    CHECK(auc_roc(cubed, y) == base);

    // flip labels and scores
    Vec flipped = 1.0 - s.array();
    IVec yf = y;
    for (Eigen::Index i = 0; i < yf.size(); ++i) yf[i] = 1 - yf[i];
    CHECK(auc_roc(flipped, yf) == Catch::Approx(base).epsilon(1e-12));
    CHECK(accuracy(confusion(flipped, yf)) == accuracy(confusion(s, y)));
  }
}

TEST_CASE("summarize_topk") {
  MetricsReport r1;
  r1.accuracy = 0.9;
  r1.balanced_accuracy = 0.8;
  r1.auc_roc = 0.95;
  auto single = summarize_topk({r1});
  CHECK(single.accuracy.mean == 0.9);
  CHECK(single.accuracy.max == 0.9);
  CHECK(single.accuracy.min == 0.9);

  MetricsReport r2 = r1, r3 = r1;
  r2.accuracy = 1.0;
  r3.accuracy = 0.8;
  auto s = summarize_topk({r1, r2, r3});
  CHECK(s.accuracy.mean == Catch::Approx(0.9));
  CHECK(s.accuracy.max == 1.0);
  CHECK(s.accuracy.min == 0.8);
  CHECK(s.count == 3);

  std::vector<MetricsReport> fifty(50, r1);
  auto big = summarize_topk(fifty);
  CHECK(big.count == 50);
  CHECK(big.accuracy.min <= big.accuracy.mean);
  CHECK(big.accuracy.mean <= big.accuracy.max);

  CHECK_THROWS_AS(summarize_topk({}), Error);
}

TEST_CASE("runtime measurement") {
  CHECK(measure_runtime([] {}, true) == 0.0);

  // fixed workload: two measurements land in the same ballpark
  const auto work = [] {
    volatile double acc = 0.0;
    for (int i = 0; i < 8'000'000; ++i) acc += std::sqrt(static_cast<double>(i));
  };
  const double a = measure_runtime(work);
  const double b = measure_runtime(work);
  CHECK(a > 0.0);
  CHECK(std::abs(a - b) / std::max(a, b) < 0.5);
}

TEST_CASE("sign test") {
  CHECK(sign_test_p(0, 0) == 1.0);
  CHECK(sign_test_p(40, 10) < 0.05);
  CHECK(sign_test_p(25, 25) > 0.4);
  CHECK(sign_test_p(5, 0) == Catch::Approx(1.0 / 32.0));
}

TEST_CASE("metrics report json round trip") {
  MetricsReport r;
  r.confusion = {3, 4, 1, 2};
  r.accuracy = 0.7;
  r.balanced_accuracy = 0.65;
  r.auc_roc = 0.8;
  r.training_runtime_s = 12.5;
  r.prediction_runtime_s = 0.25;
  r.tag = "semantic-alignment";
  auto round = MetricsReport::from_json(r.to_json());
  CHECK(round.to_json() == r.to_json());
}
