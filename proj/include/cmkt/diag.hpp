#pragma once

// Encoded-space diagnostics: maximum mean discrepancy between sample groups,
// kernel density estimation, and encoding export for external embedding tools.

#include "cmkt/common.hpp"
#include "cmkt/nn.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace cmkt::diag {

enum class Kernel { rbf_median, linear };

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    std::nth_element(v.begin(), v.begin() + static_cast<long>(mid) - 1,
                     v.begin() + static_cast<long>(mid));
    m = (m + v[mid - 1]) / 2.0;
  }
  return m;
}

}  // namespace detail

// Biased V-statistic estimator:
//   sqrt( mean k(x,x') + mean k(y,y') - 2 mean k(x,y) ), clamped at 0.
// Gaussian kernel bandwidth: median of all pairwise distances in the pooled
// sample (median heuristic), falling back to 1 when degenerate.
inline double mmd(const Mat& x, const Mat& y, Kernel kernel = Kernel::rbf_median) {
  if (x.rows() == 0 || y.rows() == 0) throw Error("mmd: empty sample");
  if (x.cols() != y.cols()) throw Error("mmd: feature dimension mismatch");

  if (kernel == Kernel::linear) {
    // mean x'Kx terms collapse to inner products of the group means
    const Vec mx = x.colwise().mean();
    const Vec my = y.colwise().mean();
    const double v = mx.squaredNorm() + my.squaredNorm() - 2.0 * mx.dot(my);
    return std::sqrt(std::max(0.0, v));
  }

  Mat pooled(x.rows() + y.rows(), x.cols());
  pooled << x, y;
  const Vec norms = pooled.rowwise().squaredNorm();
  Mat sq = -2.0 * (pooled * pooled.transpose());
  sq.colwise() += norms;
  sq.rowwise() += norms.transpose();
  sq = sq.cwiseMax(0.0);

  std::vector<double> dists;
  dists.reserve(static_cast<std::size_t>(pooled.rows()) * (pooled.rows() - 1) / 2);
  for (Eigen::Index i = 0; i < pooled.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < pooled.rows(); ++j) {
      dists.push_back(std::sqrt(sq(i, j)));
    }
  }
  double sigma = detail::median(std::move(dists));
  if (!(sigma > 0.0)) sigma = 1.0;
  const double denom = 2.0 * sigma * sigma;

  const auto block_mean = [&](Eigen::Index r0, Eigen::Index nr, Eigen::Index c0, Eigen::Index nc) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < nr; ++i) {
      for (Eigen::Index j = 0; j < nc; ++j) {
        acc += std::exp(-sq(r0 + i, c0 + j) / denom);
      }
    }
    return acc / static_cast<double>(nr * nc);
  };
  const Eigen::Index m = x.rows(), n = y.rows();
  const double v = block_mean(0, m, 0, m) + block_mean(m, n, m, n) - 2.0 * block_mean(0, m, m, n);
  return std::sqrt(std::max(0.0, v));
}

struct GroupMMDs {
  double audio_between_classes = 0.0;        // d_A
  double visual_between_classes = 0.0;       // d_V
  double cross_modal_defect_free = 0.0;      // d_VA,defect-free
  double cross_modal_defective = 0.0;        // d_VA,defective
};

namespace detail {

inline Mat select_rows(const Mat& m, const IVec& labels, int wanted) {
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    if (labels[i] == wanted) rows.push_back(i);
  }
  Mat out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  }
  return out;
}

}  // namespace detail

inline GroupMMDs group_mmds(const nn::EncodedBatch& ev, const nn::EncodedBatch& ea,
                            Kernel kernel = Kernel::rbf_median) {
  const Mat v0 = detail::select_rows(ev.vectors, ev.labels, 0);
  const Mat v1 = detail::select_rows(ev.vectors, ev.labels, 1);
  const Mat a0 = detail::select_rows(ea.vectors, ea.labels, 0);
  const Mat a1 = detail::select_rows(ea.vectors, ea.labels, 1);
  if (v0.rows() == 0 || v1.rows() == 0 || a0.rows() == 0 || a1.rows() == 0) {
    throw Error("group_mmds: every (modality, class) group must be nonempty");
  }
  GroupMMDs g;
  g.audio_between_classes = mmd(a0, a1, kernel);
  g.visual_between_classes = mmd(v0, v1, kernel);
  g.cross_modal_defect_free = mmd(v0, a0, kernel);
  g.cross_modal_defective = mmd(v1, a1, kernel);
  return g;
}

// Gaussian-kernel mixture density. Default bandwidth: Silverman's rule,
// 0.9 * min(std, IQR/1.34) * n^(-1/5), with a fallback for degenerate spreads.
class Kde {
 public:
  explicit Kde(std::vector<double> values, std::optional<double> bandwidth = std::nullopt)
      : values_(std::move(values)) {
    if (values_.size() < 2) throw Error("kde: need at least 2 values");
    if (bandwidth) {
      bandwidth_ = *bandwidth;
    } else {
      const double n = static_cast<double>(values_.size());
      const double mean = std::accumulate(values_.begin(), values_.end(), 0.0) / n;
      double var = 0.0;
      for (double v : values_) var += (v - mean) * (v - mean);
      const double sd = std::sqrt(var / (n - 1.0));
      std::vector<double> sorted = values_;
      std::sort(sorted.begin(), sorted.end());
      const auto quantile = [&](double q) {
        const double pos = q * (n - 1.0);
        const auto lo = static_cast<std::size_t>(pos);
        const double frac = pos - static_cast<double>(lo);
        return lo + 1 < sorted.size() ? sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
                                      : sorted[lo];
      };
      const double iqr = quantile(0.75) - quantile(0.25);
      double spread = sd;
      if (iqr > 0.0) spread = std::min(spread, iqr / 1.34);
      if (!(spread > 0.0)) spread = std::max(std::abs(mean), 1.0) * 1e-3;
      bandwidth_ = 0.9 * spread * std::pow(n, -0.2);
    }
    if (!(bandwidth_ > 0.0)) throw Error("kde: bandwidth must be positive");
  }

  double bandwidth() const { return bandwidth_; }

  double operator()(double q) const {
    const double inv = 1.0 / bandwidth_;
    double acc = 0.0;
    for (double v : values_) {
      const double u = (q - v) * inv;
      acc += std::exp(-0.5 * u * u);
    }
    return acc * inv / (std::sqrt(2.0 * M_PI) * static_cast<double>(values_.size()));
  }

 private:
  std::vector<double> values_;
  double bandwidth_ = 0.0;
};

inline Kde kde(const std::vector<double>& values, std::optional<double> bandwidth = std::nullopt) {
  return Kde(values, bandwidth);
}

// Snapshot epochs for an every-N export schedule over a fixed epoch budget.
inline std::vector<std::size_t> snapshot_epochs(std::size_t every, std::size_t total_epochs) {
  std::vector<std::size_t> out;
  if (every == 0) return out;
  for (std::size_t e = every; e <= total_epochs; e += every) out.push_back(e);
  return out;
}

// Text layout: one header line, then one row per sample (label, vector).
// Values are printed with round-trip precision so re-export is byte-identical.
inline void export_encodings(const std::string& path, std::size_t epoch,
                             const nn::EncodedBatch& batch) {
  std::ofstream os(path);
  if (!os) throw Error("export_encodings: cannot open " + path);
  char line[64];
  std::snprintf(line, sizeof(line), "# epoch=%zu modality=%s dim=%ld count=%ld\n", epoch,
                nn::to_string(batch.modality).c_str(), static_cast<long>(batch.vectors.cols()),
                static_cast<long>(batch.vectors.rows()));
  os << line;
  for (Eigen::Index i = 0; i < batch.vectors.rows(); ++i) {
    os << batch.labels[i];
    for (Eigen::Index j = 0; j < batch.vectors.cols(); ++j) {
      std::snprintf(line, sizeof(line), "\t%.17g", batch.vectors(i, j));
      os << line;
    }
    os << "\n";
  }
  if (!os) throw Error("export_encodings: write failed for " + path);
}

}  // namespace cmkt::diag
