#pragma once

// Scalar objectives: contrastive alignment/separation pair losses, weighted
// binary cross entropy, their combination, and mean squared error. Each loss
// that participates in training also exposes its exact gradient.

#include "cmkt/common.hpp"
#include "cmkt/nn.hpp"

#include <array>

namespace cmkt::losses {

constexpr double kProbClamp = 1e-7;

struct CCSAConfig {
  double margin = 1.0;
  double gamma = 0.5;
  // (defect-free, defective); 3:1 ratio with mean weight 1.
  std::array<double, 2> class_weights{1.5, 0.5};

  void validate() const {
    if (margin <= 0) throw Error("CCSAConfig: margin must be > 0");
    if (gamma < 0.0 || gamma > 1.0) throw Error("CCSAConfig: gamma must lie in [0,1]");
    if (class_weights[0] <= 0 || class_weights[1] <= 0) {
      throw Error("CCSAConfig: class weights must be positive");
    }
  }
};

inline double pair_distance(const Vec& u, const Vec& v) {
  if (u.size() != v.size()) throw Error("pair_distance: dimension mismatch");
  return (u - v).squaredNorm() / 2.0;
}

inline double pair_similarity(const Vec& u, const Vec& v, double margin) {
  if (u.size() != v.size()) throw Error("pair_similarity: dimension mismatch");
  if (margin <= 0) throw Error("pair_similarity: margin must be > 0");
  const double shortfall = std::max(0.0, margin - (u - v).norm());
  return shortfall * shortfall / 2.0;
}

namespace detail {

inline void check_batches(const nn::EncodedBatch& ev, const nn::EncodedBatch& ea) {
  if (ev.vectors.rows() == 0 || ea.vectors.rows() == 0) {
    throw Error("pair loss: empty batch");
  }
  if (ev.vectors.cols() != ea.vectors.cols()) {
    throw Error("pair loss: embedding dimension mismatch");
  }
  if (ev.vectors.rows() != ev.labels.size() || ea.vectors.rows() != ea.labels.size()) {
    throw Error("pair loss: label count mismatch");
  }
}

// Squared distances between every cross-modal row pair, via the Gram trick.
inline Mat cross_sqdist(const Mat& u, const Mat& v) {
  const Vec un = u.rowwise().squaredNorm();
  const Vec vn = v.rowwise().squaredNorm();
  Mat d2 = (-2.0 * (u * v.transpose()));
  d2.colwise() += un;
  d2.rowwise() += vn.transpose();
  return d2.cwiseMax(0.0);
}

}  // namespace detail

struct PairLossResult {
  double value = 0.0;
  Mat grad_visual;  // d value / d ev.vectors
  Mat grad_audio;   // d value / d ea.vectors
};

// Mean of pair_distance over all cross-modal pairs with equal labels. Classes
// with no realized cross-modal pair simply contribute nothing.
inline PairLossResult semantic_alignment_loss_grad(const nn::EncodedBatch& ev,
                                                   const nn::EncodedBatch& ea,
                                                   bool with_grad = true) {
  detail::check_batches(ev, ea);
  const Mat d2 = detail::cross_sqdist(ev.vectors, ea.vectors);
  double sum = 0.0;
  std::size_t count = 0;
  for (Eigen::Index i = 0; i < ev.labels.size(); ++i) {
    for (Eigen::Index j = 0; j < ea.labels.size(); ++j) {
      if (ev.labels[i] == ea.labels[j]) {
        sum += d2(i, j) / 2.0;
        ++count;
      }
    }
  }
  PairLossResult out;
  out.value = count > 0 ? sum / static_cast<double>(count) : 0.0;
  if (with_grad) {
    out.grad_visual = Mat::Zero(ev.vectors.rows(), ev.vectors.cols());
    out.grad_audio = Mat::Zero(ea.vectors.rows(), ea.vectors.cols());
    if (count > 0) {
      const double scale = 1.0 / static_cast<double>(count);
      for (Eigen::Index i = 0; i < ev.labels.size(); ++i) {
        for (Eigen::Index j = 0; j < ea.labels.size(); ++j) {
          if (ev.labels[i] != ea.labels[j]) continue;
          const auto diff = (ev.vectors.row(i) - ea.vectors.row(j)) * scale;
          out.grad_visual.row(i) += diff;
          out.grad_audio.row(j) -= diff;
        }
      }
    }
  }
  return out;
}

// Mean of pair_similarity over all cross-modal pairs with different labels.
inline PairLossResult separation_loss_grad(const nn::EncodedBatch& ev, const nn::EncodedBatch& ea,
                                           double margin, bool with_grad = true) {
  detail::check_batches(ev, ea);
  if (margin <= 0) throw Error("separation_loss: margin must be > 0");
  const Mat d2 = detail::cross_sqdist(ev.vectors, ea.vectors);
  double sum = 0.0;
  std::size_t count = 0;
  for (Eigen::Index i = 0; i < ev.labels.size(); ++i) {
    for (Eigen::Index j = 0; j < ea.labels.size(); ++j) {
      if (ev.labels[i] != ea.labels[j]) {
        const double shortfall = std::max(0.0, margin - std::sqrt(d2(i, j)));
        sum += shortfall * shortfall / 2.0;
        ++count;
      }
    }
  }
  PairLossResult out;
  out.value = count > 0 ? sum / static_cast<double>(count) : 0.0;
  if (with_grad) {
    out.grad_visual = Mat::Zero(ev.vectors.rows(), ev.vectors.cols());
    out.grad_audio = Mat::Zero(ea.vectors.rows(), ea.vectors.cols());
    if (count > 0) {
      const double scale = 1.0 / static_cast<double>(count);
      for (Eigen::Index i = 0; i < ev.labels.size(); ++i) {
        for (Eigen::Index j = 0; j < ea.labels.size(); ++j) {
          if (ev.labels[i] == ea.labels[j]) continue;
          const double dist = std::sqrt(d2(i, j));
          if (dist >= margin || dist == 0.0) continue;  // hinge clamp / subgradient 0
          const double coef = -scale * (margin - dist) / dist;
          const auto diff = (ev.vectors.row(i) - ea.vectors.row(j)) * coef;
          out.grad_visual.row(i) += diff;
          out.grad_audio.row(j) -= diff;
        }
      }
    }
  }
  return out;
}

inline double semantic_alignment_loss(const nn::EncodedBatch& ev, const nn::EncodedBatch& ea) {
  return semantic_alignment_loss_grad(ev, ea, false).value;
}

inline double separation_loss(const nn::EncodedBatch& ev, const nn::EncodedBatch& ea,
                              double margin) {
  return separation_loss_grad(ev, ea, margin, false).value;
}

struct BceResult {
  double value = 0.0;
  Vec grad;  // d value / d probs
};

// Mean over samples of w_y * [-y ln p - (1-y) ln(1-p)], probabilities clamped
// away from {0,1}. weights = (defect-free, defective).
inline BceResult weighted_bce_grad(const Vec& probs, const IVec& labels,
                                   const std::array<double, 2>& weights, bool with_grad = true) {
  if (probs.size() != labels.size()) throw Error("weighted_bce: length mismatch");
  if (probs.size() == 0) throw Error("weighted_bce: empty batch");
  const double n = static_cast<double>(probs.size());
  BceResult out;
  if (with_grad) out.grad = Vec::Zero(probs.size());
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    const int y = labels[i];
    if (y != 0 && y != 1) throw Error("weighted_bce: label outside {0,1}");
    const double p = std::clamp(probs[i], kProbClamp, 1.0 - kProbClamp);
    const double w = weights[static_cast<std::size_t>(y)];
    out.value += w * (-static_cast<double>(y) * std::log(p) -
                      (1.0 - static_cast<double>(y)) * std::log(1.0 - p));
    if (with_grad) {
      // zero where the clamp is active, matching the piecewise definition
      if (probs[i] > kProbClamp && probs[i] < 1.0 - kProbClamp) {
        out.grad[i] = w * (p - static_cast<double>(y)) / (p * (1.0 - p)) / n;
      }
    }
  }
  out.value /= n;
  return out;
}

inline double weighted_bce(const Vec& probs, const IVec& labels,
                           const std::array<double, 2>& weights) {
  return weighted_bce_grad(probs, labels, weights, false).value;
}

inline double mean_classification_loss(double loss_visual, double loss_audio) {
  return (loss_visual + loss_audio) / 2.0;
}

inline double ccsa_loss(double alignment, double separation, double classification, double gamma) {
  if (gamma < 0.0 || gamma > 1.0) throw Error("ccsa_loss: gamma must lie in [0,1]");
  return (1.0 - gamma) * (alignment + separation) + gamma * classification;
}

inline double mse(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error("mse: shape mismatch");
  if (a.size() == 0) throw Error("mse: empty input");
  return (a - b).squaredNorm() / static_cast<double>(a.size());
}

inline Mat mse_grad(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error("mse: shape mismatch");
  return 2.0 * (a - b) / static_cast<double>(a.size());
}

}  // namespace cmkt::losses
