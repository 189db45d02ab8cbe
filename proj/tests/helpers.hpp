#pragma once

// Shared test utilities: independent oracles and tiny model builders.

#include "cmkt/common.hpp"
#include "cmkt/data.hpp"
#include "cmkt/nn.hpp"

#include <algorithm>
#include <functional>
#include <vector>

namespace testutil {

using cmkt::IVec;
using cmkt::Mat;
using cmkt::Vec;

// Best achievable accuracy of a single threshold on one scalar feature,
// sweeping every midpoint between sorted values (both polarities).
inline double best_threshold_accuracy(const std::vector<double>& values,
                                      const std::vector<int>& labels) {
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> candidates{sorted.front() - 1.0, sorted.back() + 1.0};
  for (std::size_t i = 0; i + 1 < sorted.size(); ++i) {
    candidates.push_back((sorted[i] + sorted[i + 1]) / 2.0);
  }
  double best = 0.0;
  for (double t : candidates) {
    std::size_t up = 0, down = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const bool above = values[i] >= t;
      if ((above ? 1 : 0) == labels[i]) ++up;
      if ((above ? 0 : 1) == labels[i]) ++down;
    }
    best = std::max({best, static_cast<double>(up) / values.size(),
                     static_cast<double>(down) / values.size()});
  }
  return best;
}

// Small model spanning every trainable layer kind, < 500 parameters.
inline cmkt::nn::ArchitectureSpec tiny_full_spec() {
  using namespace cmkt::nn;
  ArchitectureSpec spec;
  spec.input_shape = {1, 6, 6};
  spec.layers.push_back({ConvSpec{2, 3, 1, 1, false}, ""});
  spec.layers.push_back({ActSpec{"relu"}, ""});
  spec.layers.push_back({PoolSpec{2, 2}, ""});
  spec.layers.push_back({DeconvSpec{2, 3, 2, 1, 1}, ""});
  spec.layers.push_back({ActSpec{"leaky_relu", 0.01}, ""});
  spec.layers.push_back({FlattenSpec{}, "flatten"});
  spec.layers.push_back({DenseSpec{4}, ""});
  spec.layers.push_back({BatchNormSpec{}, ""});
  spec.layers.push_back({DenseSpec{1}, ""});
  spec.layers.push_back({ActSpec{"sigmoid"}, ""});
  return spec;
}

// Two convolutions and a dense head; dropout-free so value and gradient
// passes see the same function.
inline cmkt::nn::ArchitectureSpec tiny_encoder_spec(std::size_t side = 8) {
  using namespace cmkt::nn;
  ArchitectureSpec spec;
  spec.input_shape = {1, side, side};
  spec.layers.push_back({ConvSpec{2, 3, 1, 1, false}, ""});
  spec.layers.push_back({ActSpec{"relu"}, ""});
  spec.layers.push_back({PoolSpec{2, 2}, ""});
  spec.layers.push_back({ConvSpec{3, 3, 1, 1, false}, ""});
  spec.layers.push_back({ActSpec{"relu"}, ""});
  spec.layers.push_back({FlattenSpec{}, "flatten"});
  return spec;
}

inline cmkt::nn::ArchitectureSpec tiny_classifier_spec(std::size_t in_dim) {
  using namespace cmkt::nn;
  ArchitectureSpec spec;
  spec.input_shape = {1, 1, in_dim};
  spec.layers.push_back({FlattenSpec{}, ""});
  spec.layers.push_back({DenseSpec{1}, ""});
  spec.layers.push_back({ActSpec{"sigmoid"}, ""});
  return spec;
}

// Central finite differences of a scalar function of the model parameters.
inline double max_grad_rel_error(cmkt::nn::Model& model, const Vec& analytic,
                                 const std::function<double()>& loss_value, double h = 1e-6) {
  const Vec p0 = model.flat_params();
  double max_rel = 0.0;
  for (Eigen::Index k = 0; k < p0.size(); ++k) {
    Vec p = p0;
    p[k] = p0[k] + h;
    model.set_flat_params(p);
    const double lp = loss_value();
    p[k] = p0[k] - h;
    model.set_flat_params(p);
    const double lm = loss_value();
    const double fd = (lp - lm) / (2.0 * h);
    const double denom = std::max({std::abs(fd), std::abs(analytic[k]), 1e-8});
    max_rel = std::max(max_rel, std::abs(fd - analytic[k]) / denom);
  }
  model.set_flat_params(p0);
  return max_rel;
}

inline Mat random_matrix(std::size_t rows, std::size_t cols, cmkt::Rng& rng, double lo = -1.0,
                         double hi = 1.0) {
  Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

}  // namespace testutil
