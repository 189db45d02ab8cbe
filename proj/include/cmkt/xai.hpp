#pragma once

// Local surrogate explanations for image-shaped inputs plus the two
// downstream audits: positive-mask/reference-mask intersection counts and
// per-frequency-range highlight histograms.

#include "cmkt/common.hpp"
#include "cmkt/diag.hpp"

#include <algorithm>
#include <cstdio>
#include <functional>
#include <optional>
#include <vector>

namespace cmkt::xai {

constexpr std::size_t kImgSide = 80;

struct SuperpixelMap {
  std::vector<int> assignment;  // row-major 80x80, values in [0, count)
  std::size_t count = 0;

  int at(std::size_t y, std::size_t x) const { return assignment[y * kImgSide + x]; }
};

// Deterministic square grid segmentation: grid x grid superpixels with
// row-major ids. 80x80 with grid 8 gives 64 blocks of 10x10 pixels.
inline SuperpixelMap segment_grid(std::size_t grid = 8) {
  if (grid == 0 || kImgSide % grid != 0) throw Error("segment_grid: grid must divide 80");
  SuperpixelMap map;
  map.count = grid * grid;
  map.assignment.resize(kImgSide * kImgSide);
  const std::size_t cell = kImgSide / grid;
  for (std::size_t y = 0; y < kImgSide; ++y) {
    for (std::size_t x = 0; x < kImgSide; ++x) {
      map.assignment[y * kImgSide + x] = static_cast<int>((y / cell) * grid + x / cell);
    }
  }
  return map;
}

struct Explanation {
  Vec weights;  // one surrogate coefficient per superpixel
  double intercept = 0.0;
  SuperpixelMap superpixels;
  double fidelity = 0.0;  // weighted R^2 of the surrogate on the perturbation set
};

struct LimeConfig {
  std::size_t n_perturb = 1000;
  double ridge_alpha = 1.0;
  double kernel_width = 0.25;
  std::uint64_t seed = 0;
};

using PredictFn = std::function<double(const Vec& image)>;

// Perturb superpixels on/off (replacement value 0), weight perturbations by
// exp(-D_cos^2 / kernel_width^2) against the original image, and fit a ridge
// regression of the model outputs on the on/off indicators. The all-ones
// perturbation is always included.
inline Explanation lime_explain(const PredictFn& predict, const Vec& image,
                                const SuperpixelMap& superpixels, const LimeConfig& cfg = {}) {
  if (image.size() != static_cast<Eigen::Index>(kImgSide * kImgSide)) {
    throw Error("lime_explain: expected a flattened 80x80 image");
  }
  if (cfg.n_perturb < 2) throw Error("lime_explain: need at least 2 perturbations");
  const auto S = static_cast<Eigen::Index>(superpixels.count);
  Rng rng(derive_seed(cfg.seed, 0x11ae));

  Mat design(static_cast<Eigen::Index>(cfg.n_perturb), S);
  Vec response(static_cast<Eigen::Index>(cfg.n_perturb));
  Vec weights(static_cast<Eigen::Index>(cfg.n_perturb));
  const double image_norm = image.norm();

  Vec perturbed(image.size());
  for (std::size_t r = 0; r < cfg.n_perturb; ++r) {
    Vec z(S);
    if (r == 0) {
      z.setOnes();
    } else {
      for (Eigen::Index s = 0; s < S; ++s) z[s] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    design.row(static_cast<Eigen::Index>(r)) = z;
    for (Eigen::Index p = 0; p < image.size(); ++p) {
      perturbed[p] = z[superpixels.assignment[static_cast<std::size_t>(p)]] != 0.0 ? image[p] : 0.0;
    }
    response[static_cast<Eigen::Index>(r)] = predict(perturbed);

    double cos_dist = 0.0;
    const double pnorm = perturbed.norm();
    if (image_norm > 0.0 && pnorm > 0.0) {
      cos_dist = 1.0 - image.dot(perturbed) / (image_norm * pnorm);
    } else if (image_norm != pnorm) {
      cos_dist = 1.0;
    }
    weights[static_cast<Eigen::Index>(r)] =
        std::exp(-(cos_dist * cos_dist) / (cfg.kernel_width * cfg.kernel_width));
  }

  // all rows identical -> the surrogate is unidentifiable
  bool degenerate = true;
  for (Eigen::Index r = 1; r < design.rows() && degenerate; ++r) {
    degenerate = (design.row(r).array() == design.row(0).array()).all();
  }
  if (degenerate) throw Error("lime_explain: degenerate perturbation set (all identical)");

  // weighted ridge with unpenalized intercept, solved in closed form
  Mat augmented(design.rows(), S + 1);
  augmented.col(0).setOnes();
  augmented.rightCols(S) = design;
  Mat gram = augmented.transpose() * weights.asDiagonal() * augmented;
  for (Eigen::Index s = 1; s <= S; ++s) gram(s, s) += cfg.ridge_alpha;
  const Vec rhs = augmented.transpose() * weights.asDiagonal() * response;
  const Vec beta = gram.ldlt().solve(rhs);

  Explanation out;
  out.intercept = beta[0];
  out.weights = beta.tail(S);
  out.superpixels = superpixels;

  const Vec fitted = augmented * beta;
  const double wsum = weights.sum();
  const double wmean = weights.dot(response) / wsum;
  const double ss_res = weights.dot((response - fitted).array().square().matrix());
  const double ss_tot =
      weights.dot((response.array() - wmean).square().matrix());
  out.fidelity = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
  return out;
}

// Boolean 80x80 mask stored row-major.
struct Mask {
  std::vector<std::uint8_t> cells = std::vector<std::uint8_t>(kImgSide * kImgSide, 0);

  std::size_t count() const {
    std::size_t n = 0;
    for (auto c : cells) n += c ? 1 : 0;
    return n;
  }
  bool at(std::size_t y, std::size_t x) const { return cells[y * kImgSide + x] != 0; }
};

// Union of the top positive-weight superpixels (at most k, fewer when fewer
// weights are positive; ties broken toward the lower superpixel id).
inline Mask positive_mask(const Explanation& expl, std::size_t k = 5) {
  std::vector<std::size_t> positive;
  for (Eigen::Index s = 0; s < expl.weights.size(); ++s) {
    if (expl.weights[s] > 0.0) positive.push_back(static_cast<std::size_t>(s));
  }
  std::sort(positive.begin(), positive.end(), [&](std::size_t a, std::size_t b) {
    const double wa = expl.weights[static_cast<Eigen::Index>(a)];
    const double wb = expl.weights[static_cast<Eigen::Index>(b)];
    if (wa != wb) return wa > wb;
    return a < b;
  });
  if (positive.empty()) {
    std::fprintf(stderr, "positive_mask: no positively weighted superpixels, mask is empty\n");
  }
  if (positive.size() > k) positive.resize(k);

  Mask mask;
  for (std::size_t i = 0; i < mask.cells.size(); ++i) {
    const auto id = static_cast<std::size_t>(expl.superpixels.assignment[i]);
    if (std::find(positive.begin(), positive.end(), id) != positive.end()) mask.cells[i] = 1;
  }
  return mask;
}

inline std::size_t mask_intersection_count(const Mask& a, const Mask& b) {
  if (a.cells.size() != b.cells.size()) throw Error("mask_intersection_count: shape mismatch");
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.cells.size(); ++i) n += (a.cells[i] && b.cells[i]) ? 1 : 0;
  return n;
}

struct IntersectionDistribution {
  std::vector<std::size_t> counts;  // per test sample
  double mean = 0.0;
  std::optional<diag::Kde> density;
};

// Per-sample intersection of the LIME positive mask with a fixed reference
// mask, over an image-modality test set.
inline IntersectionDistribution intersection_distribution(const PredictFn& predict,
                                                          const Mat& images,
                                                          const Mask& reference_mask,
                                                          const SuperpixelMap& superpixels,
                                                          const LimeConfig& cfg = {},
                                                          std::size_t top_k = 5) {
  if (images.rows() == 0) throw Error("intersection_distribution: empty test set");
  IntersectionDistribution out;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < images.rows(); ++i) {
    LimeConfig sample_cfg = cfg;
    sample_cfg.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
    const Explanation e = lime_explain(predict, images.row(i).transpose(), superpixels, sample_cfg);
    const std::size_t count = mask_intersection_count(positive_mask(e, top_k), reference_mask);
    out.counts.push_back(count);
    acc += static_cast<double>(count);
  }
  out.mean = acc / static_cast<double>(images.rows());
  if (out.counts.size() >= 2) {
    std::vector<double> values(out.counts.begin(), out.counts.end());
    bool all_same = std::all_of(values.begin(), values.end(),
                                [&](double v) { return v == values.front(); });
    if (!all_same) out.density.emplace(values);
  }
  return out;
}

// counts[r] = number of masks in which frequency range r (= spectrogram row r)
// contains at least one highlighted pixel.
inline std::vector<int> frequency_histogram(const std::vector<Mask>& positive_masks) {
  std::vector<int> counts(kImgSide, 0);
  for (const Mask& m : positive_masks) {
    for (std::size_t r = 0; r < kImgSide; ++r) {
      bool any = false;
      for (std::size_t c = 0; c < kImgSide && !any; ++c) any = m.at(r, c);
      if (any) ++counts[r];
    }
  }
  return counts;
}

// Text grid mask format: 80 lines of 80 '0'/'1' characters.
inline Mask load_mask_text(std::istream& is) {
  Mask mask;
  std::string line;
  std::size_t row = 0;
  while (row < kImgSide && std::getline(is, line)) {
    if (line.size() < kImgSide) throw Error("mask text: row " + std::to_string(row) + " too short");
    for (std::size_t x = 0; x < kImgSide; ++x) {
      if (line[x] != '0' && line[x] != '1') throw Error("mask text: invalid character");
      mask.cells[row * kImgSide + x] = line[x] == '1' ? 1 : 0;
    }
    ++row;
  }
  if (row != kImgSide) throw Error("mask text: expected 80 rows");
  return mask;
}

inline void save_mask_text(std::ostream& os, const Mask& mask) {
  for (std::size_t y = 0; y < kImgSide; ++y) {
    for (std::size_t x = 0; x < kImgSide; ++x) os << (mask.at(y, x) ? '1' : '0');
    os << '\n';
  }
}

// Run-length encoding of a mask over the row-major flattened image:
// list of [start, length] runs of set cells.
inline std::vector<std::pair<std::size_t, std::size_t>> mask_rle(const Mask& mask) {
  std::vector<std::pair<std::size_t, std::size_t>> runs;
  std::size_t i = 0;
  while (i < mask.cells.size()) {
    if (mask.cells[i]) {
      std::size_t j = i;
      while (j < mask.cells.size() && mask.cells[j]) ++j;
      runs.emplace_back(i, j - i);
      i = j;
    } else {
      ++i;
    }
  }
  return runs;
}

}  // namespace cmkt::xai
