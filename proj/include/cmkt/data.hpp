#pragma once

// Paired visual/audio data: preprocessing, labeling, splitting, synthetic
// corpus generation and additive-noise corruption.

#include "cmkt/common.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

namespace cmkt::data {

constexpr std::size_t kRawSize = 480;      // raw camera frame, per side
constexpr std::size_t kImgSize = 80;       // working image, per side
constexpr std::size_t kBlock = kRawSize / kImgSize;
constexpr std::size_t kSampleRate = 44100;
constexpr std::size_t kFramesPerSecond = 30;
constexpr std::size_t kSnippetLen = kSampleRate / kFramesPerSecond;  // 1470
constexpr std::size_t kFftSize = 160;
constexpr std::size_t kHop = 16;
constexpr std::size_t kFreqBins = 80;      // one-sided bins kept, 275.625 Hz each
constexpr double kDbFloor = -80.0;

struct RawVisualFrame {
  // 480x480x3, RGB interleaved, values in [0, 255].
  std::vector<double> pixels;
  std::size_t index = 0;
};

struct AudioSnippet {
  Vec samples;  // length 1470
  double sample_rate = static_cast<double>(kSampleRate);
};

struct VisualFrame {
  Mat pixels;  // 80x80 in [0, 1]
};

struct Spectrogram {
  // Row r covers [r*275.625, (r+1)*275.625) Hz; columns are time frames.
  Mat pixels;  // 80x80 in [0, 1]
};

struct PairedSample {
  VisualFrame visual;
  AudioSnippet audio_raw;
  Spectrogram audio_spec;  // derived deterministically from audio_raw
  int label = 0;           // 0 = defect-free, 1 = defective
  std::size_t index = 0;
};

struct DatasetSplit {
  std::vector<PairedSample> train;
  std::vector<PairedSample> validation;
  std::vector<PairedSample> test;
};

struct SyntheticConfig {
  std::size_t n_samples = 2000;
  std::uint64_t seed = 0;
  double shared_signal_strength = 1.0;   // 0 = no class signal in either modality
  double visual_nuisance_strength = 0.0; // border-ring amplitude, class-irrelevant
  double visual_noise_std = 0.0;         // per-pixel, on the [0,1] scale
  double audio_noise_std = 0.0;          // per-sample, on the waveform
  double class_ratio = 0.5;              // fraction of defect-free (label 0) samples

  void validate() const {
    if (shared_signal_strength < 0 || visual_nuisance_strength < 0 ||
        visual_noise_std < 0 || audio_noise_std < 0) {
      throw Error("SyntheticConfig: strengths must be >= 0");
    }
    if (!(class_ratio > 0.0 && class_ratio < 1.0)) {
      throw Error("SyntheticConfig: class_ratio must lie in (0,1)");
    }
    if (n_samples == 0) throw Error("SyntheticConfig: n_samples must be > 0");
  }
};

// ---------------------------------------------------------------------------
// Preprocessing

inline VisualFrame grayscale_resize(const RawVisualFrame& frame) {
  if (frame.pixels.size() != kRawSize * kRawSize * 3) {
    throw Error("grayscale_resize: expected 480x480x3 input, got " +
                std::to_string(frame.pixels.size()) + " values");
  }
  VisualFrame out;
  out.pixels = Mat::Zero(kImgSize, kImgSize);
  for (std::size_t by = 0; by < kImgSize; ++by) {
    for (std::size_t bx = 0; bx < kImgSize; ++bx) {
      double acc = 0.0;
      for (std::size_t dy = 0; dy < kBlock; ++dy) {
        for (std::size_t dx = 0; dx < kBlock; ++dx) {
          const std::size_t y = by * kBlock + dy;
          const std::size_t x = bx * kBlock + dx;
          const double* p = &frame.pixels[(y * kRawSize + x) * 3];
          acc += 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        }
      }
      out.pixels(static_cast<Eigen::Index>(by), static_cast<Eigen::Index>(bx)) =
          acc / (kBlock * kBlock) / 255.0;
    }
  }
  return out;
}

inline std::vector<AudioSnippet> segment_audio(const Vec& waveform,
                                               std::size_t sample_rate = kSampleRate,
                                               std::size_t fps = kFramesPerSecond) {
  const std::size_t window = sample_rate / fps;
  const std::size_t count = static_cast<std::size_t>(waveform.size()) / window;
  if (count == 0) {
    throw Error("segment_audio: waveform shorter than one snippet (" +
                std::to_string(waveform.size()) + " < " + std::to_string(window) + ")");
  }
  std::vector<AudioSnippet> snippets(count);
  for (std::size_t i = 0; i < count; ++i) {
    snippets[i].samples = waveform.segment(static_cast<Eigen::Index>(i * window),
                                           static_cast<Eigen::Index>(window));
    snippets[i].sample_rate = static_cast<double>(sample_rate);
  }
  return snippets;
}

namespace detail {

// DFT basis for the 80 retained one-sided bins, Hann-windowed (periodic).
struct StftTables {
  std::array<double, kFftSize> window;
  // cos/sin of 2*pi*k*n/N, indexed [k][n].
  std::vector<double> cos_t, sin_t;
  StftTables() : cos_t(kFreqBins * kFftSize), sin_t(kFreqBins * kFftSize) {
    for (std::size_t n = 0; n < kFftSize; ++n) {
      window[n] = 0.5 * (1.0 - std::cos(2.0 * M_PI * static_cast<double>(n) /
                                        static_cast<double>(kFftSize)));
    }
    for (std::size_t k = 0; k < kFreqBins; ++k) {
      for (std::size_t n = 0; n < kFftSize; ++n) {
        const double arg = 2.0 * M_PI * static_cast<double>(k * n) / static_cast<double>(kFftSize);
        cos_t[k * kFftSize + n] = std::cos(arg);
        sin_t[k * kFftSize + n] = std::sin(arg);
      }
    }
  }
};

inline const StftTables& stft_tables() {
  static const StftTables tables;
  return tables;
}

}  // namespace detail

// Magnitude STFT (FFT 160, Hann, hop 16) -> 80 bins x 82 frames, dB relative
// to the global maximum clipped to [-80, 0] and mapped to [0, 1], then the
// time axis is center-cropped from 82 to 80 frames.
inline Spectrogram make_spectrogram(const AudioSnippet& snippet) {
  if (snippet.samples.size() != static_cast<Eigen::Index>(kSnippetLen)) {
    throw Error("make_spectrogram: snippet must have " + std::to_string(kSnippetLen) +
                " samples, got " + std::to_string(snippet.samples.size()));
  }
  const auto& t = detail::stft_tables();
  const std::size_t n_frames = (kSnippetLen - kFftSize) / kHop + 1;  // 82
  Mat mag(kFreqBins, n_frames);
  std::array<double, kFftSize> buf;
  for (std::size_t f = 0; f < n_frames; ++f) {
    const double* x = snippet.samples.data() + f * kHop;
    for (std::size_t n = 0; n < kFftSize; ++n) buf[n] = x[n] * t.window[n];
    for (std::size_t k = 0; k < kFreqBins; ++k) {
      double re = 0.0, im = 0.0;
      const double* c = &t.cos_t[k * kFftSize];
      const double* s = &t.sin_t[k * kFftSize];
      for (std::size_t n = 0; n < kFftSize; ++n) {
        re += buf[n] * c[n];
        im -= buf[n] * s[n];
      }
      mag(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(f)) =
          std::sqrt(re * re + im * im);
    }
  }
  const double peak = mag.maxCoeff();
  Spectrogram out;
  out.pixels = Mat::Zero(kFreqBins, kImgSize);
  const std::size_t crop = (n_frames - kImgSize) / 2;  // drop one frame each side
  if (peak > 0.0) {
    for (std::size_t k = 0; k < kFreqBins; ++k) {
      for (std::size_t f = 0; f < kImgSize; ++f) {
        const double m = mag(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(f + crop));
        double db = m > 0.0 ? 20.0 * std::log10(m / peak) : kDbFloor;
        db = std::clamp(db, kDbFloor, 0.0);
        out.pixels(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(f)) =
            (db - kDbFloor) / -kDbFloor;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

// Nearest integer, ties to even. Split sizes depend on this rule: 4345 pairs
// must come out as (3476, 434, 435).
inline std::size_t round_half_even(double x) {
  const double f = std::floor(x);
  const double frac = x - f;
  if (frac > 0.5) return static_cast<std::size_t>(f) + 1;
  if (frac < 0.5) return static_cast<std::size_t>(f);
  const auto lo = static_cast<std::size_t>(f);
  return (lo % 2 == 0) ? lo : lo + 1;
}

inline DatasetSplit split_dataset(const std::vector<PairedSample>& samples,
                                  std::array<int, 3> ratio, std::uint64_t seed) {
  const std::size_t n = samples.size();
  if (n < 3) throw Error("split_dataset: need at least 3 samples, got " + std::to_string(n));
  const double total = ratio[0] + ratio[1] + ratio[2];
  if (total <= 0 || ratio[0] <= 0 || ratio[1] <= 0 || ratio[2] <= 0) {
    throw Error("split_dataset: ratio parts must be positive");
  }
  const std::size_t n_train = round_half_even(ratio[0] / total * static_cast<double>(n));
  const std::size_t n_val = round_half_even(ratio[1] / total * static_cast<double>(n));
  if (n_train + n_val >= n) throw Error("split_dataset: degenerate split sizes");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0x5917));
  rng.shuffle(order);

  DatasetSplit split;
  split.train.reserve(n_train);
  split.validation.reserve(n_val);
  split.test.reserve(n - n_train - n_val);
  for (std::size_t i = 0; i < n; ++i) {
    const PairedSample& s = samples[order[i]];
    if (i < n_train) {
      split.train.push_back(s);
    } else if (i < n_train + n_val) {
      split.validation.push_back(s);
    } else {
      split.test.push_back(s);
    }
  }
  return split;
}

// ---------------------------------------------------------------------------
// Additive noise

// sigma is expressed on the 0-255 pixel-intensity scale.
inline VisualFrame add_visual_awgn(const VisualFrame& frame, double sigma, std::uint64_t seed) {
  if (sigma < 0) throw Error("add_visual_awgn: sigma must be >= 0");
  if (sigma == 0.0) return frame;
  Rng rng(derive_seed(seed, 0x71c3));
  VisualFrame out;
  out.pixels = frame.pixels;
  for (Eigen::Index i = 0; i < out.pixels.size(); ++i) {
    double v = out.pixels.data()[i] * 255.0 + rng.normal(0.0, sigma);
    out.pixels.data()[i] = std::clamp(v, 0.0, 255.0) / 255.0;
  }
  return out;
}

// Noise power is set from the mean squared sample value so that
// 10*log10(P_signal / P_noise) = snr_db. snr_db = +inf is the identity.
inline AudioSnippet add_audio_awgn(const AudioSnippet& snippet, double snr_db, std::uint64_t seed) {
  if (std::isinf(snr_db) && snr_db > 0) return snippet;
  const double p_signal = snippet.samples.squaredNorm() / static_cast<double>(snippet.samples.size());
  if (p_signal <= 0.0) throw Error("add_audio_awgn: zero-power snippet, SNR undefined");
  const double noise_std = std::sqrt(p_signal / std::pow(10.0, snr_db / 10.0));
  Rng rng(derive_seed(seed, 0xa0d10));
  AudioSnippet out = snippet;
  for (Eigen::Index i = 0; i < out.samples.size(); ++i) {
    out.samples[i] += rng.normal(0.0, noise_std);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic paired corpus

namespace detail {

constexpr double kBlobCenter = 39.5;
constexpr double kRingInner = 34.0;
constexpr double kRingOuter = 38.0;
constexpr double kToneLow = 5512.5;    // bin 20
constexpr double kToneHigh = 11025.0;  // bin 40

inline double radial_distance(std::size_t y, std::size_t x) {
  const double dy = static_cast<double>(y) - kBlobCenter;
  const double dx = static_cast<double>(x) - kBlobCenter;
  return std::sqrt(dy * dy + dx * dx);
}

}  // namespace detail

// Footprint of the class-irrelevant border ring added by generate_synthetic;
// the synthetic stand-in for a fixed reflection mask.
inline std::vector<std::uint8_t> synthetic_ring_mask() {
  std::vector<std::uint8_t> mask(kImgSize * kImgSize, 0);
  for (std::size_t y = 0; y < kImgSize; ++y) {
    for (std::size_t x = 0; x < kImgSize; ++x) {
      const double d = detail::radial_distance(y, x);
      mask[y * kImgSize + x] = (d >= detail::kRingInner && d <= detail::kRingOuter) ? 1 : 0;
    }
  }
  return mask;
}

// Each sample draws a latent z whose range depends on the class. The visual
// frame is a centered blob whose radius tracks z plus the border ring and
// visual-only noise; the audio snippet mixes two tones whose amplitude split
// tracks z plus audio-only noise. Deterministic per (seed, index).
inline std::vector<PairedSample> generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.n_samples;
  const std::size_t n_defect_free = static_cast<std::size_t>(
      std::llround(cfg.class_ratio * static_cast<double>(n)));

  std::vector<PairedSample> samples(n);
  std::size_t placed_zero = 0;
  for (std::size_t i = 0; i < n; ++i) {
    // Spread the defect-free quota evenly over the index range.
    const std::size_t quota =
        static_cast<std::size_t>((static_cast<unsigned long long>(i + 1) * n_defect_free) / n);
    const int label = (quota > placed_zero) ? 0 : 1;
    if (label == 0) ++placed_zero;

    Rng rng(derive_seed(cfg.seed, i));
    const double z = (label == 0) ? rng.uniform(0.25, 0.45) : rng.uniform(0.55, 0.75);
    const double zs = 0.5 + cfg.shared_signal_strength * (z - 0.5);

    PairedSample& s = samples[i];
    s.label = label;
    s.index = i;

    // Visual: soft disk of radius 10 + 18*zs, ring, then pixel noise.
    const double radius = 10.0 + 18.0 * zs;
    const double ring_level =
        cfg.visual_nuisance_strength > 0.0
            ? cfg.visual_nuisance_strength * rng.uniform(0.5, 1.0)
            : (static_cast<void>(rng.uniform(0.5, 1.0)), 0.0);
    s.visual.pixels = Mat::Zero(kImgSize, kImgSize);
    for (std::size_t y = 0; y < kImgSize; ++y) {
      for (std::size_t x = 0; x < kImgSize; ++x) {
        const double d = detail::radial_distance(y, x);
        double v = 0.85 / (1.0 + std::exp((d - radius) / 1.5));
        if (d >= detail::kRingInner && d <= detail::kRingOuter) v += ring_level;
        if (cfg.visual_noise_std > 0.0) v += rng.normal(0.0, cfg.visual_noise_std);
        s.visual.pixels(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x)) =
            std::clamp(v, 0.0, 1.0);
      }
    }

    // Audio: two tones splitting amplitude by zs, then sample noise.
    const double phase_low = rng.uniform(0.0, 2.0 * M_PI);
    const double phase_high = rng.uniform(0.0, 2.0 * M_PI);
    const double a_low = zs;
    const double a_high = 1.0 - zs;
    s.audio_raw.samples = Vec::Zero(kSnippetLen);
    s.audio_raw.sample_rate = static_cast<double>(kSampleRate);
    for (std::size_t t = 0; t < kSnippetLen; ++t) {
      const double time = static_cast<double>(t) / static_cast<double>(kSampleRate);
      double v = 0.45 * (a_low * std::sin(2.0 * M_PI * detail::kToneLow * time + phase_low) +
                         a_high * std::sin(2.0 * M_PI * detail::kToneHigh * time + phase_high));
      if (cfg.audio_noise_std > 0.0) v += rng.normal(0.0, cfg.audio_noise_std);
      s.audio_raw.samples[static_cast<Eigen::Index>(t)] = v;
    }
    s.audio_spec = make_spectrogram(s.audio_raw);
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Matrix views for training

struct TensorSplit {
  Mat visual;  // n x 6400
  Mat audio;   // n x 6400 (spectrograms)
  IVec labels;
};

inline TensorSplit to_tensors(const std::vector<PairedSample>& samples) {
  const auto n = static_cast<Eigen::Index>(samples.size());
  TensorSplit t;
  t.visual.resize(n, static_cast<Eigen::Index>(kImgSize * kImgSize));
  t.audio.resize(n, static_cast<Eigen::Index>(kImgSize * kImgSize));
  t.labels.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const PairedSample& s = samples[static_cast<std::size_t>(i)];
    t.visual.row(i) = Eigen::Map<const Vec>(s.visual.pixels.data(), s.visual.pixels.size());
    t.audio.row(i) = Eigen::Map<const Vec>(s.audio_spec.pixels.data(), s.audio_spec.pixels.size());
    t.labels[i] = s.label;
  }
  return t;
}

// Corruption helpers for the noise sweeps. Audio noise is injected into the
// waveform and the spectrogram regenerated.
inline std::vector<PairedSample> corrupt_visual(const std::vector<PairedSample>& samples,
                                                double sigma, std::uint64_t seed) {
  std::vector<PairedSample> out = samples;
  if (sigma == 0.0) return out;
  for (auto& s : out) {
    s.visual = add_visual_awgn(s.visual, sigma, derive_seed(seed, s.index));
  }
  return out;
}

inline std::vector<PairedSample> corrupt_audio(const std::vector<PairedSample>& samples,
                                               double snr_db, std::uint64_t seed) {
  std::vector<PairedSample> out = samples;
  if (std::isinf(snr_db) && snr_db > 0) return out;
  for (auto& s : out) {
    s.audio_raw = add_audio_awgn(s.audio_raw, snr_db, derive_seed(seed, s.index));
    s.audio_spec = make_spectrogram(s.audio_raw);
  }
  return out;
}

}  // namespace cmkt::data
