#include "cmkt/data.hpp"

#include "helpers.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>

using namespace cmkt;
using namespace cmkt::data;

namespace {

RawVisualFrame solid_frame(double value) {
  RawVisualFrame f;
  f.pixels.assign(kRawSize * kRawSize * 3, value);
  return f;
}

// Independent block-mean oracle over the luminance image.
Mat block_mean_oracle(const RawVisualFrame& f) {
  Mat lum(kRawSize, kRawSize);
  for (std::size_t y = 0; y < kRawSize; ++y) {
    for (std::size_t x = 0; x < kRawSize; ++x) {
      const double* p = &f.pixels[(y * kRawSize + x) * 3];
      lum(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x)) =
          0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    }
  }
  Mat out(kImgSize, kImgSize);
  for (std::size_t by = 0; by < kImgSize; ++by) {
    for (std::size_t bx = 0; bx < kImgSize; ++bx) {
      double acc = 0;
      for (std::size_t dy = 0; dy < 6; ++dy) {
        for (std::size_t dx = 0; dx < 6; ++dx) {
          acc += lum(static_cast<Eigen::Index>(by * 6 + dy), static_cast<Eigen::Index>(bx * 6 + dx));
        }
      }
      out(static_cast<Eigen::Index>(by), static_cast<Eigen::Index>(bx)) = acc / 36.0 / 255.0;
    }
  }
  return out;
}

// Naive DFT magnitude of one Hann-windowed frame, written without the
// production lookup tables.
double naive_bin_magnitude(const Vec& frame, std::size_t bin) {
  std::complex<double> acc{0.0, 0.0};
  const auto n = static_cast<std::size_t>(frame.size());
  for (std::size_t t = 0; t < n; ++t) {
    const double w = 0.5 * (1.0 - std::cos(2.0 * M_PI * t / n));
    const double arg = -2.0 * M_PI * static_cast<double>(bin * t) / static_cast<double>(n);
    acc += frame[static_cast<Eigen::Index>(t)] * w * std::exp(std::complex<double>(0.0, arg));
  }
  return std::abs(acc);
}

AudioSnippet sine_snippet(double freq, double amplitude = 1.0) {
  AudioSnippet s;
  s.samples = Vec(kSnippetLen);
  for (std::size_t t = 0; t < kSnippetLen; ++t) {
    s.samples[static_cast<Eigen::Index>(t)] =
        amplitude * std::sin(2.0 * M_PI * freq * static_cast<double>(t) / 44100.0);
  }
  return s;
}

std::size_t spectrogram_peak_row(const Spectrogram& spec) {
  Eigen::Index best = 0;
  double best_energy = -1.0;
  for (Eigen::Index r = 0; r < spec.pixels.rows(); ++r) {
    const double e = spec.pixels.row(r).sum();
    if (e > best_energy) {
      best_energy = e;
      best = r;
    }
  }
  return static_cast<std::size_t>(best);
}

}  // namespace

TEST_CASE("grayscale_resize constants and oracle") {
  CHECK(grayscale_resize(solid_frame(255)).pixels.isApproxToConstant(1.0, 1e-12));
  CHECK(grayscale_resize(solid_frame(0)).pixels.isApproxToConstant(0.0, 1e-12));

  // checkerboard with 3x3 cells: every 6x6 resize block holds two black and
  // two white cells, so the block average lands exactly on 0.5
  RawVisualFrame board;
  board.pixels.resize(kRawSize * kRawSize * 3);
  for (std::size_t y = 0; y < kRawSize; ++y) {
    for (std::size_t x = 0; x < kRawSize; ++x) {
      const double v = ((y / 3 + x / 3) % 2 == 0) ? 255.0 : 0.0;
      for (int c = 0; c < 3; ++c) board.pixels[(y * kRawSize + x) * 3 + c] = v;
    }
  }
  const Mat got = grayscale_resize(board).pixels;
  const Mat expected = block_mean_oracle(board);
  CHECK((got - expected).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(got.isApproxToConstant(0.5, 1e-12));

  // random frame against the oracle
  Rng rng(11);
  RawVisualFrame random;
  random.pixels.resize(kRawSize * kRawSize * 3);
  for (auto& p : random.pixels) p = rng.uniform(0.0, 255.0);
  CHECK((grayscale_resize(random).pixels - block_mean_oracle(random)).cwiseAbs().maxCoeff() < 1e-12);

  RawVisualFrame bad;
  bad.pixels.assign(100, 0.0);
  CHECK_THROWS_AS(grayscale_resize(bad), Error);
}

TEST_CASE("segment_audio window arithmetic") {
  CHECK(segment_audio(Vec::Zero(6'387'150)).size() == 4345);

  Vec one = Vec::LinSpaced(1470, 0.0, 1.0);
  auto snips = segment_audio(one);
  REQUIRE(snips.size() == 1);
  CHECK(snips[0].samples.isApprox(one));

  auto two = segment_audio(Vec::Ones(2941));
  CHECK(two.size() == 2);  // one trailing sample dropped

  CHECK_THROWS_AS(segment_audio(Vec::Zero(1469)), Error);

  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const auto len = static_cast<std::size_t>(rng.integer(1470, 100000));
    const auto count = segment_audio(Vec::Zero(static_cast<Eigen::Index>(len))).size();
    CHECK(count * 1470 <= len);
    CHECK(len < (count + 1) * 1470);
  }
}

TEST_CASE("make_spectrogram physics") {
  AudioSnippet silence;
  silence.samples = Vec::Zero(kSnippetLen);
  const auto flat = make_spectrogram(silence);
  CHECK(flat.pixels.rows() == 80);
  CHECK(flat.pixels.cols() == 80);
  CHECK(flat.pixels.maxCoeff() == 0.0);

  // 5512.5 Hz = 20 bin widths of 275.625 Hz
  const auto low = make_spectrogram(sine_snippet(5512.5));
  const auto low_peak = spectrogram_peak_row(low);
  CHECK(low_peak >= 19);
  CHECK(low_peak <= 21);

  const auto high = make_spectrogram(sine_snippet(11025.0));
  const auto high_peak = spectrogram_peak_row(high);
  CHECK(high_peak >= 39);
  CHECK(high_peak <= 41);

  // independent single-window DFT oracle
  const auto snippet = sine_snippet(5512.5);
  Vec window = snippet.samples.segment(0, 160);
  std::size_t oracle_best = 0;
  double oracle_mag = -1.0;
  for (std::size_t k = 0; k < 80; ++k) {
    const double m = naive_bin_magnitude(window, k);
    if (m > oracle_mag) {
      oracle_mag = m;
      oracle_best = k;
    }
  }
  CHECK(oracle_best >= 19);
  CHECK(oracle_best <= 21);
  CHECK(oracle_best == low_peak);

  SECTION("invariants") {
    Rng rng(3);
    AudioSnippet noise;
    noise.samples = Vec(kSnippetLen);
    for (Eigen::Index i = 0; i < noise.samples.size(); ++i) noise.samples[i] = rng.normal();
    const auto a = make_spectrogram(noise);
    const auto b = make_spectrogram(noise);
    CHECK(a.pixels == b.pixels);  // deterministic
    CHECK(a.pixels.minCoeff() >= 0.0);
    CHECK(a.pixels.maxCoeff() <= 1.0);
    CHECK(a.pixels.rows() == 80);
    CHECK(a.pixels.cols() == 80);
  }
}

TEST_CASE("split_dataset sizes and determinism") {
  const auto make = [](std::size_t n) {
    std::vector<PairedSample> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i].index = i;
    return v;
  };

  const auto split = split_dataset(make(4345), {8, 1, 1}, 7);
  CHECK(split.train.size() == 3476);
  CHECK(split.validation.size() == 434);
  CHECK(split.test.size() == 435);

  const auto ten = split_dataset(make(10), {8, 1, 1}, 7);
  CHECK(ten.train.size() == 8);
  CHECK(ten.validation.size() == 1);
  CHECK(ten.test.size() == 1);

  const auto again = split_dataset(make(4345), {8, 1, 1}, 7);
  for (std::size_t i = 0; i < split.train.size(); ++i) {
    REQUIRE(split.train[i].index == again.train[i].index);
  }

  // partition: every index exactly once
  std::vector<int> seen(4345, 0);
  for (const auto& s : split.train) seen[s.index]++;
  for (const auto& s : split.validation) seen[s.index]++;
  for (const auto& s : split.test) seen[s.index]++;
  CHECK(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));

  CHECK_THROWS_AS(split_dataset(make(2), {8, 1, 1}, 7), Error);
}

TEST_CASE("visual additive noise") {
  VisualFrame gray;
  gray.pixels = Mat::Constant(80, 80, 0.5);

  const auto same = add_visual_awgn(gray, 0.0, 3);
  CHECK(same.pixels == gray.pixels);

  // sample-statistics oracle on the added noise
  const auto noisy = add_visual_awgn(gray, 25.0, 3);
  const Mat delta = (noisy.pixels - gray.pixels) * 255.0;
  const double mean = delta.mean();
  const double stddev = std::sqrt((delta.array() - mean).square().mean());
  CHECK(stddev > 23.5);
  CHECK(stddev < 26.5);

  VisualFrame ones;
  ones.pixels = Mat::Constant(80, 80, 1.0);
  CHECK(add_visual_awgn(ones, 10.0, 1).pixels.maxCoeff() <= 1.0);

  CHECK_THROWS_AS(add_visual_awgn(gray, -1.0, 0), Error);
  CHECK(add_visual_awgn(gray, 5.0, 9).pixels == add_visual_awgn(gray, 5.0, 9).pixels);
}

TEST_CASE("audio additive noise by SNR") {
  AudioSnippet sine = sine_snippet(5512.5, std::sqrt(2.0));  // unit power

  const auto same = add_audio_awgn(sine, kInfSnr, 3);
  CHECK(same.samples == sine.samples);

  const auto noisy = add_audio_awgn(sine, 50.0, 3);
  const Vec noise = noisy.samples - sine.samples;
  const double p_signal = sine.samples.squaredNorm() / sine.samples.size();
  const double p_noise = noise.squaredNorm() / noise.size();
  const double snr = 10.0 * std::log10(p_signal / p_noise);
  CHECK(snr > 49.5);
  CHECK(snr < 50.5);

  CHECK(add_audio_awgn(sine, 60.0, 4).samples == add_audio_awgn(sine, 60.0, 4).samples);

  AudioSnippet zero;
  zero.samples = Vec::Zero(kSnippetLen);
  CHECK_THROWS_AS(add_audio_awgn(zero, 50.0, 0), Error);
}

TEST_CASE("synthetic corpus") {
  SyntheticConfig cfg;
  cfg.n_samples = 200;
  cfg.seed = 17;

  SECTION("separable configuration admits a perfect threshold") {
    auto samples = generate_synthetic(cfg);
    std::vector<double> means;
    std::vector<int> labels;
    for (const auto& s : samples) {
      means.push_back(s.visual.pixels.mean());
      labels.push_back(s.label);
    }
    CHECK(testutil::best_threshold_accuracy(means, labels) == 1.0);

    // audio separability via the two tone rows
    std::vector<double> tone_ratio;
    for (const auto& s : samples) {
      tone_ratio.push_back(s.audio_spec.pixels.row(20).sum() - s.audio_spec.pixels.row(40).sum());
    }
    CHECK(testutil::best_threshold_accuracy(tone_ratio, labels) == 1.0);
  }

  SECTION("determinism is bit exact") {
    auto a = generate_synthetic(cfg);
    auto b = generate_synthetic(cfg);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      REQUIRE(a[i].label == b[i].label);
      REQUIRE(a[i].visual.pixels == b[i].visual.pixels);
      REQUIRE(a[i].audio_raw.samples == b[i].audio_raw.samples);
      REQUIRE(a[i].audio_spec.pixels == b[i].audio_spec.pixels);
    }
  }

  SECTION("class ratio") {
    cfg.n_samples = 400;
    cfg.class_ratio = 0.25;
    auto samples = generate_synthetic(cfg);
    std::size_t zeros = 0;
    for (const auto& s : samples) zeros += s.label == 0 ? 1 : 0;
    CHECK(zeros == 100);
    CHECK(samples.size() - zeros == 300);
  }

  SECTION("spectrograms stay in range and labels are shared per pair") {
    cfg.n_samples = 50;
    cfg.visual_noise_std = 0.1;
    cfg.audio_noise_std = 0.1;
    cfg.visual_nuisance_strength = 0.5;
    for (const auto& s : generate_synthetic(cfg)) {
      CHECK(s.audio_spec.pixels.minCoeff() >= 0.0);
      CHECK(s.audio_spec.pixels.maxCoeff() <= 1.0);
      CHECK(s.visual.pixels.minCoeff() >= 0.0);
      CHECK(s.visual.pixels.maxCoeff() <= 1.0);
      CHECK((s.label == 0 || s.label == 1));
    }
  }

  SECTION("ring mask matches the nuisance footprint") {
    const auto mask = synthetic_ring_mask();
    cfg.n_samples = 4;
    cfg.visual_nuisance_strength = 0.0;
    auto clean = generate_synthetic(cfg);
    cfg.visual_nuisance_strength = 0.9;
    auto ringed = generate_synthetic(cfg);
    for (std::size_t i = 0; i < clean.size(); ++i) {
      const Mat diff = (ringed[i].visual.pixels - clean[i].visual.pixels).cwiseAbs();
      for (std::size_t y = 0; y < 80; ++y) {
        for (std::size_t x = 0; x < 80; ++x) {
          if (diff(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x)) > 1e-9) {
            REQUIRE(mask[y * 80 + x] == 1);
          }
        }
      }
    }
  }
}

TEST_CASE("corruption helpers regenerate spectrograms") {
  SyntheticConfig cfg;
  cfg.n_samples = 6;
  cfg.seed = 2;
  auto samples = generate_synthetic(cfg);

  auto same_v = corrupt_visual(samples, 0.0, 1);
  CHECK(same_v[0].visual.pixels == samples[0].visual.pixels);
  auto same_a = corrupt_audio(samples, kInfSnr, 1);
  CHECK(same_a[0].audio_spec.pixels == samples[0].audio_spec.pixels);

  auto noisy = corrupt_audio(samples, 20.0, 1);
  CHECK(noisy[0].audio_raw.samples != samples[0].audio_raw.samples);
  // spectrogram rebuilt from the corrupted waveform
  CHECK(noisy[0].audio_spec.pixels == make_spectrogram(noisy[0].audio_raw).pixels);
}
