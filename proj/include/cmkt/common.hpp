#pragma once

// Shared primitives: error type, deterministic RNG, matrix aliases, timers.

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmkt {

// Row-major so a batch row is a contiguous flattened sample.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using IVec = Eigen::VectorXi;

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derive an independent stream seed from (seed, tag). Used to give every
// sample / layer / subsystem its own deterministic stream.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  return splitmix64(seed ^ splitmix64(tag + 1));
}

// Deterministic RNG. All draws are defined in terms of the raw mt19937_64
// output, never std:: distributions, so sequences are identical across
// platforms and standard-library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(splitmix64(seed)), inc_(splitmix64(seed ^ 0xda3e39cb94b95bdbULL) | 1) {}

  std::uint64_t raw() {
    // xorshift128+ style step on two 64-bit words; small, fast, reproducible.
    std::uint64_t x = state_;
    std::uint64_t y = inc_;
    state_ = y;
    x ^= x << 23;
    inc_ = x ^ y ^ (x >> 17) ^ (y >> 26);
    return inc_ + y;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(raw() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Lemire multiply-shift; n = 0 is an error.
  std::size_t index(std::size_t n) {
    if (n == 0) throw Error("Rng::index: empty range");
    return static_cast<std::size_t>((static_cast<unsigned __int128>(raw()) * n) >> 64);
  }

  // Inclusive integer range.
  long integer(long lo, long hi) {
    if (hi < lo) throw Error("Rng::integer: inverted range");
    return lo + static_cast<long>(index(static_cast<std::size_t>(hi - lo) + 1));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller (cached pair).
  double normal() {
    if (has_cache_) {
      has_cache_ = false;
      return cache_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    cache_ = r * std::sin(theta);
    has_cache_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  // Fisher-Yates using this stream.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

 private:
  std::uint64_t state_;
  std::uint64_t inc_;
  double cache_ = 0.0;
  bool has_cache_ = false;
};

class Stopwatch {
 public:
  Stopwatch() : start_(clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(clock::now() - start_).count();
  }
  void reset() { start_ = clock::now(); }

 private:
  using clock = std::chrono::steady_clock;
  clock::time_point start_;
};

constexpr double kInfSnr = std::numeric_limits<double>::infinity();

}  // namespace cmkt
