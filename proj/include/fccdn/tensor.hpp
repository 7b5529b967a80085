#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace fccdn {

/// Dense row-major tensor of doubles. Layout for images is NCHW.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}
  Tensor(std::vector<int> s, double fill) : shape(std::move(s)), data(numel_of(shape), fill) {}
  Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
      throw std::invalid_argument("tensor: data size does not match shape");
  }

  static std::int64_t numel_of(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, double v) { return Tensor(std::move(s), v); }
  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
  int ndim() const { return static_cast<int>(shape.size()); }

  double& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  // NCHW accessors.
  double& at4(int n, int c, int h, int w) {
    return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  double at4(int n, int c, int h, int w) const {
    return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

std::string shape_str(const std::vector<int>& s);

/// Deterministic RNG. Draws are hand-rolled from mt19937_64 output so results
/// do not depend on the standard library's distribution implementations.
class DetRng {
 public:
  explicit DetRng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::int64_t uniform_int(std::int64_t n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
    return static_cast<std::int64_t>(eng_() % static_cast<std::uint64_t>(n));
  }

  /// Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  /// Deterministically derives a child RNG from this seed-space and a label.
  static DetRng derive(std::uint64_t seed, const std::string& label) {
    return DetRng(mix(seed, hash_str(label)));
  }
  static DetRng derive(std::uint64_t seed, const std::string& label, std::uint64_t extra) {
    return DetRng(mix(mix(seed, hash_str(label)), extra));
  }

  static std::uint64_t hash_str(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return h;
  }

  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a + 0x9e3779b97f4a7c15ull + (b << 6) + (b >> 2);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace fccdn
