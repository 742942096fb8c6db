#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Core>

namespace costereo {

/// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream,
                                 std::uint64_t index = 0) {
  return mix64(mix64(mix64(seed) ^ stream) ^ index);
}

/// Seeded generator with the handful of draws the simulator needs.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  double normal(double sigma = 1.0) {
    if (sigma == 0.0) return 0.0;
    std::normal_distribution<double> d(0.0, sigma);
    return d(eng_);
  }

  Eigen::Vector2d normal2(double sigma) {
    const double a = normal(sigma);
    const double b = normal(sigma);
    return {a, b};
  }

  Eigen::Vector3d normal3(double sigma) {
    const double a = normal(sigma);
    const double b = normal(sigma);
    const double c = normal(sigma);
    return {a, b, c};
  }

  double uniform() {
    std::uniform_real_distribution<double> d(0.0, 1.0);
    return d(eng_);
  }

  bool bernoulli(double p) {
    if (p <= 0.0) return false;
    if (p >= 1.0) return true;
    return uniform() < p;
  }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    std::uniform_int_distribution<std::size_t> d(0, n - 1);
    return d(eng_);
  }

  std::mt19937_64& engine() { return eng_; }

private:
  std::mt19937_64 eng_;
};

}  // namespace costereo
