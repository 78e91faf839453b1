#pragma once

#include <aeqprop/core.hpp>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

namespace aeqprop::models {

/// Fourier features on [-1, 1] in the order 1, sin(pi z), cos(pi z),
/// sin(2 pi z), cos(2 pi z), ... up to frequency n_freq.
[[nodiscard]] inline Vec fourier_features(double z, Index n_freq) {
  if (!(std::abs(z) <= 1.0)) throw DomainError("fourier_features: z must lie in [-1, 1]");
  if (n_freq < 0) throw DomainError("fourier_features: negative frequency count");
  Vec phi(2 * n_freq + 1);
  phi[0] = 1.0;
  for (Index i = 1; i <= n_freq; ++i) {
    const double a = static_cast<double>(i) * std::numbers::pi * z;
    phi[2 * i - 1] = std::sin(a);
    phi[2 * i] = std::cos(a);
  }
  return phi;
}

/// L_0(z) .. L_degree(z) via (i+1) L_{i+1} = (2i+1) z L_i - i L_{i-1}.
[[nodiscard]] inline Vec legendre_eval(double z, Index degree) {
  if (degree < 0) throw DomainError("legendre_eval: negative degree");
  Vec L(degree + 1);
  L[0] = 1.0;
  if (degree >= 1) L[1] = z;
  for (Index i = 1; i < degree; ++i) {
    const double di = static_cast<double>(i);
    L[i + 1] = ((2.0 * di + 1.0) * z * L[i] - di * L[i - 1]) / (di + 1.0);
  }
  return L;
}

/// Random polynomial f(z) = sum_i w_i L_i(z) with standard normal weights.
struct LegendreTarget {
  Index degree = 10;
  Vec coeffs;
  std::uint64_t seed = 0;

  [[nodiscard]] double operator()(double z) const { return coeffs.dot(legendre_eval(z, degree)); }
};

[[nodiscard]] inline LegendreTarget sample_target(std::uint64_t seed, Index degree = 10) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  LegendreTarget f{degree, Vec(degree + 1), seed};
  for (Index i = 0; i <= degree; ++i) f.coeffs[i] = normal(rng);
  return f;
}

[[nodiscard]] inline double target_eval(const LegendreTarget& f, double z) {
  if (f.coeffs.size() != f.degree + 1) throw StructuralError("LegendreTarget: coefficient count != degree + 1");
  return f(z);
}

}  // namespace aeqprop::models
