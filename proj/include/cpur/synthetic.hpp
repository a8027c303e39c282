#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "cpur/dataset.hpp"
#include "cpur/error.hpp"
#include "cpur/numeric.hpp"

namespace cpur {

/// Radius of the sphere the class means are placed on.
inline constexpr double kClassMeanRadius = 2.0;

/// Gaussian mixture: K class means drawn uniformly on a sphere of radius
/// kClassMeanRadius in R^d, then per_class samples of mean + spread * N(0, I)
/// per class. Rows are grouped by class.
inline LabeledSet gen_synthetic(std::size_t K, std::size_t d, std::size_t per_class, double spread,
                                std::uint64_t seed) {
  if (K < 2 || d < 2 || per_class < 1 || !(spread > 0.0) || !std::isfinite(spread)) {
    throw Error(Errc::ConfigError, "gen_synthetic needs K >= 2, d >= 2, per_class >= 1, spread > 0");
  }
  Rng rng(derive_seed(seed, 0x5EED));
  Matrix means(K, d);
  for (std::size_t k = 0; k < K; ++k) {
    double norm2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      means(k, j) = standard_normal(rng);
      norm2 += means(k, j) * means(k, j);
    }
    const double s = kClassMeanRadius / std::sqrt(norm2);
    for (std::size_t j = 0; j < d; ++j) means(k, j) *= s;
  }
  LabeledSet out;
  out.num_classes = K;
  out.features = Matrix(K * per_class, d);
  out.labels.reserve(K * per_class);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < per_class; ++i) {
      auto row = out.features.row(k * per_class + i);
      for (std::size_t j = 0; j < d; ++j) row[j] = means(k, j) + spread * standard_normal(rng);
      out.labels.push_back(k);
    }
  }
  return out;
}

}  // namespace cpur
