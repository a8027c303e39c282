#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cpur/aps.hpp"
#include "cpur/error.hpp"
#include "cpur/numeric.hpp"
#include "cpur/simplex.hpp"

namespace cpur {

struct CalibrationResult {
  std::vector<double> scores;
  double alpha = 0.1;
  double tau_hat = 1.0;
  std::uint64_t rng_seed = 0;
};

struct CpMetrics {
  double coverage = 0.0;
  double pss = 0.0;
  double npss = 0.0;
};

struct CpCurvePoint {
  double scale = 0.0;
  double coverage = 0.0;
  double pss = 0.0;
};

struct CpCurve {
  std::vector<CpCurvePoint> points;
};

/// Index (1-based) of the calibration order statistic used as threshold:
/// ceil((1 - alpha)(n + 1)). May exceed n.
inline std::size_t conformal_rank(std::size_t n, double alpha) {
  // The 1e-9 slack keeps products like 0.9 * 10 from rounding up to 10.
  const double x = (1.0 - alpha) * static_cast<double>(n + 1);
  return static_cast<std::size_t>(std::ceil(x - 1e-9));
}

/// k-th smallest score with k = ceil((1 - alpha)(n + 1)), or 1.0 when k > n.
inline double conformal_threshold(std::span<const double> scores, double alpha) {
  if (scores.empty()) throw Error(Errc::EmptyVector, "no calibration scores");
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error(Errc::AlphaOutOfRange, "alpha=" + std::to_string(alpha));
  const std::size_t k = conformal_rank(scores.size(), alpha);
  if (k > scores.size()) return 1.0;
  std::vector<double> sorted(scores.begin(), scores.end());
  const std::size_t idx = k == 0 ? 0 : k - 1;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(idx), sorted.end());
  return sorted[idx];
}

/// Draws n uniforms in index order from a stream seeded with `seed`.
inline std::vector<double> draw_uniforms(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> u(n);
  for (double& v : u) v = uniform01(rng);
  return u;
}

inline CalibrationResult calibrate(std::span<const ProbDist> dists, std::span<const std::size_t> labels, double alpha,
                                   std::uint64_t seed) {
  if (dists.size() != labels.size()) throw Error(Errc::LengthMismatch, "dists vs labels");
  if (dists.empty()) throw Error(Errc::EmptyVector, "empty calibration set");
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error(Errc::AlphaOutOfRange, "alpha=" + std::to_string(alpha));
  const auto u = draw_uniforms(dists.size(), seed);
  CalibrationResult cal;
  cal.alpha = alpha;
  cal.rng_seed = seed;
  cal.scores.reserve(dists.size());
  for (std::size_t i = 0; i < dists.size(); ++i) cal.scores.push_back(conformity_score(dists[i], labels[i], u[i]));
  cal.tau_hat = conformal_threshold(cal.scores, alpha);
  return cal;
}

inline std::vector<ApsSet> predict_sets_with_u(std::span<const ProbDist> dists, double tau, std::span<const double> u) {
  std::vector<ApsSet> sets;
  sets.reserve(dists.size());
  for (std::size_t i = 0; i < dists.size(); ++i) sets.push_back(prediction_set(dists[i], u[i], tau));
  return sets;
}

/// Sets at tau_hat with a fresh uniform per sample from `seed`.
inline std::vector<ApsSet> predict_sets(std::span<const ProbDist> dists, const CalibrationResult& cal,
                                        std::uint64_t seed) {
  const auto u = draw_uniforms(dists.size(), seed);
  return predict_sets_with_u(dists, cal.tau_hat, u);
}

inline CpMetrics evaluate(std::span<const ApsSet> sets, std::span<const std::size_t> labels, std::size_t num_classes) {
  if (sets.size() != labels.size()) throw Error(Errc::LengthMismatch, "sets vs labels");
  if (sets.empty()) return {};
  double covered = 0.0;
  double size = 0.0;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    covered += sets[i].contains(labels[i]) ? 1.0 : 0.0;
    size += static_cast<double>(sets[i].size());
  }
  CpMetrics m;
  const auto n = static_cast<double>(sets.size());
  m.coverage = covered / n;
  m.pss = size / n;
  m.npss = m.pss / static_cast<double>(num_classes);
  return m;
}

/// Coverage/PSS over thresholds s * tau_hat for s on an even grid in [lo, hi].
/// Each sample's u is drawn once and reused across the grid, which makes the
/// curve monotone in s.
inline CpCurve cp_curve(std::span<const ProbDist> dists, std::span<const std::size_t> labels,
                        const CalibrationResult& cal, std::uint64_t seed, double lo = 0.9, double hi = 1.1,
                        std::size_t n = 200) {
  if (n < 2 || !(lo < hi) || !std::isfinite(lo) || !std::isfinite(hi)) {
    throw Error(Errc::BadGrid, "need n >= 2 and finite lo < hi");
  }
  if (dists.size() != labels.size()) throw Error(Errc::LengthMismatch, "dists vs labels");
  const auto u = draw_uniforms(dists.size(), seed);
  const std::size_t K = dists.empty() ? 0 : dists.front().num_classes();
  CpCurve curve;
  curve.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double s = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    const double tau = std::clamp(s * cal.tau_hat, 0.0, 1.0);
    const auto sets = predict_sets_with_u(dists, tau, u);
    const auto m = evaluate(sets, labels, K);
    curve.points.push_back({s, m.coverage, m.pss});
  }
  return curve;
}

}  // namespace cpur
