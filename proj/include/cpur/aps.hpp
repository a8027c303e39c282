#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cpur/error.hpp"
#include "cpur/numeric.hpp"
#include "cpur/simplex.hpp"

namespace cpur {

/// Randomized APS prediction set. `members` is always a prefix of the source
/// distribution's descending order (possibly empty).
struct ApsSet {
  std::vector<std::size_t> members;
  double tau = 0.0;
  double u = 0.0;

  std::size_t size() const noexcept { return members.size(); }
  bool contains(std::size_t cls) const noexcept {
    for (std::size_t m : members) {
      if (m == cls) return true;
    }
    return false;
  }
};

class Temperature {
 public:
  explicit Temperature(double t = 1.0) : t_(t) {
    if (!std::isfinite(t) || t <= 0.0) throw Error(Errc::DomainError, "temperature must be positive and finite");
  }
  double value() const noexcept { return t_; }

 private:
  double t_;
};

namespace detail {
inline void check_tau(double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw Error(Errc::TauOutOfRange, "tau=" + std::to_string(tau));
}
}  // namespace detail

/// Smallest k in [1, K] whose sorted prefix sum reaches `tau`. Falls back to K
/// when rounding leaves the total just short of tau = 1.
inline std::size_t gen_quantile(const ProbDist& d, double tau) {
  detail::check_tau(tau);
  KahanSum run;
  const std::size_t K = d.num_classes();
  for (std::size_t k = 1; k <= K; ++k) {
    run.add(d.sorted(k - 1));
    if (run.value() >= tau) return k;
  }
  return K;
}

/// V(tau) = (prefix_sum(Q) - tau) / pi_(Q).
inline double randomization_term(const ProbDist& d, double tau) {
  const std::size_t q = gen_quantile(d, tau);
  const double top = d.sorted(q - 1);
  if (top <= 0.0) throw Error(Errc::DegenerateTopProb, "pi_(Q) is zero");
  return (d.prefix_sum(q) - tau) / top;
}

/// Top Q-1 classes when u <= V, otherwise top Q.
inline ApsSet prediction_set(const ProbDist& d, double u, double tau) {
  const std::size_t q = gen_quantile(d, tau);
  const double top = d.sorted(q - 1);
  std::size_t keep = q;
  // A zero pi_(Q) only happens on the rounding fallback for tau ~ 1; keep all Q.
  if (top > 0.0) {
    const double v = (d.prefix_sum(q) - tau) / top;
    if (u <= v) keep = q - 1;
  }
  ApsSet s;
  s.tau = tau;
  s.u = u;
  s.members.assign(d.order().begin(), d.order().begin() + static_cast<std::ptrdiff_t>(keep));
  return s;
}

/// Smallest threshold at which `label` enters the set, in closed form:
/// prefix_sum(r) - u * pi_(r) with r the label's rank. The defining minimum is
/// not attained (the u <= V branch drops the boundary), so this is the infimum.
inline double conformity_score(const ProbDist& d, std::size_t label, double u) {
  const auto r = tcpr(d, label).rank;
  const double e = d.prefix_sum(r) - u * d.sorted(r - 1);
  return std::clamp(e, 0.0, 1.0);
}

// Temperature scaling.

inline double temperature_nll(const Matrix& logits, std::span<const std::size_t> labels, double t) {
  KahanSum s;
  std::vector<double> scaled(logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto row = logits.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) scaled[j] = row[j] / t;
    s.add(log_sum_exp(scaled) - scaled[labels[i]]);
  }
  return s.value() / static_cast<double>(logits.rows());
}

inline constexpr double kTempLogLo = -2.995732273553991;  // ln 0.05
inline constexpr double kTempLogHi = 2.995732273553991;   // ln 20
inline constexpr double kTempLogTol = 1e-4;

/// Fits t minimizing the mean NLL of softmax(logits / t) by golden-section
/// search on log t over [ln 0.05, ln 20]. Returns exactly 1 whenever t = 1 is
/// at least as good as the search result (flat objectives included).
inline Temperature fit_temperature(const Matrix& logits, std::span<const std::size_t> labels) {
  if (logits.rows() == 0) throw Error(Errc::EmptyVector, "no logits to fit temperature on");
  if (labels.size() != logits.rows()) throw Error(Errc::LengthMismatch, "labels vs logits rows");
  if (!all_finite(logits.data())) throw Error(Errc::NonFiniteLogits, "logits contain non-finite values");
  for (std::size_t y : labels) {
    if (y >= logits.cols()) throw Error(Errc::LabelOutOfRange, "label " + std::to_string(y));
  }

  auto f = [&](double log_t) { return temperature_nll(logits, labels, std::exp(log_t)); };
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = kTempLogLo, b = kTempLogHi;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = f(c), fd = f(d);
  while (b - a > kTempLogTol) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f(d);
    }
  }
  const double best = 0.5 * (a + b);
  if (f(0.0) <= f(best)) return Temperature(1.0);
  return Temperature(std::exp(best));
}

/// Softmax(logits / t) row by row.
inline std::vector<ProbDist> apply_temperature(const Matrix& logits, Temperature t) {
  std::vector<ProbDist> out;
  out.reserve(logits.rows());
  std::vector<double> scaled(logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto row = logits.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) scaled[j] = row[j] / t.value();
    out.push_back(dist_from_logits(scaled));
  }
  return out;
}

}  // namespace cpur
