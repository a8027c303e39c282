#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cpur/aps.hpp"
#include "cpur/conformal.hpp"
#include "cpur/error.hpp"
#include "cpur/simplex.hpp"
#include "cpur/weighting.hpp"

namespace cpur {

/// Empirical distribution of the true-class rank and the mean loss per rank.
/// Index k-1 holds rank k. Ranks without samples have lbar = 0 and count = 0.
struct RankStats {
  std::vector<double> p;
  std::vector<double> lbar;
  std::vector<std::size_t> counts;
};

inline RankStats estimate_rank_stats(std::span<const ProbDist> dists, std::span<const std::size_t> labels,
                                     std::span<const double> losses) {
  if (dists.size() != labels.size() || dists.size() != losses.size()) {
    throw Error(Errc::LengthMismatch, "dists, labels and losses must align");
  }
  if (dists.empty()) throw Error(Errc::EmptyVector, "no samples");
  const std::size_t K = dists.front().num_classes();
  RankStats s{std::vector<double>(K, 0.0), std::vector<double>(K, 0.0), std::vector<std::size_t>(K, 0)};
  std::vector<KahanSum> loss_sum(K);
  for (std::size_t i = 0; i < dists.size(); ++i) {
    const auto r = tcpr(dists[i], labels[i]).rank;
    ++s.counts[r - 1];
    loss_sum[r - 1].add(losses[i]);
  }
  const auto n = static_cast<double>(dists.size());
  for (std::size_t k = 0; k < K; ++k) {
    s.p[k] = static_cast<double>(s.counts[k]) / n;
    if (s.counts[k] > 0) s.lbar[k] = loss_sum[k].value() / static_cast<double>(s.counts[k]);
  }
  return s;
}

/// H(k) = P[prefix_sum(k) <= tau | rank >= k]; entries with an empty
/// conditioning set are absent. `denominators[k-1]` = #samples with rank >= k.
struct HEstimate {
  std::vector<std::optional<double>> values;
  std::vector<std::size_t> denominators;
};

inline HEstimate estimate_H(std::span<const ProbDist> dists, std::span<const std::size_t> labels, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw Error(Errc::TauOutOfRange, "tau=" + std::to_string(tau));
  if (dists.size() != labels.size()) throw Error(Errc::LengthMismatch, "dists vs labels");
  if (dists.empty()) throw Error(Errc::EmptyVector, "no samples");
  const std::size_t K = dists.front().num_classes();
  std::vector<std::size_t> num(K, 0), den(K, 0);
  for (std::size_t i = 0; i < dists.size(); ++i) {
    const auto r = tcpr(dists[i], labels[i]).rank;
    KahanSum prefix;
    for (std::size_t k = 1; k <= r; ++k) {
      prefix.add(dists[i].sorted(k - 1));
      ++den[k - 1];
      if (prefix.value() <= tau) ++num[k - 1];
    }
  }
  HEstimate h{std::vector<std::optional<double>>(K), den};
  for (std::size_t k = 0; k < K; ++k) {
    if (den[k] > 0) h.values[k] = static_cast<double>(num[k]) / static_cast<double>(den[k]);
  }
  return h;
}

/// Largest defined k (1-based) with H(k) >= 1 - alpha; 0 when there is none.
inline std::size_t k_star(std::span<const std::optional<double>> H, double alpha) {
  std::size_t best = 0;
  for (std::size_t k = 0; k < H.size(); ++k) {
    if (H[k] && *H[k] >= 1.0 - alpha) best = k + 1;
  }
  return best;
}

/// Weak monotone decrease of H over ranks whose conditioning set has at least
/// `min_count` samples.
inline bool h_is_monotone(const HEstimate& h, std::size_t min_count = 30) {
  std::optional<double> prev;
  for (std::size_t k = 0; k < h.values.size(); ++k) {
    if (!h.values[k] || h.denominators[k] < min_count) continue;
    if (prev && *h.values[k] > *prev) return false;
    prev = h.values[k];
  }
  return true;
}

struct AssumptionFit {
  double gamma = 0.0;
  double xi = 0.0;
  bool holds = false;
};

/// Tightest constants with lbar_k >= k / gamma and
/// p_k <= xi (1 - k/(K+1))^(b-1) for every k <= K*. Ranks with no mass are skipped.
inline AssumptionFit fit_assumption_constants(std::span<const double> p, std::span<const double> lbar,
                                              std::size_t K_star, const BetaParams& beta) {
  if (p.size() != lbar.size()) throw Error(Errc::LengthMismatch, "p vs lbar");
  if (K_star < 1 || K_star > p.size()) throw Error(Errc::ConfigError, "K* must lie in [1, K]");
  const auto K = static_cast<double>(p.size());
  AssumptionFit fit;
  for (std::size_t k = 1; k <= K_star; ++k) {
    const double pk = p[k - 1];
    if (pk <= 0.0) continue;
    if (lbar[k - 1] <= 0.0) throw Error(Errc::ZeroLoss, "zero mean loss at rank " + std::to_string(k));
    fit.gamma = std::max(fit.gamma, static_cast<double>(k) / lbar[k - 1]);
    const double envelope = std::pow(1.0 - static_cast<double>(k) / (K + 1.0), beta.b - 1.0);
    fit.xi = std::max(fit.xi, pk / envelope);
  }
  fit.holds = std::isfinite(fit.gamma) && std::isfinite(fit.xi);
  return fit;
}

/// sigma_k = 3/5 * gamma * xi * p_Beta(k/(K+1); a, b), unshifted density.
inline std::vector<double> sigma_weights(std::size_t K, double gamma, double xi, const BetaParams& beta) {
  BetaParams plain = beta;
  plain.shifted = false;
  std::vector<double> s(K);
  for (std::size_t k = 1; k <= K; ++k) {
    s[k - 1] = 0.6 * gamma * xi * beta_pdf(static_cast<double>(k) / static_cast<double>(K + 1), plain);
  }
  return s;
}

/// Every estimated quantity of the expected-set-size bound and its checks.
struct BoundReport {
  std::size_t K = 0;
  double alpha = 0.0;
  double tau = 0.0;
  std::size_t n = 0;
  std::size_t n_cal = 0;
  std::vector<double> p_k;
  std::vector<double> lbar_k;
  std::vector<std::optional<double>> H_k;
  std::vector<std::size_t> H_denominators;
  std::size_t K_star = 0;
  double gamma = 0.0;
  double xi = 0.0;
  std::vector<double> sigma_k;
  double L_beta = 0.0;
  double partial_rank_sum = 0.0;  ///< K(1 - alpha) + sum_{k <= K*} k p_k
  double partial_rank_sum_no_const = 0.0;
  double expected_pss = 0.0;
  bool monotone_H = false;
  bool assumptions_hold = false;
  bool set_size_holds = false;  ///< expected_pss <= partial_rank_sum
  bool per_rank_holds = false;  ///< k p_k / lbar_k <= sigma_k for all k <= K* with mass
  bool bound_checked = false;
  bool bound_holds = false;
  double gamma_ratio = 0.0;
  double a = 0.0;
  double b = 0.0;
};

/// Elementwise k p_k / lbar_k <= sigma_k over k <= K* with p_k > 0.
inline bool per_rank_inequality_holds(const BoundReport& r) {
  for (std::size_t k = 1; k <= r.K_star; ++k) {
    if (r.p_k[k - 1] <= 0.0 || r.lbar_k[k - 1] <= 0.0) continue;
    if (static_cast<double>(k) * r.p_k[k - 1] / r.lbar_k[k - 1] > r.sigma_k[k - 1]) return false;
  }
  return true;
}

/// Estimates the bound chain at tau = cal.tau_hat. `losses` are per-sample CE
/// values aligned with `dists`; `seed` drives the set randomization.
inline BoundReport check_bound(std::span<const ProbDist> dists, std::span<const std::size_t> labels,
                               std::span<const double> losses, const CalibrationResult& cal, const BetaParams& beta,
                               std::uint64_t seed) {
  beta.validate();
  BoundReport r;
  const auto stats = estimate_rank_stats(dists, labels, losses);
  r.K = stats.p.size();
  r.alpha = cal.alpha;
  r.tau = std::clamp(cal.tau_hat, 0.0, 1.0);
  r.n = dists.size();
  r.n_cal = cal.scores.size();
  r.a = beta.a;
  r.b = beta.b;
  r.p_k = stats.p;
  r.lbar_k = stats.lbar;
  const auto h = estimate_H(dists, labels, r.tau);
  r.H_k = h.values;
  r.H_denominators = h.denominators;
  r.K_star = k_star(h.values, r.alpha);
  r.monotone_H = h_is_monotone(h);

  if (r.K_star == 0) {
    r.assumptions_hold = true;
  } else {
    try {
      const auto fit = fit_assumption_constants(r.p_k, r.lbar_k, r.K_star, beta);
      r.gamma = fit.gamma;
      r.xi = fit.xi;
      r.assumptions_hold = fit.holds;
    } catch (const Error& e) {
      if (e.code() != Errc::ZeroLoss) throw;
      r.gamma = std::numeric_limits<double>::infinity();
      r.assumptions_hold = false;
    }
  }
  if (r.assumptions_hold) {
    r.sigma_k = sigma_weights(r.K, r.gamma, r.xi, beta);
    KahanSum lb;
    for (std::size_t k = 0; k < r.K; ++k) lb.add(r.sigma_k[k] * r.lbar_k[k]);
    r.L_beta = lb.value();
  } else {
    r.sigma_k.assign(r.K, std::numeric_limits<double>::infinity());
    r.L_beta = std::numeric_limits<double>::infinity();
  }

  KahanSum partial;
  for (std::size_t k = 1; k <= r.K_star; ++k) partial.add(static_cast<double>(k) * r.p_k[k - 1]);
  r.partial_rank_sum_no_const = partial.value();
  r.partial_rank_sum = static_cast<double>(r.K) * (1.0 - r.alpha) + r.partial_rank_sum_no_const;

  const auto sets = predict_sets(dists, cal, seed);
  double total = 0.0;
  for (const auto& s : sets) total += static_cast<double>(s.size());
  r.expected_pss = total / static_cast<double>(sets.size());

  r.set_size_holds = r.expected_pss <= r.partial_rank_sum;
  r.per_rank_holds = r.assumptions_hold && per_rank_inequality_holds(r);
  r.bound_checked = r.assumptions_hold && r.monotone_H;
  if (r.bound_checked) r.bound_holds = r.set_size_holds && r.partial_rank_sum_no_const <= r.L_beta;
  r.gamma_ratio = beta_normalizer(beta.a, beta.b);
  return r;
}

}  // namespace cpur
