#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cpur/error.hpp"
#include "cpur/numeric.hpp"

namespace cpur {

/// A point on the probability simplex together with its descending sort order.
///
/// Ties in the sort are broken by lower class index first, so the order (and
/// everything derived from it: ranks, prediction sets) is deterministic.
class ProbDist {
 public:
  static constexpr double kSumTolerance = 1e-9;

  /// Normalizes `raw` onto the simplex. Throws EmptyVector (fewer than two
  /// entries), NonFinite (NaN, inf or negative entries) or AllZero.
  static ProbDist from_raw(std::span<const double> raw) {
    if (raw.size() < 2) throw Error(Errc::EmptyVector, "need at least 2 classes");
    for (double v : raw) {
      if (!std::isfinite(v)) throw Error(Errc::NonFinite, "non-finite probability entry");
      if (v < 0.0) throw Error(Errc::NonFinite, "negative probability entry");
    }
    const double total = kahan_sum(raw);
    if (!(total > 0.0)) throw Error(Errc::AllZero, "probabilities sum to zero");
    std::vector<double> p(raw.begin(), raw.end());
    for (double& v : p) v /= total;
    return ProbDist(std::move(p));
  }

  std::size_t num_classes() const noexcept { return probs_.size(); }
  std::span<const double> probs() const noexcept { return probs_; }
  double operator[](std::size_t cls) const { return probs_[cls]; }

  /// Class indices in descending probability order.
  std::span<const std::size_t> order() const noexcept { return order_; }

  /// Probability of the class at sorted position `pos` (0-based).
  double sorted(std::size_t pos) const { return probs_[order_[pos]]; }

  /// 0-based position of `cls` within order().
  std::size_t position_of(std::size_t cls) const { return position_[cls]; }

  /// Compensated sum of the `k` largest probabilities.
  double prefix_sum(std::size_t k) const {
    KahanSum s;
    for (std::size_t i = 0; i < k && i < order_.size(); ++i) s.add(probs_[order_[i]]);
    return s.value();
  }

 private:
  explicit ProbDist(std::vector<double> p) : probs_(std::move(p)), order_(probs_.size()), position_(probs_.size()) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::stable_sort(order_.begin(), order_.end(),
                     [this](std::size_t a, std::size_t b) { return probs_[a] > probs_[b]; });
    for (std::size_t i = 0; i < order_.size(); ++i) position_[order_[i]] = i;
  }

  std::vector<double> probs_;
  std::vector<std::size_t> order_;
  std::vector<std::size_t> position_;
};

inline ProbDist make_prob_dist(std::span<const double> raw) { return ProbDist::from_raw(raw); }

inline ProbDist make_prob_dist(std::initializer_list<double> raw) {
  return ProbDist::from_raw(std::span<const double>(raw.begin(), raw.size()));
}

/// Softmax of a logit row packaged as a ProbDist.
inline ProbDist dist_from_logits(std::span<const double> logits) {
  if (!all_finite(logits)) throw Error(Errc::NonFiniteLogits, "logit row contains non-finite values");
  const auto p = softmax(logits);
  return ProbDist::from_raw(p);
}

/// Shannon entropy in nats, with 0 ln 0 = 0.
inline double entropy(const ProbDist& d) noexcept {
  KahanSum s;
  for (double p : d.probs()) {
    if (p > 0.0) s.add(-p * std::log(p));
  }
  return std::max(0.0, s.value());
}

/// True-class probability rank. `rank` is 1-based; `normalized` = (rank-1)/K.
struct Tcpr {
  std::size_t rank = 1;
  double normalized = 0.0;
};

inline Tcpr tcpr(const ProbDist& d, std::size_t label) {
  if (label >= d.num_classes()) {
    throw Error(Errc::LabelOutOfRange,
                "label " + std::to_string(label) + " with K=" + std::to_string(d.num_classes()));
  }
  const std::size_t rank = d.position_of(label) + 1;
  return {rank, static_cast<double>(rank - 1) / static_cast<double>(d.num_classes())};
}

}  // namespace cpur
