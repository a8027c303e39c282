#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cpur/aps.hpp"
#include "oracles.hpp"

namespace cpur {
namespace {

const ProbDist& sample() {
  static const ProbDist d = make_prob_dist({0.5, 0.3, 0.2});
  return d;
}

std::vector<std::size_t> members(const ApsSet& s) { return s.members; }

TEST(GenQuantile, Examples) {
  EXPECT_EQ(gen_quantile(sample(), 0.7), 2u);
  EXPECT_EQ(gen_quantile(sample(), 0.5), 1u);
  EXPECT_EQ(gen_quantile(sample(), 0.0), 1u);
  EXPECT_EQ(gen_quantile(sample(), 1.0), 3u);
  EXPECT_THROW(gen_quantile(sample(), 1.5), Error);
  EXPECT_THROW(gen_quantile(sample(), -0.1), Error);
  EXPECT_THROW(gen_quantile(sample(), NAN), Error);
}

TEST(RandomizationTerm, Examples) {
  EXPECT_NEAR(randomization_term(sample(), 0.7), 1.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(randomization_term(sample(), 0.5), 0.0);
  EXPECT_NEAR(randomization_term(make_prob_dist({0.6, 0.4}), 0.9), 0.25, 1e-15);
}

TEST(PredictionSet, Examples) {
  EXPECT_EQ(members(prediction_set(sample(), 0.2, 0.7)), (std::vector<std::size_t>{0}));
  EXPECT_EQ(members(prediction_set(sample(), 0.5, 0.7)), (std::vector<std::size_t>{0, 1}));
  // u = V = 0 takes the drop branch: the set is empty.
  EXPECT_TRUE(prediction_set(sample(), 0.0, 0.5).members.empty());
}

TEST(ConformityScore, Examples) {
  EXPECT_DOUBLE_EQ(conformity_score(sample(), 0, 0.0), 0.5);
  EXPECT_NEAR(conformity_score(sample(), 1, 1.0), 0.5, 1e-15);
  EXPECT_NEAR(conformity_score(sample(), 2, 0.5), 0.9, 1e-15);
  EXPECT_THROW(conformity_score(sample(), 5, 0.5), Error);
}

TEST(ApsProperties, DualityMonotonicityAndUEqualsOne) {
  Rng rng(7);
  std::size_t violations = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t K = 2 + static_cast<std::size_t>(uniform01(rng) * 12);
    std::vector<double> raw(K);
    for (double& v : raw) v = -std::log(1.0 - uniform01(rng));
    const auto d = make_prob_dist(raw);
    const auto y = static_cast<std::size_t>(uniform01(rng) * K);
    const double u = uniform01(rng);
    const double e = conformity_score(d, y, u);
    ASSERT_GE(e, 0.0);
    ASSERT_LE(e, 1.0);
    if (e + 1e-9 <= 1.0 && !prediction_set(d, u, e + 1e-9).contains(y)) ++violations;
    if (e - 1e-9 >= 0.0 && prediction_set(d, u, e - 1e-9).contains(y)) ++violations;
    const double tau = uniform01(rng);
    if (tau > e && !prediction_set(d, u, tau).contains(y)) ++violations;
    if (tau < e && prediction_set(d, u, tau).contains(y)) ++violations;

    // Sets grow with tau and are prefixes of the sort order.
    std::size_t prev = 0;
    for (int s = 0; s <= 20; ++s) {
      const auto set = prediction_set(d, u, s / 20.0);
      ASSERT_GE(set.size(), prev);
      prev = set.size();
      for (std::size_t i = 0; i < set.size(); ++i) ASSERT_EQ(set.members[i], d.order()[i]);
    }

    // u = 1 keeps all Q classes; score equals prefix_sum(r - 1).
    EXPECT_EQ(prediction_set(d, 1.0, tau).size(), gen_quantile(d, tau));
    const auto r = tcpr(d, y).rank;
    EXPECT_NEAR(conformity_score(d, y, 1.0), d.prefix_sum(r - 1), 1e-12);
  }
  EXPECT_EQ(violations, 0u);
}

TEST(FitTemperature, ConfidentSampleGoesToLowerBound) {
  Matrix logits(1, 2);
  logits(0, 0) = 10.0;
  const std::vector<std::size_t> labels{0};
  // The NLL is decreasing in confidence: a 1-D scan puts the minimum at the left edge.
  double best_t = 0.0, best = 1e300;
  for (int i = 0; i <= 2000; ++i) {
    const double t = std::exp(kTempLogLo + (kTempLogHi - kTempLogLo) * i / 2000.0);
    const double v = temperature_nll(logits, labels, t);
    if (v < best) best = v, best_t = t;
  }
  EXPECT_NEAR(best_t, 0.05, 1e-12);
  EXPECT_NEAR(fit_temperature(logits, labels).value(), 0.05, 0.05 * 2e-4);
}

TEST(FitTemperature, FlatObjectiveReturnsOne) {
  Matrix logits(1, 2);
  EXPECT_DOUBLE_EQ(fit_temperature(logits, std::vector<std::size_t>{1}).value(), 1.0);
}

TEST(FitTemperature, MatchesDenseGridSearch) {
  Rng rng(3);
  Matrix logits(100, 5);
  std::vector<std::size_t> labels(100);
  for (std::size_t i = 0; i < 100; ++i) {
    for (std::size_t k = 0; k < 5; ++k) logits(i, k) = 3.0 * standard_normal(rng);
    // Labels drawn from softmax(logits / 2) put the optimum in the interior.
    std::vector<double> z(logits.row(i).begin(), logits.row(i).end());
    for (double& v : z) v /= 2.0;
    const auto p = oracle::naive_softmax(z);
    double u = uniform01(rng), acc = 0.0;
    labels[i] = 4;
    for (std::size_t k = 0; k < 5; ++k) {
      acc += p[k];
      if (u < acc) {
        labels[i] = k;
        break;
      }
    }
  }
  double best_s = 0.0, best = 1e300;
  for (int i = 0; i < 10000; ++i) {
    const double s = kTempLogLo + (kTempLogHi - kTempLogLo) * i / 9999.0;
    const double v = temperature_nll(logits, labels, std::exp(s));
    if (v < best) best = v, best_s = s;
  }
  const double fitted = fit_temperature(logits, labels).value();
  EXPECT_NEAR(fitted, std::exp(best_s), 1e-3);
}

TEST(FitTemperature, Errors) {
  Matrix logits(1, 2);
  logits(0, 0) = INFINITY;
  EXPECT_THROW(fit_temperature(logits, std::vector<std::size_t>{0}), Error);
  EXPECT_THROW(fit_temperature(Matrix(0, 2), std::vector<std::size_t>{}), Error);
  EXPECT_THROW(Temperature(0.0), Error);
}

}  // namespace
}  // namespace cpur
