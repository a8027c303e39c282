#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cpur/theory.hpp"

namespace cpur {
namespace {

std::vector<ProbDist> dists_of(std::initializer_list<std::vector<double>> rows) {
  std::vector<ProbDist> out;
  for (const auto& r : rows) out.push_back(ProbDist::from_raw(r));
  return out;
}

TEST(RankStats, TalliesRanksAndMeanLoss) {
  const auto d = dists_of({{0.6, 0.3, 0.1}, {0.6, 0.3, 0.1}, {0.2, 0.5, 0.3}, {0.1, 0.2, 0.7}});
  const std::vector<std::size_t> y{0, 1, 2, 0};
  const std::vector<double> loss{1.0, 2.0, 4.0, 8.0};
  const auto s = estimate_rank_stats(d, y, loss);
  EXPECT_EQ(s.counts, (std::vector<std::size_t>{1, 2, 1}));
  EXPECT_DOUBLE_EQ(s.p[0], 0.25);
  EXPECT_DOUBLE_EQ(s.p[1], 0.5);
  EXPECT_DOUBLE_EQ(s.lbar[0], 1.0);
  EXPECT_DOUBLE_EQ(s.lbar[1], 3.0);
  EXPECT_DOUBLE_EQ(s.lbar[2], 8.0);
  EXPECT_THROW(estimate_rank_stats(d, y, std::vector<double>{1.0}), Error);
}

TEST(RankStats, ProbabilitiesSumToOne) {
  Rng rng(1);
  std::vector<ProbDist> d;
  std::vector<std::size_t> y;
  std::vector<double> l;
  for (int i = 0; i < 500; ++i) {
    std::vector<double> v(7);
    for (double& x : v) x = uniform01(rng);
    d.push_back(ProbDist::from_raw(v));
    y.push_back(static_cast<std::size_t>(uniform01(rng) * 7));
    l.push_back(uniform01(rng));
  }
  const auto s = estimate_rank_stats(d, y, l);
  EXPECT_NEAR(kahan_sum(s.p), 1.0, 1e-12);
  std::size_t total = 0;
  for (auto c : s.counts) total += c;
  EXPECT_EQ(total, 500u);
}

TEST(EstimateH, BoundaryThresholds) {
  const auto d = dists_of({{0.6, 0.3, 0.1}, {0.2, 0.5, 0.3}, {0.1, 0.2, 0.7}});
  const std::vector<std::size_t> y{2, 0, 2};
  const auto h1 = estimate_H(d, y, 1.0);
  for (const auto& v : h1.values) {
    ASSERT_TRUE(v);
    EXPECT_DOUBLE_EQ(*v, 1.0);
  }
  EXPECT_EQ(h1.denominators, (std::vector<std::size_t>{3, 2, 2}));
  const auto h0 = estimate_H(d, y, 0.0);
  for (const auto& v : h0.values) EXPECT_DOUBLE_EQ(*v, 0.0);
  EXPECT_THROW(estimate_H(d, y, 1.5), Error);
}

TEST(EstimateH, MissingRanksAreAbsent) {
  const auto d = dists_of({{0.7, 0.2, 0.1}});
  const auto h = estimate_H(d, std::vector<std::size_t>{0}, 0.8);
  ASSERT_TRUE(h.values[0]);
  EXPECT_DOUBLE_EQ(*h.values[0], 1.0);
  EXPECT_FALSE(h.values[1]);
  EXPECT_FALSE(h.values[2]);
}

TEST(KStar, Examples) {
  using O = std::optional<double>;
  EXPECT_EQ(k_star(std::vector<O>{0.95, 0.92, 0.5}, 0.1), 2u);
  EXPECT_EQ(k_star(std::vector<O>{0.5, 0.4}, 0.1), 0u);
  EXPECT_EQ(k_star(std::vector<O>{0.95, std::nullopt, 0.91}, 0.1), 3u);
  EXPECT_EQ(k_star(std::vector<O>{0.9, 0.9}, 0.1), 2u);
}

TEST(Monotone, IgnoresThinRanks) {
  HEstimate h{{0.9, 0.95, 0.8}, {100, 10, 50}};
  EXPECT_TRUE(h_is_monotone(h));
  h.denominators[1] = 40;
  EXPECT_FALSE(h_is_monotone(h));
}

TEST(FitAssumption, LinearLossGivesUnitGamma) {
  const std::vector<double> p{0.5, 0.3, 0.2};
  const std::vector<double> lbar{1.0, 2.0, 3.0};
  const auto fit = fit_assumption_constants(p, lbar, 3, BetaParams{});
  EXPECT_DOUBLE_EQ(fit.gamma, 1.0);
  EXPECT_TRUE(fit.holds);
}

TEST(FitAssumption, XiIsTightAtTheMaximizer) {
  const BetaParams beta{1.1, 5.0, true};
  const std::vector<double> p{0.6, 0.3, 0.1};
  const std::vector<double> lbar{1.0, 1.0, 1.0};
  const auto fit = fit_assumption_constants(p, lbar, 3, beta);
  double best = 0.0;
  for (std::size_t k = 1; k <= 3; ++k) {
    best = std::max(best, p[k - 1] / std::pow(1.0 - k / 4.0, 4.0));
  }
  EXPECT_DOUBLE_EQ(fit.xi, best);
  EXPECT_DOUBLE_EQ(fit.gamma, 3.0);
  for (std::size_t k = 1; k <= 3; ++k) EXPECT_LE(p[k - 1], fit.xi * std::pow(1.0 - k / 4.0, 4.0) * (1 + 1e-15));
}

TEST(FitAssumption, Errors) {
  const std::vector<double> p{0.5, 0.5};
  EXPECT_THROW(fit_assumption_constants(p, std::vector<double>{1.0, 0.0}, 2, BetaParams{}), Error);
  EXPECT_THROW(fit_assumption_constants(p, std::vector<double>{1.0, 1.0}, 0, BetaParams{}), Error);
  EXPECT_THROW(fit_assumption_constants(p, std::vector<double>{1.0, 1.0}, 3, BetaParams{}), Error);
  // Zero loss at a rank without mass is skipped.
  EXPECT_NO_THROW(fit_assumption_constants(std::vector<double>{1.0, 0.0}, std::vector<double>{1.0, 0.0}, 2,
                                           BetaParams{}));
}

TEST(Sigma, LinearInGammaXiAndMatchesDensity) {
  const BetaParams beta{};
  const auto s1 = sigma_weights(10, 1.0, 1.0, beta);
  const auto s2 = sigma_weights(10, 2.0, 3.0, beta);
  BetaParams plain = beta;
  plain.shifted = false;
  for (std::size_t k = 1; k <= 10; ++k) {
    EXPECT_NEAR(s2[k - 1], 6.0 * s1[k - 1], 1e-14 * s2[k - 1]);
    EXPECT_DOUBLE_EQ(s1[k - 1], 0.6 * beta_pdf(k / 11.0, plain));
  }
}

TEST(CheckBound, OneHotPredictorIsVacuous) {
  std::vector<ProbDist> d;
  std::vector<std::size_t> y;
  std::vector<double> l;
  for (int i = 0; i < 50; ++i) {
    std::vector<double> v(4, 0.0);
    v[static_cast<std::size_t>(i % 4)] = 1.0;
    d.push_back(ProbDist::from_raw(v));
    y.push_back(static_cast<std::size_t>(i % 4));
    l.push_back(0.0);
  }
  const auto cal = calibrate(d, y, 0.1, 1);
  ASSERT_LT(cal.tau_hat, 1.0);
  const auto r = check_bound(d, y, l, cal, BetaParams{}, 2);
  EXPECT_DOUBLE_EQ(r.p_k[0], 1.0);
  // prefix_sum(1) = 1 > tau, so no rank reaches the H threshold.
  EXPECT_EQ(r.K_star, 0u);
  EXPECT_TRUE(r.assumptions_hold);
  EXPECT_DOUBLE_EQ(r.partial_rank_sum, 4 * 0.9);
  EXPECT_LE(r.expected_pss, 1.0);
  EXPECT_TRUE(r.set_size_holds);
}

TEST(CheckBound, ZeroLossBreaksAssumptions) {
  const auto d = dists_of({{0.5, 0.3, 0.2}, {0.3, 0.5, 0.2}, {0.2, 0.2, 0.6}});
  const std::vector<std::size_t> y{0, 0, 1};
  const std::vector<double> l{0.0, 0.0, 0.0};
  // One calibration sample forces tau_hat = 1, so K* = K.
  const auto cal = calibrate(std::span(d).first(1), std::span(y).first(1), 0.1, 1);
  ASSERT_EQ(cal.tau_hat, 1.0);
  const auto r = check_bound(d, y, l, cal, BetaParams{}, 2);
  EXPECT_EQ(r.K_star, 3u);
  EXPECT_FALSE(r.assumptions_hold);
  EXPECT_FALSE(r.bound_checked);
  EXPECT_TRUE(std::isinf(r.gamma));
  EXPECT_TRUE(std::isinf(r.L_beta));
}

TEST(CheckBound, GammaRatioIsTheBetaNormalizer) {
  const auto d = dists_of({{0.5, 0.3, 0.2}, {0.3, 0.5, 0.2}});
  const std::vector<std::size_t> y{0, 0};
  const std::vector<double> l{0.7, 1.2};
  const auto cal = calibrate(d, y, 0.1, 1);
  const auto r = check_bound(d, y, l, cal, BetaParams{}, 2);
  const double expect = std::exp(std::lgamma(6.1) - std::lgamma(1.1) - std::lgamma(5.0));
  EXPECT_NEAR(r.gamma_ratio, expect, 1e-12 * expect);
  EXPECT_NEAR(r.gamma_ratio, 6.239, 1e-3);
}

TEST(CheckBound, ToyPerRankInequality) {
  // Rank mass decays and loss grows with rank, so both assumptions hold.
  Rng rng(3);
  const std::size_t K = 10;
  std::vector<ProbDist> d;
  std::vector<std::size_t> y;
  std::vector<double> l;
  for (int i = 0; i < 4000; ++i) {
    std::vector<double> z(K);
    for (std::size_t k = 0; k < K; ++k) z[k] = -0.5 * static_cast<double>(k) + 0.3 * standard_normal(rng);
    auto p = softmax(z);
    const auto dist = ProbDist::from_raw(p);
    // Label sampled from the predictive distribution.
    double u = uniform01(rng), acc = 0.0;
    std::size_t lab = K - 1;
    for (std::size_t k = 0; k < K; ++k) {
      acc += dist[k];
      if (u <= acc) {
        lab = k;
        break;
      }
    }
    l.push_back(-std::log(dist[lab]));
    d.push_back(dist);
    y.push_back(lab);
  }
  const auto cal = calibrate(std::span(d).subspan(0, 1000), std::span(y).subspan(0, 1000), 0.1, 4);
  const auto r = check_bound(std::span(d).subspan(1000), std::span(y).subspan(1000), std::span(l).subspan(1000), cal,
                             BetaParams{}, 5);
  ASSERT_TRUE(r.assumptions_hold);
  EXPECT_GE(r.K_star, 1u);
  EXPECT_TRUE(r.set_size_holds);
  EXPECT_TRUE(r.per_rank_holds);
  double direct = 0.0;
  for (std::size_t k = 1; k <= r.K_star; ++k) direct += static_cast<double>(k) * r.p_k[k - 1];
  EXPECT_NEAR(r.partial_rank_sum, K * 0.9 + direct, 1e-12);
}

}  // namespace
}  // namespace cpur
