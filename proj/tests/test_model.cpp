#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "cpur/model.hpp"
#include "cpur/synthetic.hpp"
#include "oracles.hpp"

namespace cpur {
namespace {

Classifier random_model(Arch arch, std::size_t d, std::size_t K, Rng& rng) {
  return Classifier::random(arch, d, K, arch == Arch::Mlp ? 5 : 0, rng());
}

std::vector<double> random_vec(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = standard_normal(rng);
  return v;
}

double ce_at(const Classifier& c, std::span<const double> x, std::size_t y) {
  const auto z = c.logits(x);
  return log_sum_exp(z) - z[y];
}

/// Two well separated blobs in 2-D.
LabeledSet blobs(std::size_t per_class, std::uint64_t seed) {
  Rng rng(seed);
  LabeledSet s;
  s.num_classes = 2;
  s.features = Matrix(2 * per_class, 2);
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    const std::size_t y = i % 2;
    const double cx = y == 0 ? -3.0 : 3.0;
    s.features(i, 0) = cx + 0.5 * standard_normal(rng);
    s.features(i, 1) = 0.5 * standard_normal(rng);
    s.labels.push_back(y);
  }
  return s;
}

TEST(Forward, ZeroLinearIsUniform) {
  const Classifier c(Arch::Linear, 3, 4);
  const auto r = forward(c, std::vector<double>{1.0, -2.0, 0.5});
  for (double z : r.logits) EXPECT_DOUBLE_EQ(z, 0.0);
  for (double p : r.dist.probs()) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(Forward, IdentityRowsPickMatchingClass) {
  Classifier c(Arch::Linear, 3, 3);
  for (std::size_t k = 0; k < 3; ++k) c.params()[k * 3 + k] = 1.0;
  const auto r = forward(c, std::vector<double>{0.0, 1.0, 0.0});
  EXPECT_EQ(r.dist.order()[0], 1u);
  EXPECT_DOUBLE_EQ(r.logits[1], 1.0);
}

TEST(Forward, Errors) {
  EXPECT_THROW(Classifier(Arch::Mlp, 3, 3, 0), Error);
  const Classifier c(Arch::Linear, 3, 3);
  EXPECT_THROW(forward(c, std::vector<double>{1.0, 2.0}), Error);
  EXPECT_THROW(forward(c, std::vector<double>{1.0, NAN, 0.0}), Error);
  EXPECT_THROW(Classifier(Arch::Linear, 3, 3, 0, std::vector<double>(5)), Error);
}

TEST(GradWrtInput, LinearCeClosedForm) {
  Rng rng(1);
  const auto c = random_model(Arch::Linear, 4, 3, rng);
  const auto x = random_vec(rng, 4);
  const auto p = softmax(c.logits(x));
  std::vector<double> expect(4, 0.0);
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t j = 0; j < 4; ++j) expect[j] += c.params()[k * 4 + j] * (p[k] - (k == 1 ? 1.0 : 0.0));
  }
  const auto g = grad_wrt_input(c, x, AttackObjective::Top1Loss, 1);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(g[j], expect[j], 1e-14);
  EXPECT_THROW(grad_wrt_input(c, x, AttackObjective::Top1Loss), Error);
}

TEST(GradWrtInput, EntropyVanishesAtUniformOutput) {
  // W rows sum-symmetric and zero bias: x = 0 gives equal logits.
  Classifier c(Arch::Linear, 2, 3);
  const std::vector<double> W{1, 0, -0.5, 0.8, -0.5, -0.8};
  std::copy(W.begin(), W.end(), c.params().begin());
  const std::vector<double> x{0.0, 0.0};
  const auto g = grad_wrt_input(c, x, AttackObjective::Entropy);
  const auto fd = oracle::central_diff(
      [&](const std::vector<double>& v) { return objective_value(c.logits(v), AttackObjective::Entropy, {}); }, x);
  for (std::size_t j = 0; j < 2; ++j) {
    EXPECT_NEAR(g[j], 0.0, 1e-15);
    EXPECT_NEAR(fd[j], 0.0, 1e-9);
  }
}

TEST(GradWrtInput, MatchesFiniteDifferences) {
  Rng rng(2);
  double worst = 0.0;
  for (auto arch : {Arch::Linear, Arch::Mlp}) {
    for (auto obj : {AttackObjective::Top1Loss, AttackObjective::Entropy}) {
      for (int t = 0; t < 50; ++t) {
        const std::size_t d = 2 + static_cast<std::size_t>(uniform01(rng) * 5);
        const std::size_t K = 2 + static_cast<std::size_t>(uniform01(rng) * 9);
        const auto c = random_model(arch, d, K, rng);
        const auto x = random_vec(rng, d);
        const std::size_t y = static_cast<std::size_t>(uniform01(rng) * K);
        const auto g = grad_wrt_input(c, x, obj, y);
        const auto fd = oracle::central_diff(
            [&](const std::vector<double>& v) { return objective_value(c.logits(v), obj, y); }, x);
        worst = std::max(worst, oracle::max_rel_err(g, fd));
      }
    }
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(ParamGrad, MatchesFiniteDifferencesForAllLosses) {
  Rng rng(3);
  for (auto arch : {Arch::Linear, Arch::Mlp}) {
    for (auto kind : {LossKind::CE, LossKind::BetaCE, LossKind::EmCE, LossKind::BetaEmCE, LossKind::FatCE,
                      LossKind::TradesKL, LossKind::BetaTradesKL}) {
      double worst = 0.0;
      for (int t = 0; t < 20; ++t) {
        const std::size_t B = 1 + static_cast<std::size_t>(uniform01(rng) * 8);
        const std::size_t d = 2 + static_cast<std::size_t>(uniform01(rng) * 5);
        const std::size_t K = 2 + static_cast<std::size_t>(uniform01(rng) * 9);
        auto c = random_model(arch, d, K, rng);
        LossSpec spec;
        spec.kind = kind;
        spec.beta = BetaParams{};
        if (kind == LossKind::FatCE) spec.class_weights = fat_class_weights(random_vec(rng, K));
        Matrix X(B, d), Xc(B, d);
        for (double& v : X.data()) v = standard_normal(rng);
        for (double& v : Xc.data()) v = standard_normal(rng);
        std::vector<std::size_t> y(B);
        for (auto& v : y) v = static_cast<std::size_t>(uniform01(rng) * K);
        const Matrix* clean = uses_trades(kind) ? &Xc : nullptr;
        const auto [loss, g] = loss_param_grad(c, spec, X, y, clean);
        // Hold the rank source fixed at the unperturbed adversarial logits.
        const Matrix rank_src = c.logits(X);
        const std::vector<double> theta(c.params().begin(), c.params().end());
        const auto fd = oracle::central_diff(
            [&](const std::vector<double>& th) {
              Classifier m(arch, d, K, c.hidden(), th);
              const auto z = m.logits(X);
              std::optional<Matrix> zc;
              if (clean) zc = m.logits(*clean);
              return loss_and_grad(spec, z, y, &rank_src, zc ? &*zc : nullptr).loss;
            },
            theta);
        worst = std::max(worst, oracle::max_rel_err(g, fd));
      }
      EXPECT_LT(worst, 1e-4) << (arch == Arch::Linear ? "linear " : "mlp ") << loss_kind_name(kind);
    }
  }
}

TEST(Attack, ZeroBudgetIsIdentity) {
  Rng rng(4);
  const auto c = random_model(Arch::Linear, 5, 3, rng);
  const auto x = random_vec(rng, 5);
  AttackConfig cfg;
  cfg.epsilon = 0.0;
  EXPECT_EQ(attack(c, x, 0, cfg, 1), x);
}

TEST(Attack, FgsmNeverDecreasesLinearCe) {
  Rng rng(5);
  std::size_t violations = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t d = 2 + static_cast<std::size_t>(uniform01(rng) * 5);
    const std::size_t K = 2 + static_cast<std::size_t>(uniform01(rng) * 9);
    const auto c = random_model(Arch::Linear, d, K, rng);
    const auto x = random_vec(rng, d);
    const auto y = static_cast<std::size_t>(uniform01(rng) * K);
    const auto xa = attack(c, x, y, AttackConfig::fgsm(0.1 + uniform01(rng)), 0);
    if (ce_at(c, xa, y) < ce_at(c, x, y)) ++violations;
  }
  EXPECT_EQ(violations, 0u);
}

TEST(Attack, PgdBeatsFgsmMostOfTheTime) {
  Rng rng(6);
  int wins = 0;
  for (int t = 0; t < 100; ++t) {
    const auto c = random_model(Arch::Linear, 6, 5, rng);
    const auto x = random_vec(rng, 6);
    const auto y = static_cast<std::size_t>(uniform01(rng) * 5);
    const double eps = 0.3;
    const auto xf = attack(c, x, y, AttackConfig::fgsm(eps), 0);
    AttackConfig pgd{AttackObjective::Top1Loss, eps, 10, eps / 4, false, std::nullopt};
    const auto xp = attack(c, x, y, pgd, 0);
    if (ce_at(c, xp, y) >= ce_at(c, xf, y) - 1e-12) ++wins;
  }
  EXPECT_GE(wins, 95);
}

TEST(Attack, RespectsBallAndBox) {
  Rng rng(7);
  for (auto arch : {Arch::Linear, Arch::Mlp}) {
    for (int t = 0; t < 200; ++t) {
      const auto c = random_model(arch, 4, 4, rng);
      std::vector<double> x(4);
      for (double& v : x) v = uniform01(rng);
      AttackConfig cfg{t % 2 ? AttackObjective::Entropy : AttackObjective::Top1Loss, 8.0 / 255, 10, 2.0 / 255, true,
                       std::pair{0.0, 1.0}};
      const auto xa = attack(c, x, 1, cfg, rng());
      for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_LE(std::abs(xa[j] - x[j]), cfg.epsilon + 1e-12);
        EXPECT_GE(xa[j], 0.0);
        EXPECT_LE(xa[j], 1.0);
      }
    }
  }
}

TEST(Attack, EntropyObjectiveRaisesEntropy) {
  Rng rng(8);
  int up = 0;
  for (int t = 0; t < 100; ++t) {
    const auto c = random_model(Arch::Linear, 5, 6, rng);
    const auto x = random_vec(rng, 5);
    AttackConfig cfg{AttackObjective::Entropy, 0.2, 10, 0.05, false, std::nullopt};
    const auto xa = attack(c, x, std::nullopt, cfg, 0);
    if (objective_value(c.logits(xa), AttackObjective::Entropy, {}) >=
        objective_value(c.logits(x), AttackObjective::Entropy, {}))
      ++up;
  }
  EXPECT_GE(up, 95);
}

TEST(Train, ZeroLearningRateKeepsInitialWeights) {
  const auto data = blobs(20, 1);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.lr = 0.0;
  cfg.seed = 3;
  const auto c = train(data, cfg);
  const auto init = Classifier::random(Arch::Linear, 2, 2, 0, derive_seed(3, 1));
  EXPECT_EQ(c, init);
}

TEST(Train, SeparableBlobsReachPerfectAccuracy) {
  const auto data = blobs(100, 2);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.lr = 0.1;
  cfg.batch = 16;
  const auto c = train(data, cfg);
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(forward(c, data.features.row(i)).dist.order()[0], data.labels[i]);
  }
}

TEST(Train, EntropyMinimizationSharpensPredictions) {
  const auto tr = blobs(100, 3);
  const auto held = blobs(100, 4);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.lr = 0.1;
  cfg.seed = 9;
  const auto ce = train(tr, cfg);
  cfg.loss.kind = LossKind::EmCE;
  cfg.loss.lambda_em = 0.3;
  const auto em = train(tr, cfg);
  double h_ce = 0.0, h_em = 0.0;
  for (std::size_t i = 0; i < held.size(); ++i) {
    h_ce += entropy(forward(ce, held.features.row(i)).dist);
    h_em += entropy(forward(em, held.features.row(i)).dist);
  }
  EXPECT_LT(h_em, h_ce);
}

TEST(Train, DeterministicAcrossRuns) {
  const auto data = gen_synthetic(4, 3, 30, 1.0, 5);
  for (auto kind : {LossKind::CE, LossKind::BetaEmCE, LossKind::FatCE, LossKind::BetaTradesKL}) {
    TrainConfig cfg;
    cfg.arch = Arch::Mlp;
    cfg.hidden = 6;
    cfg.epochs = 3;
    cfg.lr = 0.05;
    cfg.seed = 17;
    cfg.loss.kind = kind;
    cfg.loss.beta = BetaParams{};
    cfg.attack = AttackConfig{};
    const auto a = train(data, cfg);
    const auto b = train(data, cfg);
    EXPECT_EQ(a, b) << loss_kind_name(kind);
  }
}

TEST(Train, ConfigErrors) {
  const auto data = blobs(5, 1);
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(train(data, cfg), Error);
  cfg.epochs = 1;
  cfg.lr = -1.0;
  EXPECT_THROW(train(data, cfg), Error);
}

TEST(Checkpoint, RoundTripAndLayout) {
  Rng rng(10);
  for (auto arch : {Arch::Linear, Arch::Mlp}) {
    const auto c = random_model(arch, 3, 4, rng);
    std::stringstream ss;
    save_checkpoint(c, ss);
    const auto bytes = ss.str();
    ASSERT_EQ(bytes.substr(0, 5), "CPUR1");
    EXPECT_EQ(static_cast<unsigned char>(bytes[5]), arch == Arch::Linear ? 0u : 1u);
    EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 3u);  // d_in, little-endian u64
    EXPECT_EQ(bytes.size(), 5u + 1u + 4u * 8u + c.params().size() * 8u);
    EXPECT_EQ(load_checkpoint(ss), c);
  }
  std::stringstream bad("XPUR1");
  EXPECT_THROW(load_checkpoint(bad), Error);
  std::stringstream truncated;
  save_checkpoint(Classifier(Arch::Linear, 2, 2), truncated);
  std::stringstream cut(truncated.str().substr(0, 20));
  EXPECT_THROW(load_checkpoint(cut), Error);
}

}  // namespace
}  // namespace cpur
