#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cpur/error.hpp"
#include "cpur/numeric.hpp"
#include "cpur/simplex.hpp"

namespace cpur {

/// ln Gamma(x) for x > 0. Lanczos approximation (g = 7, 9 terms) for
/// x >= 0.5, reflection below.
inline double log_gamma(double x) {
  if (!std::isfinite(x) || x <= 0.0) throw Error(Errc::DomainError, "log_gamma needs finite x > 0");
  constexpr double kPi = 3.141592653589793238462643;
  if (x < 0.5) {
    return std::log(kPi / std::sin(kPi * x)) - log_gamma(1.0 - x);
  }
  static constexpr std::array<double, 9> kCoef = {
      0.99999999999980993,  676.5203681218851,     -1259.1392167224028,
      771.32342877765313,   -176.61502916214059,   12.507343278686905,
      -0.13857109526572012, 9.9843695780195716e-6, 1.5056327351493116e-7};
  constexpr double kG = 7.0;
  const double z = x - 1.0;
  double acc = kCoef[0];
  for (std::size_t i = 1; i < kCoef.size(); ++i) acc += kCoef[i] / (z + static_cast<double>(i));
  const double t = z + kG + 0.5;
  return 0.91893853320467274178 + (z + 0.5) * std::log(t) - t + std::log(acc);
}

/// Beta(a, b) density parameters. `shifted` adds 1 to the density so every
/// sample keeps at least unit weight.
struct BetaParams {
  double a = 1.1;
  double b = 5.0;
  bool shifted = true;

  void validate() const {
    if (!std::isfinite(a) || !std::isfinite(b) || a <= 0.0 || b <= 0.0) {
      throw Error(Errc::DomainError, "Beta parameters must be finite and positive");
    }
  }
};

/// Gamma(a + b) / (Gamma(a) Gamma(b)), the Beta density normalizer.
inline double beta_normalizer(double a, double b) {
  return std::exp(log_gamma(a + b) - log_gamma(a) - log_gamma(b));
}

inline double beta_pdf(double z, const BetaParams& p) {
  p.validate();
  if (!(z >= 0.0 && z <= 1.0)) throw Error(Errc::ZOutOfRange, "z=" + std::to_string(z));
  // Endpoints with a negative exponent would be infinite; evaluate just inside.
  constexpr double kEdge = 1e-12;
  if (p.a < 1.0) z = std::max(z, kEdge);
  if (p.b < 1.0) z = std::min(z, 1.0 - kEdge);
  const double dens = beta_normalizer(p.a, p.b) * std::pow(z, p.a - 1.0) * std::pow(1.0 - z, p.b - 1.0);
  return p.shifted ? dens + 1.0 : dens;
}

enum class LossKind { CE, BetaCE, EmCE, BetaEmCE, FatCE, TradesKL, BetaTradesKL };

constexpr std::string_view loss_kind_name(LossKind k) noexcept {
  switch (k) {
    case LossKind::CE: return "CE";
    case LossKind::BetaCE: return "BetaCE";
    case LossKind::EmCE: return "EmCE";
    case LossKind::BetaEmCE: return "BetaEmCE";
    case LossKind::FatCE: return "FatCE";
    case LossKind::TradesKL: return "TradesKL";
    case LossKind::BetaTradesKL: return "BetaTradesKL";
  }
  return "CE";
}

inline LossKind parse_loss_kind(std::string_view s) {
  for (auto k : {LossKind::CE, LossKind::BetaCE, LossKind::EmCE, LossKind::BetaEmCE, LossKind::FatCE,
                 LossKind::TradesKL, LossKind::BetaTradesKL}) {
    if (loss_kind_name(k) == s) return k;
  }
  throw Error(Errc::ConfigError, "unknown loss kind '" + std::string(s) + "'");
}

constexpr bool uses_beta(LossKind k) noexcept {
  return k == LossKind::BetaCE || k == LossKind::BetaEmCE || k == LossKind::BetaTradesKL;
}
constexpr bool uses_em(LossKind k) noexcept { return k == LossKind::EmCE || k == LossKind::BetaEmCE; }
constexpr bool uses_trades(LossKind k) noexcept { return k == LossKind::TradesKL || k == LossKind::BetaTradesKL; }

struct LossSpec {
  LossKind kind = LossKind::CE;
  std::optional<BetaParams> beta;
  double lambda_em = 0.3;
  double trades_beta = 6.0;
  std::optional<std::vector<double>> class_weights;

  void validate() const {
    if (uses_beta(kind)) {
      if (!beta) throw Error(Errc::MissingBetaParams, std::string(loss_kind_name(kind)) + " needs Beta parameters");
      beta->validate();
    }
    if (uses_em(kind) && !(lambda_em > 0.0)) throw Error(Errc::ConfigError, "lambda_em must be > 0");
    if (!(lambda_em >= 0.0) || !(trades_beta >= 0.0)) throw Error(Errc::ConfigError, "negative loss coefficient");
  }
};

struct LossResult {
  double loss = 0.0;
  Matrix grad;  ///< d loss / d logits
  Matrix clean_grad;  ///< d loss / d clean_logits (TRADES kinds only)
  std::vector<double> weights;  ///< per-sample Beta weight (1 when unweighted)
};

/// Mean per-sample loss over the batch and its exact gradient w.r.t. the logits.
///
/// Beta weights come from the normalized TCPR of softmax(`tcpr_source` row),
/// defaulting to the logits themselves, and are held constant in the gradient.
/// TRADES kinds compute CE(clean) + trades_beta * KL(softmax(clean) || softmax(logits)).
inline LossResult loss_and_grad(const LossSpec& spec, const Matrix& logits, std::span<const std::size_t> labels,
                                const Matrix* tcpr_source = nullptr, const Matrix* clean_logits = nullptr) {
  spec.validate();
  const std::size_t B = logits.rows();
  const std::size_t K = logits.cols();
  if (labels.size() != B) throw Error(Errc::ShapeMismatch, "labels vs logits rows");
  if (tcpr_source && (tcpr_source->rows() != B || tcpr_source->cols() != K)) {
    throw Error(Errc::ShapeMismatch, "tcpr_source shape");
  }
  const bool trades = uses_trades(spec.kind);
  if (trades) {
    if (!clean_logits) throw Error(Errc::MissingCleanLogits, "TRADES loss needs clean logits");
    if (clean_logits->rows() != B || clean_logits->cols() != K) throw Error(Errc::ShapeMismatch, "clean_logits shape");
  }
  if (spec.kind == LossKind::FatCE) {
    if (!spec.class_weights) throw Error(Errc::ConfigError, "FatCE needs class weights");
    if (spec.class_weights->size() != K) throw Error(Errc::ShapeMismatch, "class weights vs K");
  }
  for (std::size_t y : labels) {
    if (y >= K) throw Error(Errc::LabelOutOfRange, "label " + std::to_string(y));
  }

  LossResult out;
  out.grad = Matrix(B, K);
  if (trades) out.clean_grad = Matrix(B, K);
  out.weights.assign(B, 1.0);
  if (B == 0) return out;
  const double inv_b = 1.0 / static_cast<double>(B);
  double total = 0.0;

  for (std::size_t i = 0; i < B; ++i) {
    const auto z = logits.row(i);
    if (!all_finite(z)) throw Error(Errc::NonFiniteLogits, "logit row " + std::to_string(i));
    const std::size_t y = labels[i];
    const auto p = softmax(z);
    const auto logp = log_softmax(z);

    double w = 1.0;
    if (uses_beta(spec.kind)) {
      const auto src = tcpr_source ? tcpr_source->row(i) : z;
      w = beta_pdf(tcpr(dist_from_logits(src), y).normalized, *spec.beta);
    }
    out.weights[i] = w;
    auto g = out.grad.row(i);

    if (trades) {
      const auto zc = clean_logits->row(i);
      const auto pc = softmax(zc);
      const auto logpc = log_softmax(zc);
      double kl = 0.0;
      for (std::size_t j = 0; j < K; ++j) kl += pc[j] * (logpc[j] - logp[j]);
      const double ce = -logpc[y];
      total += w * (ce + spec.trades_beta * kl);
      auto gc = out.clean_grad.row(i);
      for (std::size_t j = 0; j < K; ++j) {
        g[j] = w * spec.trades_beta * (p[j] - pc[j]) * inv_b;
        const double d = logpc[j] - logp[j];
        gc[j] = w * ((pc[j] - (j == y ? 1.0 : 0.0)) + spec.trades_beta * pc[j] * (d - kl)) * inv_b;
      }
      continue;
    }

    const double ce = -logp[y];
    double ce_scale = w;
    if (spec.kind == LossKind::FatCE) ce_scale = (*spec.class_weights)[y];
    double li = ce_scale * ce;
    for (std::size_t j = 0; j < K; ++j) g[j] = ce_scale * (p[j] - (j == y ? 1.0 : 0.0));

    if (uses_em(spec.kind)) {
      double h = 0.0;
      for (std::size_t j = 0; j < K; ++j) h -= p[j] * logp[j];
      li += spec.lambda_em * h;
      // dH/dz_j = -p_j (log p_j + H)
      for (std::size_t j = 0; j < K; ++j) g[j] += spec.lambda_em * (-p[j] * (logp[j] + h));
    }
    total += li;
    for (double& v : g) v *= inv_b;
  }
  out.loss = total * inv_b;
  return out;
}

/// Per-sample cross-entropy -log softmax(z)_y.
inline std::vector<double> per_sample_ce(const Matrix& logits, std::span<const std::size_t> labels) {
  std::vector<double> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) out[i] = log_sum_exp(logits.row(i)) - logits(i, labels[i]);
  return out;
}

/// Class weights softmax(error_rates / temperature), rescaled to mean 1.
inline std::vector<double> fat_class_weights(std::span<const double> error_rates, double temperature = 1.0) {
  if (!all_finite(error_rates)) throw Error(Errc::NonFinite, "error rates must be finite");
  if (error_rates.empty()) throw Error(Errc::EmptyVector, "no error rates");
  if (!std::isfinite(temperature) || temperature <= 0.0) throw Error(Errc::DomainError, "temperature must be > 0");
  std::vector<double> scaled(error_rates.size());
  for (std::size_t k = 0; k < scaled.size(); ++k) scaled[k] = error_rates[k] / temperature;
  auto w = softmax(scaled);
  for (double& v : w) v *= static_cast<double>(w.size());
  return w;
}

}  // namespace cpur
