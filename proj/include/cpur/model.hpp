#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cpur/dataset.hpp"
#include "cpur/error.hpp"
#include "cpur/numeric.hpp"
#include "cpur/simplex.hpp"
#include "cpur/weighting.hpp"

namespace cpur {

enum class Arch : std::uint8_t { Linear = 0, Mlp = 1 };

/// Linear-softmax or one-hidden-layer tanh MLP with a flat parameter vector.
///
/// Parameter layout (row-major blocks, in this order):
///   Linear: W[K][d], b[K]
///   Mlp:    W1[h][d], b1[h], W2[K][h], b2[K]
class Classifier {
 public:
  static std::size_t param_count(Arch arch, std::size_t d_in, std::size_t K, std::size_t hidden) {
    return arch == Arch::Linear ? K * d_in + K : hidden * d_in + hidden + K * hidden + K;
  }

  Classifier(Arch arch, std::size_t d_in, std::size_t num_classes, std::size_t hidden = 0)
      : arch_(arch), d_in_(d_in), K_(num_classes), hidden_(arch == Arch::Mlp ? hidden : 0) {
    if (d_in == 0 || num_classes < 2) throw Error(Errc::ConfigError, "need d_in >= 1 and K >= 2");
    if (arch == Arch::Mlp && hidden == 0) throw Error(Errc::ConfigError, "Mlp needs hidden >= 1");
    params_.assign(param_count(arch_, d_in_, K_, hidden_), 0.0);
  }

  Classifier(Arch arch, std::size_t d_in, std::size_t num_classes, std::size_t hidden, std::vector<double> params)
      : Classifier(arch, d_in, num_classes, hidden) {
    if (params.size() != params_.size()) throw Error(Errc::ShapeMismatch, "parameter vector length");
    params_ = std::move(params);
  }

  /// Seeded Gaussian initialization scaled by 1/sqrt(fan_in); biases zero.
  static Classifier random(Arch arch, std::size_t d_in, std::size_t K, std::size_t hidden, std::uint64_t seed) {
    Classifier c(arch, d_in, K, hidden);
    Rng rng(seed);
    auto fill = [&](std::size_t offset, std::size_t count, std::size_t fan_in) {
      const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (std::size_t i = 0; i < count; ++i) c.params_[offset + i] = s * standard_normal(rng);
    };
    if (arch == Arch::Linear) {
      fill(0, K * d_in, d_in);
    } else {
      fill(0, hidden * d_in, d_in);
      fill(hidden * d_in + hidden, K * hidden, hidden);
    }
    return c;
  }

  Arch arch() const noexcept { return arch_; }
  std::size_t input_dim() const noexcept { return d_in_; }
  std::size_t num_classes() const noexcept { return K_; }
  std::size_t hidden() const noexcept { return hidden_; }
  std::span<const double> params() const noexcept { return params_; }
  std::span<double> params() noexcept { return params_; }

  std::vector<double> logits(std::span<const double> x) const {
    check_input(x);
    std::vector<double> z(K_);
    if (arch_ == Arch::Linear) {
      affine(params_.data(), params_.data() + K_ * d_in_, K_, d_in_, x, z);
    } else {
      std::vector<double> h(hidden_);
      hidden_layer(x, h);
      const double* w2 = params_.data() + hidden_ * d_in_ + hidden_;
      affine(w2, w2 + K_ * hidden_, K_, hidden_, h, z);
    }
    return z;
  }

  Matrix logits(const Matrix& X) const {
    Matrix out(X.rows(), K_);
    for (std::size_t i = 0; i < X.rows(); ++i) {
      const auto z = logits(X.row(i));
      std::copy(z.begin(), z.end(), out.row(i).begin());
    }
    return out;
  }

  /// Backpropagates `dlogits` at input `x`. Accumulates into `param_grad`
  /// (length params().size()) and/or writes d/dx into `input_grad` when given.
  void backward(std::span<const double> x, std::span<const double> dlogits, std::span<double> param_grad,
                std::span<double> input_grad) const {
    check_input(x);
    if (dlogits.size() != K_) throw Error(Errc::DimMismatch, "dlogits length");
    const bool want_params = !param_grad.empty();
    const bool want_input = !input_grad.empty();
    if (want_params && param_grad.size() != params_.size()) throw Error(Errc::DimMismatch, "param_grad length");
    if (want_input && input_grad.size() != d_in_) throw Error(Errc::DimMismatch, "input_grad length");

    if (arch_ == Arch::Linear) {
      const double* W = params_.data();
      if (want_params) {
        for (std::size_t k = 0; k < K_; ++k) {
          for (std::size_t j = 0; j < d_in_; ++j) param_grad[k * d_in_ + j] += dlogits[k] * x[j];
          param_grad[K_ * d_in_ + k] += dlogits[k];
        }
      }
      if (want_input) {
        std::fill(input_grad.begin(), input_grad.end(), 0.0);
        for (std::size_t k = 0; k < K_; ++k) {
          for (std::size_t j = 0; j < d_in_; ++j) input_grad[j] += W[k * d_in_ + j] * dlogits[k];
        }
      }
      return;
    }

    const std::size_t H = hidden_;
    const double* W1 = params_.data();
    const std::size_t off_b1 = H * d_in_;
    const std::size_t off_w2 = off_b1 + H;
    const std::size_t off_b2 = off_w2 + K_ * H;
    const double* W2 = params_.data() + off_w2;
    std::vector<double> h(H);
    hidden_layer(x, h);
    std::vector<double> da(H, 0.0);
    for (std::size_t k = 0; k < K_; ++k) {
      for (std::size_t m = 0; m < H; ++m) da[m] += W2[k * H + m] * dlogits[k];
    }
    for (std::size_t m = 0; m < H; ++m) da[m] *= 1.0 - h[m] * h[m];
    if (want_params) {
      for (std::size_t k = 0; k < K_; ++k) {
        for (std::size_t m = 0; m < H; ++m) param_grad[off_w2 + k * H + m] += dlogits[k] * h[m];
        param_grad[off_b2 + k] += dlogits[k];
      }
      for (std::size_t m = 0; m < H; ++m) {
        for (std::size_t j = 0; j < d_in_; ++j) param_grad[m * d_in_ + j] += da[m] * x[j];
        param_grad[off_b1 + m] += da[m];
      }
    }
    if (want_input) {
      std::fill(input_grad.begin(), input_grad.end(), 0.0);
      for (std::size_t m = 0; m < H; ++m) {
        for (std::size_t j = 0; j < d_in_; ++j) input_grad[j] += W1[m * d_in_ + j] * da[m];
      }
    }
  }

  friend bool operator==(const Classifier&, const Classifier&) = default;

 private:
  void check_input(std::span<const double> x) const {
    if (x.size() != d_in_) {
      throw Error(Errc::DimMismatch, "input has " + std::to_string(x.size()) + " features, model expects " +
                                         std::to_string(d_in_));
    }
  }

  static void affine(const double* W, const double* b, std::size_t rows, std::size_t cols,
                     std::span<const double> x, std::span<double> out) {
    for (std::size_t r = 0; r < rows; ++r) {
      double s = b[r];
      for (std::size_t c = 0; c < cols; ++c) s += W[r * cols + c] * x[c];
      out[r] = s;
    }
  }

  void hidden_layer(std::span<const double> x, std::span<double> h) const {
    affine(params_.data(), params_.data() + hidden_ * d_in_, hidden_, d_in_, x, h);
    for (double& v : h) v = std::tanh(v);
  }

  Arch arch_;
  std::size_t d_in_;
  std::size_t K_;
  std::size_t hidden_;
  std::vector<double> params_;
};

struct ForwardResult {
  std::vector<double> logits;
  ProbDist dist;
};

inline ForwardResult forward(const Classifier& c, std::span<const double> x) {
  if (!all_finite(x)) throw Error(Errc::NonFinite, "non-finite input");
  auto z = c.logits(x);
  auto d = dist_from_logits(z);
  return {std::move(z), std::move(d)};
}

enum class AttackObjective { Top1Loss, Entropy };

/// l-infinity PGD. steps = 1, stepsize >= epsilon and no random start is FGSM.
struct AttackConfig {
  AttackObjective objective = AttackObjective::Top1Loss;
  double epsilon = 8.0 / 255.0;
  std::size_t steps = 10;
  double stepsize = 2.0 / 255.0;
  bool random_start = true;
  std::optional<std::pair<double, double>> box;

  void validate() const {
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw Error(Errc::ConfigError, "epsilon must be >= 0");
    if (steps < 1) throw Error(Errc::ConfigError, "steps must be >= 1");
    if (!(stepsize > 0.0)) throw Error(Errc::ConfigError, "stepsize must be > 0");
    if (box && !(box->first <= box->second)) throw Error(Errc::ConfigError, "box lo > hi");
  }

  static AttackConfig fgsm(double eps) { return {AttackObjective::Top1Loss, eps, 1, eps, false, std::nullopt}; }
};

/// d/dlogits of the attack objective: CE at `label`, or output entropy.
inline std::vector<double> objective_logit_grad(std::span<const double> z, AttackObjective obj,
                                                std::optional<std::size_t> label) {
  const auto p = softmax(z);
  std::vector<double> g(z.size());
  if (obj == AttackObjective::Top1Loss) {
    if (!label) throw Error(Errc::MissingLabel, "Top1Loss objective needs a label");
    if (*label >= z.size()) throw Error(Errc::LabelOutOfRange, "label " + std::to_string(*label));
    for (std::size_t j = 0; j < z.size(); ++j) g[j] = p[j] - (j == *label ? 1.0 : 0.0);
  } else {
    const auto logp = log_softmax(z);
    double h = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) h -= p[j] * logp[j];
    for (std::size_t j = 0; j < z.size(); ++j) g[j] = -p[j] * (logp[j] + h);
  }
  return g;
}

/// Value of the attack objective at logits `z`.
inline double objective_value(std::span<const double> z, AttackObjective obj, std::optional<std::size_t> label) {
  if (obj == AttackObjective::Top1Loss) {
    if (!label) throw Error(Errc::MissingLabel, "Top1Loss objective needs a label");
    return log_sum_exp(z) - z[*label];
  }
  const auto p = softmax(z);
  const auto logp = log_softmax(z);
  double h = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) h -= p[j] * logp[j];
  return h;
}

inline std::vector<double> grad_wrt_input(const Classifier& c, std::span<const double> x, AttackObjective obj,
                                          std::optional<std::size_t> label = std::nullopt) {
  const auto z = c.logits(x);
  const auto dz = objective_logit_grad(z, obj, label);
  std::vector<double> gx(c.input_dim());
  c.backward(x, dz, {}, gx);
  return gx;
}

inline std::vector<double> attack(const Classifier& c, std::span<const double> x0, std::optional<std::size_t> label,
                                  const AttackConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t d = x0.size();
  std::vector<double> x(x0.begin(), x0.end());
  auto project = [&](std::vector<double>& v) {
    for (std::size_t j = 0; j < d; ++j) {
      v[j] = std::clamp(v[j], x0[j] - cfg.epsilon, x0[j] + cfg.epsilon);
      if (cfg.box) v[j] = std::clamp(v[j], cfg.box->first, cfg.box->second);
    }
  };
  if (cfg.random_start && cfg.epsilon > 0.0) {
    Rng rng(seed);
    for (std::size_t j = 0; j < d; ++j) x[j] += cfg.epsilon * (2.0 * uniform01(rng) - 1.0);
  }
  project(x);
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const auto g = grad_wrt_input(c, x, cfg.objective, label);
    for (std::size_t j = 0; j < d; ++j) {
      const double sgn = g[j] > 0.0 ? 1.0 : (g[j] < 0.0 ? -1.0 : 0.0);
      x[j] += cfg.stepsize * sgn;
    }
    project(x);
  }
  return x;
}

/// Attacks every row of `data` with per-row seeds derived from `seed`.
inline Matrix attack_all(const Classifier& c, const LabeledSet& data, const AttackConfig& cfg, std::uint64_t seed) {
  Matrix out(data.size(), data.dim());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto xa = attack(c, data.features.row(i), data.labels[i], cfg, derive_seed(seed, i));
    std::copy(xa.begin(), xa.end(), out.row(i).begin());
  }
  return out;
}

struct LrDrop {
  std::size_t epoch = 0;  ///< 0-based epoch from which the factor applies
  double factor = 0.1;
};

struct TrainConfig {
  LossSpec loss;
  Arch arch = Arch::Linear;
  std::size_t hidden = 0;
  std::size_t epochs = 20;
  std::size_t batch = 64;
  double lr = 0.1;
  std::vector<LrDrop> lr_drops;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  std::optional<AttackConfig> attack;  ///< present means adversarial training

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw Error(Errc::ConfigError, "lr must be finite and >= 0");
    if (epochs < 1) throw Error(Errc::ConfigError, "epochs must be >= 1");
    if (batch < 1) throw Error(Errc::ConfigError, "batch must be >= 1");
    if (!(weight_decay >= 0.0)) throw Error(Errc::ConfigError, "weight_decay must be >= 0");
    if (arch == Arch::Mlp && hidden == 0) throw Error(Errc::ConfigError, "Mlp needs hidden >= 1");
    loss.validate();
    if (attack) attack->validate();
  }

  double lr_at(std::size_t epoch) const {
    double r = lr;
    for (const auto& d : lr_drops) {
      if (epoch >= d.epoch) r *= d.factor;
    }
    return r;
  }
};

/// Mean batch loss and its gradient w.r.t. the classifier parameters.
/// `clean` is required for TRADES kinds (the clean counterpart of `X`).
inline std::pair<double, std::vector<double>> loss_param_grad(const Classifier& c, const LossSpec& spec,
                                                              const Matrix& X, std::span<const std::size_t> labels,
                                                              const Matrix* clean = nullptr) {
  const Matrix z = c.logits(X);
  std::optional<Matrix> zc;
  if (clean) zc = c.logits(*clean);
  const auto res = loss_and_grad(spec, z, labels, nullptr, zc ? &*zc : nullptr);
  std::vector<double> g(c.params().size(), 0.0);
  for (std::size_t i = 0; i < X.rows(); ++i) {
    c.backward(X.row(i), res.grad.row(i), g, {});
    if (zc) c.backward(clean->row(i), res.clean_grad.row(i), g, {});
  }
  return {res.loss, std::move(g)};
}

/// Per-class top-1 error rates of `c` on `data` (0 for classes without samples).
inline std::vector<double> class_error_rates(const Classifier& c, const LabeledSet& data) {
  std::vector<double> wrong(data.num_classes, 0.0), total(data.num_classes, 0.0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto z = c.logits(data.features.row(i));
    const auto pred = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    total[data.labels[i]] += 1.0;
    if (pred != data.labels[i]) wrong[data.labels[i]] += 1.0;
  }
  for (std::size_t k = 0; k < wrong.size(); ++k) wrong[k] = total[k] > 0.0 ? wrong[k] / total[k] : 0.0;
  return wrong;
}

/// Minibatch SGD. With an attack configured every batch is replaced by its
/// adversarial counterpart before the loss (the clean batch is kept as the
/// TRADES reference). Fully deterministic in cfg.seed.
inline Classifier train(const LabeledSet& data, const TrainConfig& cfg) {
  cfg.validate();
  data.validate();
  if (data.size() == 0) throw Error(Errc::ConfigError, "empty training set");
  Classifier c = Classifier::random(cfg.arch, data.dim(), data.num_classes, cfg.hidden, derive_seed(cfg.seed, 1));
  Rng shuffle_rng(derive_seed(cfg.seed, 2));
  const std::uint64_t attack_seed = derive_seed(cfg.seed, 3);
  LossSpec spec = cfg.loss;
  const bool fat_auto = spec.kind == LossKind::FatCE && !cfg.loss.class_weights;
  std::vector<double> grad(c.params().size());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    if (fat_auto) spec.class_weights = fat_class_weights(class_error_rates(c, data), 1.0);
    const auto perm = random_permutation(data.size(), shuffle_rng);
    for (std::size_t start = 0, batch_idx = 0; start < perm.size(); start += cfg.batch, ++batch_idx) {
      const std::size_t end = std::min(perm.size(), start + cfg.batch);
      const auto idx = std::span<const std::size_t>(perm).subspan(start, end - start);
      const LabeledSet clean = data.subset(idx);
      Matrix X = clean.features;
      if (cfg.attack) {
        for (std::size_t r = 0; r < idx.size(); ++r) {
          const auto xa = attack(c, clean.features.row(r), clean.labels[r], *cfg.attack,
                                 derive_seed(attack_seed, epoch * data.size() + idx[r]));
          std::copy(xa.begin(), xa.end(), X.row(r).begin());
        }
      }
      const Matrix* clean_ref = uses_trades(spec.kind) ? &clean.features : nullptr;
      auto [loss, g] = loss_param_grad(c, spec, X, clean.labels, clean_ref);
      if (!std::isfinite(loss)) throw Error(Errc::NonFinite, "training loss diverged at epoch " + std::to_string(epoch));
      auto p = c.params();
      for (std::size_t k = 0; k < p.size(); ++k) {
        p[k] -= lr * g[k];
        p[k] -= lr * cfg.weight_decay * p[k];
      }
    }
  }
  return c;
}

// Checkpoint layout (all integers and floats little-endian):
//   "CPUR1" (5 bytes) | arch u8 | d_in u64 | K u64 | hidden u64 | n_params u64 | n_params x f64

inline constexpr std::array<char, 5> kCheckpointMagic = {'C', 'P', 'U', 'R', '1'};

namespace detail {
inline void put_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b{};
  for (std::size_t i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b.data(), 8);
}
inline std::uint64_t get_u64(std::istream& is) {
  std::array<unsigned char, 8> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 8)) throw Error(Errc::ParseError, "truncated checkpoint");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
}  // namespace detail

inline void save_checkpoint(const Classifier& c, std::ostream& os) {
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  os.put(static_cast<char>(c.arch()));
  detail::put_u64(os, c.input_dim());
  detail::put_u64(os, c.num_classes());
  detail::put_u64(os, c.hidden());
  detail::put_u64(os, c.params().size());
  for (double v : c.params()) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
  if (!os) throw Error(Errc::Io, "checkpoint write failed");
}

inline Classifier load_checkpoint(std::istream& is) {
  std::array<char, 5> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
    throw Error(Errc::ParseError, "not a CPUR1 checkpoint");
  }
  const int tag = is.get();
  if (tag != 0 && tag != 1) throw Error(Errc::ParseError, "unknown arch tag");
  const auto arch = static_cast<Arch>(tag);
  const auto d_in = detail::get_u64(is);
  const auto K = detail::get_u64(is);
  const auto hidden = detail::get_u64(is);
  const auto n = detail::get_u64(is);
  if (d_in == 0 || K < 2 || (arch == Arch::Mlp && hidden == 0) || n != Classifier::param_count(arch, d_in, K, hidden)) {
    throw Error(Errc::ParseError, "inconsistent checkpoint header");
  }
  std::vector<double> params(n);
  for (auto& v : params) v = std::bit_cast<double>(detail::get_u64(is));
  return Classifier(arch, d_in, K, hidden, std::move(params));
}

inline void save_checkpoint(const Classifier& c, const std::filesystem::path& path) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw Error(Errc::Io, "cannot open " + tmp.string());
    save_checkpoint(c, os);
  }
  std::filesystem::rename(tmp, path);
}

inline Classifier load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::Io, "cannot open " + path.string());
  return load_checkpoint(is);
}

}  // namespace cpur
