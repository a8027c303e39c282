#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpur/aps.hpp"
#include "cpur/conformal.hpp"
#include "cpur/dataset.hpp"
#include "cpur/error.hpp"
#include "cpur/io.hpp"
#include "cpur/model.hpp"
#include "cpur/numeric.hpp"
#include "cpur/synthetic.hpp"
#include "cpur/theory.hpp"
#include "cpur/weighting.hpp"

namespace cpur {

struct SyntheticGaussian {
  std::size_t K = 10;
  std::size_t d = 20;
  std::size_t per_class = 600;
  double spread = 1.0;
  std::uint64_t seed = 0;
};

struct LogitsSource {
  std::filesystem::path path;
};

struct ExperimentConfig {
  std::variant<SyntheticGaussian, LogitsSource> data = SyntheticGaussian{};
  double cal_fraction = 0.1;  ///< of the whole data set; cal:test defaults to 1:4
  double test_fraction = 0.4;
  double alpha = 0.1;
  TrainConfig train;
  std::optional<AttackConfig> eval_attack;
  std::size_t train_seeds = 1;
  std::size_t split_repeats = 1;
  std::optional<BetaParams> beta;  ///< bound-check parameters; defaults to train.loss.beta or (1.1, 5)
  bool temperature_scaling = true;
  bool emit_curve = false;
  bool emit_bound = false;
  std::uint64_t seed = 0;
  std::string method;  ///< label for result rows; derived from the loss when empty
  std::filesystem::path output;  ///< writes <output>.json and <output>.csv when non-empty

  void validate() const {
    if (!(cal_fraction > 0.0) || !(test_fraction > 0.0) || cal_fraction + test_fraction > 1.0 + 1e-12) {
      throw Error(Errc::ConfigError, "split fractions must be positive and sum to <= 1");
    }
    if (!(alpha > 0.0 && alpha < 1.0)) throw Error(Errc::AlphaOutOfRange, "alpha must lie in (0, 1)");
    if (train_seeds < 1 || split_repeats < 1) throw Error(Errc::ConfigError, "trial counts must be >= 1");
    if (std::holds_alternative<SyntheticGaussian>(data)) train.validate();
    if (eval_attack) eval_attack->validate();
    if (beta) beta->validate();
  }
};

/// "AT-Beta-EM" style label from the training setup.
inline std::string method_name(const TrainConfig& t) {
  const std::string at = t.attack ? "AT" : "ST";
  switch (t.loss.kind) {
    case LossKind::CE: return at;
    case LossKind::BetaCE: return at + "-Beta";
    case LossKind::EmCE: return at + "-EM";
    case LossKind::BetaEmCE: return at + "-Beta-EM";
    case LossKind::FatCE: return "FAT";
    case LossKind::TradesKL: return "TRADES";
    case LossKind::BetaTradesKL: return "TRADES-Beta";
  }
  return at;
}

struct TrialRecord {
  std::string method;
  std::size_t seed = 0;
  std::size_t split = 0;
  double coverage = 0.0;
  double pss = 0.0;
  double npss = 0.0;
  double clean_acc = 0.0;
  std::optional<double> rob_acc;
  double temperature = 1.0;
  double tau_hat = 0.0;
  double mean_entropy = 0.0;
  std::size_t n_cal = 0;
  std::size_t n_test = 0;
};

struct Summary {
  double mean = 0.0;
  double std = 0.0;
};

struct ExperimentResult {
  std::vector<TrialRecord> records;
  Summary coverage, pss, npss, clean_acc;
  std::optional<Summary> rob_acc;
  std::vector<CpCurve> curves;  ///< one per record when requested
  std::vector<BoundReport> bounds;  ///< one per record when requested
};

namespace detail {

inline Summary summarize(const std::vector<TrialRecord>& recs, double TrialRecord::*field) {
  std::vector<double> xs;
  xs.reserve(recs.size());
  for (const auto& r : recs) xs.push_back(r.*field);
  return {mean(xs), sample_stddev(xs)};
}

inline double top1_accuracy(const Matrix& logits, std::span<const std::size_t> labels) {
  if (labels.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto row = logits.row(i);
    const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (pred == labels[i]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

inline Matrix select_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto src = m.row(idx[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

template <class T>
std::vector<T> select(std::span<const T> v, std::span<const std::size_t> idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(v[i]);
  return out;
}

/// Evaluation pool: logits of the (possibly attacked) samples plus clean logits.
struct EvalPool {
  Matrix logits;
  Matrix clean_logits;
  std::vector<std::size_t> labels;
  bool attacked = false;
};

inline std::size_t rounded_count(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
}

}  // namespace detail

/// Train/evaluate over (train seed x split repeat) trials and aggregate.
///
/// The data split into training data and the evaluation pool, and the
/// per-repeat cal/test splits, depend only on `cfg.seed` (and the data seed),
/// so two configs that differ only in their loss see identical data.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const std::string method = cfg.method.empty() ? method_name(cfg.train) : cfg.method;
  const double pool_fraction = cfg.cal_fraction + cfg.test_fraction;
  const double cal_share = cfg.cal_fraction / pool_fraction;

  std::optional<LabeledSet> train_set, pool_set;
  std::optional<LogitsFile> file;
  std::size_t K = 0;
  if (const auto* syn = std::get_if<SyntheticGaussian>(&cfg.data)) {
    const auto all = gen_synthetic(syn->K, syn->d, syn->per_class, syn->spread, syn->seed);
    K = all.num_classes;
    Rng rng(derive_seed(cfg.seed, 0xDA7A));
    const auto perm = random_permutation(all.size(), rng);
    const std::size_t n_pool = std::max<std::size_t>(2, detail::rounded_count(pool_fraction, all.size()));
    if (n_pool >= all.size()) throw Error(Errc::ConfigError, "no training data left after the evaluation split");
    pool_set = all.subset(std::span<const std::size_t>(perm).first(n_pool));
    train_set = all.subset(std::span<const std::size_t>(perm).subspan(n_pool));
  } else {
    file = load_logits_csv(std::get<LogitsSource>(cfg.data).path);
    if (file->dists.size() < 2) throw Error(Errc::EmptyVector, "logits file needs at least 2 rows");
    K = file->num_classes;
  }
  const BetaParams bound_beta = cfg.beta ? *cfg.beta : (cfg.train.loss.beta ? *cfg.train.loss.beta : BetaParams{});

  ExperimentResult result;
  for (std::size_t s = 0; s < cfg.train_seeds; ++s) {
    std::optional<Classifier> model;
    if (train_set) {
      TrainConfig tc = cfg.train;
      tc.seed = derive_seed(cfg.seed, 1000 + s);
      model = train(*train_set, tc);
    }
    for (std::size_t r = 0; r < cfg.split_repeats; ++r) {
      const std::uint64_t split_seed = derive_seed(derive_seed(cfg.seed, 2000 + s), r);
      detail::EvalPool pool;
      try {
        if (model) {
          pool.labels = pool_set->labels;
          pool.clean_logits = model->logits(pool_set->features);
          if (cfg.eval_attack) {
            pool.logits = model->logits(attack_all(*model, *pool_set, *cfg.eval_attack, derive_seed(split_seed, 7)));
            pool.attacked = true;
          } else {
            pool.logits = pool.clean_logits;
          }
        } else {
          pool.labels = file->labels;
          pool.logits = Matrix(file->dists.size(), K);
          for (std::size_t i = 0; i < file->dists.size(); ++i) {
            for (std::size_t k = 0; k < K; ++k) pool.logits(i, k) = std::log(std::max(file->dists[i][k], 1e-300));
          }
          pool.clean_logits = pool.logits;
        }

        Rng rng(derive_seed(split_seed, 1));
        const auto perm = random_permutation(pool.labels.size(), rng);
        const std::size_t n_cal =
            std::clamp<std::size_t>(detail::rounded_count(cal_share, perm.size()), 1, perm.size() - 1);
        const auto cal_idx = std::span<const std::size_t>(perm).first(n_cal);
        const auto test_idx = std::span<const std::size_t>(perm).subspan(n_cal);
        const auto cal_logits = detail::select_rows(pool.logits, cal_idx);
        const auto test_logits = detail::select_rows(pool.logits, test_idx);
        const auto cal_labels = detail::select<std::size_t>(pool.labels, cal_idx);
        const auto test_labels = detail::select<std::size_t>(pool.labels, test_idx);

        const Temperature temp = cfg.temperature_scaling ? fit_temperature(cal_logits, cal_labels) : Temperature(1.0);
        const auto cal_dists = apply_temperature(cal_logits, temp);
        const auto test_dists = apply_temperature(test_logits, temp);
        const auto cal = calibrate(cal_dists, cal_labels, cfg.alpha, derive_seed(split_seed, 2));
        const auto sets = predict_sets(test_dists, cal, derive_seed(split_seed, 3));
        const auto m = evaluate(sets, test_labels, K);

        TrialRecord rec;
        rec.method = method;
        rec.seed = s;
        rec.split = r;
        rec.coverage = m.coverage;
        rec.pss = m.pss;
        rec.npss = m.npss;
        rec.clean_acc = detail::top1_accuracy(detail::select_rows(pool.clean_logits, test_idx), test_labels);
        if (pool.attacked) rec.rob_acc = detail::top1_accuracy(test_logits, test_labels);
        rec.temperature = temp.value();
        rec.tau_hat = cal.tau_hat;
        double h = 0.0;
        for (const auto& d : test_dists) h += entropy(d);
        rec.mean_entropy = test_dists.empty() ? 0.0 : h / static_cast<double>(test_dists.size());
        rec.n_cal = cal_labels.size();
        rec.n_test = test_labels.size();
        result.records.push_back(rec);

        if (cfg.emit_curve) {
          result.curves.push_back(cp_curve(test_dists, test_labels, cal, derive_seed(split_seed, 4)));
        }
        if (cfg.emit_bound) {
          Matrix scaled = test_logits;
          for (double& v : scaled.data()) v /= temp.value();
          const auto losses = per_sample_ce(scaled, test_labels);
          result.bounds.push_back(
              check_bound(test_dists, test_labels, losses, cal, bound_beta, derive_seed(split_seed, 5)));
        }
      } catch (const Error& e) {
        throw Error(e.code(), "trial (seed " + std::to_string(s) + ", split " + std::to_string(r) + "): " + e.what());
      }
    }
  }

  result.coverage = detail::summarize(result.records, &TrialRecord::coverage);
  result.pss = detail::summarize(result.records, &TrialRecord::pss);
  result.npss = detail::summarize(result.records, &TrialRecord::npss);
  result.clean_acc = detail::summarize(result.records, &TrialRecord::clean_acc);
  if (!result.records.empty() && result.records.front().rob_acc) {
    std::vector<double> xs;
    for (const auto& rec : result.records) xs.push_back(*rec.rob_acc);
    result.rob_acc = Summary{mean(xs), sample_stddev(xs)};
  }
  return result;
}

// Result emission

inline std::string format_results_csv(const ExperimentResult& res) {
  std::string out = "method,seed,split,coverage,pss,npss,clean_acc,rob_acc\n";
  for (const auto& r : res.records) {
    out += r.method + "," + std::to_string(r.seed) + "," + std::to_string(r.split) + "," + format_double(r.coverage) +
           "," + format_double(r.pss) + "," + format_double(r.npss) + "," + format_double(r.clean_acc) + "," +
           (r.rob_acc ? format_double(*r.rob_acc) : std::string()) + "\n";
  }
  return out;
}

inline nlohmann::json to_json(const Summary& s) { return {{"mean", s.mean}, {"std", s.std}}; }

inline nlohmann::json to_json(const ExperimentResult& res) {
  nlohmann::json j;
  auto recs = nlohmann::json::array();
  for (const auto& r : res.records) {
    recs.push_back({{"method", r.method},
                    {"seed", r.seed},
                    {"split", r.split},
                    {"coverage", r.coverage},
                    {"pss", r.pss},
                    {"npss", r.npss},
                    {"clean_acc", r.clean_acc},
                    {"rob_acc", r.rob_acc ? nlohmann::json(*r.rob_acc) : nlohmann::json(nullptr)},
                    {"temperature", r.temperature},
                    {"tau_hat", r.tau_hat},
                    {"mean_entropy", r.mean_entropy},
                    {"n_cal", r.n_cal},
                    {"n_test", r.n_test}});
  }
  j["records"] = recs;
  j["aggregate"] = {{"coverage", to_json(res.coverage)},
                    {"pss", to_json(res.pss)},
                    {"npss", to_json(res.npss)},
                    {"clean_acc", to_json(res.clean_acc)},
                    {"rob_acc", res.rob_acc ? to_json(*res.rob_acc) : nlohmann::json(nullptr)}};
  if (!res.curves.empty()) {
    auto c = nlohmann::json::array();
    for (const auto& curve : res.curves) c.push_back(to_json(curve));
    j["curves"] = c;
  }
  if (!res.bounds.empty()) {
    auto b = nlohmann::json::array();
    for (const auto& rep : res.bounds) b.push_back(cpur::to_json(rep));
    j["bounds"] = b;
  }
  return j;
}

inline void write_results(const ExperimentResult& res, const std::filesystem::path& prefix) {
  write_file_atomic(prefix.string() + ".json", to_json(res).dump(2) + "\n");
  write_file_atomic(prefix.string() + ".csv", format_results_csv(res));
}

// Config file mapping

inline AttackConfig attack_from_config(const ConfigMap& m, const std::string& prefix, const AttackConfig& defaults) {
  AttackConfig a = defaults;
  a.epsilon = m.get_double(prefix + ".epsilon", a.epsilon);
  a.steps = m.get_size(prefix + ".steps", a.steps);
  a.stepsize = m.get_double(prefix + ".stepsize", a.stepsize);
  a.random_start = m.get_bool(prefix + ".random_start", a.random_start);
  const auto obj = m.get_string(prefix + ".objective", "top1");
  if (obj == "top1") {
    a.objective = AttackObjective::Top1Loss;
  } else if (obj == "entropy") {
    a.objective = AttackObjective::Entropy;
  } else {
    throw Error(Errc::ConfigError, prefix + ".objective must be top1 or entropy");
  }
  if (m.has(prefix + ".box_lo") || m.has(prefix + ".box_hi")) {
    a.box = std::pair{m.get_double(prefix + ".box_lo", 0.0), m.get_double(prefix + ".box_hi", 1.0)};
  }
  return a;
}

inline std::vector<LrDrop> parse_lr_drops(const std::string& s) {
  std::vector<LrDrop> out;
  std::size_t start = 0;
  while (start < s.size()) {
    auto end = s.find(',', start);
    if (end == std::string::npos) end = s.size();
    const auto item = detail::trim(std::string_view(s).substr(start, end - start));
    const auto colon = item.find(':');
    LrDrop d;
    if (colon == std::string_view::npos || !detail::parse_index(item.substr(0, colon), d.epoch) ||
        !detail::parse_double(item.substr(colon + 1), d.factor)) {
      throw Error(Errc::ConfigError, "train.lr_drops entries must look like epoch:factor");
    }
    out.push_back(d);
    start = end + 1;
  }
  return out;
}

inline BetaParams beta_from_config(const ConfigMap& m) {
  BetaParams b;
  b.a = m.get_double("beta.a", b.a);
  b.b = m.get_double("beta.b", b.b);
  b.shifted = m.get_bool("beta.shifted", b.shifted);
  return b;
}

inline TrainConfig train_from_config(const ConfigMap& m) {
  TrainConfig t;
  t.loss.kind = parse_loss_kind(m.get_string("train.loss", "CE"));
  t.loss.lambda_em = m.get_double("train.lambda_em", t.loss.lambda_em);
  t.loss.trades_beta = m.get_double("train.trades_beta", t.loss.trades_beta);
  t.loss.beta = beta_from_config(m);
  const auto arch = m.get_string("train.arch", "linear");
  if (arch == "linear") {
    t.arch = Arch::Linear;
  } else if (arch == "mlp") {
    t.arch = Arch::Mlp;
  } else {
    throw Error(Errc::ConfigError, "train.arch must be linear or mlp");
  }
  t.hidden = m.get_size("train.hidden", t.arch == Arch::Mlp ? 32 : 0);
  t.epochs = m.get_size("train.epochs", t.epochs);
  t.batch = m.get_size("train.batch", t.batch);
  t.lr = m.get_double("train.lr", t.lr);
  t.lr_drops = parse_lr_drops(m.get_string("train.lr_drops", ""));
  t.weight_decay = m.get_double("train.weight_decay", t.weight_decay);
  t.seed = m.get_u64("seed", 0);
  const auto at = m.get_string("train.attack", "none");
  if (at == "pgd") {
    t.attack = attack_from_config(m, "train.attack", AttackConfig{});
  } else if (at != "none") {
    throw Error(Errc::ConfigError, "train.attack must be none or pgd");
  }
  return t;
}

/// Builds an ExperimentConfig from flat keys. See README for the key list.
inline ExperimentConfig experiment_from_config(const ConfigMap& m) {
  ExperimentConfig c;
  const auto kind = m.get_string("data.kind", "synthetic");
  if (kind == "synthetic") {
    SyntheticGaussian g;
    g.K = m.get_size("data.K", g.K);
    g.d = m.get_size("data.d", g.d);
    g.per_class = m.get_size("data.per_class", g.per_class);
    g.spread = m.get_double("data.spread", g.spread);
    g.seed = m.get_u64("data.seed", g.seed);
    c.data = g;
  } else if (kind == "logits") {
    const auto path = m.get_string("data.path", "");
    if (path.empty()) throw Error(Errc::ConfigError, "data.path is required for data.kind = logits");
    c.data = LogitsSource{path};
  } else {
    throw Error(Errc::ConfigError, "data.kind must be synthetic or logits");
  }
  c.cal_fraction = m.get_double("split.cal", c.cal_fraction);
  c.test_fraction = m.get_double("split.test", c.test_fraction);
  c.alpha = m.get_double("alpha", c.alpha);
  c.train = train_from_config(m);
  const auto ea = m.get_string("eval_attack", "none");
  if (ea == "pgd") {
    AttackConfig def;
    def.steps = 100;
    c.eval_attack = attack_from_config(m, "eval_attack", def);
  } else if (ea != "none") {
    throw Error(Errc::ConfigError, "eval_attack must be none or pgd");
  }
  c.train_seeds = m.get_size("trials.train_seeds", c.train_seeds);
  c.split_repeats = m.get_size("trials.split_repeats", c.split_repeats);
  if (m.has("beta.a") || m.has("beta.b")) c.beta = beta_from_config(m);
  c.temperature_scaling = m.get_bool("temperature_scaling", c.temperature_scaling);
  c.emit_curve = m.get_bool("emit.curve", c.emit_curve);
  c.emit_bound = m.get_bool("emit.bound", c.emit_bound);
  c.seed = m.get_u64("seed", c.seed);
  c.method = m.get_string("method", "");
  c.output = m.get_string("output", "");
  return c;
}

}  // namespace cpur
