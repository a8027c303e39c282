// Command-line front end. Every subcommand reads an optional flat config file;
// command-line flags override config keys.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "cpur/cpur.hpp"

namespace {

using namespace cpur;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

ConfigMap load_config(const Common& c) {
  ConfigMap m = c.config.empty() ? ConfigMap{} : ConfigMap::load(c.config);
  if (c.seed) m.set("seed", std::to_string(*c.seed));
  return m;
}

void warn_unused(const ConfigMap& m) {
  for (const auto& k : m.unused_keys()) std::cerr << "warning: unused config key '" << k << "'\n";
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "flat key = value config file");
  sub->add_option("--seed", c.seed, "master seed (overrides the config key 'seed')");
}

std::string write_or_print(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    write_file_atomic(path, text);
  }
  return path;
}

double alpha_from(const ConfigMap& m, std::optional<double> flag) {
  const double a = flag ? *flag : m.get_double("alpha", 0.1);
  if (!(a > 0.0 && a < 1.0)) throw Error(Errc::AlphaOutOfRange, "alpha must lie in (0, 1)");
  return a;
}

/// Per-sample cross-entropy of stored probabilities.
std::vector<double> prob_ce(const LogitsFile& f) {
  std::vector<double> l(f.dists.size());
  for (std::size_t i = 0; i < l.size(); ++i) l[i] = -std::log(std::max(f.dists[i][f.labels[i]], 1e-300));
  return l;
}

LogitsFile checked_logits(const std::string& path, std::size_t K) {
  auto f = load_logits_csv(path);
  if (K != 0 && f.num_classes != K) throw Error(Errc::ShapeMismatch, path + ": class count differs from calibration");
  return f;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conformal prediction with uncertainty-reducing training"};
  app.require_subcommand(1);

  // gen-data
  Common gd_c;
  std::string gd_out;
  std::optional<std::size_t> gd_K, gd_d, gd_per;
  std::optional<double> gd_spread;
  auto* gd = app.add_subcommand("gen-data", "write a synthetic Gaussian data set as CSV");
  add_common(gd, gd_c);
  gd->add_option("--out", gd_out, "output CSV (stdout when omitted)");
  gd->add_option("--K", gd_K, "number of classes");
  gd->add_option("--d", gd_d, "feature dimension");
  gd->add_option("--per-class", gd_per, "samples per class");
  gd->add_option("--spread", gd_spread, "noise standard deviation");

  // train
  Common tr_c;
  std::string tr_data, tr_out;
  auto* tr = app.add_subcommand("train", "train a classifier and write a checkpoint");
  add_common(tr, tr_c);
  tr->add_option("--data", tr_data, "training data CSV")->required();
  tr->add_option("--out", tr_out, "checkpoint path")->required();

  // attack-eval
  Common ae_c;
  std::string ae_model, ae_data, ae_out;
  auto* ae = app.add_subcommand("attack-eval", "attack a data set and emit a probabilities CSV");
  add_common(ae, ae_c);
  ae->add_option("--model", ae_model, "checkpoint")->required();
  ae->add_option("--data", ae_data, "data CSV")->required();
  ae->add_option("--out", ae_out, "probabilities CSV for the attacked inputs");

  // calibrate
  Common ca_c;
  std::string ca_cal, ca_test, ca_out;
  std::optional<double> ca_alpha;
  auto* ca = app.add_subcommand("calibrate", "calibrate on a probabilities CSV and optionally evaluate");
  add_common(ca, ca_c);
  ca->add_option("--cal", ca_cal, "calibration probabilities CSV")->required();
  ca->add_option("--test", ca_test, "test probabilities CSV");
  ca->add_option("--alpha", ca_alpha, "miscoverage level");
  ca->add_option("--out", ca_out, "JSON output (stdout when omitted)");

  // curve
  Common cu_c;
  std::string cu_cal, cu_test, cu_out;
  std::optional<double> cu_alpha;
  std::size_t cu_points = 200;
  auto* cu = app.add_subcommand("curve", "coverage and set size over a threshold-scale grid");
  add_common(cu, cu_c);
  cu->add_option("--cal", cu_cal, "calibration probabilities CSV")->required();
  cu->add_option("--test", cu_test, "test probabilities CSV")->required();
  cu->add_option("--alpha", cu_alpha, "miscoverage level");
  cu->add_option("--points", cu_points, "grid points");
  cu->add_option("--out", cu_out, "CSV output (stdout when omitted)");

  // theory-check
  Common th_c;
  std::string th_cal, th_test, th_out;
  std::optional<double> th_alpha;
  auto* th = app.add_subcommand("theory-check", "estimate the set-size bound and its assumptions");
  add_common(th, th_c);
  th->add_option("--cal", th_cal, "calibration probabilities CSV")->required();
  th->add_option("--test", th_test, "evaluation probabilities CSV")->required();
  th->add_option("--alpha", th_alpha, "miscoverage level");
  th->add_option("--out", th_out, "JSON output (stdout when omitted)");

  // experiment
  Common ex_c;
  std::string ex_out;
  auto* ex = app.add_subcommand("experiment", "run the train / calibrate / evaluate protocol");
  add_common(ex, ex_c);
  ex->add_option("--out", ex_out, "output prefix for .json and .csv (overrides 'output')");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gd) {
      auto m = load_config(gd_c);
      const auto K = gd_K.value_or(m.get_size("data.K", 10));
      const auto d = gd_d.value_or(m.get_size("data.d", 20));
      const auto per = gd_per.value_or(m.get_size("data.per_class", 600));
      const auto spread = gd_spread.value_or(m.get_double("data.spread", 1.0));
      const auto seed = m.get_u64("data.seed", m.get_u64("seed", 0));
      warn_unused(m);
      write_or_print(gd_out, format_dataset_csv(gen_synthetic(K, d, per, spread, seed)));
    } else if (*tr) {
      auto m = load_config(tr_c);
      const auto cfg = train_from_config(m);
      warn_unused(m);
      const auto data = load_dataset_csv(tr_data);
      const auto model = train(data, cfg);
      save_checkpoint(model, std::filesystem::path(tr_out));
      const auto z = model.logits(data.features);
      std::cerr << "train accuracy " << format_double(detail::top1_accuracy(z, data.labels)) << "\n";
    } else if (*ae) {
      auto m = load_config(ae_c);
      AttackConfig def;
      def.steps = 100;
      const auto cfg = attack_from_config(m, "eval_attack", def);
      const auto seed = m.get_u64("seed", 0);
      warn_unused(m);
      const auto model = load_checkpoint(std::filesystem::path(ae_model));
      const auto data = load_dataset_csv(ae_data);
      const auto adv = model.logits(attack_all(model, data, cfg, seed));
      const auto clean = model.logits(data.features);
      std::cerr << "clean accuracy " << format_double(detail::top1_accuracy(clean, data.labels)) << "\n"
                << "robust accuracy " << format_double(detail::top1_accuracy(adv, data.labels)) << "\n";
      std::vector<ProbDist> dists;
      for (std::size_t i = 0; i < adv.rows(); ++i) dists.push_back(dist_from_logits(adv.row(i)));
      write_or_print(ae_out, format_logits_csv(dists, data.labels));
    } else if (*ca) {
      auto m = load_config(ca_c);
      const double alpha = alpha_from(m, ca_alpha);
      const auto seed = m.get_u64("seed", 0);
      warn_unused(m);
      const auto cal_f = load_logits_csv(ca_cal);
      const auto cal = calibrate(cal_f.dists, cal_f.labels, alpha, derive_seed(seed, 2));
      nlohmann::json j{{"alpha", alpha}, {"tau_hat", cal.tau_hat}, {"n_cal", cal.scores.size()}};
      if (!ca_test.empty()) {
        const auto test = checked_logits(ca_test, cal_f.num_classes);
        const auto met = evaluate(predict_sets(test.dists, cal, derive_seed(seed, 3)), test.labels, test.num_classes);
        j["coverage"] = met.coverage;
        j["pss"] = met.pss;
        j["npss"] = met.npss;
        j["n_test"] = test.dists.size();
      }
      write_or_print(ca_out, j.dump(2) + "\n");
    } else if (*cu) {
      auto m = load_config(cu_c);
      const double alpha = alpha_from(m, cu_alpha);
      const auto seed = m.get_u64("seed", 0);
      warn_unused(m);
      const auto cal_f = load_logits_csv(cu_cal);
      const auto test = checked_logits(cu_test, cal_f.num_classes);
      const auto cal = calibrate(cal_f.dists, cal_f.labels, alpha, derive_seed(seed, 2));
      const auto curve = cp_curve(test.dists, test.labels, cal, derive_seed(seed, 4), 0.9, 1.1, cu_points);
      write_or_print(cu_out, format_curve_csv(curve));
    } else if (*th) {
      auto m = load_config(th_c);
      const double alpha = alpha_from(m, th_alpha);
      const auto seed = m.get_u64("seed", 0);
      const auto beta = beta_from_config(m);
      warn_unused(m);
      const auto cal_f = load_logits_csv(th_cal);
      const auto test = checked_logits(th_test, cal_f.num_classes);
      const auto cal = calibrate(cal_f.dists, cal_f.labels, alpha, derive_seed(seed, 2));
      const auto report = check_bound(test.dists, test.labels, prob_ce(test), cal, beta, derive_seed(seed, 5));
      write_or_print(th_out, to_json(report).dump(2) + "\n");
    } else if (*ex) {
      auto m = load_config(ex_c);
      auto cfg = experiment_from_config(m);
      warn_unused(m);
      if (!ex_out.empty()) cfg.output = ex_out;
      const auto res = run_experiment(cfg);
      if (cfg.output.empty()) {
        std::cout << to_json(res).dump(2) << "\n";
      } else {
        write_results(res, cfg.output);
      }
      std::cerr << "coverage " << format_double(res.coverage.mean) << " pss " << format_double(res.pss.mean) << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error [" << errc_name(e.code()) << "]: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error [Io]: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
