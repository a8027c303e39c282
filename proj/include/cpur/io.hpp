#pragma once

#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpur/conformal.hpp"
#include "cpur/dataset.hpp"
#include "cpur/error.hpp"
#include "cpur/simplex.hpp"
#include "cpur/theory.hpp"

namespace cpur {

/// Writes `contents` to a sibling temp file, then renames over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(Errc::Io, "cannot open " + tmp.string());
    os << contents;
    if (!os) throw Error(Errc::Io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(Errc::Io, "rename to " + path.string() + ": " + ec.message());
}

/// Shortest decimal form that round-trips to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline bool parse_double(std::string_view s, double& out) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && !s.empty();
}

inline bool parse_index(std::string_view s, std::size_t& out) {
  s = trim(s);
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && !s.empty();
}

inline std::string line_error(std::size_t line_no, const std::string& what) {
  return "line " + std::to_string(line_no) + ": " + what;
}

}  // namespace detail

struct LogitsFile {
  std::vector<ProbDist> dists;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
};

/// Parses the header "p0,...,p{K-1},label" followed by one row per sample.
/// Rows are renormalized onto the simplex.
inline LogitsFile parse_logits_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw Error(Errc::ParseError, detail::line_error(1, "missing header"));
  const auto header = detail::split_csv_line(detail::trim(line));
  if (header.size() < 3 || detail::trim(header.back()) != "label") {
    throw Error(Errc::ParseError, detail::line_error(1, "header must be p0,...,p{K-1},label"));
  }
  LogitsFile out;
  out.num_classes = header.size() - 1;
  for (std::size_t k = 0; k < out.num_classes; ++k) {
    if (detail::trim(header[k]) != "p" + std::to_string(k)) {
      throw Error(Errc::ParseError, detail::line_error(1, "expected column p" + std::to_string(k)));
    }
  }
  std::size_t line_no = 1;
  std::vector<double> row(out.num_classes);
  while (std::getline(is, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != out.num_classes + 1) {
      throw Error(Errc::ParseError, detail::line_error(line_no, "expected " + std::to_string(out.num_classes + 1) +
                                                                      " fields, got " + std::to_string(cells.size())));
    }
    for (std::size_t k = 0; k < out.num_classes; ++k) {
      if (!detail::parse_double(cells[k], row[k]) || !std::isfinite(row[k]) || row[k] < 0.0) {
        throw Error(Errc::ParseError, detail::line_error(line_no, "bad probability '" + std::string(cells[k]) + "'"));
      }
    }
    std::size_t label = 0;
    if (!detail::parse_index(cells.back(), label)) {
      throw Error(Errc::ParseError, detail::line_error(line_no, "bad label '" + std::string(cells.back()) + "'"));
    }
    if (label >= out.num_classes) {
      throw Error(Errc::LabelOutOfRange, detail::line_error(line_no, "label " + std::to_string(label)));
    }
    try {
      out.dists.push_back(make_prob_dist(row));
    } catch (const Error& e) {
      throw Error(Errc::ParseError, detail::line_error(line_no, e.what()));
    }
    out.labels.push_back(label);
  }
  return out;
}

inline LogitsFile load_logits_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(Errc::Io, "cannot open " + path.string());
  return parse_logits_csv(is);
}

inline std::string format_logits_csv(std::span<const ProbDist> dists, std::span<const std::size_t> labels) {
  if (dists.size() != labels.size()) throw Error(Errc::LengthMismatch, "dists vs labels");
  const std::size_t K = dists.empty() ? 0 : dists.front().num_classes();
  std::string out;
  for (std::size_t k = 0; k < K; ++k) out += "p" + std::to_string(k) + ",";
  out += "label\n";
  for (std::size_t i = 0; i < dists.size(); ++i) {
    for (double p : dists[i].probs()) out += format_double(p) + ",";
    out += std::to_string(labels[i]) + "\n";
  }
  return out;
}

inline void emit_logits_csv(const std::filesystem::path& path, std::span<const ProbDist> dists,
                            std::span<const std::size_t> labels) {
  write_file_atomic(path, format_logits_csv(dists, labels));
}

// Dataset CSV: "# classes=K" comment line, header "x0,...,x{d-1},label", rows.

inline std::string format_dataset_csv(const LabeledSet& data) {
  std::string out = "# classes=" + std::to_string(data.num_classes) + "\n";
  for (std::size_t j = 0; j < data.dim(); ++j) out += "x" + std::to_string(j) + ",";
  out += "label\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (double v : data.features.row(i)) out += format_double(v) + ",";
    out += std::to_string(data.labels[i]) + "\n";
  }
  return out;
}

inline LabeledSet parse_dataset_csv(std::istream& is) {
  std::string line;
  std::size_t line_no = 0;
  LabeledSet out;
  if (!std::getline(is, line)) throw Error(Errc::ParseError, detail::line_error(1, "empty dataset file"));
  ++line_no;
  constexpr std::string_view kPrefix = "# classes=";
  if (line.rfind(kPrefix, 0) != 0 || !detail::parse_index(std::string_view(line).substr(kPrefix.size()), out.num_classes)) {
    throw Error(Errc::ParseError, detail::line_error(1, "expected '# classes=K'"));
  }
  if (!std::getline(is, line)) throw Error(Errc::ParseError, detail::line_error(2, "missing header"));
  ++line_no;
  const auto header = detail::split_csv_line(detail::trim(line));
  if (header.size() < 2 || detail::trim(header.back()) != "label") {
    throw Error(Errc::ParseError, detail::line_error(line_no, "header must be x0,...,x{d-1},label"));
  }
  const std::size_t d = header.size() - 1;
  out.features = Matrix(0, d);
  std::vector<double> row(d);
  while (std::getline(is, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != d + 1) throw Error(Errc::ParseError, detail::line_error(line_no, "wrong field count"));
    for (std::size_t j = 0; j < d; ++j) {
      if (!detail::parse_double(cells[j], row[j]) || !std::isfinite(row[j])) {
        throw Error(Errc::ParseError, detail::line_error(line_no, "bad feature '" + std::string(cells[j]) + "'"));
      }
    }
    std::size_t label = 0;
    if (!detail::parse_index(cells.back(), label)) throw Error(Errc::ParseError, detail::line_error(line_no, "bad label"));
    if (label >= out.num_classes) throw Error(Errc::LabelOutOfRange, detail::line_error(line_no, "label out of range"));
    out.features.push_row(row);
    out.labels.push_back(label);
  }
  out.validate();
  return out;
}

inline LabeledSet load_dataset_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(Errc::Io, "cannot open " + path.string());
  return parse_dataset_csv(is);
}

inline std::string format_curve_csv(const CpCurve& curve) {
  std::string out = "scale,coverage,pss\n";
  for (const auto& p : curve.points) {
    out += format_double(p.scale) + "," + format_double(p.coverage) + "," + format_double(p.pss) + "\n";
  }
  return out;
}

// JSON

inline nlohmann::json finite_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const BoundReport& r) {
  nlohmann::json j;
  j["K"] = r.K;
  j["alpha"] = r.alpha;
  j["tau"] = r.tau;
  j["n"] = r.n;
  j["n_cal"] = r.n_cal;
  j["a"] = r.a;
  j["b"] = r.b;
  j["p_k"] = r.p_k;
  j["lbar_k"] = r.lbar_k;
  auto h = nlohmann::json::array();
  for (const auto& v : r.H_k) h.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
  j["H_k"] = h;
  j["H_denominators"] = r.H_denominators;
  j["K_star"] = r.K_star;
  j["gamma"] = finite_or_null(r.gamma);
  j["xi"] = finite_or_null(r.xi);
  auto s = nlohmann::json::array();
  for (double v : r.sigma_k) s.push_back(finite_or_null(v));
  j["sigma_k"] = s;
  j["L_beta"] = finite_or_null(r.L_beta);
  j["partial_rank_sum"] = r.partial_rank_sum;
  j["partial_rank_sum_no_const"] = r.partial_rank_sum_no_const;
  j["expected_pss"] = r.expected_pss;
  j["monotone_H"] = r.monotone_H;
  j["assumptions_hold"] = r.assumptions_hold;
  j["set_size_holds"] = r.set_size_holds;
  j["per_rank_holds"] = r.per_rank_holds;
  j["bound_checked"] = r.bound_checked;
  j["bound_holds"] = r.bound_holds;
  j["gamma_ratio"] = r.gamma_ratio;
  return j;
}

inline nlohmann::json to_json(const CpCurve& c) {
  auto arr = nlohmann::json::array();
  for (const auto& p : c.points) arr.push_back({{"scale", p.scale}, {"coverage", p.coverage}, {"pss", p.pss}});
  return arr;
}

/// Flat "key = value" configuration. '#' starts a comment; blank lines are
/// ignored. Later assignments override earlier ones.
class ConfigMap {
 public:
  static ConfigMap parse(std::istream& is) {
    ConfigMap cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto t = detail::trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string_view::npos) {
        throw Error(Errc::ConfigError, detail::line_error(line_no, "expected key = value"));
      }
      const auto key = detail::trim(t.substr(0, eq));
      if (key.empty()) throw Error(Errc::ConfigError, detail::line_error(line_no, "empty key"));
      cfg.set(std::string(key), std::string(detail::trim(t.substr(eq + 1))));
    }
    return cfg;
  }

  static ConfigMap load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw Error(Errc::Io, "cannot open config " + path.string());
    return parse(is);
  }

  void set(std::string key, std::string value) { values_[std::move(key)] = std::move(value); }
  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    used_.insert(key);
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    const auto s = get_string(key, "");
    if (s.empty()) return fallback;
    double v = 0.0;
    if (!detail::parse_double(s, v)) throw Error(Errc::ConfigError, key + ": not a number '" + s + "'");
    return v;
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    const auto s = get_string(key, "");
    if (s.empty()) return fallback;
    std::size_t v = 0;
    if (!detail::parse_index(s, v)) throw Error(Errc::ConfigError, key + ": not a non-negative integer '" + s + "'");
    return v;
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    return static_cast<std::uint64_t>(get_size(key, static_cast<std::size_t>(fallback)));
  }

  bool get_bool(const std::string& key, bool fallback) const {
    const auto s = get_string(key, "");
    if (s.empty()) return fallback;
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw Error(Errc::ConfigError, key + ": not a boolean '" + s + "'");
  }

  /// Keys present in the file that no getter asked for.
  std::vector<std::string> unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_) {
      if (!used_.count(k)) out.push_back(k);
    }
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

}  // namespace cpur
