#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "popcluster/common.hpp"
#include "popcluster/dataset.hpp"
#include "popcluster/diagnostics.hpp"
#include "popcluster/gmm.hpp"

namespace popcluster::config {

// Flat `key = value` text format, UTF-8, one pair per line. `#` starts a
// comment, keys are dotted (section.key), values are trimmed verbatim.
// Grammar and the full key list are documented in docs/FORMATS.md.

namespace detail {

inline std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace detail

/// Parsed key/value file preserving first-appearance order. Lookups mark
/// keys as consumed so unknown keys can be rejected after extraction.
class ConfigMap {
public:
  static ConfigMap parse_text(const std::string& text, const std::string& origin = "<config>") {
    ConfigMap out;
    out.origin_ = origin;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto trimmed = detail::trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw ValidationError(origin + ":" + std::to_string(line_no) +
                              ": expected `key = value`, got \"" + trimmed + "\"");
      const auto key = detail::trim(trimmed.substr(0, eq));
      const auto value = detail::trim(trimmed.substr(eq + 1));
      if (key.empty())
        throw ValidationError(origin + ":" + std::to_string(line_no) + ": empty key");
      if (out.index_.count(key))
        throw ValidationError(origin + ":" + std::to_string(line_no) + ": duplicate key " + key);
      out.index_[key] = out.entries_.size();
      out.entries_.push_back({key, value});
    }
    return out;
  }

  static ConfigMap parse_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open config " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_text(buf.str(), path);
  }

  bool has(const std::string& key) const { return index_.count(key) > 0; }

  std::optional<std::string> get(const std::string& key) const {
    const auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    consumed_.insert(key);
    return entries_[it->second].second;
  }

  std::string require(const std::string& key) const {
    const auto v = get(key);
    if (!v) throw ValidationError(origin_ + ": missing required key " + key);
    return *v;
  }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    return get(key).value_or(fallback);
  }

  double get_double(const std::string& key, double fallback) const {
    const auto v = get(key);
    if (!v) return fallback;
    double out;
    if (!csv::parse_double(*v, out))
      throw ValidationError(origin_ + ": key " + key + " is not a number: " + *v);
    return out;
  }

  std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    const double v = get_double(key, static_cast<double>(fallback));
    const auto out = static_cast<std::int64_t>(v);
    if (static_cast<double>(out) != v)
      throw ValidationError(origin_ + ": key " + key + " must be an integer");
    return out;
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    const auto v = get(key);
    if (!v) return fallback;
    try {
      std::size_t pos = 0;
      const auto out = std::stoull(*v, &pos);
      if (pos != v->size()) throw std::invalid_argument("");
      return out;
    } catch (...) {
      throw ValidationError(origin_ + ": key " + key + " is not an unsigned integer: " + *v);
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    const auto v = get(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "false" || *v == "0" || *v == "no") return false;
    throw ValidationError(origin_ + ": key " + key + " must be a boolean, got " + *v);
  }

  /// Integer list: `1,2,3` or range form `lo:hi:step`.
  std::vector<Index> get_index_list(const std::string& key, std::vector<Index> fallback) const {
    const auto v = get(key);
    if (!v) return fallback;
    std::vector<Index> out;
    if (v->find(':') != std::string::npos) {
      Index lo = 0, hi = 0, step = 0;
      if (std::sscanf(v->c_str(), "%td:%td:%td", &lo, &hi, &step) != 3 || step <= 0 || hi < lo)
        throw ValidationError(origin_ + ": key " + key + " range must be lo:hi:step, got " + *v);
      for (Index x = lo; x <= hi; x += step) out.push_back(x);
      return out;
    }
    std::istringstream in(*v);
    std::string item;
    while (std::getline(in, item, ',')) {
      double d;
      if (!csv::parse_double(detail::trim(item), d) || d != std::floor(d))
        throw ValidationError(origin_ + ": key " + key + " has a non-integer entry: " + item);
      out.push_back(static_cast<Index>(d));
    }
    if (out.empty()) throw ValidationError(origin_ + ": key " + key + " is empty");
    return out;
  }

  /// Keys with the given prefix, in file order, deduplicated by the segment
  /// right after the prefix. Used to discover subject./ratings./masks. groups.
  std::vector<std::string> group_names(const std::string& prefix) const {
    std::vector<std::string> names;
    for (const auto& [key, value] : entries_) {
      if (key.rfind(prefix, 0) != 0) continue;
      const auto rest = key.substr(prefix.size());
      const auto dot = rest.find('.');
      const auto name = dot == std::string::npos ? rest : rest.substr(0, dot);
      if (name.empty()) continue;
      if (std::find(names.begin(), names.end(), name) == names.end()) names.push_back(name);
    }
    return names;
  }

  /// Keys never touched by get()/require(); nonempty means a typo somewhere.
  std::vector<std::string> unconsumed() const {
    std::vector<std::string> out;
    for (const auto& [key, value] : entries_)
      if (!consumed_.count(key)) out.push_back(key);
    return out;
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
  const std::string& origin() const { return origin_; }

private:
  std::string origin_;
  std::vector<std::pair<std::string, std::string>> entries_;
  std::map<std::string, std::size_t> index_;
  mutable std::set<std::string> consumed_;
};

enum class SharedDMode { per_subject, max_over_subjects };

struct SubjectConfig {
  std::string id;
  std::string matrix_path;
};

struct RatingsConfig {
  std::string name;
  std::string path;
  dataset::ColumnKind kind = dataset::ColumnKind::continuous;
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
};

struct MaskConfig {
  std::string name;
  std::string path;  // CSV with a feature_index column
};

struct RunConfig {
  std::vector<SubjectConfig> subjects;
  std::vector<RatingsConfig> ratings;
  std::vector<MaskConfig> masks;

  double pca_variance_threshold = 0.95;
  SharedDMode shared_d_mode = SharedDMode::per_subject;

  int sweep_k_min = 1;
  int sweep_k_max = 30;
  int sweep_n_init = 100;

  int stability_n_refit = 10;

  gmm::GmmOptions gmm_opts;
  double interpret_variance_floor = 1e-8;

  bool diagnostics_enabled = false;
  diagnostics::DiagnosticsConfig diagnostics_cfg;

  std::uint64_t seed = 0;
  std::string output_dir;
  int threads = 0;  // 0 = hardware concurrency; POPCLUSTER_THREADS overrides

  ConfigMap raw;  // echoed into reports
};

/// Extracts and validates a RunConfig. Path existence is only enforced when
/// `check_paths` (stage commands validate their own artifact inputs).
inline RunConfig load_run_config(const ConfigMap& map, bool check_paths = true) {
  RunConfig cfg;
  cfg.raw = map;

  cfg.seed = map.get_u64("seed", 0);
  if (!map.has("seed"))
    throw ValidationError(map.origin() + ": seed is mandatory (no wall-clock seeding)");
  cfg.output_dir = map.get_string("output_dir", "");
  cfg.threads = static_cast<int>(map.get_int("threads", 0));

  for (const auto& id : map.group_names("subject.")) {
    SubjectConfig s;
    s.id = id;
    s.matrix_path = map.require("subject." + id + ".matrix");
    cfg.subjects.push_back(std::move(s));
  }
  if (cfg.subjects.empty())
    throw ValidationError(map.origin() + ": at least one subject.<id>.matrix is required");

  for (const auto& name : map.group_names("ratings.")) {
    RatingsConfig r;
    r.name = name;
    r.path = map.require("ratings." + name + ".path");
    const auto kind = map.get_string("ratings." + name + ".kind", "continuous");
    if (kind == "continuous") {
      r.kind = dataset::ColumnKind::continuous;
    } else if (kind == "discrete") {
      r.kind = dataset::ColumnKind::discrete;
    } else {
      throw ValidationError(map.origin() + ": ratings." + name +
                            ".kind must be continuous or discrete, got " + kind);
    }
    if (const auto range = map.get("ratings." + name + ".range")) {
      double lo, hi;
      if (std::sscanf(range->c_str(), "%lf,%lf", &lo, &hi) != 2 || hi < lo)
        throw ValidationError(map.origin() + ": ratings." + name + ".range must be `lo,hi`");
      r.lo = lo;
      r.hi = hi;
    }
    cfg.ratings.push_back(std::move(r));
  }

  for (const auto& name : map.group_names("masks.")) {
    cfg.masks.push_back({name, map.require("masks." + name + ".path")});
  }

  cfg.pca_variance_threshold = map.get_double("pca.variance_threshold", 0.95);
  if (!(cfg.pca_variance_threshold > 0.0 && cfg.pca_variance_threshold <= 1.0))
    throw ValidationError(map.origin() + ": pca.variance_threshold must lie in (0, 1]");
  const auto mode = map.get_string("pca.shared_d_mode", "per-subject");
  if (mode == "per-subject") {
    cfg.shared_d_mode = SharedDMode::per_subject;
  } else if (mode == "max-over-subjects") {
    cfg.shared_d_mode = SharedDMode::max_over_subjects;
  } else {
    throw ValidationError(map.origin() +
                          ": pca.shared_d_mode must be per-subject or max-over-subjects");
  }

  cfg.sweep_k_min = static_cast<int>(map.get_int("sweep.k_min", 1));
  cfg.sweep_k_max = static_cast<int>(map.get_int("sweep.k_max", 30));
  cfg.sweep_n_init = static_cast<int>(map.get_int("sweep.n_init", 100));
  if (cfg.sweep_k_min < 1)
    throw ValidationError(map.origin() + ": sweep.k_min must be >= 1 (K=0 is not a mixture)");
  if (cfg.sweep_k_max < cfg.sweep_k_min)
    throw ValidationError(map.origin() + ": sweep.k_max must be >= sweep.k_min");
  if (cfg.sweep_n_init < 1) throw ValidationError(map.origin() + ": sweep.n_init must be >= 1");

  cfg.stability_n_refit = static_cast<int>(map.get_int("stability.n_refit", 10));
  if (cfg.stability_n_refit < 2)
    throw ValidationError(map.origin() + ": stability.n_refit must be >= 2");

  cfg.gmm_opts.max_iter = static_cast<int>(map.get_int("gmm.max_iter", 200));
  cfg.gmm_opts.tol = map.get_double("gmm.tol", 1e-4);
  cfg.gmm_opts.reg_covar = map.get_double("gmm.reg_covar", 1e-6);
  if (cfg.gmm_opts.max_iter < 1 || cfg.gmm_opts.tol <= 0.0 || cfg.gmm_opts.reg_covar < 0.0)
    throw ValidationError(map.origin() + ": invalid gmm options");

  cfg.interpret_variance_floor = map.get_double("interpret.variance_floor", 1e-8);

  cfg.diagnostics_enabled = map.get_bool("diagnostics.enabled", false);
  cfg.diagnostics_cfg.sample_sizes =
      map.get_index_list("diagnostics.sample_sizes", {200, 500, 1000, 1500, 2000});
  cfg.diagnostics_cfg.n_iter = static_cast<int>(map.get_int("diagnostics.n_iter", 10));
  cfg.diagnostics_cfg.top_vectors = static_cast<int>(map.get_int("diagnostics.top_vectors", 5));
  cfg.diagnostics_cfg.test_n = map.get_int("diagnostics.test_n", 220);
  cfg.diagnostics_cfg.train_sizes = map.get_index_list(
      "diagnostics.train_sizes", diagnostics::DiagnosticsConfig::default_train_sizes());

  const auto unknown = map.unconsumed();
  if (!unknown.empty())
    throw ValidationError(map.origin() + ": unknown config key " + unknown.front());

  if (check_paths) {
    for (const auto& s : cfg.subjects)
      if (!std::filesystem::exists(s.matrix_path))
        throw ValidationError("subject " + s.id + ": matrix file not found: " + s.matrix_path);
    for (const auto& r : cfg.ratings)
      if (!std::filesystem::exists(r.path))
        throw ValidationError("ratings " + r.name + ": file not found: " + r.path);
    for (const auto& m : cfg.masks)
      if (!std::filesystem::exists(m.path))
        throw ValidationError("mask " + m.name + ": file not found: " + m.path);
  }
  return cfg;
}

inline RunConfig load_run_config_file(const std::string& path, bool check_paths = true) {
  return load_run_config(ConfigMap::parse_file(path), check_paths);
}

}  // namespace popcluster::config
