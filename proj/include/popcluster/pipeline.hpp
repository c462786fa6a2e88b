#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "popcluster/common.hpp"
#include "popcluster/config.hpp"
#include "popcluster/csv.hpp"
#include "popcluster/dataset.hpp"
#include "popcluster/diagnostics.hpp"
#include "popcluster/gmm.hpp"
#include "popcluster/interpret.hpp"
#include "popcluster/pca.hpp"
#include "popcluster/selection.hpp"
#include "popcluster/serialize.hpp"
#include "popcluster/synth.hpp"

namespace popcluster::pipeline {

constexpr const char* kVersion = "0.1.0";

namespace fs = std::filesystem;
using serialize::ordered_json;

/// Per-subject seed: run seed mixed with an FNV-1a hash of the subject id.
/// Documented in docs/FORMATS.md; all per-subject randomness hangs off this.
inline std::uint64_t subject_seed(std::uint64_t run_seed, const std::string& subject_id) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const unsigned char c : subject_id) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return derive_seed(run_seed, h);
}

inline std::uint64_t diagnostics_seed(std::uint64_t run_seed, const std::string& subject_id) {
  return derive_seed(subject_seed(run_seed, subject_id), 0x44696167ull);  // "Diag"
}

struct Layout {
  fs::path out;

  explicit Layout(const std::string& output_dir) : out(output_dir) {
    if (output_dir.empty()) throw ValidationError("output_dir is required");
  }

  fs::path subject_dir(const std::string& id) const { return out / id; }
  fs::path pca_model(const std::string& id) const { return subject_dir(id) / "pca.pcm1"; }
  fs::path pca_spectrum(const std::string& id) const { return subject_dir(id) / "pca_spectrum.csv"; }
  fs::path sweep_dir(const std::string& id) const { return subject_dir(id) / "sweep"; }
  fs::path bic_curve(const std::string& id) const { return sweep_dir(id) / "bic_curve.csv"; }
  fs::path sweep_summary(const std::string& id) const { return sweep_dir(id) / "summary.json"; }
  fs::path fit_json(const std::string& id) const { return subject_dir(id) / "fit.json"; }
  fs::path labels_csv(const std::string& id) const { return subject_dir(id) / "labels.csv"; }
  fs::path stability_csv(const std::string& id) const { return subject_dir(id) / "stability.csv"; }
  fs::path diagnostics_dir(const std::string& id) const { return subject_dir(id) / "diagnostics"; }
  fs::path interpret_dir() const { return out / "interpret"; }
  fs::path report() const { return out / "report.json"; }
  fs::path quarantine() const { return out / "quarantine"; }
};

namespace detail {

inline void require_artifact(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path))
    throw ValidationError("missing upstream artifact: " + path.string() + " (run `popcluster " +
                          producer + "` first)");
}

/// Moves a partially written directory under <output>/quarantine before the
/// failure propagates.
inline void quarantine_dir(const Layout& layout, const fs::path& dir) {
  std::error_code ec;
  if (!fs::exists(dir, ec)) return;
  fs::create_directories(layout.quarantine(), ec);
  const auto target = layout.quarantine() / dir.filename();
  fs::remove_all(target, ec);
  fs::rename(dir, target, ec);
  if (ec) fs::remove_all(dir, ec);  // last resort: do not leave partial outputs in place
}

template <typename Fn>
void run_subject_stage(const Layout& layout, const std::string& stage, const std::string& subject,
                       std::uint64_t seed, Fn&& body) {
  try {
    body();
  } catch (const ValidationError& e) {
    quarantine_dir(layout, layout.subject_dir(subject));
    throw ValidationError("stage " + stage + ", subject " + subject + ", seed " +
                          std::to_string(seed) + ": " + e.what());
  } catch (const std::exception& e) {
    quarantine_dir(layout, layout.subject_dir(subject));
    throw ComputeError("stage " + stage + ", subject " + subject + ", seed " +
                       std::to_string(seed) + ": " + e.what());
  }
}

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// PCA stage
// ---------------------------------------------------------------------------

struct PcaSubjectSummary {
  Index n_trials = 0;
  Index n_features = 0;
  Index d95 = 0;            // smallest D at the variance threshold
  bool reached = true;      // threshold attainable within min(N-1, M)
  Index d_used = 0;         // after the shared-D rule
  double variance_explained = 0.0;
};

/// Fits (and saves) one PCA per subject. In max-over-subjects mode every
/// subject gets D = max of the per-subject smallest-D-at-threshold, the only
/// rule that guarantees the threshold for everyone.
inline std::map<std::string, PcaSubjectSummary> run_pca_stage(const config::RunConfig& cfg,
                                                              const Layout& layout) {
  std::map<std::string, PcaSubjectSummary> summaries;
  std::map<std::string, Vector> spectra;
  std::map<std::string, double> totals;

  for (const auto& s : cfg.subjects) {
    detail::run_subject_stage(layout, "pca", s.id, subject_seed(cfg.seed, s.id), [&] {
      const auto m = dataset::load_matrix(s.matrix_path);
      if (cfg.sweep_k_max >= m.n_trials())
        throw ValidationError("sweep.k_max " + std::to_string(cfg.sweep_k_max) +
                              " must be below the trial count " + std::to_string(m.n_trials()));
      PcaSubjectSummary summary;
      summary.n_trials = m.n_trials();
      summary.n_features = m.n_features();
      double total = 0.0;
      const Vector spectrum = pca::variance_spectrum(m.values, &total);
      const auto sel = pca::select_components(spectrum / total, cfg.pca_variance_threshold);
      summary.d95 = sel.d;
      summary.reached = sel.reached;
      spectra[s.id] = spectrum;
      totals[s.id] = total;
      summaries[s.id] = summary;
    });
  }

  Index shared_d = 0;
  for (const auto& [id, summary] : summaries) shared_d = std::max(shared_d, summary.d95);

  for (const auto& s : cfg.subjects) {
    detail::run_subject_stage(layout, "pca", s.id, subject_seed(cfg.seed, s.id), [&] {
      auto& summary = summaries[s.id];
      const Index d = cfg.shared_d_mode == config::SharedDMode::max_over_subjects
                          ? std::min(shared_d, std::min(summary.n_trials - 1, summary.n_features))
                          : summary.d95;
      const auto m = dataset::load_matrix(s.matrix_path);
      const auto model = pca::fit(m.values, d);
      summary.d_used = d;
      summary.variance_explained = model.variance_ratio.sum();

      fs::create_directories(layout.subject_dir(s.id));
      pca::save_model(model, layout.pca_model(s.id).string());

      const Vector& spectrum = spectra[s.id];
      csv::Writer w(layout.pca_spectrum(s.id).string(),
                    {"rank", "eigenvalue", "variance_ratio", "cumulative_ratio"});
      double cum = 0.0;
      for (Index i = 0; i < spectrum.size(); ++i) {
        const double ratio = spectrum(i) / totals[s.id];
        cum += ratio;
        w.row({std::to_string(i + 1), format_double(spectrum(i)), format_double(ratio),
               format_double(cum)});
      }
    });
  }
  return summaries;
}

// ---------------------------------------------------------------------------
// Sweep stage
// ---------------------------------------------------------------------------

struct SweepSubjectSummary {
  int chosen_k = 0;
  std::uint64_t final_seed = 0;  // best-BIC init at chosen_k; used by the fit stage
  std::vector<int> k_grid;
  std::vector<double> mean_bic;
};

inline Matrix load_embedding(const config::RunConfig& cfg, const Layout& layout,
                             const std::string& subject_id, const std::string& matrix_path,
                             dataset::TrialMatrix* matrix_out = nullptr) {
  detail::require_artifact(layout.pca_model(subject_id), "sweep");
  const auto model = pca::load_model(layout.pca_model(subject_id).string());
  auto m = dataset::load_matrix(matrix_path);
  Matrix y = pca::transform(model, m.values);
  if (matrix_out) *matrix_out = std::move(m);
  (void)cfg;
  return y;
}

inline std::map<std::string, SweepSubjectSummary> run_sweep_stage(const config::RunConfig& cfg,
                                                                  const Layout& layout) {
  std::map<std::string, SweepSubjectSummary> summaries;
  const int threads = resolve_threads(cfg.threads);
  for (const auto& s : cfg.subjects) {
    const std::uint64_t seed = subject_seed(cfg.seed, s.id);
    detail::run_subject_stage(layout, "sweep", s.id, seed, [&] {
      const Matrix y = load_embedding(cfg, layout, s.id, s.matrix_path);
      const auto sweep = selection::bic_sweep(y, cfg.sweep_k_min, cfg.sweep_k_max,
                                              cfg.sweep_n_init, seed, cfg.gmm_opts, threads);

      fs::create_directories(layout.sweep_dir(s.id));
      csv::Writer w(layout.bic_curve(s.id).string(),
                    {"k", "init", "seed", "bic", "loglik", "converged"});
      for (std::size_t ki = 0; ki < sweep.k_grid.size(); ++ki)
        for (std::size_t i = 0; i < sweep.per_k[ki].size(); ++i) {
          const auto& e = sweep.per_k[ki][i];
          w.row({std::to_string(sweep.k_grid[ki]), std::to_string(i), std::to_string(e.seed),
                 format_double(e.bic), format_double(e.log_likelihood), e.converged ? "1" : "0"});
        }

      SweepSubjectSummary summary;
      summary.chosen_k = sweep.chosen_k;
      summary.k_grid = sweep.k_grid;
      summary.mean_bic = sweep.mean_bic;
      // Final-fit seed: the best-BIC init at the chosen K (lowest init wins ties).
      const auto ki = static_cast<std::size_t>(sweep.chosen_k - cfg.sweep_k_min);
      const auto& entries = sweep.per_k[ki];
      std::size_t best = 0;
      for (std::size_t i = 1; i < entries.size(); ++i)
        if (entries[i].bic < entries[best].bic) best = i;
      summary.final_seed = entries[best].seed;

      ordered_json j;
      j["chosen_k"] = summary.chosen_k;
      j["final_seed"] = summary.final_seed;
      j["n_init"] = cfg.sweep_n_init;
      j["k_grid"] = summary.k_grid;
      j["mean_bic"] = summary.mean_bic;
      serialize::write_json(j, layout.sweep_summary(s.id).string());
      summaries[s.id] = std::move(summary);
    });
  }
  return summaries;
}

inline SweepSubjectSummary load_sweep_summary(const Layout& layout, const std::string& subject_id) {
  detail::require_artifact(layout.sweep_summary(subject_id), "sweep");
  const auto j = serialize::read_json(layout.sweep_summary(subject_id).string());
  SweepSubjectSummary summary;
  summary.chosen_k = j.at("chosen_k").get<int>();
  summary.final_seed = j.at("final_seed").get<std::uint64_t>();
  summary.k_grid = j.at("k_grid").get<std::vector<int>>();
  summary.mean_bic = j.at("mean_bic").get<std::vector<double>>();
  return summary;
}

// ---------------------------------------------------------------------------
// Fit stage
// ---------------------------------------------------------------------------

struct FitSubjectSummary {
  int k = 0;
  double log_likelihood = 0.0;
  bool converged = false;
  int n_iter = 0;
  std::vector<Index> cluster_sizes;
};

inline std::map<std::string, FitSubjectSummary> run_fit_stage(const config::RunConfig& cfg,
                                                              const Layout& layout) {
  std::map<std::string, FitSubjectSummary> summaries;
  for (const auto& s : cfg.subjects) {
    const std::uint64_t seed = subject_seed(cfg.seed, s.id);
    detail::run_subject_stage(layout, "fit", s.id, seed, [&] {
      const auto sweep = load_sweep_summary(layout, s.id);
      dataset::TrialMatrix m;
      const Matrix y = load_embedding(cfg, layout, s.id, s.matrix_path, &m);
      const auto fit = gmm::em_fit(y, sweep.chosen_k, sweep.final_seed, cfg.gmm_opts);
      const auto post = gmm::responsibilities(fit.params, y);
      const auto labels = gmm::hard_assign(post);

      serialize::write_json(serialize::gmm_fit_to_json(fit), layout.fit_json(s.id).string());
      csv::Writer w(layout.labels_csv(s.id).string(),
                    {"trial_id", "label", "max_responsibility"});
      for (Index i = 0; i < y.rows(); ++i)
        w.row({m.trial_ids[static_cast<std::size_t>(i)],
               std::to_string(labels[static_cast<std::size_t>(i)]),
               format_double(post.resp.row(i).maxCoeff())});

      FitSubjectSummary summary;
      summary.k = fit.params.k;
      summary.log_likelihood = fit.log_likelihood;
      summary.converged = fit.converged;
      summary.n_iter = fit.n_iter;
      summary.cluster_sizes.assign(static_cast<std::size_t>(fit.params.k), 0);
      for (const int l : labels) ++summary.cluster_sizes[static_cast<std::size_t>(l)];
      summaries[s.id] = std::move(summary);
    });
  }
  return summaries;
}

// ---------------------------------------------------------------------------
// Stability stage
// ---------------------------------------------------------------------------

struct StabilitySubjectSummary {
  double mean_rand = 0.0;
  double mean_adjusted_rand = 0.0;
};

inline std::map<std::string, StabilitySubjectSummary> run_stability_stage(
    const config::RunConfig& cfg, const Layout& layout) {
  std::map<std::string, StabilitySubjectSummary> summaries;
  const int threads = resolve_threads(cfg.threads);
  for (const auto& s : cfg.subjects) {
    const std::uint64_t seed = subject_seed(cfg.seed, s.id);
    detail::run_subject_stage(layout, "stability", s.id, seed, [&] {
      const auto sweep = load_sweep_summary(layout, s.id);
      const Matrix y = load_embedding(cfg, layout, s.id, s.matrix_path);
      const auto seeds = selection::stability_seeds(seed, cfg.stability_n_refit);
      const auto st = selection::stability(y, sweep.chosen_k, cfg.stability_n_refit, seeds,
                                           cfg.gmm_opts, threads);

      csv::Writer w(layout.stability_csv(s.id).string(),
                    {"refit_a", "refit_b", "seed_a", "seed_b", "rand_index",
                     "adjusted_rand_index"});
      for (int i = 0; i < cfg.stability_n_refit; ++i)
        for (int j = i + 1; j < cfg.stability_n_refit; ++j)
          w.row({std::to_string(i), std::to_string(j), std::to_string(seeds[static_cast<std::size_t>(i)]),
                 std::to_string(seeds[static_cast<std::size_t>(j)]),
                 format_double(st.rand_matrix(i, j)),
                 format_double(selection::adjusted_rand_index(
                     st.labelings[static_cast<std::size_t>(i)],
                     st.labelings[static_cast<std::size_t>(j)]))});
      summaries[s.id] = {st.mean_rand, st.mean_adjusted_rand};
    });
  }
  return summaries;
}

// ---------------------------------------------------------------------------
// Interpret stage
// ---------------------------------------------------------------------------

struct RatingsSummary {
  std::string name;
  std::string kind;
  double mean_nmi = 0.0;
  double sd_nmi = 0.0;
  Index n_values = 0;
  Index dropped_trials = 0;  // matrix trials without ratings, summed over subjects
};

struct CosineSummary {
  double within_mean = 0.0;
  double between_mean = 0.0;
  Index undefined = 0;
  std::map<std::string, Index> count_above;  // thresholds 0.2/0.4/0.6/0.8
};

struct OverlapSummary {
  double across_mean = 0.0;
  double across_sd = 0.0;
  std::map<std::string, Index> count_above;  // thresholds 20/40/60/80
};

struct InterpretSummary {
  OverlapSummary overlap;
  std::vector<RatingsSummary> ratings;
  CosineSummary cosine_whole;
  std::map<std::string, CosineSummary> cosine_masked;
};

namespace detail {

inline std::vector<Index> load_feature_mask(const std::string& path) {
  const auto rows = csv::read_file(path);
  if (rows.empty() || rows.front().empty() || rows.front()[0] != "feature_index")
    throw ValidationError(path + ": mask file must have a feature_index header");
  std::vector<Index> mask;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    double v;
    if (rows[r].empty() || !csv::parse_double(rows[r][0], v) || v != std::floor(v) || v < 0)
      throw ValidationError(path + ": bad feature index at row " + std::to_string(r));
    mask.push_back(static_cast<Index>(v));
  }
  if (mask.empty()) throw ValidationError(path + ": empty mask");
  return mask;
}

inline CosineSummary summarize_cosine(const interpret::CosineResult& result) {
  CosineSummary s;
  s.within_mean = result.within_mean;
  s.between_mean = result.between_mean;
  s.undefined = result.undefined_count;
  for (const double t : {0.2, 0.4, 0.6, 0.8}) {
    Index count = 0;
    for (Index i = 0; i < result.values.rows(); ++i)
      for (Index j = i + 1; j < result.values.cols(); ++j)
        if (std::isfinite(result.values(i, j)) && result.values(i, j) > t) ++count;
    s.count_above[format_double(t)] = count;
  }
  return s;
}

inline void write_pair_matrix_csv(const std::string& path,
                                  const std::vector<interpret::ClusterRef>& index,
                                  const Matrix& values, const std::string& value_column) {
  csv::Writer w(path, {"subject_a", "cluster_a", "subject_b", "cluster_b", value_column});
  for (Index i = 0; i < values.rows(); ++i)
    for (Index j = i + 1; j < values.cols(); ++j)
      w.row({index[static_cast<std::size_t>(i)].subject_id,
             std::to_string(index[static_cast<std::size_t>(i)].cluster),
             index[static_cast<std::size_t>(j)].subject_id,
             std::to_string(index[static_cast<std::size_t>(j)].cluster),
             format_double(values(i, j))});
}

}  // namespace detail

inline InterpretSummary run_interpret_stage(const config::RunConfig& cfg, const Layout& layout) {
  InterpretSummary summary;
  try {
    // Reload every subject's artifacts; the posterior is recomputed from the
    // saved parameters, which reproduces the fit stage bit for bit.
    std::vector<interpret::Clustering> clusterings;
    std::vector<gmm::GmmFit> fits;
    std::vector<pca::PcaModel> pcas;
    std::vector<std::string> subject_ids;
    std::vector<dataset::TrialMatrix> matrices;
    for (const auto& s : cfg.subjects) {
      detail::require_artifact(layout.fit_json(s.id), "fit");
      detail::require_artifact(layout.pca_model(s.id), "sweep");
      auto fit = serialize::gmm_fit_from_json(serialize::read_json(layout.fit_json(s.id).string()));
      auto model = pca::load_model(layout.pca_model(s.id).string());
      auto m = dataset::load_matrix(s.matrix_path);
      const Matrix y = pca::transform(model, m.values);
      clusterings.push_back(interpret::make_clustering(s.id, fit.params, y, m.trial_ids));
      fits.push_back(std::move(fit));
      pcas.push_back(std::move(model));
      subject_ids.push_back(s.id);
      matrices.push_back(std::move(m));
    }

    fs::create_directories(layout.interpret_dir());

    // --- trial overlap ---
    const auto overlap = interpret::overlap_matrix(clusterings);
    detail::write_pair_matrix_csv((layout.interpret_dir() / "overlap_matrix.csv").string(),
                                  overlap.index, overlap.values, "percent_overlap");
    summary.overlap.across_mean = overlap.across_mean;
    summary.overlap.across_sd = overlap.across_sd;
    for (const double t : {20.0, 40.0, 60.0, 80.0})
      summary.overlap.count_above[format_double(t)] = overlap.count_above(t);

    // --- ratings: NMI, KL, label distributions ---
    std::optional<csv::Writer> label_writer;
    std::optional<csv::Writer> never_top_writer;
    std::optional<csv::Writer> value_writer;
    for (const auto& rc : cfg.ratings) {
      const dataset::ColumnSpec fallback{rc.kind, rc.lo, rc.hi};
      const auto table = dataset::load_ratings_csv(rc.path, {}, fallback);

      RatingsSummary rs;
      rs.name = rc.name;
      rs.kind = rc.kind == dataset::ColumnKind::continuous ? "continuous" : "discrete";
      double nmi_sum = 0.0, nmi_sq = 0.0;

      csv::Writer nmi_writer((layout.interpret_dir() / ("nmi_" + rc.name + ".csv")).string(),
                             {"subject", "column", "kind", "nmi", "nmi_cluster_entropy",
                              "clipped"});
      std::optional<csv::Writer> kl_writer;
      if (rc.kind == dataset::ColumnKind::continuous)
        kl_writer.emplace((layout.interpret_dir() / ("kl_" + rc.name + ".csv")).string(),
                          std::vector<std::string>{"subject", "column", "cluster", "kl",
                                                   "cluster_size"});

      for (std::size_t si = 0; si < clusterings.size(); ++si) {
        const auto& clustering = clusterings[si];
        const auto aligned = dataset::align(matrices[si], table);
        rs.dropped_trials += static_cast<Index>(aligned.dropped_from_matrix.size());
        if (!aligned.dropped_from_matrix.empty())
          std::cerr << "warning: ratings " << rc.name << ": subject " << clustering.subject_id
                    << ": dropped " << aligned.dropped_from_matrix.size()
                    << " unrated trials\n";

        // Labels for the aligned trial order.
        std::unordered_map<std::string, int> label_of;
        for (std::size_t i = 0; i < clustering.trial_ids.size(); ++i)
          label_of[clustering.trial_ids[i]] = clustering.labels[i];
        std::vector<int> labels;
        labels.reserve(aligned.matrix.trial_ids.size());
        for (const auto& id : aligned.matrix.trial_ids) labels.push_back(label_of.at(id));

        for (Index col = 0; col < aligned.ratings.n_columns(); ++col) {
          const auto& col_name = aligned.ratings.column_names[static_cast<std::size_t>(col)];
          double nmi = 0.0, nmi_hy = 0.0;
          bool clipped = false;
          if (rc.kind == dataset::ColumnKind::continuous) {
            const auto detail_result = interpret::gaussian_nmi_detail(
                aligned.ratings.values.col(col), labels, clustering.k,
                cfg.interpret_variance_floor);
            nmi = detail_result.nmi;
            nmi_hy = detail_result.nmi;  // the Gaussian path normalizes by H(Y)
            clipped = detail_result.clipped;
            for (int c = 0; c < clustering.k; ++c)
              kl_writer->row({clustering.subject_id, col_name, std::to_string(c),
                              format_double(detail_result.cluster_kl[static_cast<std::size_t>(c)]),
                              std::to_string(detail_result.cluster_size[static_cast<std::size_t>(c)])});
          } else {
            std::vector<int> values(labels.size());
            for (std::size_t i = 0; i < labels.size(); ++i)
              values[i] = static_cast<int>(aligned.ratings.values(static_cast<Index>(i), col));
            nmi = interpret::discrete_nmi(values, labels,
                                          interpret::NmiNormalization::arithmetic_mean);
            nmi_hy = interpret::discrete_nmi(values, labels,
                                             interpret::NmiNormalization::cluster_entropy);
          }
          nmi_writer.row({clustering.subject_id, col_name, rs.kind, format_double(nmi),
                          format_double(nmi_hy), clipped ? "1" : "0"});
          nmi_sum += nmi;
          nmi_sq += nmi * nmi;
          ++rs.n_values;
        }

        // Qualitative views: argmax labels for continuous tables, raw value
        // histograms for discrete ones.
        if (rc.kind == dataset::ColumnKind::continuous) {
          interpret::Clustering aligned_clustering;
          aligned_clustering.subject_id = clustering.subject_id;
          aligned_clustering.k = clustering.k;
          aligned_clustering.labels = labels;
          aligned_clustering.trial_ids = aligned.matrix.trial_ids;
          const auto dist = interpret::top_label_distribution(aligned.ratings, aligned_clustering);
          if (!label_writer)
            label_writer.emplace((layout.interpret_dir() / "label_distribution.csv").string(),
                                 std::vector<std::string>{"ratings", "subject", "cluster", "label",
                                                          "count"});
          for (Index c = 0; c < dist.counts.rows(); ++c)
            for (Index l = 0; l < dist.counts.cols(); ++l)
              label_writer->row({rc.name, clustering.subject_id, std::to_string(c),
                                 dist.column_names[static_cast<std::size_t>(l)],
                                 format_double(dist.counts(c, l))});
          if (!never_top_writer)
            never_top_writer.emplace(
                (layout.interpret_dir() / "never_top_labels.csv").string(),
                std::vector<std::string>{"ratings", "subject", "label"});
          for (const auto& name : dist.never_top)
            never_top_writer->row({rc.name, clustering.subject_id, name});
        } else {
          if (!value_writer)
            value_writer.emplace((layout.interpret_dir() / "design_distribution.csv").string(),
                                 std::vector<std::string>{"ratings", "subject", "column", "value",
                                                          "cluster", "count"});
          for (Index col = 0; col < aligned.ratings.n_columns(); ++col) {
            std::map<std::pair<int, int>, Index> counts;  // (value, cluster) -> n
            for (std::size_t i = 0; i < labels.size(); ++i)
              ++counts[{static_cast<int>(aligned.ratings.values(static_cast<Index>(i), col)),
                        labels[i]}];
            for (const auto& [key, count] : counts)
              value_writer->row({rc.name, clustering.subject_id,
                                 aligned.ratings.column_names[static_cast<std::size_t>(col)],
                                 std::to_string(key.first), std::to_string(key.second),
                                 std::to_string(count)});
          }
        }
      }

      if (rs.n_values > 0) {
        rs.mean_nmi = nmi_sum / static_cast<double>(rs.n_values);
        if (rs.n_values > 1) {
          const double var = (nmi_sq - nmi_sum * nmi_sum / static_cast<double>(rs.n_values)) /
                             static_cast<double>(rs.n_values - 1);
          rs.sd_nmi = std::sqrt(std::max(var, 0.0));
        }
      }
      summary.ratings.push_back(std::move(rs));
    }

    // --- cosine similarity of back-projected cluster means ---
    const auto cosine = interpret::cluster_means_cosine(fits, pcas, subject_ids);
    detail::write_pair_matrix_csv((layout.interpret_dir() / "cosine_means.csv").string(),
                                  cosine.index, cosine.values, "cosine");
    summary.cosine_whole = detail::summarize_cosine(cosine);
    for (const auto& mc : cfg.masks) {
      const auto mask = detail::load_feature_mask(mc.path);
      const auto masked = interpret::cluster_means_cosine(fits, pcas, subject_ids, &mask);
      detail::write_pair_matrix_csv(
          (layout.interpret_dir() / ("cosine_means_" + mc.name + ".csv")).string(), masked.index,
          masked.values, "cosine");
      summary.cosine_masked[mc.name] = detail::summarize_cosine(masked);
    }
  } catch (const ValidationError& e) {
    detail::quarantine_dir(layout, layout.interpret_dir());
    throw ValidationError(std::string("stage interpret: ") + e.what());
  } catch (const std::exception& e) {
    detail::quarantine_dir(layout, layout.interpret_dir());
    throw ComputeError(std::string("stage interpret: ") + e.what());
  }
  return summary;
}

// ---------------------------------------------------------------------------
// Diagnostics stage
// ---------------------------------------------------------------------------

inline void run_diagnostics_stage(const config::RunConfig& cfg, const Layout& layout) {
  if (!cfg.diagnostics_enabled) return;
  for (const auto& s : cfg.subjects) {
    const std::uint64_t seed = diagnostics_seed(cfg.seed, s.id);
    detail::run_subject_stage(layout, "diagnose", s.id, seed, [&] {
      const auto m = dataset::load_matrix(s.matrix_path);
      auto cfg_d = cfg.diagnostics_cfg;
      cfg_d.seed = seed;

      // Sizes beyond the data are dropped with a warning rather than failing
      // the run; the stock grids assume paper-scale trial counts.
      std::vector<Index> sizes;
      for (const Index n : cfg_d.sample_sizes)
        if (n <= m.n_trials()) sizes.push_back(n);
        else std::cerr << "warning: diagnostics: subject " << s.id << ": dropping sample size "
                       << n << " > N = " << m.n_trials() << "\n";
      if (sizes.empty()) throw ValidationError("diagnostics: no usable sample sizes");
      cfg_d.sample_sizes = sizes;

      std::vector<Index> train;
      for (const Index n : cfg_d.train_grid())
        if (n + cfg_d.test_n <= m.n_trials()) train.push_back(n);
        else std::cerr << "warning: diagnostics: subject " << s.id << ": dropping train size "
                       << n << " (train + test_n exceeds N = " << m.n_trials() << ")\n";
      if (train.empty()) throw ValidationError("diagnostics: no usable train sizes");
      cfg_d.train_sizes = train;

      fs::create_directories(layout.diagnostics_dir(s.id));

      const auto scree = diagnostics::eigenvalue_spread(m, cfg_d);
      {
        csv::Writer w((layout.diagnostics_dir(s.id) / "scree.csv").string(),
                      {"sample_size", "rank", "eigenvalue"});
        for (std::size_t si = 0; si < scree.sample_sizes.size(); ++si)
          for (Index r = 0; r < scree.eigenvalues[si].size(); ++r)
            w.row({std::to_string(scree.sample_sizes[si]), std::to_string(r + 1),
                   format_double(scree.eigenvalues[si](r))});
      }

      const auto consistency = diagnostics::eigenvector_consistency(m, cfg_d);
      {
        csv::Writer w((layout.diagnostics_dir(s.id) / "eigvec_consistency.csv").string(),
                      {"sample_size", "iter_a", "vec_a", "iter_b", "vec_b", "abs_cosine"});
        for (std::size_t si = 0; si < consistency.sample_sizes.size(); ++si) {
          const auto& mat = consistency.abs_cosine[si];
          for (int ia = 0; ia < consistency.n_iter; ++ia)
            for (int va = 0; va < consistency.top_vectors; ++va)
              for (int ib = 0; ib < consistency.n_iter; ++ib)
                for (int vb = 0; vb < consistency.top_vectors; ++vb)
                  w.row({std::to_string(consistency.sample_sizes[si]), std::to_string(ia),
                         std::to_string(va + 1), std::to_string(ib), std::to_string(vb + 1),
                         format_double(mat(ia * consistency.top_vectors + va,
                                           ib * consistency.top_vectors + vb))});
        }
        csv::Writer w2((layout.diagnostics_dir(s.id) / "eigvec_first_across_sizes.csv").string(),
                       {"size_a", "size_b", "abs_cosine"});
        for (std::size_t a = 0; a < consistency.sample_sizes.size(); ++a)
          for (std::size_t b = 0; b < consistency.sample_sizes.size(); ++b)
            w2.row({std::to_string(consistency.sample_sizes[a]),
                    std::to_string(consistency.sample_sizes[b]),
                    format_double(consistency.first_component_across_sizes(
                        static_cast<Index>(a), static_cast<Index>(b)))});
      }

      const auto curve = diagnostics::reconstruction_loss_curve(
          m, cfg_d, diagnostics::DRule::at_threshold(cfg.pca_variance_threshold));
      {
        csv::Writer w((layout.diagnostics_dir(s.id) / "reconstruction_loss.csv").string(),
                      {"train_size", "d_used", "loss"});
        for (std::size_t i = 0; i < curve.train_sizes.size(); ++i)
          w.row({std::to_string(curve.train_sizes[i]), std::to_string(curve.d_used[i]),
                 format_double(curve.loss(static_cast<Index>(i)))});
      }
    });
  }
}

// ---------------------------------------------------------------------------
// Report + full pipeline
// ---------------------------------------------------------------------------

inline ordered_json build_report(const config::RunConfig& cfg,
                                 const std::map<std::string, PcaSubjectSummary>& pca_s,
                                 const std::map<std::string, SweepSubjectSummary>& sweep_s,
                                 const std::map<std::string, FitSubjectSummary>& fit_s,
                                 const std::map<std::string, StabilitySubjectSummary>& stab_s,
                                 const InterpretSummary& interp) {
  ordered_json report;
  report["artifact"] = {{"name", "popcluster"}, {"version", kVersion}};
  report["seed"] = cfg.seed;
  report["timestamp"] = detail::utc_timestamp();

  ordered_json echo = ordered_json::object();
  for (const auto& [key, value] : cfg.raw.entries()) echo[key] = value;
  report["config_echo"] = std::move(echo);

  ordered_json subjects = ordered_json::object();
  for (const auto& s : cfg.subjects) {
    ordered_json j;
    const auto& p = pca_s.at(s.id);
    j["n_trials"] = p.n_trials;
    j["n_features"] = p.n_features;
    j["pca"] = {{"d", p.d_used},
                {"d_at_threshold", p.d95},
                {"threshold_reached", p.reached},
                {"variance_explained", p.variance_explained},
                {"spectrum_csv", s.id + "/pca_spectrum.csv"}};
    const auto& sw = sweep_s.at(s.id);
    j["chosen_k"] = sw.chosen_k;
    j["bic_curve"] = s.id + "/sweep/bic_curve.csv";
    const auto& f = fit_s.at(s.id);
    j["fit"] = {{"log_likelihood", f.log_likelihood},
                {"converged", f.converged},
                {"n_iter", f.n_iter},
                {"seed", sw.final_seed}};
    j["cluster_sizes"] = f.cluster_sizes;
    const auto& st = stab_s.at(s.id);
    j["mean_rand"] = st.mean_rand;
    j["mean_adjusted_rand"] = st.mean_adjusted_rand;
    j["stability_csv"] = s.id + "/stability.csv";
    subjects[s.id] = std::move(j);
  }
  report["subjects"] = std::move(subjects);

  report["overlap"] = {{"across_mean", interp.overlap.across_mean},
                       {"across_sd", interp.overlap.across_sd},
                       {"count_above", interp.overlap.count_above},
                       {"csv", "interpret/overlap_matrix.csv"}};

  ordered_json nmi = ordered_json::object();
  for (const auto& r : interp.ratings) {
    nmi[r.name] = {{"kind", r.kind},
                   {"mean_nmi", r.mean_nmi},
                   {"sd_nmi", r.sd_nmi},
                   {"n_values", r.n_values},
                   {"dropped_trials", r.dropped_trials},
                   {"csv", "interpret/nmi_" + r.name + ".csv"}};
  }
  report["nmi"] = std::move(nmi);

  auto cosine_json = [](const CosineSummary& c) {
    return ordered_json{{"within_mean", c.within_mean},
                        {"between_mean", c.between_mean},
                        {"undefined", c.undefined},
                        {"count_above", c.count_above}};
  };
  report["cosine"] = {{"whole", cosine_json(interp.cosine_whole)},
                      {"csv", "interpret/cosine_means.csv"}};
  for (const auto& [name, c] : interp.cosine_masked)
    report["cosine"]["masks"][name] = cosine_json(c);

  if (cfg.diagnostics_enabled) {
    ordered_json diag = ordered_json::object();
    for (const auto& s : cfg.subjects)
      diag[s.id] = {{"scree", s.id + "/diagnostics/scree.csv"},
                    {"eigvec_consistency", s.id + "/diagnostics/eigvec_consistency.csv"},
                    {"reconstruction_loss", s.id + "/diagnostics/reconstruction_loss.csv"}};
    report["diagnostics"] = std::move(diag);
  }
  return report;
}

/// The whole pipeline: ingest -> PCA -> sweep -> fit -> stability ->
/// interpret -> diagnose -> report. Stages communicate through the output
/// directory, so stage subcommands compose to the same bytes.
inline ordered_json cmd_pipeline(const config::RunConfig& cfg) {
  Layout layout(cfg.output_dir);
  fs::create_directories(layout.out);

  const auto pca_s = run_pca_stage(cfg, layout);
  const auto sweep_s = run_sweep_stage(cfg, layout);
  const auto fit_s = run_fit_stage(cfg, layout);
  const auto stab_s = run_stability_stage(cfg, layout);
  const auto interp = run_interpret_stage(cfg, layout);
  run_diagnostics_stage(cfg, layout);

  const auto report = build_report(cfg, pca_s, sweep_s, fit_s, stab_s, interp);
  serialize::write_json(report, layout.report().string());
  return report;
}

}  // namespace popcluster::pipeline
