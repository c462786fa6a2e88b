// Acceptance suite: one line per criterion, nonzero exit if any fails.
// Each criterion is pinned to its stated tolerance; the oracles live in
// oracles.hpp and are independent of the library code paths.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "popcluster/popcluster.hpp"
#include "oracles.hpp"

using namespace popcluster;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int number, const std::string& name, bool pass, const std::string& detail) {
  std::printf("[%2d] %s %s: %s\n", number, pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct PipelineRun {
  int chosen_k = 0;
  double rand_vs_truth = 0.0;
};

/// PCA at the 95% rule, BIC sweep, final fit at the best-BIC seed of the
/// chosen K, hard assignment, Rand against the generator truth.
PipelineRun run_synth_pipeline(const synth::SynthSpec& spec, int k_min, int k_max, int n_init,
                               std::uint64_t base_seed, int threads) {
  const auto data = synth::generate(spec);
  double total = 0.0;
  const Vector spectrum = pca::variance_spectrum(data.x.values, &total);
  const Index d = pca::select_components(spectrum / total, 0.95).d;
  const auto model = pca::fit(data.x.values, d);
  const Matrix y = pca::transform(model, data.x.values);

  const auto sweep = selection::bic_sweep(y, k_min, k_max, n_init, base_seed, {}, threads);
  const auto ki = static_cast<std::size_t>(sweep.chosen_k - k_min);
  std::size_t best = 0;
  for (std::size_t i = 1; i < sweep.per_k[ki].size(); ++i)
    if (sweep.per_k[ki][i].bic < sweep.per_k[ki][best].bic) best = i;
  const auto fit = gmm::em_fit(y, sweep.chosen_k, sweep.per_k[ki][best].seed, {});
  const auto labels = gmm::hard_assign(gmm::responsibilities(fit.params, y));
  const auto oracle = synth::oracle_check(data, sweep.chosen_k, labels);
  return {sweep.chosen_k, oracle.rand_vs_truth};
}

void criterion_1_synthetic_recovery(int threads) {
  const auto t0 = std::chrono::steady_clock::now();
  synth::SynthSpec spec;
  spec.k_true = 3;
  spec.n = 600;
  spec.d_low = 5;
  spec.m = 200;
  spec.separation = 10.0;
  spec.within_sd = 1.0;
  spec.noise_sd = 0.1;

  int k_correct = 0;
  double min_rand = 1.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    spec.seed = seed;
    const auto run = run_synth_pipeline(spec, 1, 8, 20, derive_seed(seed, 0xACCE7Aull), threads);
    if (run.chosen_k == 3) {
      ++k_correct;
      min_rand = std::min(min_rand, run.rand_vs_truth);
    }
  }
  const double elapsed = seconds_since(t0);
  const bool pass = k_correct >= 19 && min_rand >= 0.99 && elapsed <= 300.0;
  std::ostringstream detail;
  detail << "chosen_k=3 in " << k_correct << "/20 runs, min rand-vs-truth " << min_rand << ", "
         << elapsed << "s (limit 300s)";
  report(1, "synthetic recovery", pass, detail.str());
}

void criterion_2_null_model(int threads) {
  synth::SynthSpec spec;
  spec.k_true = 1;
  spec.n = 600;
  spec.d_low = 5;
  spec.m = 200;
  spec.within_sd = 1.0;
  spec.noise_sd = 0.02;

  int k_one = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    spec.seed = seed;
    const auto run = run_synth_pipeline(spec, 1, 5, 20, derive_seed(seed, 0xBull), threads);
    if (run.chosen_k == 1) ++k_one;
  }
  report(2, "null model", k_one >= 19,
         "chosen_k=1 in " + std::to_string(k_one) + "/20 seeds (need >= 19)");
}

void criterion_3_em_monotonicity() {
  Rng meta(20260810);
  int fits = 0;
  int violations = 0;
  double worst = 0.0;
  while (fits < 1000) {
    const Index n = 30 + static_cast<Index>(meta.uniform_index(120));
    const Index d = 1 + static_cast<Index>(meta.uniform_index(4));
    const int k = 1 + static_cast<int>(meta.uniform_index(5));
    if (n <= k) continue;
    Matrix y(n, d);
    const double scale = 0.5 + 2.0 * meta.uniform();
    const double offset = meta.uniform() < 0.5 ? 4.0 : 0.0;  // half the sets are bimodal
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < d; ++j)
        y(i, j) = scale * meta.gauss() + (i % 2 == 0 ? offset : 0.0);
    const auto fit = gmm::em_fit(y, k, meta.next_u64());
    ++fits;
    for (std::size_t i = 1; i < fit.mean_ll_trace.size(); ++i) {
      const double drop = fit.mean_ll_trace[i - 1] - fit.mean_ll_trace[i];
      worst = std::max(worst, drop);
      if (drop > 1e-8) ++violations;
    }
  }
  std::ostringstream detail;
  detail << fits << " fits, " << violations << " trace decreases beyond 1e-8 (worst drop "
         << worst << ")";
  report(3, "EM monotonicity", violations == 0, detail.str());
}

void criterion_4_bic_closed_form() {
  Matrix y(100, 1);
  for (Index i = 0; i < 100; ++i) y(i, 0) = (i % 2 == 0) ? 1.0 : -1.0;  // MLE variance 1
  const auto fit = gmm::em_fit(y, 1, 0);
  const double bic = gmm::bic(fit, 100);
  const bool pass = std::abs(bic - 292.998) <= 0.01;
  report(4, "BIC closed form", pass,
         "K=1 D=1 N=100 var=1: BIC = " + format_double(bic) + " (expect 292.998 +- 0.01)");
}

void criterion_5_kl_oracle() {
  Rng rng(5150);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double mu1 = 5.0 * rng.gauss(), mu0 = 5.0 * rng.gauss();
    const double var1 = 0.1 + 4.0 * rng.uniform(), var0 = 0.1 + 4.0 * rng.uniform();
    const double closed = interpret::kl_gaussian_univariate(mu1, var1, mu0, var0);
    const double integrated = oracles::kl_gaussian_by_integration(mu1, var1, mu0, var0);
    worst = std::max(worst, std::abs(closed - integrated));
  }
  report(5, "KL oracle equivalence", worst <= 1e-4,
         "100 random pairs, worst |closed - quadrature| = " + format_double(worst) +
             " (limit 1e-4)");
}

void criterion_6_nmi_calibration() {
  Rng rng(606);
  const Index n = 2000;
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (auto& v : labels) v = static_cast<int>(rng.uniform_index(5));

  Vector independent(n);
  for (Index i = 0; i < n; ++i) independent(i) = 30.0 + 7.0 * rng.gauss();
  const double nmi_indep = interpret::gaussian_nmi_detail(independent, labels, 5).nmi;

  std::vector<int> two(static_cast<std::size_t>(n));
  Vector indicator(n);
  for (Index i = 0; i < n; ++i) {
    two[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_index(2));
    indicator(i) = static_cast<double>(two[static_cast<std::size_t>(i)]) + 0.005 * rng.gauss();
  }
  const double nmi_det = interpret::gaussian_nmi_detail(indicator, two, 2).nmi;

  // Affine invariance plus range checks over random cases.
  double worst_affine = 0.0;
  bool in_range = nmi_indep >= 0.0 && nmi_indep <= 1.0 && nmi_det >= 0.0 && nmi_det <= 1.0;
  for (int rep = 0; rep < 20; ++rep) {
    const Index m = 300;
    std::vector<int> l(static_cast<std::size_t>(m));
    Vector r(m);
    for (Index i = 0; i < m; ++i) {
      l[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_index(3));
      r(i) = 1.5 * l[static_cast<std::size_t>(i)] + rng.gauss();
    }
    const double base = interpret::gaussian_nmi_detail(r, l, 3).nmi;
    const double slope = 0.1 + 10.0 * rng.uniform();
    const double shift = 100.0 * rng.gauss();
    const Vector scaled = (r.array() * slope + shift).matrix();
    const double rescaled = interpret::gaussian_nmi_detail(scaled, l, 3).nmi;
    worst_affine = std::max(worst_affine, std::abs(base - rescaled));
    in_range = in_range && base >= 0.0 && base <= 1.0;
  }

  const bool pass = nmi_indep < 0.02 && nmi_det >= 0.9 && worst_affine <= 1e-8 && in_range;
  std::ostringstream detail;
  detail << "independent " << nmi_indep << " (< 0.02), indicator " << nmi_det
         << " (>= 0.9), worst affine drift " << worst_affine << " (<= 1e-8), range ok="
         << (in_range ? "yes" : "no");
  report(6, "NMI calibration", pass, detail.str());
}

void criterion_7_rand_overlap_oracles() {
  const std::vector<int> a{0, 0, 1, 1};
  const std::vector<int> singles{0, 1, 2, 3};
  const double rand4 = selection::rand_index(a, singles);
  const bool rand_exact = rand4 == 2.0 / 3.0;

  const double overlap = interpret::percent_overlap({"1", "2", "3"}, {"2", "3", "4"});
  const bool overlap_ok = std::abs(overlap - 66.67) <= 0.01;

  Rng rng(707);
  bool invariant = true;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 6 + rng.uniform_index(40);
    std::vector<int> x(n), y(n);
    for (auto& v : x) v = static_cast<int>(rng.uniform_index(4));
    for (auto& v : y) v = static_cast<int>(rng.uniform_index(4));
    const double base = selection::rand_index(x, y);
    std::vector<int> xp(n), yp(n);
    for (std::size_t i = 0; i < n; ++i) {
      xp[i] = 17 - 3 * x[i];  // injective relabelings
      yp[i] = 5 * y[i] + 2;
    }
    if (selection::rand_index(xp, yp) != base) invariant = false;
    if (std::abs(base - oracles::rand_index_bruteforce(x, y)) > 1e-12) invariant = false;

    // percent_overlap: invariant to element order of either set.
    std::vector<std::string> sa, sb;
    for (std::size_t i = 0; i < n; ++i) {
      if (rng.uniform() < 0.6) sa.push_back("t" + std::to_string(i));
      if (rng.uniform() < 0.6) sb.push_back("t" + std::to_string(i));
    }
    if (sa.empty() || sb.empty()) continue;
    const double o1 = interpret::percent_overlap(sa, sb);
    const auto perm_a = rng.permutation(static_cast<Index>(sa.size()));
    std::vector<std::string> shuffled;
    for (const auto idx : perm_a) shuffled.push_back(sa[static_cast<std::size_t>(idx)]);
    if (interpret::percent_overlap(shuffled, sb) != o1) invariant = false;
  }

  std::ostringstream detail;
  detail << "4-item rand = " << format_double(rand4) << " (exact 2/3: " << (rand_exact ? "yes" : "no")
         << "), overlap = " << format_double(overlap) << " (66.67 +- 0.01), permutation invariance "
         << (invariant ? "held" : "violated") << " over 100 cases";
  report(7, "Rand/overlap oracles", rand_exact && overlap_ok && invariant, detail.str());
}

void criterion_8_pca_contracts() {
  Rng rng(808);
  Matrix x(40, 25);
  for (Index i = 0; i < x.rows(); ++i)
    for (Index j = 0; j < x.cols(); ++j) x(i, j) = rng.gauss() * (1.0 + 0.1 * static_cast<double>(j));

  const auto model = pca::fit(x);
  const double ortho =
      (model.components * model.components.transpose() - Matrix::Identity(model.d, model.d))
          .cwiseAbs()
          .maxCoeff();

  const Matrix recon = pca::inverse_transform(model, pca::transform(model, x));
  const double full_rank_loss = (x - recon).squaredNorm() /
                                static_cast<double>(x.rows() * x.cols());

  Vector vr(4);
  vr << 0.6, 0.3, 0.08, 0.02;
  const auto sel = pca::select_components(vr, 0.95);

  const auto refit = pca::fit(x);
  const bool bit_exact = refit.mean == model.mean && refit.components == model.components &&
                         refit.eigenvalues == model.eigenvalues;

  const bool pass = ortho <= 1e-8 && full_rank_loss < 1e-10 && sel.d == 3 && bit_exact;
  std::ostringstream detail;
  detail << "orthonormality " << format_double(ortho) << " (<= 1e-8), full-rank loss "
         << format_double(full_rank_loss) << " (< 1e-10), select=" << sel.d
         << " (expect 3), refit bit-exact " << (bit_exact ? "yes" : "no");
  report(8, "PCA contracts", pass, detail.str());
}

void criterion_9_diagnostics() {
  // Rank-3 signal with mild noise, big enough for the 100..2000 train grid.
  synth::SynthSpec spec;
  spec.k_true = 3;
  spec.n = 2300;
  spec.d_low = 3;
  spec.m = 120;
  spec.separation = 8.0;
  spec.noise_sd = 0.05;
  spec.seed = 909;
  const auto rank3 = synth::generate(spec).x;

  diagnostics::DiagnosticsConfig cfg;
  cfg.sample_sizes = {200, 500, 1000, 1500, 2000};
  cfg.seed = 99;
  const auto scree = diagnostics::eigenvalue_spread(rank3, cfg);
  bool trailing_ok = true;
  for (const auto& ev : scree.eigenvalues)
    for (Index i = 3; i < ev.size(); ++i)
      if (!(ev(i) < 0.05 * ev(2))) trailing_ok = false;

  // Planted 1-D signal at SNR 10 for the eigenvector consistency check.
  synth::SynthSpec sig;
  sig.k_true = 1;
  sig.n = 2300;
  sig.d_low = 1;
  sig.m = 120;
  sig.within_sd = 10.0;
  sig.noise_sd = 1.0;
  sig.seed = 910;
  const auto planted = synth::generate(sig).x;
  diagnostics::DiagnosticsConfig ccfg;
  ccfg.sample_sizes = {2000};
  ccfg.n_iter = 10;
  ccfg.top_vectors = 1;
  ccfg.seed = 7;
  const auto consistency = diagnostics::eigenvector_consistency(planted, ccfg);
  double min_cos = 1.0;
  for (int i = 0; i < ccfg.n_iter; ++i)
    for (int j = i + 1; j < ccfg.n_iter; ++j)
      min_cos = std::min(min_cos, consistency.abs_cosine[0](i, j));

  diagnostics::DiagnosticsConfig rcfg;
  rcfg.test_n = 220;
  rcfg.train_sizes = diagnostics::DiagnosticsConfig::default_train_sizes();
  rcfg.seed = 17;
  const auto curve = diagnostics::reconstruction_loss_curve(rank3, rcfg,
                                                            diagnostics::DRule::fixed(3));
  int inversions = 0;
  bool inversion_small = true;
  for (Index i = 1; i < curve.loss.size(); ++i) {
    if (curve.loss(i) > curve.loss(i - 1)) {
      ++inversions;
      if (curve.loss(i) > 1.02 * curve.loss(i - 1)) inversion_small = false;
    }
  }
  const bool curve_ok = inversions <= 1 && inversion_small;

  const bool pass = trailing_ok && min_cos >= 0.99 && curve_ok;
  std::ostringstream detail;
  detail << "trailing eigenvalues < 5% of lambda3: " << (trailing_ok ? "yes" : "no")
         << ", min first-eigenvector |cos| at n=2000: " << format_double(min_cos)
         << " (>= 0.99), loss-curve inversions " << inversions << " (<= 1, each <= 2%: "
         << (inversion_small ? "yes" : "no") << ")";
  report(9, "diagnostics", pass, detail.str());
}

std::string read_file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void criterion_10_determinism_and_stress(int threads) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path base = fs::temp_directory_path() / "popcluster_acceptance";
  fs::remove_all(base);
  fs::create_directories(base);

  // (a) determinism on a two-subject run with ratings and diagnostics
  synth::SynthSpec spec;
  spec.k_true = 3;
  spec.n = 400;
  spec.d_low = 4;
  spec.m = 60;
  spec.separation = 10.0;
  spec.noise_sd = 0.05;
  std::ostringstream cfg_text;
  cfg_text << "seed = 77\noutput_dir = " << (base / "a").string() << "\n"
           << "threads = " << threads << "\n"
           << "sweep.k_min = 1\nsweep.k_max = 6\nsweep.n_init = 6\nstability.n_refit = 4\n"
           << "diagnostics.enabled = true\n"
           << "diagnostics.sample_sizes = 100,200,300\n"
           << "diagnostics.n_iter = 3\ndiagnostics.top_vectors = 3\n"
           << "diagnostics.test_n = 80\ndiagnostics.train_sizes = 100:300:100\n";
  for (int s = 0; s < 2; ++s) {
    spec.seed = 33 + static_cast<std::uint64_t>(s);
    const auto data = synth::generate(spec);
    const auto mpath = base / ("s" + std::to_string(s) + ".pcm1");
    dataset::save_matrix_binary(data.x, mpath.string());
    cfg_text << "subject.s0" << s + 1 << ".matrix = " << mpath.string() << "\n";
    if (s == 0) {
      std::ofstream ratings(base / "ratings.csv");
      ratings << "trial_id,alpha,beta\n";
      Rng rr(5);
      for (Index i = 0; i < spec.n; ++i)
        ratings << data.x.trial_ids[static_cast<std::size_t>(i)] << ","
                << format_double(10.0 * data.true_labels[static_cast<std::size_t>(i)] + rr.uniform())
                << "," << format_double(100.0 * rr.uniform()) << "\n";
    }
  }
  cfg_text << "ratings.scores.path = " << (base / "ratings.csv").string() << "\n"
           << "ratings.scores.range = 0,101\n";
  const auto cfg_path = base / "run.cfg";
  {
    std::ofstream out(cfg_path);
    out << cfg_text.str();
  }

  auto cfg = config::load_run_config_file(cfg_path.string());
  pipeline::cmd_pipeline(cfg);
  auto cfg2 = config::load_run_config_file(cfg_path.string());
  cfg2.output_dir = (base / "b").string();
  pipeline::cmd_pipeline(cfg2);

  bool identical = true;
  std::string first_diff;
  for (const auto& entry : fs::recursive_directory_iterator(base / "a")) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), base / "a");
    if (rel == "report.json") continue;
    if (read_file_bytes(entry.path()) != read_file_bytes(base / "b" / rel)) {
      identical = false;
      if (first_diff.empty()) first_diff = rel.string();
    }
  }
  auto ra = serialize::read_json((base / "a" / "report.json").string());
  auto rb = serialize::read_json((base / "b" / "report.json").string());
  ra.erase("timestamp");
  rb.erase("timestamp");
  const bool report_match = ra == rb;

  // (b) stress: 2196 x 5000, grid 1..15, 20 inits, within the wall budget
  synth::SynthSpec stress;
  stress.k_true = 3;
  stress.n = 2196;
  stress.d_low = 5;
  stress.m = 5000;
  stress.separation = 10.0;
  stress.noise_sd = 0.01;
  stress.seed = 424242;
  const auto stress_data = synth::generate(stress);
  const auto stress_path = base / "stress.pcm1";
  dataset::save_matrix_binary(stress_data.x, stress_path.string());
  {
    std::ofstream out(base / "stress.cfg");
    out << "seed = 99\noutput_dir = " << (base / "stress_out").string() << "\n"
        << "threads = " << threads << "\n"
        << "sweep.k_min = 1\nsweep.k_max = 15\nsweep.n_init = 20\nstability.n_refit = 10\n"
        << "subject.s01.matrix = " << stress_path.string() << "\n";
  }
  auto stress_cfg = config::load_run_config_file((base / "stress.cfg").string());
  const auto stress_report = pipeline::cmd_pipeline(stress_cfg);
  const int stress_k = stress_report.at("subjects").at("s01").at("chosen_k").get<int>();

  const double elapsed = seconds_since(t0);
  const bool pass = identical && report_match && elapsed <= 600.0;
  std::ostringstream detail;
  detail << "reruns byte-identical: " << (identical ? "yes" : (std::string("no (") + first_diff + ")"))
         << ", report identical modulo timestamp: " << (report_match ? "yes" : "no")
         << ", stress chosen_k=" << stress_k << ", total " << elapsed << "s (limit 600s)";
  report(10, "end-to-end determinism + stress", pass, detail.str());
  fs::remove_all(base);
}

}  // namespace

int main() {
  const int threads = resolve_threads(0);
  std::printf("acceptance suite (threads=%d)\n", threads);

  criterion_1_synthetic_recovery(threads);
  criterion_2_null_model(threads);
  criterion_3_em_monotonicity();
  criterion_4_bic_closed_form();
  criterion_5_kl_oracle();
  criterion_6_nmi_calibration();
  criterion_7_rand_overlap_oracles();
  criterion_8_pca_contracts();
  criterion_9_diagnostics();
  criterion_10_determinism_and_stress(threads);

  if (g_failures == 0) {
    std::printf("ACCEPTANCE: all 10 criteria passed\n");
    return 0;
  }
  std::printf("ACCEPTANCE: %d criteria FAILED\n", g_failures);
  return 1;
}
