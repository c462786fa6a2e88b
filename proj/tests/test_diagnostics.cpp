#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "popcluster/diagnostics.hpp"
#include "popcluster/synth.hpp"

using namespace popcluster;
using Catch::Approx;

namespace {

dataset::TrialMatrix rank3_data(Index n, Index m, std::uint64_t seed, double noise_sd = 0.0) {
  synth::SynthSpec spec;
  spec.k_true = 3;
  spec.n = n;
  spec.d_low = 3;
  spec.m = m;
  spec.separation = 6.0;
  spec.noise_sd = noise_sd;
  spec.seed = seed;
  return synth::generate(spec).x;
}

dataset::TrialMatrix isotropic_noise(Index n, Index m, std::uint64_t seed) {
  dataset::TrialMatrix x;
  Rng rng(seed);
  x.values.resize(n, m);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < m; ++j) x.values(i, j) = rng.gauss();
  for (Index i = 0; i < n; ++i) x.trial_ids.push_back("t" + std::to_string(i));
  return x;
}

}  // namespace

TEST_CASE("eigenvalue spread flags a rank-3 generator at every size") {
  const auto x = rank3_data(600, 80, 3, 0.01);
  diagnostics::DiagnosticsConfig cfg;
  cfg.sample_sizes = {100, 250, 500};
  cfg.seed = 7;
  const auto scree = diagnostics::eigenvalue_spread(x, cfg);
  REQUIRE(scree.eigenvalues.size() == 3);
  for (const auto& ev : scree.eigenvalues) {
    // Trailing eigenvalues sit near the noise floor relative to the rank.
    for (Index i = 3; i < ev.size(); ++i) CHECK(ev(i) < 0.05 * ev(2));
    // Scree curves are nonincreasing by construction.
    for (Index i = 1; i < ev.size(); ++i) CHECK(ev(i) <= ev(i - 1) + 1e-12);
  }
}

TEST_CASE("isotropic noise has no dominant eigenvalues") {
  const auto x = isotropic_noise(2000, 100, 5);
  diagnostics::DiagnosticsConfig cfg;
  cfg.sample_sizes = {2000};
  cfg.seed = 1;
  const auto scree = diagnostics::eigenvalue_spread(x, cfg);
  const auto& ev = scree.eigenvalues.front();
  const double median = ev(ev.size() / 2);
  CHECK(ev(0) / median < 3.0);
}

TEST_CASE("full-data subsample reproduces plain PCA eigenvalues") {
  const auto x = rank3_data(120, 40, 9, 0.05);
  diagnostics::DiagnosticsConfig cfg;
  cfg.sample_sizes = {120};
  cfg.seed = 2;
  const auto scree = diagnostics::eigenvalue_spread(x, cfg);
  const Vector direct = pca::variance_spectrum(x.values);
  CHECK((scree.eigenvalues.front() - direct).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("eigenvalue spread validates sizes") {
  const auto x = rank3_data(100, 20, 1, 0.05);
  diagnostics::DiagnosticsConfig cfg;
  cfg.sample_sizes = {101};
  CHECK_THROWS_AS(diagnostics::eigenvalue_spread(x, cfg), ValidationError);
}

TEST_CASE("eigenvector consistency on a strong planted signal") {
  // Strong 1-D signal (SNR ~ 10) buried in ambient noise.
  synth::SynthSpec spec;
  spec.k_true = 1;
  spec.n = 2200;
  spec.d_low = 1;
  spec.m = 50;
  spec.within_sd = 10.0;
  spec.noise_sd = 1.0;
  spec.seed = 31;
  const auto x = synth::generate(spec).x;

  diagnostics::DiagnosticsConfig cfg;
  cfg.sample_sizes = {200, 2000};
  cfg.n_iter = 4;
  cfg.top_vectors = 3;
  cfg.seed = 13;
  const auto result = diagnostics::eigenvector_consistency(x, cfg);
  REQUIRE(result.abs_cosine.size() == 2);
  // First eigenvector agrees across iterations at n = 2000.
  CHECK(result.mean_same_rank(1, 0) >= 0.99);
  // The across-size comparison has a unit diagonal and strong agreement.
  CHECK(result.first_component_across_sizes(0, 0) == Approx(1.0).margin(1e-10));
  CHECK(result.first_component_across_sizes(0, 1) >= 0.98);
}

TEST_CASE("repeated subsample gives |cos| exactly 1") {
  const auto x = rank3_data(150, 30, 17, 0.05);
  diagnostics::DiagnosticsConfig cfg;
  cfg.sample_sizes = {150};  // full data: every iteration uses the same rows
  cfg.n_iter = 2;
  cfg.top_vectors = 2;
  cfg.seed = 3;
  const auto result = diagnostics::eigenvector_consistency(x, cfg);
  CHECK(result.mean_same_rank(0, 0) == Approx(1.0).margin(1e-12));
  CHECK(result.mean_same_rank(0, 1) == Approx(1.0).margin(1e-12));
}

TEST_CASE("pure noise first eigenvector does not converge") {
  const auto x = isotropic_noise(400, 80, 23);
  diagnostics::DiagnosticsConfig cfg;
  cfg.sample_sizes = {350};
  cfg.n_iter = 4;
  cfg.top_vectors = 1;
  cfg.seed = 5;
  const auto result = diagnostics::eigenvector_consistency(x, cfg);
  CHECK(result.mean_same_rank(0, 0) < 0.9);  // report-only contrast
}

TEST_CASE("reconstruction loss approaches the noise floor") {
  const double noise_sd = 0.5;
  const auto x = rank3_data(1000, 200, 41, noise_sd);
  diagnostics::DiagnosticsConfig cfg;
  cfg.test_n = 200;
  cfg.train_sizes = {800};
  cfg.seed = 11;
  const auto curve =
      diagnostics::reconstruction_loss_curve(x, cfg, diagnostics::DRule::fixed(3));
  const double expected = noise_sd * noise_sd * (200.0 - 3.0) / 200.0;
  CHECK(curve.loss(0) == Approx(expected).epsilon(0.10));
}

TEST_CASE("untruncated reconstruction is exact") {
  const auto x = rank3_data(400, 20, 43, 0.3);
  diagnostics::DiagnosticsConfig cfg;
  cfg.test_n = 50;
  cfg.train_sizes = {300};
  cfg.seed = 2;
  const auto curve =
      diagnostics::reconstruction_loss_curve(x, cfg, diagnostics::DRule::fixed(20));
  CHECK(curve.loss(0) < 1e-10);
}

TEST_CASE("loss decreases with training size on rank-deficient data") {
  const auto x = rank3_data(2300, 100, 47, 0.2);
  diagnostics::DiagnosticsConfig cfg;
  cfg.test_n = 220;
  cfg.train_sizes = {100, 500, 1000, 2000};
  cfg.seed = 19;
  const auto curve = diagnostics::reconstruction_loss_curve(x, cfg, diagnostics::DRule::fixed(3));
  CHECK(curve.loss(curve.loss.size() - 1) <= curve.loss(0));
}

TEST_CASE("reconstruction guards against insufficient rows") {
  const auto x = rank3_data(300, 20, 3, 0.1);
  diagnostics::DiagnosticsConfig cfg;
  cfg.test_n = 220;
  cfg.train_sizes = {100};
  CHECK_THROWS_WITH(diagnostics::reconstruction_loss_curve(x, cfg),
                    Catch::Matchers::ContainsSubstring("insufficient rows"));
}

TEST_CASE("threshold rule tracks the training spectrum") {
  const auto x = rank3_data(500, 60, 53, 0.01);
  diagnostics::DiagnosticsConfig cfg;
  cfg.test_n = 100;
  cfg.train_sizes = {300};
  cfg.seed = 4;
  const auto curve =
      diagnostics::reconstruction_loss_curve(x, cfg, diagnostics::DRule::at_threshold(0.95));
  // Nearly noiseless rank-3 data: the 95% rule lands at <= 3 components.
  CHECK(curve.d_used[0] <= 3);
  CHECK(curve.d_used[0] >= 1);
}
