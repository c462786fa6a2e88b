#pragma once

#include <Eigen/Dense>
#include <Eigen/QR>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "popcluster/common.hpp"
#include "popcluster/dataset.hpp"
#include "popcluster/selection.hpp"

namespace popcluster::synth {

/// Planted-cluster generator spec. Latent clusters live in R^d_low and are
/// embedded into R^m through a random orthonormal map plus isotropic noise.
struct SynthSpec {
  int k_true = 3;
  Index n = 600;
  Index d_low = 5;
  Index m = 200;
  double separation = 10.0;  // min pairwise mean distance, in within-cluster SDs
  double within_sd = 1.0;
  double noise_sd = 0.1;
  std::vector<double> weights;  // empty = uniform
  std::uint64_t seed = 0;
};

struct SynthGenerator {
  SynthSpec spec;
  Matrix latent_means;  // K x d_low
  Matrix embedding;     // m x d_low, orthonormal columns
};

struct SynthData {
  dataset::TrialMatrix x;
  std::vector<int> true_labels;
  SynthGenerator generator;
};

namespace detail {

inline void validate_spec(const SynthSpec& spec) {
  if (spec.k_true < 1) throw ValidationError("synth: k_true must be >= 1");
  if (spec.n < 10 * spec.k_true)
    throw ValidationError("synth: need n >= 10 * k_true");
  if (spec.d_low < 1 || spec.d_low > spec.m)
    throw ValidationError("synth: d_low must lie in [1, m]");
  if (spec.separation < 0.0) throw ValidationError("synth: separation must be >= 0");
  if (spec.within_sd <= 0.0) throw ValidationError("synth: within_sd must be > 0");
  if (spec.noise_sd < 0.0) throw ValidationError("synth: noise_sd must be >= 0");
  if (!spec.weights.empty()) {
    if (static_cast<int>(spec.weights.size()) != spec.k_true)
      throw ValidationError("synth: weights length must equal k_true");
    double sum = 0.0;
    for (const double w : spec.weights) {
      if (w < 0.0) throw ValidationError("synth: weights must be nonnegative");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-8) throw ValidationError("synth: weights must sum to 1");
  }
}

/// Latent cluster means drawn by rejection until every pair is at least
/// separation * within_sd apart.
inline Matrix sample_means(const SynthSpec& spec, Rng& rng) {
  const double min_dist = spec.separation * spec.within_sd;
  // Spread scale ~ the required distance keeps rejection cheap at small K.
  const double scale = std::max(min_dist, spec.within_sd);
  constexpr int kMaxAttempts = 10000;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    Matrix means(spec.k_true, spec.d_low);
    for (Index i = 0; i < means.rows(); ++i)
      for (Index j = 0; j < means.cols(); ++j) means(i, j) = scale * rng.gauss();
    bool ok = true;
    for (Index a = 0; a < means.rows() && ok; ++a)
      for (Index b = a + 1; b < means.rows(); ++b)
        if ((means.row(a) - means.row(b)).norm() < min_dist) {
          ok = false;
          break;
        }
    if (ok) return means;
  }
  throw ComputeError(
      "synth: could not place " + std::to_string(spec.k_true) +
      " cluster means at the requested separation; lower separation or raise d_low");
}

/// Orthonormal m x d embedding: QR of a Gaussian matrix with the usual
/// R-diagonal sign fix.
inline Matrix sample_embedding(Index m, Index d, Rng& rng) {
  Matrix g(m, d);
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < d; ++j) g(i, j) = rng.gauss();
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(m, d);
  const Matrix r = qr.matrixQR().topLeftCorner(d, d);
  for (Index j = 0; j < d; ++j)
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  return q;
}

}  // namespace detail

/// Deterministic per seed. Labels are drawn from the weight vector, latent
/// points from N(mean_label, within_sd^2 I), and the ambient embedding adds
/// N(0, noise_sd^2 I_m).
inline SynthData generate(const SynthSpec& spec) {
  detail::validate_spec(spec);
  Rng rng(derive_seed(spec.seed, 0x53796e7468ull));  // "Synth"

  SynthData data;
  data.generator.spec = spec;
  data.generator.latent_means = detail::sample_means(spec, rng);
  data.generator.embedding = detail::sample_embedding(spec.m, spec.d_low, rng);

  std::vector<double> cumulative(static_cast<std::size_t>(spec.k_true));
  {
    double acc = 0.0;
    for (int c = 0; c < spec.k_true; ++c) {
      acc += spec.weights.empty() ? 1.0 / static_cast<double>(spec.k_true)
                                  : spec.weights[static_cast<std::size_t>(c)];
      cumulative[static_cast<std::size_t>(c)] = acc;
    }
    cumulative.back() = 1.0;
  }

  data.true_labels.resize(static_cast<std::size_t>(spec.n));
  Matrix latent(spec.n, spec.d_low);
  for (Index i = 0; i < spec.n; ++i) {
    const double u = rng.uniform();
    int label = 0;
    while (u >= cumulative[static_cast<std::size_t>(label)] && label + 1 < spec.k_true) ++label;
    data.true_labels[static_cast<std::size_t>(i)] = label;
    for (Index j = 0; j < spec.d_low; ++j)
      latent(i, j) = data.generator.latent_means(label, j) + spec.within_sd * rng.gauss();
  }

  data.x.values = latent * data.generator.embedding.transpose();
  if (spec.noise_sd > 0.0) {
    for (Index i = 0; i < spec.n; ++i)
      for (Index j = 0; j < spec.m; ++j) data.x.values(i, j) += spec.noise_sd * rng.gauss();
  }

  data.x.trial_ids.reserve(static_cast<std::size_t>(spec.n));
  for (Index i = 0; i < spec.n; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "t%06lld", static_cast<long long>(i + 1));
    data.x.trial_ids.emplace_back(buf);
  }
  return data;
}

struct OracleReport {
  bool k_match = false;
  double rand_vs_truth = 0.0;
};

/// Compares a pipeline result against the generator truth.
inline OracleReport oracle_check(const SynthData& data, int chosen_k, std::span<const int> labels) {
  if (labels.size() != data.true_labels.size())
    throw ValidationError("oracle_check: label count does not match the data");
  OracleReport report;
  report.k_match = chosen_k == data.generator.spec.k_true;
  report.rand_vs_truth = selection::rand_index(labels, data.true_labels);
  return report;
}

}  // namespace popcluster::synth
