#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "popcluster/common.hpp"
#include "popcluster/dataset.hpp"
#include "popcluster/pca.hpp"

namespace popcluster::diagnostics {

/// PCA sanity checks for the high-dimension / low-sample regime: eigenvalue
/// spread across subsample sizes, eigenvector consistency across resampling
/// iterations, and held-out reconstruction loss versus training-set size.
struct DiagnosticsConfig {
  std::vector<Index> sample_sizes{200, 500, 1000, 1500, 2000};
  int n_iter = 10;       // resampling iterations per size
  int top_vectors = 5;   // leading eigenvectors compared
  Index test_n = 220;    // held-out rows for the reconstruction test
  std::vector<Index> train_sizes;  // defaults to 100..2000 step 100
  std::uint64_t seed = 0;

  static std::vector<Index> default_train_sizes() {
    std::vector<Index> sizes;
    for (Index n = 100; n <= 2000; n += 100) sizes.push_back(n);
    return sizes;
  }

  std::vector<Index> train_grid() const {
    return train_sizes.empty() ? default_train_sizes() : train_sizes;
  }
};

namespace detail {

/// Sorted subsample of `size` distinct row indices. Sorting makes the
/// size == N draw coincide with the identity, so a full-data "subsample"
/// reproduces plain PCA exactly.
inline std::vector<Index> subsample_indices(Index n, Index size, Rng& rng) {
  if (size > n)
    throw ValidationError("diagnostics: subsample size " + std::to_string(size) +
                          " exceeds available rows " + std::to_string(n));
  auto perm = rng.permutation(n);
  perm.resize(static_cast<std::size_t>(size));
  std::sort(perm.begin(), perm.end());
  return perm;
}

inline Matrix take_rows(const Eigen::Ref<const Matrix>& x, const std::vector<Index>& rows) {
  Matrix out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = x.row(rows[i]);
  return out;
}

}  // namespace detail

struct ScreeResult {
  std::vector<Index> sample_sizes;
  std::vector<Vector> eigenvalues;  // per size, sorted nonincreasing
};

/// Covariance spectra of seeded random subsamples, one curve per size.
inline ScreeResult eigenvalue_spread(const dataset::TrialMatrix& x, const DiagnosticsConfig& cfg) {
  ScreeResult out;
  out.sample_sizes = cfg.sample_sizes;
  for (std::size_t si = 0; si < cfg.sample_sizes.size(); ++si) {
    const Index size = cfg.sample_sizes[si];
    Rng rng(derive_seed(derive_seed(cfg.seed, 0x5363726565ull), static_cast<std::uint64_t>(si)));
    const auto rows = detail::subsample_indices(x.n_trials(), size, rng);
    out.eigenvalues.push_back(pca::variance_spectrum(detail::take_rows(x.values, rows)));
  }
  return out;
}

struct ConsistencyResult {
  std::vector<Index> sample_sizes;
  int n_iter = 0;
  int top_vectors = 0;
  /// Per size: (n_iter * top_vectors)^2 matrix of |cos| between eigenvector
  /// (iteration i, rank e) and (iteration j, rank f); row index = i * top + e.
  std::vector<Matrix> abs_cosine;
  /// |cos| between the first eigenvectors of the sizes' first iterations.
  Matrix first_component_across_sizes;

  /// Mean |cos| between same-rank vectors of distinct iterations.
  double mean_same_rank(std::size_t size_index, int rank) const {
    const auto& m = abs_cosine[size_index];
    double sum = 0.0;
    int count = 0;
    for (int i = 0; i < n_iter; ++i)
      for (int j = i + 1; j < n_iter; ++j) {
        sum += m(i * top_vectors + rank, j * top_vectors + rank);
        ++count;
      }
    return count > 0 ? sum / count : 1.0;
  }
};

/// Eigenvector consistency across independent subsamples. Comparisons use
/// absolute cosine because eigenvector sign is arbitrary.
inline ConsistencyResult eigenvector_consistency(const dataset::TrialMatrix& x,
                                                 const DiagnosticsConfig& cfg) {
  if (cfg.n_iter < 1) throw ValidationError("diagnostics: n_iter must be >= 1");
  if (cfg.top_vectors < 1) throw ValidationError("diagnostics: top_vectors must be >= 1");

  ConsistencyResult out;
  out.sample_sizes = cfg.sample_sizes;
  out.n_iter = cfg.n_iter;
  out.top_vectors = cfg.top_vectors;

  std::vector<Vector> first_by_size;
  for (std::size_t si = 0; si < cfg.sample_sizes.size(); ++si) {
    const Index size = cfg.sample_sizes[si];
    const Index d = std::min<Index>(cfg.top_vectors, std::min(size - 1, x.n_features()));
    std::vector<Matrix> components;  // per iteration, d x M
    for (int it = 0; it < cfg.n_iter; ++it) {
      Rng rng(derive_seed(derive_seed(derive_seed(cfg.seed, 0x436f6e73ull),
                                      static_cast<std::uint64_t>(si)),
                          static_cast<std::uint64_t>(it)));
      const auto rows = detail::subsample_indices(x.n_trials(), size, rng);
      components.push_back(pca::fit(detail::take_rows(x.values, rows), d).components);
    }
    first_by_size.push_back(components.front().row(0).transpose());

    const int block = cfg.top_vectors;
    Matrix m = Matrix::Zero(cfg.n_iter * block, cfg.n_iter * block);
    for (int i = 0; i < cfg.n_iter; ++i)
      for (int j = 0; j < cfg.n_iter; ++j)
        for (Index e = 0; e < d; ++e)
          for (Index f = 0; f < d; ++f)
            m(i * block + static_cast<int>(e), j * block + static_cast<int>(f)) = std::abs(
                components[static_cast<std::size_t>(i)].row(e).dot(
                    components[static_cast<std::size_t>(j)].row(f)));
    out.abs_cosine.push_back(std::move(m));
  }

  const auto s = static_cast<Index>(cfg.sample_sizes.size());
  out.first_component_across_sizes.resize(s, s);
  for (Index a = 0; a < s; ++a)
    for (Index b = 0; b < s; ++b)
      out.first_component_across_sizes(a, b) = std::abs(
          first_by_size[static_cast<std::size_t>(a)].dot(first_by_size[static_cast<std::size_t>(b)]));
  return out;
}

/// Rule for the component count in the reconstruction test: a fixed D, or
/// the smallest D explaining `threshold` of the training variance.
struct DRule {
  bool use_threshold = true;
  double threshold = 0.95;
  Index fixed_d = 0;

  static DRule at_threshold(double t) { return {true, t, 0}; }
  static DRule fixed(Index d) { return {false, 0.0, d}; }
};

struct ReconstructionCurve {
  std::vector<Index> train_sizes;
  Vector loss;              // per-element MSE on the held-out test set
  std::vector<Index> d_used;
};

/// Holds out test_n rows once, then sweeps the training-set size. Loss is
/// total squared reconstruction error / (test_n * M) so curves are
/// comparable across feature counts.
inline ReconstructionCurve reconstruction_loss_curve(const dataset::TrialMatrix& x,
                                                     const DiagnosticsConfig& cfg,
                                                     const DRule& d_rule = {}) {
  const auto grid = cfg.train_grid();
  if (grid.empty()) throw ValidationError("diagnostics: empty train-size grid");
  const Index max_train = *std::max_element(grid.begin(), grid.end());
  if (cfg.test_n < 1) throw ValidationError("diagnostics: test_n must be >= 1");
  if (max_train + cfg.test_n > x.n_trials())
    throw ValidationError("diagnostics: insufficient rows: largest train size " +
                          std::to_string(max_train) + " + test_n " + std::to_string(cfg.test_n) +
                          " exceeds N = " + std::to_string(x.n_trials()));

  // One seeded permutation drives both the held-out split and the training
  // draws; training sets are nested (size n = first n of the shuffled pool)
  // so the curve isolates the sample-size effect from subsample jitter.
  Rng split_rng(derive_seed(cfg.seed, 0x5265636f6eull));  // "Recon"
  const auto perm = split_rng.permutation(x.n_trials());
  std::vector<Index> test_rows(perm.begin(), perm.begin() + cfg.test_n);
  const std::vector<Index> pool(perm.begin() + cfg.test_n, perm.end());
  std::sort(test_rows.begin(), test_rows.end());
  const Matrix test = detail::take_rows(x.values, test_rows);

  ReconstructionCurve out;
  out.train_sizes = grid;
  out.loss.resize(static_cast<Index>(grid.size()));
  out.d_used.resize(grid.size());
  for (std::size_t gi = 0; gi < grid.size(); ++gi) {
    const Index size = grid[gi];
    std::vector<Index> train_rows(pool.begin(), pool.begin() + size);
    std::sort(train_rows.begin(), train_rows.end());
    const Matrix train = detail::take_rows(x.values, train_rows);

    const Index r_max = std::min(size - 1, x.n_features());
    Index d;
    if (d_rule.use_threshold) {
      double total = 0.0;
      const Vector spectrum = pca::variance_spectrum(train, &total);
      d = pca::select_components(spectrum / total, d_rule.threshold).d;
    } else {
      d = std::min(d_rule.fixed_d, r_max);
      if (d < 1) throw ValidationError("diagnostics: fixed D must be >= 1");
    }
    const auto model = pca::fit(train, d);
    const Matrix recon = pca::inverse_transform(model, pca::transform(model, test));
    out.loss(static_cast<Index>(gi)) =
        (test - recon).squaredNorm() / static_cast<double>(test.rows() * test.cols());
    out.d_used[gi] = d;
  }
  return out;
}

}  // namespace popcluster::diagnostics
