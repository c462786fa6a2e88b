#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "popcluster/common.hpp"
#include "popcluster/gmm.hpp"

namespace popcluster::selection {

/// Seed for the (K, init) cell of a sweep. Pure function of its arguments so
/// sweeps are reproducible and shardable across processes.
inline std::uint64_t sweep_seed(std::uint64_t base_seed, int k, int init_index) {
  return derive_seed(derive_seed(base_seed, static_cast<std::uint64_t>(k)),
                     static_cast<std::uint64_t>(init_index));
}

struct SweepEntry {
  std::uint64_t seed = 0;
  double bic = 0.0;
  double log_likelihood = 0.0;
  bool converged = false;
};

struct SweepResult {
  std::vector<int> k_grid;
  std::vector<std::vector<SweepEntry>> per_k;  // k_grid.size() lists of n_init entries
  std::vector<double> mean_bic;                // per K
  int chosen_k = 0;
};

/// Argmin over the mean-BIC curve; ties within 1e-9 break toward smaller K
/// (parsimony).
inline int choose_k(const std::vector<double>& mean_bic, const std::vector<int>& k_grid) {
  if (mean_bic.empty() || mean_bic.size() != k_grid.size())
    throw ValidationError("choose_k: mean_bic and k_grid must be nonempty and equal-length");
  std::size_t best = 0;
  for (std::size_t i = 1; i < mean_bic.size(); ++i)
    if (mean_bic[i] < mean_bic[best] - 1e-9) best = i;
  return k_grid[best];
}

/// Mean-BIC sweep over K = k_min..k_max with n_init seeded EM runs each.
/// chosen_k minimizes the mean BIC; ties within 1e-9 go to the smaller K.
/// (K, init) jobs fan out over `threads`; the result is thread-count invariant.
inline SweepResult bic_sweep(const Eigen::Ref<const Matrix>& y, int k_min, int k_max, int n_init,
                             std::uint64_t base_seed, const gmm::GmmOptions& opts = {},
                             int threads = 1) {
  if (k_min < 1) throw ValidationError("bic_sweep: k_min must be >= 1");
  if (k_max < k_min) throw ValidationError("bic_sweep: k_max < k_min");
  if (k_max >= y.rows())
    throw ValidationError("bic_sweep: k_max " + std::to_string(k_max) +
                          " must be below the number of samples " + std::to_string(y.rows()));
  if (n_init < 1) throw ValidationError("bic_sweep: n_init must be >= 1");

  SweepResult result;
  for (int k = k_min; k <= k_max; ++k) result.k_grid.push_back(k);
  const std::size_t n_k = result.k_grid.size();
  result.per_k.assign(n_k, std::vector<SweepEntry>(static_cast<std::size_t>(n_init)));

  const std::size_t n_jobs = n_k * static_cast<std::size_t>(n_init);
  parallel_for(n_jobs, threads, [&](std::size_t job) {
    const std::size_t ki = job / static_cast<std::size_t>(n_init);
    const int init = static_cast<int>(job % static_cast<std::size_t>(n_init));
    const int k = result.k_grid[ki];
    const std::uint64_t seed = sweep_seed(base_seed, k, init);
    try {
      const auto fit = gmm::em_fit(y, k, seed, opts);
      result.per_k[ki][static_cast<std::size_t>(init)] =
          SweepEntry{seed, gmm::bic(fit, y.rows()), fit.log_likelihood, fit.converged};
    } catch (const std::exception& e) {
      throw ComputeError("bic_sweep: K=" + std::to_string(k) + " seed=" + std::to_string(seed) +
                         ": " + e.what());
    }
  });

  result.mean_bic.resize(n_k);
  for (std::size_t ki = 0; ki < n_k; ++ki) {
    double sum = 0.0;
    for (const auto& e : result.per_k[ki]) sum += e.bic;
    result.mean_bic[ki] = sum / static_cast<double>(n_init);
  }
  result.chosen_k = choose_k(result.mean_bic, result.k_grid);
  return result;
}

namespace detail {

/// Dense contingency table over the distinct labels of each side.
inline std::vector<std::vector<std::uint64_t>> contingency(std::span<const int> a,
                                                           std::span<const int> b) {
  std::unordered_map<int, std::size_t> amap, bmap;
  for (const int v : a) amap.emplace(v, amap.size());
  for (const int v : b) bmap.emplace(v, bmap.size());
  std::vector<std::vector<std::uint64_t>> table(amap.size(),
                                                std::vector<std::uint64_t>(bmap.size(), 0));
  for (std::size_t i = 0; i < a.size(); ++i) ++table[amap[a[i]]][bmap[b[i]]];
  return table;
}

inline double choose2(double n) { return 0.5 * n * (n - 1.0); }

}  // namespace detail

/// Rand (1971) index: the fraction of item pairs that the two partitions
/// treat the same way (co-clustered in both or separated in both).
inline double rand_index(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw ValidationError("rand_index: length mismatch");
  if (a.size() < 2) throw ValidationError("rand_index: need at least 2 items");
  const auto table = detail::contingency(a, b);

  const double n = static_cast<double>(a.size());
  double sum_cells = 0.0, sum_rows = 0.0, sum_cols = 0.0;
  std::vector<double> col_totals(table.front().size(), 0.0);
  for (const auto& row : table) {
    double row_total = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) {
      const auto v = static_cast<double>(row[j]);
      sum_cells += detail::choose2(v);
      row_total += v;
      col_totals[j] += v;
    }
    sum_rows += detail::choose2(row_total);
  }
  for (const double t : col_totals) sum_cols += detail::choose2(t);

  const double total_pairs = detail::choose2(n);
  // agreements = together-in-both + apart-in-both
  return (total_pairs + 2.0 * sum_cells - sum_rows - sum_cols) / total_pairs;
}

/// Hubert-Arabie adjusted Rand index; emitted alongside the plain Rand
/// index in reports for context.
inline double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw ValidationError("adjusted_rand_index: length mismatch");
  if (a.size() < 2) throw ValidationError("adjusted_rand_index: need at least 2 items");
  const auto table = detail::contingency(a, b);

  double sum_cells = 0.0, sum_rows = 0.0, sum_cols = 0.0;
  std::vector<double> col_totals(table.front().size(), 0.0);
  for (const auto& row : table) {
    double row_total = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) {
      const auto v = static_cast<double>(row[j]);
      sum_cells += detail::choose2(v);
      row_total += v;
      col_totals[j] += v;
    }
    sum_rows += detail::choose2(row_total);
  }
  for (const double t : col_totals) sum_cols += detail::choose2(t);

  const double total_pairs = detail::choose2(static_cast<double>(a.size()));
  const double expected = sum_rows * sum_cols / total_pairs;
  const double max_index = 0.5 * (sum_rows + sum_cols);
  if (max_index == expected) return 1.0;  // both partitions trivial
  return (sum_cells - expected) / (max_index - expected);
}

struct StabilityResult {
  int k = 0;
  std::vector<std::vector<int>> labelings;  // one per refit
  Matrix rand_matrix;                       // R x R pairwise Rand indices
  double mean_rand = 0.0;                   // mean over the off-diagonal upper triangle
  double mean_adjusted_rand = 0.0;
};

/// Seeds for the stability refits, derived from a base seed under a salt
/// distinct from the sweep's.
inline std::vector<std::uint64_t> stability_seeds(std::uint64_t base_seed, int n_refit) {
  std::vector<std::uint64_t> seeds;
  seeds.reserve(static_cast<std::size_t>(n_refit));
  const std::uint64_t root = derive_seed(base_seed, 0x5374616231ull);  // "Stab1"
  for (int i = 0; i < n_refit; ++i)
    seeds.push_back(derive_seed(root, static_cast<std::uint64_t>(i)));
  return seeds;
}

/// Clustering stability at fixed K: refit per seed, hard-assign, and average
/// the Rand index over all refit pairs.
inline StabilityResult stability(const Eigen::Ref<const Matrix>& y, int k, int n_refit,
                                 const std::vector<std::uint64_t>& seeds,
                                 const gmm::GmmOptions& opts = {}, int threads = 1) {
  if (n_refit < 2) throw ValidationError("stability: n_refit must be >= 2");
  if (seeds.size() < static_cast<std::size_t>(n_refit))
    throw ValidationError("stability: need one seed per refit");

  StabilityResult result;
  result.k = k;
  result.labelings.assign(static_cast<std::size_t>(n_refit), {});
  parallel_for(static_cast<std::size_t>(n_refit), threads, [&](std::size_t i) {
    const auto fit = gmm::em_fit(y, k, seeds[i], opts);
    result.labelings[i] = gmm::hard_assign(gmm::responsibilities(fit.params, y));
  });

  result.rand_matrix = Matrix::Identity(n_refit, n_refit);
  double sum = 0.0, sum_adj = 0.0;
  int pairs = 0;
  for (int i = 0; i < n_refit; ++i) {
    for (int j = i + 1; j < n_refit; ++j) {
      const double r = rand_index(result.labelings[static_cast<std::size_t>(i)],
                                  result.labelings[static_cast<std::size_t>(j)]);
      result.rand_matrix(i, j) = r;
      result.rand_matrix(j, i) = r;
      sum += r;
      sum_adj += adjusted_rand_index(result.labelings[static_cast<std::size_t>(i)],
                                     result.labelings[static_cast<std::size_t>(j)]);
      ++pairs;
    }
  }
  result.mean_rand = sum / static_cast<double>(pairs);
  result.mean_adjusted_rand = sum_adj / static_cast<double>(pairs);
  return result;
}

}  // namespace popcluster::selection
