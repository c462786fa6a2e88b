#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "popcluster/common.hpp"

namespace popcluster::gmm {

struct GmmOptions {
  int max_iter = 200;
  double tol = 1e-4;        // |delta mean per-sample log-likelihood|
  double reg_covar = 1e-6;  // added to every covariance diagonal at each M step
};

/// Mixture parameters: weights on the simplex, one mean and one full
/// covariance per component.
struct GmmParams {
  int k = 0;
  Vector weights;                   // K
  Matrix means;                     // K x D
  std::vector<Matrix> covariances;  // K matrices, D x D

  Index d() const { return means.cols(); }
};

struct GmmFit {
  GmmParams params;
  double log_likelihood = 0.0;  // total over samples, at the final parameters
  int n_iter = 0;
  bool converged = false;
  std::uint64_t seed = 0;
  GmmOptions opts;
  std::vector<double> mean_ll_trace;  // mean per-sample log-likelihood per E step
};

/// N x K responsibility matrix; every row is a probability vector.
struct Posterior {
  Matrix resp;
};

namespace detail {

struct ComponentCache {
  Eigen::LLT<Matrix> llt;
  double log_det = 0.0;  // log det of the covariance
};

inline ComponentCache prepare_component(const Matrix& cov, int component) {
  ComponentCache c;
  c.llt.compute(cov);
  if (c.llt.info() != Eigen::Success)
    throw ComputeError("gmm: covariance of component " + std::to_string(component) +
                       " collapsed (not positive definite despite regularization)");
  c.log_det = 2.0 * c.llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return c;
}

/// Per-sample log densities for all components: log pi_c + log N(y_n; mu_c, Sigma_c).
inline Matrix weighted_log_prob(const GmmParams& params, const Eigen::Ref<const Matrix>& y) {
  const Index n = y.rows(), d = y.cols();
  const int k = params.k;
  const double log2pi = std::log(2.0 * M_PI);
  Matrix out(n, k);
  for (int c = 0; c < k; ++c) {
    const auto cache = prepare_component(params.covariances[static_cast<std::size_t>(c)], c);
    // L^-1 (y - mu)^T computed for all samples at once.
    Matrix diff = (y.rowwise() - params.means.row(c)).transpose();  // D x N
    cache.llt.matrixL().solveInPlace(diff);
    const double log_w =
        params.weights(c) > 0.0 ? std::log(params.weights(c)) : -std::numeric_limits<double>::infinity();
    const double norm = -0.5 * (static_cast<double>(d) * log2pi + cache.log_det);
    out.col(c) = (-0.5 * diff.colwise().squaredNorm().transpose().array() + norm + log_w).matrix();
  }
  return out;
}

/// Row-wise log-sum-exp, tolerant of -inf entries.
inline Vector log_sum_exp_rows(const Matrix& m) {
  Vector out(m.rows());
  for (Index i = 0; i < m.rows(); ++i) {
    const double mx = m.row(i).maxCoeff();
    if (!std::isfinite(mx)) {
      out(i) = mx;  // all -inf
      continue;
    }
    out(i) = mx + std::log((m.row(i).array() - mx).exp().sum());
  }
  return out;
}

struct EStep {
  double mean_log_likelihood = 0.0;
  Matrix resp;  // N x K
};

inline EStep e_step(const GmmParams& params, const Eigen::Ref<const Matrix>& y) {
  const Matrix wlp = weighted_log_prob(params, y);
  const Vector norm = log_sum_exp_rows(wlp);
  EStep out;
  out.resp = (wlp.colwise() - norm).array().exp().matrix();
  out.mean_log_likelihood = norm.mean();
  return out;
}

inline void m_step(const Eigen::Ref<const Matrix>& y, const Matrix& resp, double reg_covar,
                   GmmParams& params) {
  const Index n = y.rows();
  const int k = params.k;
  // Floor on the component mass keeps empty components finite; they retain
  // ~zero weight and a regularized covariance.
  const double eps = 10.0 * std::numeric_limits<double>::epsilon();
  for (int c = 0; c < k; ++c) {
    const double nk = std::max(resp.col(c).sum(), eps);
    const Vector mu = (resp.col(c).transpose() * y).transpose() / nk;
    Matrix centered = y.rowwise() - mu.transpose();
    Matrix cov = (centered.transpose() * (centered.array().colwise() * resp.col(c).array()).matrix()) / nk;
    cov.diagonal().array() += reg_covar;
    params.weights(c) = nk / static_cast<double>(n);
    params.means.row(c) = mu.transpose();
    params.covariances[static_cast<std::size_t>(c)] = std::move(cov);
  }
  params.weights /= params.weights.sum();
}

/// k-means++-style distance-weighted farthest-point seeding of the means:
/// each new mean is drawn among 2 + floor(ln K) candidates sampled with
/// probability proportional to squared distance, keeping the candidate that
/// most reduces the total potential (the stock greedy k-means++ rule).
inline Matrix seed_means(const Eigen::Ref<const Matrix>& y, int k, Rng& rng) {
  const Index n = y.rows(), d = y.cols();
  Matrix means(k, d);
  const auto first = static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(n)));
  means.row(0) = y.row(first);
  if (k == 1) return means;

  const int n_candidates = 2 + static_cast<int>(std::floor(std::log(static_cast<double>(k))));
  Vector dist2 = (y.rowwise() - means.row(0)).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    Index best_pick = -1;
    double best_potential = std::numeric_limits<double>::infinity();
    Vector best_dist2;
    for (int t = 0; t < n_candidates; ++t) {
      const double total = dist2.sum();
      Index pick;
      if (total <= 0.0) {
        // All remaining points coincide with a chosen mean.
        pick = static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(n)));
      } else {
        const double target = rng.uniform() * total;
        double cum = 0.0;
        pick = n - 1;
        for (Index i = 0; i < n; ++i) {
          cum += dist2(i);
          if (cum > target) {
            pick = i;
            break;
          }
        }
      }
      Vector cand_dist2 = dist2.cwiseMin((y.rowwise() - y.row(pick)).rowwise().squaredNorm());
      const double potential = cand_dist2.sum();
      if (potential < best_potential) {
        best_potential = potential;
        best_pick = pick;
        best_dist2 = std::move(cand_dist2);
      }
    }
    means.row(c) = y.row(best_pick);
    dist2 = std::move(best_dist2);
  }
  return means;
}

inline GmmParams initial_params(const Eigen::Ref<const Matrix>& y, int k, double reg_covar,
                                Rng& rng) {
  const Index n = y.rows(), d = y.cols();
  GmmParams params;
  params.k = k;
  params.weights = Vector::Constant(k, 1.0 / static_cast<double>(k));
  params.means = seed_means(y, k, rng);
  const Vector mean = y.colwise().sum() / static_cast<double>(n);
  const Matrix centered = y.rowwise() - mean.transpose();
  Matrix global_cov = centered.transpose() * centered / static_cast<double>(n);
  global_cov.diagonal().array() += reg_covar;
  params.covariances.assign(static_cast<std::size_t>(k), global_cov);
  return params;
}

}  // namespace detail

/// Total data log-likelihood sum_n log sum_c pi_c N(y_n; mu_c, Sigma_c),
/// evaluated with log-sum-exp stabilization.
inline double log_likelihood(const GmmParams& params, const Eigen::Ref<const Matrix>& y) {
  if (y.cols() != params.d())
    throw ValidationError("gmm log_likelihood: dimension mismatch");
  return detail::log_sum_exp_rows(detail::weighted_log_prob(params, y)).sum();
}

inline Posterior responsibilities(const GmmParams& params, const Eigen::Ref<const Matrix>& y) {
  if (y.cols() != params.d())
    throw ValidationError("gmm responsibilities: dimension mismatch");
  return Posterior{detail::e_step(params, y).resp};
}

/// Expectation-maximization for a full-covariance Gaussian mixture.
/// Deterministic per (data, k, seed, opts); single-threaded by design so
/// callers can parallelize across independent fits.
inline GmmFit em_fit(const Eigen::Ref<const Matrix>& y, int k, std::uint64_t seed,
                     const GmmOptions& opts = {}) {
  const Index n = y.rows();
  if (k < 1) throw ValidationError("gmm: k must be >= 1");
  if (n <= k)
    throw ValidationError("gmm: need more samples than components (N=" + std::to_string(n) +
                          ", K=" + std::to_string(k) + ")");
  if (y.cols() < 1) throw ValidationError("gmm: need at least 1 dimension");
  if (!y.allFinite()) throw ValidationError("gmm: non-finite input");

  Rng rng(seed);
  GmmFit fit;
  fit.seed = seed;
  fit.opts = opts;
  fit.params = detail::initial_params(y, k, opts.reg_covar, rng);

  auto step = detail::e_step(fit.params, y);
  fit.mean_ll_trace.push_back(step.mean_log_likelihood);
  double prev_ll = step.mean_log_likelihood;

  for (int it = 1; it <= opts.max_iter; ++it) {
    detail::m_step(y, step.resp, opts.reg_covar, fit.params);
    fit.n_iter = it;
    step = detail::e_step(fit.params, y);
    fit.mean_ll_trace.push_back(step.mean_log_likelihood);
    if (std::abs(step.mean_log_likelihood - prev_ll) < opts.tol) {
      fit.converged = true;
      prev_ll = step.mean_log_likelihood;
      break;
    }
    prev_ll = step.mean_log_likelihood;
  }
  fit.log_likelihood = fit.mean_ll_trace.back() * static_cast<double>(n);
  return fit;
}

/// Bayesian Information Criterion, lower is better. Free parameters of a
/// full-covariance mixture: (K-1) weights + K*D means + K*D(D+1)/2 covariances.
inline double bic(const GmmFit& fit, Index n) {
  const double k = fit.params.k;
  const double d = static_cast<double>(fit.params.d());
  const double p = (k - 1.0) + k * d + k * d * (d + 1.0) / 2.0;
  return p * std::log(static_cast<double>(n)) - 2.0 * fit.log_likelihood;
}

/// Argmax per row; ties break toward the lowest cluster index.
inline std::vector<int> hard_assign(const Posterior& post) {
  std::vector<int> labels(static_cast<std::size_t>(post.resp.rows()));
  for (Index i = 0; i < post.resp.rows(); ++i) {
    int best = 0;
    double best_p = post.resp(i, 0);
    for (Index c = 1; c < post.resp.cols(); ++c) {
      if (post.resp(i, c) > best_p) {
        best_p = post.resp(i, c);
        best = static_cast<int>(c);
      }
    }
    labels[static_cast<std::size_t>(i)] = best;
  }
  return labels;
}

}  // namespace popcluster::gmm
