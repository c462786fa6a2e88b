#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "popcluster/common.hpp"
#include "popcluster/dataset.hpp"
#include "popcluster/gmm.hpp"
#include "popcluster/pca.hpp"

namespace popcluster::interpret {

/// One subject's clustering: hard labels plus the posterior they came from.
struct Clustering {
  std::string subject_id;
  std::vector<int> labels;
  gmm::Posterior posterior;
  int k = 0;
  std::vector<std::string> trial_ids;

  Index n_trials() const { return static_cast<Index>(labels.size()); }
};

inline Clustering make_clustering(std::string subject_id, const gmm::GmmParams& params,
                                  const Eigen::Ref<const Matrix>& y,
                                  std::vector<std::string> trial_ids) {
  Clustering c;
  c.subject_id = std::move(subject_id);
  c.posterior = gmm::responsibilities(params, y);
  c.labels = gmm::hard_assign(c.posterior);
  c.k = params.k;
  c.trial_ids = std::move(trial_ids);
  return c;
}

// ---------------------------------------------------------------------------
// Trial overlap
// ---------------------------------------------------------------------------

/// Percent of overlapping trials: |A ∩ B| * 2 / (|A| + |B|) * 100.
inline double percent_overlap(const std::vector<std::string>& trials_a,
                              const std::vector<std::string>& trials_b) {
  if (trials_a.empty() || trials_b.empty())
    throw ValidationError("percent_overlap: empty trial set");
  const std::unordered_set<std::string> a(trials_a.begin(), trials_a.end());
  const std::unordered_set<std::string> b(trials_b.begin(), trials_b.end());
  std::size_t shared = 0;
  for (const auto& id : a)
    if (b.count(id)) ++shared;
  return 200.0 * static_cast<double>(shared) / static_cast<double>(a.size() + b.size());
}

struct ClusterRef {
  std::string subject_id;
  int cluster = 0;
};

/// Pairwise percent overlap across every (subject, cluster) pair. Within a
/// subject the off-diagonal entries are structurally zero because each trial
/// carries exactly one label.
struct OverlapMatrix {
  std::vector<ClusterRef> index;
  Matrix values;           // percent, symmetric
  double across_mean = 0.0;  // over unordered cross-subject pairs
  double across_sd = 0.0;    // sample SD over the same pairs

  /// 0/1 mask of entries strictly above a percent threshold.
  Matrix mask(double threshold) const {
    return (values.array() > threshold).cast<double>().matrix();
  }

  Index count_above(double threshold) const {
    Index count = 0;
    for (Index i = 0; i < values.rows(); ++i)
      for (Index j = i + 1; j < values.cols(); ++j)
        if (values(i, j) > threshold) ++count;
    return count;
  }
};

inline OverlapMatrix overlap_matrix(const std::vector<Clustering>& clusterings) {
  if (clusterings.empty()) throw ValidationError("overlap_matrix: no clusterings");
  // All clusterings must cover the same trial universe.
  std::vector<std::string> universe = clusterings.front().trial_ids;
  std::sort(universe.begin(), universe.end());
  for (const auto& c : clusterings) {
    std::vector<std::string> ids = c.trial_ids;
    std::sort(ids.begin(), ids.end());
    if (ids != universe)
      throw ValidationError("overlap_matrix: trial universe of subject " + c.subject_id +
                            " does not match");
  }

  OverlapMatrix out;
  std::vector<std::vector<std::string>> members;  // one trial-id set per index entry
  std::vector<std::size_t> subject_of;
  for (std::size_t s = 0; s < clusterings.size(); ++s) {
    const auto& c = clusterings[s];
    std::vector<std::vector<std::string>> per_cluster(static_cast<std::size_t>(c.k));
    for (std::size_t i = 0; i < c.labels.size(); ++i)
      per_cluster[static_cast<std::size_t>(c.labels[i])].push_back(c.trial_ids[i]);
    for (int k = 0; k < c.k; ++k) {
      auto& trials = per_cluster[static_cast<std::size_t>(k)];
      if (trials.empty()) continue;  // empty components do not appear in the matrix
      out.index.push_back({c.subject_id, k});
      members.push_back(std::move(trials));
      subject_of.push_back(s);
    }
  }

  const auto n = static_cast<Index>(out.index.size());
  out.values.resize(n, n);
  double sum = 0.0, sum_sq = 0.0;
  Index n_across = 0;
  for (Index i = 0; i < n; ++i) {
    out.values(i, i) = 100.0;
    for (Index j = i + 1; j < n; ++j) {
      double v;
      if (subject_of[static_cast<std::size_t>(i)] == subject_of[static_cast<std::size_t>(j)]) {
        v = 0.0;  // hard assignments are disjoint within a subject
      } else {
        v = percent_overlap(members[static_cast<std::size_t>(i)],
                            members[static_cast<std::size_t>(j)]);
        sum += v;
        sum_sq += v * v;
        ++n_across;
      }
      out.values(i, j) = v;
      out.values(j, i) = v;
    }
  }
  if (n_across > 0) {
    out.across_mean = sum / static_cast<double>(n_across);
    if (n_across > 1) {
      const double var =
          (sum_sq - sum * sum / static_cast<double>(n_across)) / static_cast<double>(n_across - 1);
      out.across_sd = std::sqrt(std::max(var, 0.0));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian-KL mutual information against continuous ratings
// ---------------------------------------------------------------------------

/// KL(N(mu1, var1) || N(mu0, var0)) in nats.
inline double kl_gaussian_univariate(double mu1, double var1, double mu0, double var0) {
  if (var1 <= 0.0 || var0 <= 0.0)
    throw ValidationError("kl_gaussian_univariate: variances must be positive");
  return 0.5 * std::log(var0 / var1) + (var1 + (mu1 - mu0) * (mu1 - mu0)) / (2.0 * var0) - 0.5;
}

struct NmiBreakdown {
  double nmi = 0.0;
  double mi = 0.0;             // nats
  double cluster_entropy = 0.0;  // H(Y), nats
  std::vector<double> cluster_kl;   // per cluster, 0 for empty clusters
  std::vector<Index> cluster_size;
  bool clipped = false;  // NMI fell outside [0,1] before clipping
};

/// Coefficient of uncertainty between a continuous rating and a clustering:
/// Gaussians are fit to the marginal and to each cluster (MLE variance,
/// floored), MI is the cluster-weighted expectation of KL(cluster||marginal),
/// and the result is MI / H(Y) clipped to [0,1]. K=1 yields 0 by convention.
inline NmiBreakdown gaussian_nmi_detail(const Eigen::Ref<const Vector>& rating,
                                        const std::vector<int>& labels, int k,
                                        double variance_floor = 1e-8) {
  const auto n = static_cast<Index>(labels.size());
  if (rating.size() != n)
    throw ValidationError("gaussian_nmi: rating length does not match clustering");
  if (n < 2) throw ValidationError("gaussian_nmi: need at least 2 trials");
  if (variance_floor <= 0.0) throw ValidationError("gaussian_nmi: variance floor must be positive");

  NmiBreakdown out;
  out.cluster_kl.assign(static_cast<std::size_t>(k), 0.0);
  out.cluster_size.assign(static_cast<std::size_t>(k), 0);

  const double mu0 = rating.mean();
  const double var0 =
      std::max((rating.array() - mu0).square().sum() / static_cast<double>(n), variance_floor);

  std::vector<double> sums(static_cast<std::size_t>(k), 0.0);
  for (Index i = 0; i < n; ++i) {
    const int c = labels[static_cast<std::size_t>(i)];
    if (c < 0 || c >= k) throw ValidationError("gaussian_nmi: label outside [0, K)");
    ++out.cluster_size[static_cast<std::size_t>(c)];
    sums[static_cast<std::size_t>(c)] += rating(i);
  }

  double mi = 0.0, hy = 0.0;
  int nonempty = 0;
  for (int c = 0; c < k; ++c) {
    const Index nc = out.cluster_size[static_cast<std::size_t>(c)];
    if (nc == 0) continue;
    ++nonempty;
    const double pc = static_cast<double>(nc) / static_cast<double>(n);
    const double mu_c = sums[static_cast<std::size_t>(c)] / static_cast<double>(nc);
    double ss = 0.0;
    for (Index i = 0; i < n; ++i)
      if (labels[static_cast<std::size_t>(i)] == c) {
        const double d = rating(i) - mu_c;
        ss += d * d;
      }
    const double var_c = std::max(ss / static_cast<double>(nc), variance_floor);
    const double kl = kl_gaussian_univariate(mu_c, var_c, mu0, var0);
    out.cluster_kl[static_cast<std::size_t>(c)] = kl;
    mi += pc * kl;
    hy -= pc * std::log(pc);
  }
  out.mi = mi;
  out.cluster_entropy = hy;
  if (nonempty <= 1 || hy <= 0.0) {
    out.nmi = 0.0;
    return out;
  }
  const double raw = mi / hy;
  out.nmi = std::clamp(raw, 0.0, 1.0);
  out.clipped = raw != out.nmi;
  return out;
}

inline double gaussian_nmi(const Eigen::Ref<const Vector>& rating, const Clustering& clustering,
                           double variance_floor = 1e-8) {
  return gaussian_nmi_detail(rating, clustering.labels, clustering.k, variance_floor).nmi;
}

// ---------------------------------------------------------------------------
// Discrete NMI (session/run analysis)
// ---------------------------------------------------------------------------

enum class NmiNormalization {
  cluster_entropy,  // divide by H(b); b is the clustering by convention
  arithmetic_mean,  // divide by (H(a) + H(b)) / 2
};

/// Contingency-table mutual information between two discrete labelings,
/// normalized per the chosen mode. Returns 0 when the normalizer is 0.
inline double discrete_nmi(std::span<const int> a, std::span<const int> b,
                           NmiNormalization normalization = NmiNormalization::arithmetic_mean) {
  if (a.size() != b.size()) throw ValidationError("discrete_nmi: length mismatch");
  if (a.empty()) throw ValidationError("discrete_nmi: empty labelings");
  const double n = static_cast<double>(a.size());

  std::unordered_map<int, std::size_t> amap, bmap;
  for (const int v : a) amap.emplace(v, amap.size());
  for (const int v : b) bmap.emplace(v, bmap.size());
  std::vector<std::vector<double>> table(amap.size(), std::vector<double>(bmap.size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i) table[amap[a[i]]][bmap[b[i]]] += 1.0;

  std::vector<double> pa(amap.size(), 0.0), pb(bmap.size(), 0.0);
  for (std::size_t i = 0; i < table.size(); ++i)
    for (std::size_t j = 0; j < table[i].size(); ++j) {
      pa[i] += table[i][j] / n;
      pb[j] += table[i][j] / n;
    }

  double mi = 0.0, ha = 0.0, hb = 0.0;
  for (const double p : pa)
    if (p > 0.0) ha -= p * std::log(p);
  for (const double p : pb)
    if (p > 0.0) hb -= p * std::log(p);
  for (std::size_t i = 0; i < table.size(); ++i)
    for (std::size_t j = 0; j < table[i].size(); ++j) {
      const double pij = table[i][j] / n;
      if (pij > 0.0) mi += pij * std::log(pij / (pa[i] * pb[j]));
    }
  mi = std::max(mi, 0.0);

  const double norm =
      normalization == NmiNormalization::cluster_entropy ? hb : 0.5 * (ha + hb);
  if (norm <= 0.0) return 0.0;
  return std::clamp(mi / norm, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Cosine similarity of back-projected cluster means
// ---------------------------------------------------------------------------

struct CosineResult {
  std::vector<ClusterRef> index;
  Matrix values;  // cosine in [-1,1]; NaN marks undefined (zero-norm) entries
  double within_mean = 0.0;   // pairs inside one subject, diagonal excluded
  double between_mean = 0.0;  // pairs across subjects
  Index undefined_count = 0;  // entries excluded from the summaries

  Matrix mask(double threshold) const {
    Matrix m = Matrix::Zero(values.rows(), values.cols());
    for (Index i = 0; i < values.rows(); ++i)
      for (Index j = 0; j < values.cols(); ++j)
        if (std::isfinite(values(i, j)) && values(i, j) > threshold) m(i, j) = 1.0;
    return m;
  }
};

/// Back-projects every cluster mean through its subject's PCA and compares
/// all pairs by cosine, over all features or a masked subset.
inline CosineResult cluster_means_cosine(
    const std::vector<gmm::GmmFit>& fits, const std::vector<pca::PcaModel>& pcas,
    const std::vector<std::string>& subject_ids,
    const std::vector<Index>* feature_mask = nullptr) {
  if (fits.size() != pcas.size() || fits.size() != subject_ids.size())
    throw ValidationError("cluster_means_cosine: per-subject input lengths differ");
  if (fits.empty()) throw ValidationError("cluster_means_cosine: no subjects");

  CosineResult out;
  std::vector<Vector> vectors;
  std::vector<std::size_t> subject_of;
  for (std::size_t s = 0; s < fits.size(); ++s) {
    const auto& fit = fits[s];
    const auto& model = pcas[s];
    if (fit.params.d() != model.d)
      throw ValidationError("cluster_means_cosine: subject " + subject_ids[s] +
                            ": GMM dimension does not match its PCA");
    const Matrix back = pca::inverse_transform(model, fit.params.means);  // K x M
    for (int c = 0; c < fit.params.k; ++c) {
      Vector v = back.row(c).transpose();
      if (feature_mask) {
        Vector masked(static_cast<Index>(feature_mask->size()));
        for (std::size_t i = 0; i < feature_mask->size(); ++i) {
          const Index f = (*feature_mask)[i];
          if (f < 0 || f >= model.m)
            throw ValidationError("cluster_means_cosine: mask index " + std::to_string(f) +
                                  " outside feature range");
          masked(static_cast<Index>(i)) = v(f);
        }
        v = std::move(masked);
      }
      out.index.push_back({subject_ids[s], c});
      vectors.push_back(std::move(v));
      subject_of.push_back(s);
    }
  }

  const auto n = static_cast<Index>(vectors.size());
  out.values.resize(n, n);
  double within_sum = 0.0, between_sum = 0.0;
  Index within_n = 0, between_n = 0;
  std::vector<double> norms(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) norms[static_cast<std::size_t>(i)] = vectors[static_cast<std::size_t>(i)].norm();

  for (Index i = 0; i < n; ++i) {
    for (Index j = i; j < n; ++j) {
      const double ni = norms[static_cast<std::size_t>(i)], nj = norms[static_cast<std::size_t>(j)];
      double v;
      if (ni == 0.0 || nj == 0.0) {
        v = std::numeric_limits<double>::quiet_NaN();
        if (j > i) ++out.undefined_count;
      } else {
        v = vectors[static_cast<std::size_t>(i)].dot(vectors[static_cast<std::size_t>(j)]) / (ni * nj);
      }
      out.values(i, j) = v;
      out.values(j, i) = v;
      if (j > i && std::isfinite(v)) {
        if (subject_of[static_cast<std::size_t>(i)] == subject_of[static_cast<std::size_t>(j)]) {
          within_sum += v;
          ++within_n;
        } else {
          between_sum += v;
          ++between_n;
        }
      }
    }
  }
  out.within_mean = within_n > 0 ? within_sum / static_cast<double>(within_n) : 0.0;
  out.between_mean = between_n > 0 ? between_sum / static_cast<double>(between_n) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Top-rated label distributions
// ---------------------------------------------------------------------------

struct LabelDistribution {
  std::vector<std::string> column_names;
  Matrix counts;  // K x R: trials per (cluster, top-rated column)
  std::vector<int> top_label_per_trial;
  std::vector<std::string> never_top;  // columns never rated highest anywhere
};

/// Single-label view of the ratings: each trial takes its argmax column
/// (ties toward the lowest index), histogrammed per cluster.
inline LabelDistribution top_label_distribution(const dataset::RatingsTable& ratings,
                                                const Clustering& clustering) {
  const Index n = ratings.n_trials();
  if (n != clustering.n_trials() || ratings.trial_ids != clustering.trial_ids)
    throw ValidationError("top_label_distribution: ratings are not aligned with the clustering");

  LabelDistribution out;
  out.column_names = ratings.column_names;
  out.counts = Matrix::Zero(clustering.k, ratings.n_columns());
  out.top_label_per_trial.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    Index best = 0;
    double best_v = ratings.values(i, 0);
    for (Index j = 1; j < ratings.n_columns(); ++j)
      if (ratings.values(i, j) > best_v) {
        best_v = ratings.values(i, j);
        best = j;
      }
    out.top_label_per_trial[static_cast<std::size_t>(i)] = static_cast<int>(best);
    out.counts(clustering.labels[static_cast<std::size_t>(i)], best) += 1.0;
  }
  for (Index j = 0; j < ratings.n_columns(); ++j)
    if (out.counts.col(j).sum() == 0.0)
      out.never_top.push_back(ratings.column_names[static_cast<std::size_t>(j)]);
  return out;
}

}  // namespace popcluster::interpret
