#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "popcluster/common.hpp"
#include "popcluster/dataset.hpp"

namespace popcluster::pca {

/// Orthogonal linear projection x <-> y. `components` rows are orthonormal
/// directions in feature space; `eigenvalues` are covariance eigenvalues
/// under the unbiased (N-1) convention, nonincreasing.
struct PcaModel {
  Vector mean;           // M
  Matrix components;     // D x M
  Vector eigenvalues;    // D
  Vector variance_ratio; // D, eigenvalue / total variance
  Index n_fit = 0;
  Index m = 0;
  Index d = 0;
};

constexpr Index kAllComponents = -1;

namespace detail {

/// Largest-|entry| coefficient of every component is made positive; among
/// ties the lowest index decides. Removes the sign ambiguity of singular
/// vectors so refits and cross-run cosine comparisons are reproducible.
inline void apply_sign_convention(Matrix& components) {
  for (Index i = 0; i < components.rows(); ++i) {
    Index best = 0;
    double best_abs = std::abs(components(i, 0));
    for (Index j = 1; j < components.cols(); ++j) {
      const double a = std::abs(components(i, j));
      if (a > best_abs) {
        best_abs = a;
        best = j;
      }
    }
    if (components(i, best) < 0.0) components.row(i) = -components.row(i);
  }
}

struct CenteredSpectrum {
  Vector mean;        // M
  Vector eigenvalues; // full spectrum, length min(N-1, M), nonincreasing
  double total_variance = 0.0;
  Matrix gram_vectors; // N x r for the wide path, empty for the tall path
  Matrix centered;     // N x M
};

/// Centering plus the full covariance spectrum. For N <= M this works on the
/// N x N Gram matrix; the M x M covariance is never formed (M may be ~1e6).
inline CenteredSpectrum centered_spectrum(const Eigen::Ref<const Matrix>& x,
                                          bool keep_centered) {
  const Index n = x.rows(), m = x.cols();
  if (n < 2) throw ValidationError("pca: need at least 2 rows");

  CenteredSpectrum s;
  s.mean = x.colwise().sum() / static_cast<double>(n);
  s.centered = x.rowwise() - s.mean.transpose();
  s.total_variance = s.centered.squaredNorm() / static_cast<double>(n - 1);

  const double scale = x.cwiseAbs().maxCoeff();
  if (s.total_variance <= 1e-26 * scale * scale * static_cast<double>(m) ||
      s.total_variance == 0.0)
    throw ValidationError("pca: zero-variance data (all rows identical)");

  const Index r = std::min(n - 1, m);
  if (n <= m) {
    const Matrix gram = s.centered * s.centered.transpose();
    Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
    if (eig.info() != Eigen::Success) throw ComputeError("pca: eigendecomposition failed");
    // Ascending from Eigen; keep the top r in descending order. The dropped
    // eigenvalue belongs to the constant direction removed by centering.
    s.eigenvalues.resize(r);
    s.gram_vectors.resize(n, r);
    for (Index i = 0; i < r; ++i) {
      const Index src = n - 1 - i;
      s.eigenvalues(i) = std::max(eig.eigenvalues()(src), 0.0) / static_cast<double>(n - 1);
      s.gram_vectors.col(i) = eig.eigenvectors().col(src);
    }
  } else {
    Eigen::BDCSVD<Matrix> svd(s.centered, Eigen::ComputeThinV);
    s.eigenvalues.resize(r);
    for (Index i = 0; i < r; ++i) {
      const double sv = svd.singularValues()(i);
      s.eigenvalues(i) = sv * sv / static_cast<double>(n - 1);
    }
    s.gram_vectors = svd.matrixV().leftCols(r);  // M x r here, flagged by shape
  }
  if (!keep_centered) s.centered.resize(0, 0);
  return s;
}

}  // namespace detail

/// Covariance spectrum only (no component materialization). Used by the
/// sweep and diagnostics where eigenvalues suffice; cost is O(N^2 M).
inline Vector variance_spectrum(const Eigen::Ref<const Matrix>& x, double* total_variance = nullptr) {
  auto s = detail::centered_spectrum(x, false);
  if (total_variance) *total_variance = s.total_variance;
  return s.eigenvalues;
}

/// PCA of the row-centered data via SVD. `max_components` caps D at
/// min(N-1, M); pass kAllComponents for the full computable set.
inline PcaModel fit(const Eigen::Ref<const Matrix>& x, Index max_components = kAllComponents) {
  const Index n = x.rows(), m = x.cols();
  const Index r = std::min(n - 1, m);
  const Index d = max_components == kAllComponents ? r : max_components;
  if (d < 1 || d > r)
    throw ValidationError("pca: max_components " + std::to_string(max_components) +
                          " outside [1, min(N-1, M)] = [1, " + std::to_string(r) + "]");

  auto s = detail::centered_spectrum(x, true);

  PcaModel model;
  model.mean = std::move(s.mean);
  model.eigenvalues = s.eigenvalues.head(d);
  model.variance_ratio = model.eigenvalues / s.total_variance;
  model.n_fit = n;
  model.m = m;
  model.d = d;

  if (n <= m) {
    // Right singular vectors from the Gram eigenvectors: B = Xc^T U. A thin
    // Householder QR re-orthonormalizes them, which also yields deterministic
    // orthonormal directions for trailing near-zero singular values.
    Matrix b = s.centered.transpose() * s.gram_vectors.leftCols(d);  // M x d
    Eigen::HouseholderQR<Matrix> qr(b);
    Matrix q = qr.householderQ() * Matrix::Identity(m, d);
    const Matrix r_diag = qr.matrixQR().topLeftCorner(d, d);
    for (Index j = 0; j < d; ++j)
      if (r_diag(j, j) < 0.0) q.col(j) = -q.col(j);
    model.components = q.transpose();
  } else {
    model.components = s.gram_vectors.leftCols(d).transpose();  // thin-SVD V
  }
  detail::apply_sign_convention(model.components);
  return model;
}

inline PcaModel fit(const dataset::TrialMatrix& x, Index max_components = kAllComponents) {
  return fit(x.values, max_components);
}

struct ComponentSelection {
  Index d = 0;
  bool reached = true;  // false when the cumulative ratio never hits the threshold
};

/// Smallest D whose cumulative explained-variance ratio meets `threshold`.
inline ComponentSelection select_components(const Vector& variance_ratio, double threshold) {
  if (variance_ratio.size() == 0) throw ValidationError("select_components: empty variance ratio");
  if (!(threshold > 0.0 && threshold <= 1.0))
    throw ValidationError("select_components: threshold must lie in (0, 1]");
  double cum = 0.0;
  for (Index i = 0; i < variance_ratio.size(); ++i) {
    if (variance_ratio(i) < 0.0)
      throw ValidationError("select_components: negative variance ratio");
    cum += variance_ratio(i);
    if (cum >= threshold) return {i + 1, true};
  }
  if (cum > 1.0 + 1e-8) throw ValidationError("select_components: ratios sum beyond 1");
  return {variance_ratio.size(), false};
}

inline Matrix transform(const PcaModel& model, const Eigen::Ref<const Matrix>& x) {
  if (x.cols() != model.m)
    throw ValidationError("pca transform: input has " + std::to_string(x.cols()) +
                          " columns, model expects " + std::to_string(model.m));
  return (x.rowwise() - model.mean.transpose()) * model.components.transpose();
}

inline Matrix transform(const PcaModel& model, const dataset::TrialMatrix& x) {
  return transform(model, x.values);
}

inline Matrix inverse_transform(const PcaModel& model, const Eigen::Ref<const Matrix>& y) {
  if (y.cols() != model.d)
    throw ValidationError("pca inverse_transform: input has " + std::to_string(y.cols()) +
                          " columns, model expects " + std::to_string(model.d));
  return (y * model.components).rowwise() + model.mean.transpose();
}

// ---------------------------------------------------------------------------
// Model container: PCM1 magic + "MODL" tag + named f64 sections.
// Layout documented in docs/FORMATS.md.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_section(std::ofstream& out, const std::string& name,
                          const Eigen::Ref<const Matrix>& m) {
  dataset::detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  dataset::detail::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
  dataset::detail::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) dataset::detail::write_le<double>(out, m(i, j));
}

inline std::pair<std::string, Matrix> read_section(std::ifstream& in, const std::string& path) {
  std::uint32_t name_len = 0;
  if (!dataset::detail::read_le(in, name_len) || name_len > 256)
    throw ValidationError(path + ": corrupt section header");
  std::string name(name_len, '\0');
  in.read(name.data(), name_len);
  std::uint64_t rows = 0, cols = 0;
  if (in.gcount() != static_cast<std::streamsize>(name_len) ||
      !dataset::detail::read_le(in, rows) || !dataset::detail::read_le(in, cols))
    throw ValidationError(path + ": truncated section " + name);
  if (rows * cols > (std::uint64_t{1} << 40))
    throw ValidationError(path + ": implausible section size");
  Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
  for (std::uint64_t i = 0; i < rows; ++i)
    for (std::uint64_t j = 0; j < cols; ++j) {
      double v;
      if (!dataset::detail::read_le(in, v))
        throw ValidationError(path + ": truncated section " + name);
      m(static_cast<Index>(i), static_cast<Index>(j)) = v;
    }
  return {name, std::move(m)};
}

}  // namespace detail

inline void save_model(const PcaModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path);
  out.write("PCM1", 4);
  dataset::detail::write_le<std::uint32_t>(out, 1);
  out.write("MODL", 4);
  dataset::detail::write_le<std::uint32_t>(out, 5);
  Matrix shape(1, 3);
  shape << static_cast<double>(model.n_fit), static_cast<double>(model.m),
      static_cast<double>(model.d);
  detail::write_section(out, "shape", shape);
  detail::write_section(out, "mean", model.mean.transpose());
  detail::write_section(out, "components", model.components);
  detail::write_section(out, "eigenvalues", model.eigenvalues.transpose());
  detail::write_section(out, "variance_ratio", model.variance_ratio.transpose());
  if (!out) throw ComputeError("short write to " + path);
}

inline PcaModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  char magic[4], tag[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, "PCM1", 4) != 0)
    throw ValidationError(path + ": unrecognized model file");
  std::uint32_t version = 0;
  if (!dataset::detail::read_le(in, version) || version != 1)
    throw ValidationError(path + ": unsupported version");
  in.read(tag, 4);
  if (in.gcount() != 4 || std::memcmp(tag, "MODL", 4) != 0)
    throw ValidationError(path + ": not a PCA model container");
  std::uint32_t n_sections = 0;
  if (!dataset::detail::read_le(in, n_sections) || n_sections > 64)
    throw ValidationError(path + ": corrupt section count");

  PcaModel model;
  bool have_shape = false, have_mean = false, have_components = false, have_eigen = false,
       have_ratio = false;
  for (std::uint32_t s = 0; s < n_sections; ++s) {
    auto [name, m] = detail::read_section(in, path);
    if (name == "shape") {
      model.n_fit = static_cast<Index>(m(0, 0));
      model.m = static_cast<Index>(m(0, 1));
      model.d = static_cast<Index>(m(0, 2));
      have_shape = true;
    } else if (name == "mean") {
      model.mean = m.row(0).transpose();
      have_mean = true;
    } else if (name == "components") {
      model.components = std::move(m);
      have_components = true;
    } else if (name == "eigenvalues") {
      model.eigenvalues = m.row(0).transpose();
      have_eigen = true;
    } else if (name == "variance_ratio") {
      model.variance_ratio = m.row(0).transpose();
      have_ratio = true;
    }
  }
  if (!(have_shape && have_mean && have_components && have_eigen && have_ratio))
    throw ValidationError(path + ": missing model sections");
  if (model.components.rows() != model.d || model.components.cols() != model.m ||
      model.mean.size() != model.m || model.eigenvalues.size() != model.d)
    throw ValidationError(path + ": inconsistent model sections");
  return model;
}

}  // namespace popcluster::pca
