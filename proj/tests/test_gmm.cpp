#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "popcluster/gmm.hpp"

using namespace popcluster;
using Catch::Approx;

namespace {

Matrix two_blobs_1d(Index per_side, std::uint64_t seed, double center = 5.0) {
  Rng rng(seed);
  Matrix y(2 * per_side, 1);
  for (Index i = 0; i < per_side; ++i) y(i, 0) = -center + rng.gauss();
  for (Index i = per_side; i < 2 * per_side; ++i) y(i, 0) = center + rng.gauss();
  return y;
}

Matrix random_points(Index n, Index d, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Matrix y(n, d);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j) y(i, j) = scale * rng.gauss();
  return y;
}

}  // namespace

TEST_CASE("em recovers two separated 1-D blobs") {
  const Index per_side = 200;
  const Matrix y = two_blobs_1d(per_side, 21);
  const auto fit = gmm::em_fit(y, 2, 17);
  REQUIRE(fit.params.k == 2);

  // Oracle: sample means of the two known halves.
  const double left = y.topRows(per_side).mean();
  const double right = y.bottomRows(per_side).mean();
  double fit_left = fit.params.means(0, 0), fit_right = fit.params.means(1, 0);
  if (fit_left > fit_right) std::swap(fit_left, fit_right);
  CHECK(fit_left == Approx(left).margin(0.05));
  CHECK(fit_right == Approx(right).margin(0.05));
  CHECK(std::abs(fit_left + 5.0) < 0.2);
  CHECK(std::abs(fit_right - 5.0) < 0.2);
  CHECK(std::abs(fit.params.weights(0) - 0.5) < 0.05);
  CHECK(std::abs(fit.params.weights(1) - 0.5) < 0.05);
  CHECK(fit.converged);
}

TEST_CASE("K=1 reaches the closed-form fixed point") {
  const Matrix y = random_points(80, 3, 5);
  gmm::GmmOptions opts;
  const auto fit = gmm::em_fit(y, 1, 99, opts);

  const Vector mean = y.colwise().mean();
  const Matrix centered = y.rowwise() - mean.transpose();
  Matrix cov = centered.transpose() * centered / 80.0;
  cov.diagonal().array() += opts.reg_covar;

  CHECK((fit.params.means.row(0).transpose() - mean).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((fit.params.covariances[0] - cov).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(fit.params.weights(0) == 1.0);
  CHECK(fit.converged);
}

TEST_CASE("refit with the same seed is bit-identical") {
  const Matrix y = random_points(120, 2, 31);
  const auto a = gmm::em_fit(y, 3, 12345);
  const auto b = gmm::em_fit(y, 3, 12345);
  CHECK(a.params.weights == b.params.weights);
  CHECK(a.params.means == b.params.means);
  for (int c = 0; c < 3; ++c)
    CHECK(a.params.covariances[static_cast<std::size_t>(c)] ==
          b.params.covariances[static_cast<std::size_t>(c)]);
  CHECK(a.log_likelihood == b.log_likelihood);
  CHECK(a.n_iter == b.n_iter);
  CHECK(a.mean_ll_trace == b.mean_ll_trace);
}

TEST_CASE("em rejects invalid inputs") {
  const Matrix y = random_points(5, 2, 1);
  CHECK_THROWS_AS(gmm::em_fit(y, 5, 0), ValidationError);
  CHECK_THROWS_AS(gmm::em_fit(y, 0, 0), ValidationError);
  Matrix bad = y;
  bad(2, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(gmm::em_fit(bad, 2, 0), ValidationError);
}

TEST_CASE("log-likelihood closed forms") {
  gmm::GmmParams params;
  params.k = 1;
  params.weights = Vector::Ones(1);
  params.means = Matrix::Zero(1, 1);
  params.covariances = {Matrix::Ones(1, 1)};

  Matrix y(1, 1);
  y << 0.0;
  CHECK(gmm::log_likelihood(params, y) == Approx(-0.5 * std::log(2.0 * M_PI)).margin(1e-12));

  // Duplicating the dataset doubles the log-likelihood exactly.
  const Matrix pts = random_points(40, 2, 8);
  gmm::GmmParams p2;
  p2.k = 2;
  p2.weights = Vector::Constant(2, 0.5);
  p2.means = random_points(2, 2, 9);
  Matrix cov = Matrix::Identity(2, 2);
  cov(0, 1) = cov(1, 0) = 0.3;
  p2.covariances = {cov, Matrix::Identity(2, 2)};
  const double single = gmm::log_likelihood(p2, pts);
  Matrix doubled(80, 2);
  doubled << pts, pts;
  CHECK(gmm::log_likelihood(p2, doubled) == Approx(2.0 * single).epsilon(1e-14));

  // Relabeling the components leaves the value unchanged.
  gmm::GmmParams swapped = p2;
  swapped.means.row(0) = p2.means.row(1);
  swapped.means.row(1) = p2.means.row(0);
  swapped.covariances = {p2.covariances[1], p2.covariances[0]};
  CHECK(gmm::log_likelihood(swapped, pts) == Approx(single).epsilon(1e-12));
}

TEST_CASE("responsibilities behave at symmetry and saturation") {
  gmm::GmmParams params;
  params.k = 2;
  params.weights = Vector::Constant(2, 0.5);
  params.means = Matrix(2, 1);
  params.means << -1.0, 1.0;
  params.covariances = {Matrix::Ones(1, 1), Matrix::Ones(1, 1)};

  Matrix mid(1, 1);
  mid << 0.0;
  const auto post = gmm::responsibilities(params, mid);
  CHECK(post.resp(0, 0) == Approx(0.5).margin(1e-12));
  CHECK(post.resp(0, 1) == Approx(0.5).margin(1e-12));

  // A point 20 sigma inside component 0 of a well-separated pair.
  gmm::GmmParams far = params;
  far.means << 0.0, 40.0;
  Matrix probe(1, 1);
  probe << 0.0;
  const auto sat = gmm::responsibilities(far, probe);
  CHECK(sat.resp(0, 0) >= 1.0 - 1e-12);

  // Rows always sum to 1.
  const Matrix pts = random_points(50, 1, 3, 5.0);
  const auto rows = gmm::responsibilities(params, pts);
  for (Index i = 0; i < rows.resp.rows(); ++i) {
    CHECK(rows.resp.row(i).sum() == Approx(1.0).margin(1e-10));
    CHECK(rows.resp.row(i).minCoeff() >= 0.0);
    CHECK(rows.resp.row(i).maxCoeff() <= 1.0);
  }
}

TEST_CASE("bic closed form at K=1 D=1") {
  // Data with MLE variance exactly 1: +/-1 alternating, mean 0.
  Matrix y(100, 1);
  for (Index i = 0; i < 100; ++i) y(i, 0) = (i % 2 == 0) ? 1.0 : -1.0;
  const auto fit = gmm::em_fit(y, 1, 0);
  const double expected_ll = -50.0 * (std::log(2.0 * M_PI) + 1.0);
  CHECK(fit.log_likelihood == Approx(expected_ll).margin(1e-3));
  CHECK(gmm::bic(fit, 100) == Approx(2.0 * std::log(100.0) - 2.0 * expected_ll).margin(0.01));
  CHECK(gmm::bic(fit, 100) == Approx(292.998).margin(0.01));
}

TEST_CASE("bic penalty arithmetic") {
  gmm::GmmFit a, b;
  a.params.k = 3;
  a.params.means = Matrix::Zero(3, 4);
  a.log_likelihood = -500.0;
  b.params.k = 4;
  b.params.means = Matrix::Zero(4, 4);
  b.log_likelihood = -500.0;
  const double d = 4.0;
  const double delta_p = 1.0 + d + d * (d + 1.0) / 2.0;  // one extra component
  CHECK(gmm::bic(b, 250) - gmm::bic(a, 250) == Approx(delta_p * std::log(250.0)).margin(1e-9));
}

TEST_CASE("hard assignment uses argmax with low-index ties") {
  gmm::Posterior post;
  post.resp.resize(3, 3);
  post.resp << 0.1, 0.7, 0.2,
               0.5, 0.5, 0.0,
               0.0, 0.0, 1.0;
  const auto labels = gmm::hard_assign(post);
  CHECK(labels == std::vector<int>{1, 0, 2});
}

TEST_CASE("mean log-likelihood trace is nondecreasing") {
  Rng meta(777);
  for (int trial = 0; trial < 60; ++trial) {
    const Index n = 30 + static_cast<Index>(meta.uniform_index(120));
    const Index d = 1 + static_cast<Index>(meta.uniform_index(4));
    const int k = 1 + static_cast<int>(meta.uniform_index(5));
    if (n <= k) continue;
    const Matrix y = random_points(n, d, meta.next_u64(), 1.0 + meta.uniform() * 3.0);
    const auto fit = gmm::em_fit(y, k, meta.next_u64());
    for (std::size_t i = 1; i < fit.mean_ll_trace.size(); ++i)
      CHECK(fit.mean_ll_trace[i] >= fit.mean_ll_trace[i - 1] - 1e-8);
  }
}

TEST_CASE("row permutation only permutes responsibilities") {
  const Matrix y = random_points(60, 2, 41, 2.0);
  const auto fit = gmm::em_fit(y, 2, 7);

  Rng rng(13);
  const auto perm = rng.permutation(60);
  Matrix shuffled(60, 2);
  for (Index i = 0; i < 60; ++i) shuffled.row(i) = y.row(perm[static_cast<std::size_t>(i)]);

  const auto post = gmm::responsibilities(fit.params, y);
  const auto post_shuffled = gmm::responsibilities(fit.params, shuffled);
  for (Index i = 0; i < 60; ++i)
    CHECK((post_shuffled.resp.row(i) - post.resp.row(perm[static_cast<std::size_t>(i)]))
              .cwiseAbs()
              .maxCoeff() < 1e-14);
}

TEST_CASE("K=1 log-likelihood shifts by -N*D*ln(s) under scaling") {
  const Index n = 90, d = 2;
  const Matrix y = random_points(n, d, 3);
  gmm::GmmOptions opts;
  opts.reg_covar = 1e-10;  // keep the fixed point sharp
  const double s = 3.5;
  const auto base = gmm::em_fit(y, 1, 0, opts);
  const auto scaled = gmm::em_fit((s * y.array()).matrix(), 1, 0, opts);
  const double expected = base.log_likelihood - static_cast<double>(n * d) * std::log(s);
  CHECK(scaled.log_likelihood == Approx(expected).margin(1e-6));
}
