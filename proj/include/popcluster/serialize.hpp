#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "popcluster/common.hpp"
#include "popcluster/gmm.hpp"

namespace popcluster::serialize {

using ordered_json = nlohmann::ordered_json;

inline ordered_json gmm_fit_to_json(const gmm::GmmFit& fit) {
  ordered_json j;
  j["k"] = fit.params.k;
  j["d"] = fit.params.d();
  j["seed"] = fit.seed;
  j["opts"] = {{"max_iter", fit.opts.max_iter},
               {"tol", fit.opts.tol},
               {"reg_covar", fit.opts.reg_covar}};
  j["log_likelihood"] = fit.log_likelihood;
  j["n_iter"] = fit.n_iter;
  j["converged"] = fit.converged;

  j["weights"] = std::vector<double>(fit.params.weights.data(),
                                     fit.params.weights.data() + fit.params.weights.size());
  ordered_json means = ordered_json::array();
  for (Index c = 0; c < fit.params.means.rows(); ++c) {
    std::vector<double> row(static_cast<std::size_t>(fit.params.means.cols()));
    for (Index i = 0; i < fit.params.means.cols(); ++i)
      row[static_cast<std::size_t>(i)] = fit.params.means(c, i);
    means.push_back(row);
  }
  j["means"] = std::move(means);
  // Covariances flattened row-major, one list per component.
  ordered_json covs = ordered_json::array();
  for (const auto& cov : fit.params.covariances) {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(cov.size()));
    for (Index r = 0; r < cov.rows(); ++r)
      for (Index c = 0; c < cov.cols(); ++c) flat.push_back(cov(r, c));
    covs.push_back(std::move(flat));
  }
  j["covariances"] = std::move(covs);
  j["mean_ll_trace"] = fit.mean_ll_trace;
  return j;
}

inline gmm::GmmFit gmm_fit_from_json(const ordered_json& j) {
  gmm::GmmFit fit;
  fit.params.k = j.at("k").get<int>();
  const auto d = j.at("d").get<Index>();
  fit.seed = j.at("seed").get<std::uint64_t>();
  fit.opts.max_iter = j.at("opts").at("max_iter").get<int>();
  fit.opts.tol = j.at("opts").at("tol").get<double>();
  fit.opts.reg_covar = j.at("opts").at("reg_covar").get<double>();
  fit.log_likelihood = j.at("log_likelihood").get<double>();
  fit.n_iter = j.at("n_iter").get<int>();
  fit.converged = j.at("converged").get<bool>();

  const auto weights = j.at("weights").get<std::vector<double>>();
  fit.params.weights = Eigen::Map<const Vector>(weights.data(), static_cast<Index>(weights.size()));
  const auto& means = j.at("means");
  fit.params.means.resize(fit.params.k, d);
  for (Index c = 0; c < fit.params.means.rows(); ++c) {
    const auto row = means.at(static_cast<std::size_t>(c)).get<std::vector<double>>();
    if (static_cast<Index>(row.size()) != d)
      throw ValidationError("fit json: mean row has wrong dimension");
    for (Index i = 0; i < d; ++i) fit.params.means(c, i) = row[static_cast<std::size_t>(i)];
  }
  const auto& covs = j.at("covariances");
  for (Index c = 0; c < fit.params.k; ++c) {
    const auto flat = covs.at(static_cast<std::size_t>(c)).get<std::vector<double>>();
    if (static_cast<Index>(flat.size()) != d * d)
      throw ValidationError("fit json: covariance has wrong size");
    Matrix cov(d, d);
    for (Index r = 0; r < d; ++r)
      for (Index k = 0; k < d; ++k) cov(r, k) = flat[static_cast<std::size_t>(r * d + k)];
    fit.params.covariances.push_back(std::move(cov));
  }
  fit.mean_ll_trace = j.at("mean_ll_trace").get<std::vector<double>>();
  return fit;
}

inline void write_json(const ordered_json& j, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path);
  out << j.dump(2) << '\n';
}

inline ordered_json read_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  try {
    return ordered_json::parse(in);
  } catch (const std::exception& e) {
    throw ValidationError(path + ": invalid JSON: " + e.what());
  }
}

}  // namespace popcluster::serialize
