#pragma once

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "popcluster/common.hpp"
#include "popcluster/csv.hpp"

namespace popcluster::dataset {

/// One subject's trial-by-feature matrix. Row i belongs to trial_ids[i].
/// Validated instances are finite everywhere with unique trial ids.
struct TrialMatrix {
  std::vector<std::string> trial_ids;
  Matrix values;  // N x M

  Index n_trials() const { return values.rows(); }
  Index n_features() const { return values.cols(); }
};

enum class ColumnKind { continuous, discrete };

/// Declared kind of one rating column. Continuous columns carry a declared
/// range; discrete columns hold nonnegative integers stored exactly.
struct ColumnSpec {
  ColumnKind kind = ColumnKind::continuous;
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
};

struct RatingsTable {
  std::vector<std::string> trial_ids;
  std::vector<std::string> column_names;
  std::vector<ColumnSpec> kinds;  // one per column
  Matrix values;                  // N x R

  Index n_trials() const { return values.rows(); }
  Index n_columns() const { return values.cols(); }
};

namespace detail {

inline void check_unique_ids(const std::vector<std::string>& ids, const std::string& context) {
  std::unordered_set<std::string> seen;
  seen.reserve(ids.size());
  for (const auto& id : ids) {
    if (!seen.insert(id).second)
      throw ValidationError(context + ": duplicate trial id " + id);
  }
}

}  // namespace detail

inline void validate(const TrialMatrix& m, const std::string& context = "matrix") {
  if (m.n_trials() < 2) throw ValidationError(context + ": need at least 2 trials");
  if (m.n_features() < 1) throw ValidationError(context + ": need at least 1 feature");
  if (static_cast<Index>(m.trial_ids.size()) != m.n_trials())
    throw ValidationError(context + ": trial id count does not match row count");
  detail::check_unique_ids(m.trial_ids, context);
  if (!m.values.allFinite()) {
    for (Index i = 0; i < m.values.rows(); ++i)
      for (Index j = 0; j < m.values.cols(); ++j)
        if (!std::isfinite(m.values(i, j)))
          throw ValidationError(context + ": non-finite value at row " + std::to_string(i + 1) +
                                ", column " + std::to_string(j));
  }
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// Header row is `trial_id,<feature names...>`; one row per trial. Errors
/// name the 1-based data row and the column header.
inline TrialMatrix load_matrix_csv(const std::string& path) {
  const auto rows = csv::read_file(path);
  if (rows.empty()) throw ValidationError(path + ": empty file");
  const auto& header = rows.front();
  if (header.empty() || header[0] != "trial_id")
    throw ValidationError(path + ": header must start with trial_id");
  const std::size_t m = header.size() - 1;
  if (m < 1) throw ValidationError(path + ": no feature columns");
  const std::size_t n = rows.size() - 1;
  if (n < 2) throw ValidationError(path + ": need at least 2 trials");

  TrialMatrix out;
  out.trial_ids.reserve(n);
  out.values.resize(static_cast<Index>(n), static_cast<Index>(m));
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() != header.size())
      throw ValidationError(path + ": ragged row " + std::to_string(r) + " has " +
                            std::to_string(row.size()) + " fields, expected " +
                            std::to_string(header.size()));
    out.trial_ids.push_back(row[0]);
    for (std::size_t c = 1; c < row.size(); ++c) {
      double v;
      if (!csv::parse_double(row[c], v))
        throw ValidationError(path + ": invalid numeric value \"" + row[c] + "\" at row " +
                              std::to_string(r) + ", column " + header[c]);
      out.values(static_cast<Index>(r - 1), static_cast<Index>(c - 1)) = v;
    }
  }
  validate(out, path);
  return out;
}

inline void save_matrix_csv(const TrialMatrix& m, const std::string& path) {
  std::vector<std::string> header{"trial_id"};
  for (Index j = 0; j < m.n_features(); ++j) header.push_back("f" + std::to_string(j));
  csv::Writer w(path, header);
  std::vector<std::string> row(header.size());
  for (Index i = 0; i < m.n_trials(); ++i) {
    row[0] = m.trial_ids[static_cast<std::size_t>(i)];
    for (Index j = 0; j < m.n_features(); ++j)
      row[static_cast<std::size_t>(j) + 1] = format_double(m.values(i, j));
    w.row(row);
  }
}

/// Column kinds must be declared; nothing is inferred from the values.
/// `overrides` maps column names to specs; everything else uses `fallback`.
inline RatingsTable load_ratings_csv(const std::string& path,
                                     const std::map<std::string, ColumnSpec>& overrides = {},
                                     const ColumnSpec& fallback = {}) {
  const auto rows = csv::read_file(path);
  if (rows.empty()) throw ValidationError(path + ": empty file");
  const auto& header = rows.front();
  if (header.empty() || header[0] != "trial_id")
    throw ValidationError(path + ": header must start with trial_id");
  const std::size_t r_cols = header.size() - 1;
  if (r_cols < 1) throw ValidationError(path + ": no rating columns");

  RatingsTable out;
  out.column_names.assign(header.begin() + 1, header.end());
  out.kinds.reserve(r_cols);
  for (const auto& name : out.column_names) {
    const auto it = overrides.find(name);
    out.kinds.push_back(it != overrides.end() ? it->second : fallback);
  }

  const std::size_t n = rows.size() - 1;
  out.trial_ids.reserve(n);
  out.values.resize(static_cast<Index>(n), static_cast<Index>(r_cols));
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() != header.size())
      throw ValidationError(path + ": ragged row " + std::to_string(r));
    out.trial_ids.push_back(row[0]);
    for (std::size_t c = 1; c < row.size(); ++c) {
      double v;
      if (!csv::parse_double(row[c], v))
        throw ValidationError(path + ": invalid numeric value \"" + row[c] + "\" at row " +
                              std::to_string(r) + ", column " + header[c]);
      const auto& spec = out.kinds[c - 1];
      if (spec.kind == ColumnKind::continuous) {
        if (v < spec.lo || v > spec.hi)
          throw ValidationError(path + ": value " + format_double(v) + " outside declared range [" +
                                format_double(spec.lo) + ", " + format_double(spec.hi) +
                                "] at row " + std::to_string(r) + ", column " + header[c]);
      } else {
        if (v < 0.0 || v != std::floor(v))
          throw ValidationError(path + ": column " + header[c] +
                                " is declared discrete but has value " + format_double(v) +
                                " at row " + std::to_string(r));
      }
      out.values(static_cast<Index>(r - 1), static_cast<Index>(c - 1)) = v;
    }
  }
  detail::check_unique_ids(out.trial_ids, path);
  return out;
}

// ---------------------------------------------------------------------------
// PCM1 binary matrix format
// ---------------------------------------------------------------------------
// Layout (all little-endian):
//   bytes 0-3   magic "PCM1"
//   u32         version (= 1)
//   u64         rows
//   u64         cols
//   f64 x rows*cols   values, row-major
//   per row: u32 id length, then that many UTF-8 bytes
// See docs/FORMATS.md.

namespace detail {

template <typename T>
void write_le(std::ofstream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.write(buf, sizeof(T));
}

template <typename T>
bool read_le(std::ifstream& in, T& v) {
  char buf[sizeof(T)];
  in.read(buf, sizeof(T));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) return false;
  std::memcpy(&v, buf, sizeof(T));
  return true;
}

}  // namespace detail

inline void save_matrix_binary(const TrialMatrix& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path);
  out.write("PCM1", 4);
  detail::write_le<std::uint32_t>(out, 1);
  detail::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(m.values.rows()));
  detail::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(m.values.cols()));
  // Row-major on disk; Eigen matrices are column-major in memory.
  for (Index i = 0; i < m.values.rows(); ++i)
    for (Index j = 0; j < m.values.cols(); ++j)
      detail::write_le<double>(out, m.values(i, j));
  for (const auto& id : m.trial_ids) {
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(id.size()));
    out.write(id.data(), static_cast<std::streamsize>(id.size()));
  }
  if (!out) throw ComputeError("short write to " + path);
}

inline TrialMatrix load_matrix_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, "PCM1", 4) != 0)
    throw ValidationError(path + ": unrecognized matrix file");
  std::uint32_t version = 0;
  if (!detail::read_le(in, version) || version != 1)
    throw ValidationError(path + ": unsupported PCM1 version");
  std::uint64_t rows = 0, cols = 0;
  if (!detail::read_le(in, rows) || !detail::read_le(in, cols))
    throw ValidationError(path + ": truncated header");

  constexpr std::uint64_t kMaxElems = std::uint64_t{1} << 40;  // 8 TiB of doubles
  if (rows == 0 || cols == 0 || rows > kMaxElems || cols > kMaxElems || rows * cols > kMaxElems)
    throw ValidationError(path + ": implausible dimensions " + std::to_string(rows) + "x" +
                          std::to_string(cols));

  TrialMatrix out;
  out.values.resize(static_cast<Index>(rows), static_cast<Index>(cols));
  for (std::uint64_t i = 0; i < rows; ++i)
    for (std::uint64_t j = 0; j < cols; ++j) {
      double v;
      if (!detail::read_le(in, v))
        throw ValidationError(path + ": truncated payload at element " +
                              std::to_string(i * cols + j) + " of " + std::to_string(rows * cols));
      out.values(static_cast<Index>(i), static_cast<Index>(j)) = v;
    }
  out.trial_ids.reserve(rows);
  for (std::uint64_t i = 0; i < rows; ++i) {
    std::uint32_t len = 0;
    if (!detail::read_le(in, len))
      throw ValidationError(path + ": truncated trial id block");
    std::string id(len, '\0');
    in.read(id.data(), len);
    if (in.gcount() != static_cast<std::streamsize>(len))
      throw ValidationError(path + ": truncated trial id block");
    out.trial_ids.push_back(std::move(id));
  }
  validate(out, path);
  return out;
}

/// Dispatch on extension: .pcm1 binary, anything else CSV.
inline TrialMatrix load_matrix(const std::string& path) {
  if (path.size() >= 5 && path.substr(path.size() - 5) == ".pcm1")
    return load_matrix_binary(path);
  return load_matrix_csv(path);
}

// ---------------------------------------------------------------------------
// Alignment
// ---------------------------------------------------------------------------

struct AlignedPair {
  TrialMatrix matrix;
  RatingsTable ratings;
  std::vector<std::string> dropped_from_matrix;   // trials with no ratings
  std::vector<std::string> dropped_from_ratings;  // rated trials with no data
};

/// Reorders both sides to the shared trial ids, in matrix order. Trials
/// missing from either side are dropped and reported, never imputed.
inline AlignedPair align(const TrialMatrix& m, const RatingsTable& r) {
  std::unordered_map<std::string, Index> rating_row;
  rating_row.reserve(r.trial_ids.size());
  for (std::size_t i = 0; i < r.trial_ids.size(); ++i)
    rating_row.emplace(r.trial_ids[i], static_cast<Index>(i));

  AlignedPair out;
  std::vector<Index> m_keep, r_keep;
  std::unordered_set<std::string> shared;
  for (std::size_t i = 0; i < m.trial_ids.size(); ++i) {
    const auto it = rating_row.find(m.trial_ids[i]);
    if (it == rating_row.end()) {
      out.dropped_from_matrix.push_back(m.trial_ids[i]);
    } else {
      m_keep.push_back(static_cast<Index>(i));
      r_keep.push_back(it->second);
      shared.insert(m.trial_ids[i]);
    }
  }
  for (const auto& id : r.trial_ids)
    if (!shared.count(id)) out.dropped_from_ratings.push_back(id);

  if (m_keep.empty()) throw ValidationError("align: no shared trials");

  const auto n = static_cast<Index>(m_keep.size());
  out.matrix.values.resize(n, m.n_features());
  out.ratings.values.resize(n, r.n_columns());
  out.matrix.trial_ids.reserve(m_keep.size());
  out.ratings.trial_ids.reserve(m_keep.size());
  out.ratings.column_names = r.column_names;
  out.ratings.kinds = r.kinds;
  for (Index i = 0; i < n; ++i) {
    const Index mi = m_keep[static_cast<std::size_t>(i)];
    const Index ri = r_keep[static_cast<std::size_t>(i)];
    out.matrix.values.row(i) = m.values.row(mi);
    out.ratings.values.row(i) = r.values.row(ri);
    out.matrix.trial_ids.push_back(m.trial_ids[static_cast<std::size_t>(mi)]);
    out.ratings.trial_ids.push_back(r.trial_ids[static_cast<std::size_t>(ri)]);
  }
  return out;
}

}  // namespace popcluster::dataset
