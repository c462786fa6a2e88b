#pragma once

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "popcluster/common.hpp"

namespace popcluster::csv {

/// Minimal RFC-4180-style reader: comma separator, optional double-quoted
/// fields with "" escapes, LF or CRLF line ends. Returns rows of raw fields.
inline std::vector<std::vector<std::string>> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();

  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool any = false;

  auto end_field = [&] {
    row.push_back(field);
    field.clear();
    any = false;
  };
  auto end_row = [&] {
    end_field();
    rows.push_back(std::move(row));
    row.clear();
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      any = true;
      continue;
    }
    switch (c) {
      case '"':
        quoted = true;
        any = true;
        break;
      case ',':
        end_field();
        break;
      case '\r':
        break;
      case '\n':
        end_row();
        break;
      default:
        field += c;
        any = true;
        break;
    }
  }
  if (quoted) throw ValidationError(path + ": unterminated quoted field");
  if (any || !field.empty() || !row.empty()) end_row();
  return rows;
}

inline std::string quote_if_needed(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

/// Locale-independent numeric parse; rejects trailing garbage and
/// non-finite values (NaN/Inf never enter validated tables).
inline bool parse_double(const std::string& s, double& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  while (first != last && (*first == ' ' || *first == '\t')) ++first;
  while (last != first && (*(last - 1) == ' ' || *(last - 1) == '\t')) --last;
  if (first == last) return false;
  const auto res = std::from_chars(first, last, out);
  if (res.ec != std::errc{} || res.ptr != last) return false;
  return std::isfinite(out);
}

/// Streaming writer with a fixed header; all numbers are formatted with
/// format_double so output is byte-stable across runs.
class Writer {
public:
  Writer(const std::string& path, const std::vector<std::string>& header) : out_(path, std::ios::binary) {
    if (!out_) throw ValidationError("cannot write " + path);
    path_ = path;
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (i) out_ << ',';
      out_ << quote_if_needed(header[i]);
    }
    out_ << '\n';
    width_ = header.size();
  }

  void row(const std::vector<std::string>& fields) {
    if (fields.size() != width_)
      throw ComputeError(path_ + ": row width " + std::to_string(fields.size()) +
                         " != header width " + std::to_string(width_));
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      out_ << quote_if_needed(fields[i]);
    }
    out_ << '\n';
  }

private:
  std::ofstream out_;
  std::string path_;
  std::size_t width_ = 0;
};

}  // namespace popcluster::csv
