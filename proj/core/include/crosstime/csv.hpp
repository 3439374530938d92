#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "crosstime/errors.hpp"
#include "crosstime/tensor.hpp"

namespace crosstime {

/// Shortest exact-round-trip-safe formatting used by every CSV we emit.
inline std::string format_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_csv_matrix(const std::string& path, const Tensor& m) {
  if (m.rank() != 2) throw ShapeError("write_csv_matrix needs rank 2");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  for (int64_t i = 0; i < m.dim(0); ++i) {
    for (int64_t j = 0; j < m.dim(1); ++j) {
      if (j) out << ",";
      out << format_g17(m.at(i, j));
    }
    out << "\n";
  }
  if (!out) throw IoError("write to " + path + " failed");
}

inline void write_csv_rows(const std::string& path, const std::string& header,
                           const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << header << "\n";
  for (const auto& row : rows) {
    for (size_t i = 0; i < row.size(); ++i) {
      if (i) out << ",";
      out << row[i];
    }
    out << "\n";
  }
  if (!out) throw IoError("write to " + path + " failed");
}

}  // namespace crosstime
