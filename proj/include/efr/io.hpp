#pragma once

// Headerless CSV matrices, one sample per row.

#include <Eigen/Dense>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "efr/checkpoint.hpp"
#include "efr/error.hpp"
#include "efr/lie_rotation.hpp"

namespace efr {

inline std::string format_g17(double v) {
  char buf[32];
  const auto n = std::snprintf(buf, sizeof buf, "%.17g", v);
  return std::string(buf, static_cast<std::size_t>(n));
}

inline Matrix parse_csv_matrix(std::string_view text) {
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    std::vector<double> row;
    while (true) {
      const auto comma = line.find(',');
      std::string_view cell = line.substr(0, comma);
      while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
      while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t')) cell.remove_suffix(1);
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || ec != std::errc{} || ptr != cell.data() + cell.size() || !std::isfinite(v))
        throw FormatError("line " + std::to_string(line_no) + ": '" + std::string(cell) + "' is not a finite number");
      row.push_back(v);
      if (comma == std::string_view::npos) break;
      line = line.substr(comma + 1);
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw FormatError("line " + std::to_string(line_no) + ": expected " + std::to_string(rows.front().size()) +
                        " columns, found " + std::to_string(row.size()));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw FormatError("no samples found");
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  return m;
}

inline std::string csv_matrix(const Matrix& m) {
  std::string out;
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      if (j) out += ',';
      out += format_g17(m(i, j));
    }
    out += '\n';
  }
  return out;
}

inline Matrix load_csv_matrix(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FormatError("file not found: " + path.string());
  return parse_csv_matrix(read_file(path));
}

}  // namespace efr
