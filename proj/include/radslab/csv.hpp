#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace radslab::csv {

/// Numeric CSV table with a header row.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  /// Index of a column; throws std::runtime_error if absent.
  std::size_t column(const std::string& name) const;
};

/// Reads a CSV whose first line is a header and whose remaining lines are
/// numbers. Blank lines are skipped. Decimal points are '.' regardless of
/// the global locale.
Table read(const std::filesystem::path& path);

/// Shortest round-trip decimal representation, locale independent.
std::string format(double value);

/// Writes header + rows with full double precision.
void write(std::ostream& out, const std::vector<std::string>& header, const std::vector<std::vector<double>>& rows);
void write(const std::filesystem::path& path, const std::vector<std::string>& header,
           const std::vector<std::vector<double>>& rows);

}  // namespace radslab::csv
