#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

// Minimal comma-separated I/O: header row, `.` decimal point, no quoting, no
// locale. Numbers are written with 17 significant digits so a save/load
// cycle reproduces every double bit for bit.
namespace lgf::csv {

std::string format_number(double value);

// Parses a full cell as a finite double; `where` prefixes the error message.
double parse_number(std::string_view cell, const std::string& where);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Index of `name` in the header or throws InputError.
  std::size_t column(const std::string& name) const;
};

std::vector<std::string> split_line(std::string_view line);

Table read(std::istream& in, const std::string& source);
Table read_file(const std::filesystem::path& path);

void write_row(std::ostream& out, std::span<const std::string> cells);
void write_numbers(std::ostream& out, std::span<const double> values);

}  // namespace lgf::csv
