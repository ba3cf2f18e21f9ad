#ifndef TRANSFLOWER_CSV_HPP
#define TRANSFLOWER_CSV_HPP

#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace transflower::csv {

/// Splits one CSV line on commas. Fields are trimmed of surrounding
/// whitespace and a trailing '\r'. Quoting is not supported.
std::vector<std::string> split_line(std::string_view line);

/// Parses a finite or non-finite decimal number; throws ParseError naming
/// `context` when the whole field is not a number.
double parse_double(std::string_view field, std::string_view context);

/// Shortest round-trip decimal representation.
std::string format_double(double value);

/// Opens `path` for writing, creating parent directories. Throws
/// std::runtime_error when the file cannot be opened.
std::ofstream open_output(const std::filesystem::path& path);

/// Reads an entire file into lines, stripping '\r'.
std::vector<std::string> read_lines(const std::filesystem::path& path);

}  // namespace transflower::csv

#endif  // TRANSFLOWER_CSV_HPP
