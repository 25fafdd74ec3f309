#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace agt::csv {

/// A parsed CSV table: header plus rows of raw string fields. Quoted fields
/// and embedded commas are handled by boost's escaped-list tokenizer.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;  // 1-based source line of each row

  std::optional<std::size_t> column(std::string_view name) const;
  std::size_t require_column(std::string_view name, std::string_view module) const;
};

Table parse(std::string_view text, std::string_view module);
Table read_file(const std::filesystem::path& path, std::string_view module);

std::string read_text(const std::filesystem::path& path, std::string_view module);

/// Strict numeric parse; throws InputError naming `what` on failure.
double to_double(std::string_view field, std::string_view module, std::string_view what);
long to_long(std::string_view field, std::string_view module, std::string_view what);

/// Number of digits after the decimal point in a literal ("-0.032" -> 3).
int decimals(std::string_view literal);

std::string trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);

/// Shortest round-trip text for a double.
std::string format_double(double v);

/// Quote a field if it contains separators or quotes.
std::string escape(std::string_view field);

}  // namespace agt::csv
