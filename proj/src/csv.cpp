#include "agt/csv.hpp"

#include "agt/common.hpp"

#include <boost/tokenizer.hpp>

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace agt::csv {

std::optional<std::size_t> Table::column(std::string_view name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  return std::nullopt;
}

std::size_t Table::require_column(std::string_view name, std::string_view module) const {
  if (auto c = column(name)) return *c;
  throw InputError(std::string(module), "missing required column '" + std::string(name) + "'");
}

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      out.push_back(trim(s.substr(start, i - start)));
      start = i + 1;
    }
  }
  return out;
}

Table parse(std::string_view text, std::string_view module) {
  using Tokenizer = boost::tokenizer<boost::escaped_list_separator<char>>;
  Table table;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    std::vector<std::string> fields;
    try {
      Tokenizer tok(line, boost::escaped_list_separator<char>('\\', ',', '"'));
      for (const auto& f : tok) fields.push_back(trim(f));
    } catch (const boost::escaped_list_error& e) {
      throw InputError(std::string(module), "malformed CSV at line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!have_header) {
      table.header = std::move(fields);
      have_header = true;
      continue;
    }
    if (fields.size() < table.header.size()) fields.resize(table.header.size());
    if (fields.size() > table.header.size()) {
      throw InputError(std::string(module), "line " + std::to_string(lineno) + " has " +
                                                std::to_string(fields.size()) + " fields, header has " +
                                                std::to_string(table.header.size()));
    }
    table.rows.push_back(std::move(fields));
    table.line_numbers.push_back(lineno);
  }
  if (!have_header) throw InputError(std::string(module), "CSV input has no header line");
  return table;
}

std::string read_text(const std::filesystem::path& path, std::string_view module) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError(std::string(module), "cannot open file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Table read_file(const std::filesystem::path& path, std::string_view module) {
  return parse(read_text(path, module), module);
}

double to_double(std::string_view field, std::string_view module, std::string_view what) {
  const std::string t = trim(field);
  if (t == "inf" || t == "+inf" || t == "Inf") return std::numeric_limits<double>::infinity();
  if (t == "-inf" || t == "-Inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const char* first = t.data();
  const char* last = t.data() + t.size();
  if (!t.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (t.empty() || ec != std::errc() || ptr != last || !std::isfinite(v)) {
    throw InputError(std::string(module), "non-numeric " + std::string(what) + ": '" + t + "'");
  }
  return v;
}

long to_long(std::string_view field, std::string_view module, std::string_view what) {
  const std::string t = trim(field);
  long v = 0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
    throw InputError(std::string(module), "non-integer " + std::string(what) + ": '" + t + "'");
  }
  return v;
}

int decimals(std::string_view literal) {
  const std::string t = trim(literal);
  const auto dot = t.find('.');
  if (dot == std::string::npos) return 0;
  int n = 0;
  for (std::size_t i = dot + 1; i < t.size() && std::isdigit(static_cast<unsigned char>(t[i])); ++i) ++n;
  return n;
}

std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string escape(std::string_view field) {
  if (field.find_first_of(",\"\n") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\\\"";
    else out += c;
  }
  out += '"';
  return out;
}

}  // namespace agt::csv
