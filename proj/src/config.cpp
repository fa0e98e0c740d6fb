#include "prodet/config.hpp"

#include <cctype>
#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace prodet {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '.')
      return false;
  }
  return true;
}

[[noreturn]] void bad_line(std::size_t lineno, const std::string& what) {
  throw CliError(exit_code::kConfig,
                 "config line " + std::to_string(lineno) + ": " + what);
}

}  // namespace

const std::string* IniFile::find(const std::string& section,
                                 const std::string& key) const {
  for (const auto& e : entries) {
    if (e.section == section && e.key == key) return &e.value;
  }
  return nullptr;
}

bool IniFile::has_section(const std::string& section) const {
  for (const auto& e : entries) {
    if (e.section == section) return true;
  }
  return false;
}

IniFile parse_ini(const std::string& text) {
  IniFile out;
  std::vector<std::string> seen_sections;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    if (auto hash = raw.find('#'); hash != std::string::npos)
      raw.erase(hash);
    std::string line = trim(raw);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') bad_line(lineno, "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (!valid_name(section)) bad_line(lineno, "bad section name");
      for (const auto& s : seen_sections)
        if (s == section) bad_line(lineno, "duplicate section [" + section + "]");
      seen_sections.push_back(section);
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) bad_line(lineno, "expected key = value");
    if (section.empty()) bad_line(lineno, "key outside any [section]");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (!valid_name(key)) bad_line(lineno, "bad key name");
    if (out.find(section, key))
      bad_line(lineno, "duplicate key " + section + "." + key);
    out.entries.push_back({section, key, value});
  }
  return out;
}

IniFile read_ini_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw CliError(exit_code::kMissing, "cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_ini(buf.str());
}

bool parse_bool(const std::string& value, const std::string& key) {
  if (value == "true" || value == "1" || value == "yes" || value == "on")
    return true;
  if (value == "false" || value == "0" || value == "no" || value == "off")
    return false;
  throw CliError(exit_code::kConfig, key + ": expected boolean, got '" + value + "'");
}

std::int64_t parse_int(const std::string& value, const std::string& key) {
  errno = 0;
  char* end = nullptr;
  long long v = std::strtoll(value.c_str(), &end, 10);
  if (errno != 0 || end == value.c_str() || *end != '\0')
    throw CliError(exit_code::kConfig, key + ": expected integer, got '" + value + "'");
  return v;
}

std::uint64_t parse_uint(const std::string& value, const std::string& key) {
  std::int64_t v = parse_int(value, key);
  if (v < 0)
    throw CliError(exit_code::kConfig, key + ": expected non-negative integer");
  return static_cast<std::uint64_t>(v);
}

double parse_real(const std::string& value, const std::string& key) {
  errno = 0;
  char* end = nullptr;
  double v = std::strtod(value.c_str(), &end);
  if (errno != 0 || end == value.c_str() || *end != '\0')
    throw CliError(exit_code::kConfig, key + ": expected number, got '" + value + "'");
  return v;
}

std::vector<std::size_t> parse_size_list(const std::string& value,
                                         const std::string& key) {
  std::vector<std::size_t> out;
  std::string item;
  std::istringstream in(value);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty())
      throw CliError(exit_code::kConfig, key + ": empty list element");
    out.push_back(static_cast<std::size_t>(parse_uint(item, key)));
  }
  if (out.empty())
    throw CliError(exit_code::kConfig, key + ": expected comma-separated list");
  return out;
}

}  // namespace prodet
