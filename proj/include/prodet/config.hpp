#pragma once

// Flat INI-style config files: [section] headers over key = value lines,
// full-line or trailing # comments. Parsing is strict: duplicate sections or
// keys and malformed lines are errors, and consumers reject unknown keys.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace prodet {

// Carries the process exit code the failure maps to.
struct CliError : std::runtime_error {
  int exit_code;
  CliError(int code, const std::string& msg)
      : std::runtime_error(msg), exit_code(code) {}
};

namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kConfig = 2;     // bad syntax, unknown key, bad value
inline constexpr int kMissing = 3;    // input file not found
inline constexpr int kIntegrity = 4;  // hash mismatch or corrupt container
inline constexpr int kNonFinite = 5;  // NaN/inf training loss
inline constexpr int kRetry = 6;      // scene sampling retries exhausted
}  // namespace exit_code

struct IniEntry {
  std::string section;
  std::string key;
  std::string value;
};

struct IniFile {
  std::vector<IniEntry> entries;  // document order

  const std::string* find(const std::string& section,
                          const std::string& key) const;
  bool has_section(const std::string& section) const;
};

IniFile parse_ini(const std::string& text);        // CliError(kConfig)
IniFile read_ini_file(const std::string& path);    // CliError(kMissing/kConfig)

// Value parsers; all throw CliError(kConfig) naming the offending key.
bool parse_bool(const std::string& value, const std::string& key);
std::int64_t parse_int(const std::string& value, const std::string& key);
std::uint64_t parse_uint(const std::string& value, const std::string& key);
double parse_real(const std::string& value, const std::string& key);
std::vector<std::size_t> parse_size_list(const std::string& value,
                                         const std::string& key);

}  // namespace prodet
