#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace funavg {

std::string trim(std::string_view s);
std::vector<std::string> split_list(std::string_view s, char sep = ',');
std::string join(const std::vector<std::string>& items, std::string_view sep = ",");

template <typename T>
std::string join_numbers(const std::vector<T>& items, std::string_view sep = ",") {
  std::vector<std::string> parts;
  for (const auto& v : items) parts.push_back(std::to_string(v));
  return join(parts, sep);
}

/// Flat `key=value` text; blank lines and `#` comments are skipped.
/// Throws std::invalid_argument naming the line on malformed input.
std::map<std::string, std::string> parse_key_values(std::string_view text);

/// Looks up a key, throwing std::invalid_argument naming it when missing.
const std::string& require_key(const std::map<std::string, std::string>& kv, const std::string& key);

/// printf("%.6g"): six significant digits.
std::string format_g6(double value);

int parse_int(const std::string& s, const std::string& what);
double parse_double(const std::string& s, const std::string& what);

}  // namespace funavg
