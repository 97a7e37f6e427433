#pragma once

// Minimal `key = value` configuration files. `#` starts a comment; blank
// lines are ignored; keys may appear once.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <type_traits>

#include "mfd/errors.hpp"

namespace mfd {

class KeyValues {
 public:
  static KeyValues parse(std::istream& in) {
    KeyValues kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string_view s = line;
      if (auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
      s = trim(s);
      if (s.empty()) continue;
      const auto eq = s.find('=');
      if (eq == std::string_view::npos)
        throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
      const std::string key(trim(s.substr(0, eq)));
      const std::string value(trim(s.substr(eq + 1)));
      if (key.empty() || value.empty())
        throw ValidationError("config line " + std::to_string(lineno) + ": empty key or value");
      if (!kv.values_.emplace(key, Entry{value, lineno}).second)
        throw ValidationError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    return kv;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  /// Fails on any key outside `allowed`.
  void restrict_to(const std::set<std::string>& allowed) const {
    for (const auto& [k, e] : values_)
      if (!allowed.count(k))
        throw ValidationError("config line " + std::to_string(e.line) + ": unknown key '" + k + "'");
  }

  void read(const std::string& key, double& out) const {
    auto it = values_.find(key);
    if (it == values_.end()) return;
    const auto& v = it->second.value;
    double x = 0.0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(x))
      throw error(it->second, "'" + key + "' must be a number");
    out = x;
  }

  template <typename Int>
    requires std::is_integral_v<Int>
  void read(const std::string& key, Int& out) const {
    auto it = values_.find(key);
    if (it == values_.end()) return;
    const auto& v = it->second.value;
    Int x{};
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || ptr != v.data() + v.size())
      throw error(it->second, "'" + key + "' must be a non-negative integer");
    out = x;
  }

  void read(const std::string& key, std::string& out) const {
    auto it = values_.find(key);
    if (it != values_.end()) out = it->second.value;
  }

 private:
  struct Entry {
    std::string value;
    std::size_t line;
  };

  static std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
  }

  static ValidationError error(const Entry& e, const std::string& msg) {
    return ValidationError("config line " + std::to_string(e.line) + ": " + msg);
  }

  std::map<std::string, Entry> values_;
};

}  // namespace mfd
