#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "corrosion/dataset.hpp"
#include "corrosion/error.hpp"

namespace corrosion::config {

/// Keys are stored with '-' folded to '_', so `lr-max` and `lr_max` name the same setting.
inline std::string normalize_key(std::string k) {
  std::replace(k.begin(), k.end(), '-', '_');
  return k;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

/// Flat `key = value` document; '#' starts a comment line.
using KeyValues = std::map<std::string, std::string>;

inline KeyValues parse(std::string_view text) {
  KeyValues out;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      fail(ErrorCode::InvalidSpec, "config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = normalize_key(trim(std::string_view(t).substr(0, eq)));
    if (key.empty()) fail(ErrorCode::InvalidSpec, "config line " + std::to_string(lineno) + ": empty key");
    std::string value = trim(std::string_view(t).substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    out[key] = std::move(value);
  }
  return out;
}

inline KeyValues load(const std::filesystem::path& path) { return parse(dataset::read_text(path)); }

inline std::string dump(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

/// Resolved settings: defaults, then file values, then explicit flags.
class Settings {
 public:
  Settings() = default;
  explicit Settings(KeyValues values) : values_(std::move(values)) {}

  void set(const std::string& key, std::string value) { values_[normalize_key(key)] = std::move(value); }
  bool has(const std::string& key) const { return values_.count(normalize_key(key)) != 0; }
  const KeyValues& values() const noexcept { return values_; }

  /// Overlays `other`, accepting only keys already present.
  /// Returns keys that were not recognized.
  std::vector<std::string> overlay(const KeyValues& other) {
    std::vector<std::string> unknown;
    for (const auto& [k, v] : other) {
      const auto key = normalize_key(k);
      if (values_.count(key)) values_[key] = v;
      else unknown.push_back(key);
    }
    return unknown;
  }

  const std::string& str(const std::string& key) const {
    const auto it = values_.find(normalize_key(key));
    if (it == values_.end()) fail(ErrorCode::InvalidSpec, "missing setting " + key);
    return it->second;
  }

  std::optional<std::string> opt(const std::string& key) const {
    const auto& v = str(key);
    if (v.empty()) return std::nullopt;
    return v;
  }

  template <typename N>
  N num(const std::string& key) const {
    const auto& v = str(key);
    N out{};
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
      fail(ErrorCode::InvalidSpec, "setting " + key + " is not a valid number: '" + v + "'");
    return out;
  }

  int integer(const std::string& key) const { return num<int>(key); }
  std::uint64_t u64(const std::string& key) const { return num<std::uint64_t>(key); }
  double real(const std::string& key) const { return num<double>(key); }

  bool flag(const std::string& key) const {
    const auto& v = str(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off" || v.empty()) return false;
    fail(ErrorCode::InvalidSpec, "setting " + key + " is not a boolean: '" + v + "'");
  }

  std::vector<int> int_list(const std::string& key) const {
    std::vector<int> out;
    std::string item;
    std::istringstream in(str(key));
    while (std::getline(in, item, ',')) {
      item = trim(item);
      int x = 0;
      const auto res = std::from_chars(item.data(), item.data() + item.size(), x);
      if (item.empty() || res.ec != std::errc{} || res.ptr != item.data() + item.size())
        fail(ErrorCode::InvalidSpec, "setting " + key + " is not a comma-separated integer list");
      out.push_back(x);
    }
    return out;
  }

 private:
  KeyValues values_;
};

}  // namespace corrosion::config
