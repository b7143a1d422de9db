#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cast/detail/text.hpp"
#include "cast/error.hpp"

namespace cast {

// Minimal TOML-flavoured key/value file: `key = value` lines, `#` comments,
// optional `[section]` headers that prefix subsequent keys as
// `section.key`. Values may be double-quoted. Entry order is preserved.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::istream& in, const std::string& origin = "<input>") {
    KeyValueConfig cfg;
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string_view view = line;
      if (auto hash = find_comment(view); hash != std::string_view::npos)
        view = view.substr(0, hash);
      view = detail::trim(view);
      if (view.empty()) continue;
      if (view.front() == '[') {
        if (view.back() != ']')
          throw Error(ErrorCode::ConfigError,
                      origin + ":" + std::to_string(lineno) + ": bad section header");
        section = std::string(detail::trim(view.substr(1, view.size() - 2)));
        continue;
      }
      auto eq = view.find('=');
      if (eq == std::string_view::npos)
        throw Error(ErrorCode::ConfigError,
                    origin + ":" + std::to_string(lineno) + ": expected key = value");
      std::string key(detail::trim(view.substr(0, eq)));
      std::string value(detail::trim(view.substr(eq + 1)));
      if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
        value = value.substr(1, value.size() - 2);
      if (key.empty())
        throw Error(ErrorCode::ConfigError,
                    origin + ":" + std::to_string(lineno) + ": empty key");
      if (!section.empty()) key = section + "." + key;
      cfg.set(key, value);
    }
    return cfg;
  }

  static KeyValueConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::ConfigError, "cannot open config '" + path + "'");
    return parse(in, path);
  }

  static KeyValueConfig from_string(const std::string& text) {
    std::istringstream in(text);
    return parse(in);
  }

  void set(const std::string& key, const std::string& value) {
    auto it = index_.find(key);
    if (it == index_.end()) {
      index_.emplace(key, entries_.size());
      entries_.emplace_back(key, value);
    } else {
      entries_[it->second].second = value;
    }
  }

  bool contains(const std::string& key) const { return index_.count(key) > 0; }

  std::optional<std::string> get(const std::string& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    return entries_[it->second].second;
  }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    return get(key).value_or(fallback);
  }

  double get_double(const std::string& key, double fallback) const {
    auto v = get(key);
    if (!v) return fallback;
    double out;
    if (!detail::parse_double(*v, out))
      throw Error(ErrorCode::ConfigError, "key '" + key + "' is not a number: " + *v);
    return out;
  }

  long long get_int(const std::string& key, long long fallback) const {
    const double d = get_double(key, static_cast<double>(fallback));
    if (d != static_cast<double>(static_cast<long long>(d)))
      throw Error(ErrorCode::ConfigError, "key '" + key + "' is not an integer");
    return static_cast<long long>(d);
  }

  std::vector<double> get_list(const std::string& key,
                               std::vector<double> fallback) const {
    auto v = get(key);
    if (!v) return fallback;
    std::string_view s = *v;
    s = detail::trim(s);
    if (!s.empty() && s.front() == '[' && s.back() == ']') s = s.substr(1, s.size() - 2);
    std::vector<double> out;
    for (auto& tok : detail::split_csv_line(s)) {
      if (detail::trim(tok).empty()) continue;
      double d;
      if (!detail::parse_double(tok, d))
        throw Error(ErrorCode::ConfigError, "key '" + key + "' has a bad list entry: " + tok);
      out.push_back(d);
    }
    return out;
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const {
    return entries_;
  }

 private:
  static std::string_view::size_type find_comment(std::string_view s) {
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"') quoted = !quoted;
      if (s[i] == '#' && !quoted) return i;
    }
    return std::string_view::npos;
  }

  std::vector<std::pair<std::string, std::string>> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace cast
