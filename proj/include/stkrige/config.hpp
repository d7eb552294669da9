// SPDX-License-Identifier: Apache-2.0
#pragma once

// Flat "key = value" text files with '#' comments.

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "stkrige/csv.hpp"
#include "stkrige/error.hpp"

namespace stkrige {

struct Setting {
  std::string key;
  std::string value;
  std::string where;  // "file:line" for messages
};

inline std::vector<Setting> parse_settings(const std::string& text,
                                           const std::string& origin) {
  std::vector<Setting> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string_view body = csv::trim(line);
    if (body.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(where + ": expected 'key = value'");
    }
    Setting s{std::string(csv::trim(body.substr(0, eq))),
              std::string(csv::trim(body.substr(eq + 1))), where};
    if (s.key.empty()) throw ConfigError(where + ": empty key");
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<Setting> read_settings(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_settings(ss.str(), path);
}

namespace parse {

inline double real(const std::string& s, const std::string& what) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError(what + ": '" + s + "' is not a number");
  }
  return v;
}

inline std::uint64_t unsigned_int(const std::string& s, const std::string& what) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError(what + ": '" + s + "' is not a non-negative integer");
  }
  return v;
}

inline std::size_t size(const std::string& s, const std::string& what) {
  return static_cast<std::size_t>(unsigned_int(s, what));
}

inline bool flag(const std::string& s, const std::string& what) {
  if (s == "on" || s == "true" || s == "1" || s == "yes") return true;
  if (s == "off" || s == "false" || s == "0" || s == "no") return false;
  throw ConfigError(what + ": '" + s + "' is not on/off");
}

inline std::vector<double> real_list(const std::string& s, const std::string& what) {
  std::vector<double> out;
  for (const auto& part : csv::split(s, ',')) {
    if (part.empty()) continue;
    out.push_back(real(part, what));
  }
  return out;
}

}  // namespace parse

/// Dispatches settings to per-key handlers; a key without a handler is an
/// error.
class SettingTable {
 public:
  using Handler = std::function<void(const std::string& value, const std::string& where)>;

  SettingTable& on(const std::string& key, Handler h) {
    handlers_[key] = std::move(h);
    return *this;
  }

  bool knows(const std::string& key) const { return handlers_.count(key) != 0; }

  void apply(const Setting& s) const {
    auto it = handlers_.find(s.key);
    if (it == handlers_.end()) {
      std::string known;
      for (const auto& [k, _] : handlers_) known += (known.empty() ? "" : ", ") + k;
      throw ConfigError(s.where + ": unknown key '" + s.key + "' (known: " + known + ")");
    }
    it->second(s.value, s.where + " (" + s.key + ")");
  }

  void apply(const std::vector<Setting>& settings) const {
    for (const auto& s : settings) apply(s);
  }

 private:
  std::map<std::string, Handler> handlers_;
};

}  // namespace stkrige
