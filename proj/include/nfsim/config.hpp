// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value configuration. Resolution order: built-in defaults, then
// the scene.cfg file, then explicit overrides (CLI flags / env).
#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "nfsim/core.hpp"

namespace nfsim {

class Config {
 public:
  Config() = default;

  static Config from_file(const std::string& path) {
    std::ifstream f(path);
    ensure(f.good(), "config: cannot open '" + path + "'");
    Config c;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      lineno++;
      size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      size_t a = line.find_first_not_of(" \t\r");
      if (a == std::string::npos) continue;
      size_t eq = line.find('=');
      ensure(eq != std::string::npos,
             "config: " + path + ":" + std::to_string(lineno) + ": expected key=value");
      auto trim = [](std::string s) {
        size_t b = s.find_first_not_of(" \t\r");
        size_t e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      std::string key = trim(line.substr(0, eq));
      std::string val = trim(line.substr(eq + 1));
      ensure(!key.empty(), "config: " + path + ":" + std::to_string(lineno) + ": empty key");
      c.values_[key] = val;
    }
    return c;
  }

  void set(const std::string& key, const std::string& val) { values_[key] = val; }
  bool has(const std::string& key) const { return values_.count(key) > 0; }

  // overlay: entries in `over` win
  void merge_from(const Config& over) {
    for (const auto& [k, v] : over.values_) values_[k] = v;
  }

  std::string get_str(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string get_str(const std::string& key) const {
    auto it = values_.find(key);
    ensure(it != values_.end(), "config: missing required key '" + key + "'");
    return it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return parse_double(key, it->second);
  }

  int64_t get_int(const std::string& key, int64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return parse_int(key, it->second);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    ensure(false, "config: key '" + key + "': cannot parse bool from '" + v + "'");
    return fallback;
  }

  std::vector<double> get_vec(const std::string& key, std::vector<double> fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    std::istringstream ss(it->second);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(parse_double(key, tok));
    return out;
  }

  const std::map<std::string, std::string>& entries() const { return values_; }

  std::string to_text() const {
    std::ostringstream out;
    for (const auto& [k, v] : values_) out << k << " = " << v << "\n";
    return out.str();
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    ensure(f.good(), "config: cannot write '" + path + "'");
    f << to_text();
  }

 private:
  static double parse_double(const std::string& key, const std::string& v) {
    try {
      size_t pos = 0;
      double d = std::stod(v, &pos);
      ensure(pos == v.size(), "");
      return d;
    } catch (...) {
      throw std::runtime_error("config: key '" + key + "': cannot parse number from '" + v + "'");
    }
  }

  static int64_t parse_int(const std::string& key, const std::string& v) {
    try {
      size_t pos = 0;
      int64_t i = std::stoll(v, &pos);
      ensure(pos == v.size(), "");
      return i;
    } catch (...) {
      throw std::runtime_error("config: key '" + key + "': cannot parse integer from '" + v + "'");
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace nfsim
