// Copyright (c) 2026, the grasskit authors.
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a sectioned plain-text key-value document. The format
// is deliberately rigid. Sections and keys come from a fixed schema and
// anything unknown is an error naming the offender, every seed is written
// out explicitly, and the canonical rendering (sorted keys, resolved paths)
// is what gets hashed into the run directory name and written as the
// sidecar, so a run is reproducible from its artifacts alone.
//
//   # comment
//   [model]
//   dims = 10,64,64,2
//   init_seed = 1
//
// Values are free text up to the end of the line; lists are comma
// separated. Paths are resolved relative to the config file's directory.

#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "grasskit/core.hpp"
#include "grasskit/sha256.hpp"

namespace grasskit {

namespace detail {

inline const std::vector<std::pair<std::string, std::set<std::string>>>&
config_schema() {
  static const std::vector<std::pair<std::string, std::set<std::string>>> schema = {
      {"model",
       {"dims", "bias", "init_seed", "epochs", "lr", "batch_size", "shuffle_seed",
        "loss"}},
      {"dataset",
       {"kind", "n", "dim", "separation", "sigma", "noise", "seed", "test_n",
        "test_seed", "features", "labels", "test_features", "test_labels"}},
      {"compressor",
       {"spec", "select_k", "select_steps", "select_step_size", "select_l1",
        "select_temp_start", "select_temp_end", "select_seed", "select_jitter",
        "select_test_n"}},
      {"attribution", {"mode", "damping", "fim", "tests", "top_k"}},
      {"lds",
       {"subsets", "fraction", "val_fraction", "seed", "null_reps", "damping_grid",
        "negate"}},
      {"bench",
       {"input_dim", "trials", "seed", "methods", "ks", "sparsities", "s",
        "layer_specs"}},
  };
  return schema;
}

inline const std::set<std::string>& config_path_keys() {
  static const std::set<std::string> keys = {
      "dataset.features", "dataset.labels", "dataset.test_features",
      "dataset.test_labels"};
  return keys;
}

inline std::string config_trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace detail

class RunConfig {
 public:
  static RunConfig parse_text(const std::string& text,
                              const std::string& base_dir = ".") {
    RunConfig cfg;
    cfg.base_dir_ = base_dir;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string t = detail::config_trim(line);
      if (t.empty() || t[0] == '#') continue;
      if (t.front() == '[') {
        if (t.back() != ']') {
          throw ConfigError("config: unterminated section header at line " +
                            std::to_string(lineno));
        }
        section = detail::config_trim(t.substr(1, t.size() - 2));
        if (schema_keys(section) == nullptr) {
          throw ConfigError("config: unknown section \"" + section + "\" at line " +
                            std::to_string(lineno));
        }
        if (cfg.sections_.count(section) > 0) {
          throw ConfigError("config: section \"" + section + "\" appears twice");
        }
        cfg.sections_[section];  // mark present even if empty
        continue;
      }
      const size_t eq = t.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("config: expected key = value at line " +
                          std::to_string(lineno));
      }
      if (section.empty()) {
        throw ConfigError("config: key outside any section at line " +
                          std::to_string(lineno));
      }
      const std::string key = detail::config_trim(t.substr(0, eq));
      const std::string value = detail::config_trim(t.substr(eq + 1));
      if (key.empty()) {
        throw ConfigError("config: empty key at line " + std::to_string(lineno));
      }
      const std::set<std::string>* keys = schema_keys(section);
      if (keys->count(key) == 0) {
        throw ConfigError("config: unknown key \"" + section + "." + key + "\"");
      }
      if (value.empty()) {
        throw ConfigError("config: empty value for \"" + section + "." + key + "\"");
      }
      auto& sec = cfg.sections_[section];
      if (sec.count(key) > 0) {
        throw ConfigError("config: key \"" + section + "." + key +
                          "\" appears twice");
      }
      sec[key] = value;
    }
    return cfg;
  }

  static RunConfig parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    const std::filesystem::path p(path);
    const std::filesystem::path dir = p.parent_path();
    return parse_text(text, dir.empty() ? "." : dir.string());
  }

  const std::string& base_dir() const { return base_dir_; }

  bool has(const std::string& section, const std::string& key) const {
    const auto s = sections_.find(section);
    return s != sections_.end() && s->second.count(key) > 0;
  }

  const std::string& get(const std::string& section, const std::string& key) const {
    const auto s = sections_.find(section);
    if (s != sections_.end()) {
      const auto k = s->second.find(key);
      if (k != s->second.end()) return k->second;
    }
    throw ConfigError("config: missing required key \"" + section + "." + key + "\"");
  }

  std::string get_or(const std::string& section, const std::string& key,
                     const std::string& fallback) const {
    return has(section, key) ? get(section, key) : fallback;
  }

  std::int64_t get_int(const std::string& section, const std::string& key) const {
    return parse_int(section, key, get(section, key));
  }
  std::int64_t get_int_or(const std::string& section, const std::string& key,
                          std::int64_t fallback) const {
    return has(section, key) ? get_int(section, key) : fallback;
  }

  double get_double(const std::string& section, const std::string& key) const {
    return parse_double(section, key, get(section, key));
  }
  double get_double_or(const std::string& section, const std::string& key,
                       double fallback) const {
    return has(section, key) ? get_double(section, key) : fallback;
  }

  bool get_bool(const std::string& section, const std::string& key) const {
    const std::string& v = get(section, key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: key \"" + section + "." + key +
                      "\" is not a bool (got \"" + v + "\")");
  }
  bool get_bool_or(const std::string& section, const std::string& key,
                   bool fallback) const {
    return has(section, key) ? get_bool(section, key) : fallback;
  }

  // Seeds have no defaults: every random operation is pinned in the file.
  std::uint64_t get_seed(const std::string& section, const std::string& key) const {
    const std::int64_t v = get_int(section, key);
    if (v < 0) {
      throw ConfigError("config: key \"" + section + "." + key +
                        "\" must be a nonnegative seed");
    }
    return static_cast<std::uint64_t>(v);
  }

  std::vector<std::string> get_list(const std::string& section,
                                    const std::string& key) const {
    const std::string& v = get(section, key);
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
      const size_t comma = v.find(',', start);
      const std::string item = detail::config_trim(
          v.substr(start, comma == std::string::npos ? comma : comma - start));
      if (item.empty()) {
        throw ConfigError("config: key \"" + section + "." + key +
                          "\" has an empty list item");
      }
      out.push_back(item);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    return out;
  }

  std::vector<Index> get_dims(const std::string& section,
                              const std::string& key) const {
    std::vector<Index> out;
    for (const std::string& item : get_list(section, key)) {
      const std::int64_t v = parse_int(section, key, item);
      if (v <= 0) {
        throw ConfigError("config: key \"" + section + "." + key +
                          "\" needs positive entries");
      }
      out.push_back(static_cast<Index>(v));
    }
    return out;
  }

  std::vector<double> get_double_list(const std::string& section,
                                      const std::string& key) const {
    std::vector<double> out;
    for (const std::string& item : get_list(section, key)) {
      out.push_back(parse_double(section, key, item));
    }
    return out;
  }

  // Paths resolve against the config file's directory, so a config is
  // runnable from any working directory.
  std::string get_path(const std::string& section, const std::string& key) const {
    return resolve_path(get(section, key));
  }

  // Canonical rendering: schema section order, sorted keys, resolved
  // paths. This is the run's identity; its sha256 names the run directory
  // and the text itself is the sidecar.
  std::string resolved_text() const {
    std::string out;
    for (const auto& [section, keys] : detail::config_schema()) {
      const auto s = sections_.find(section);
      if (s == sections_.end() || s->second.empty()) continue;
      (void)keys;
      out += "[" + section + "]\n";
      for (const auto& [key, value] : s->second) {
        const bool is_path = detail::config_path_keys().count(section + "." + key) > 0;
        out += key + " = " + (is_path ? resolve_path(value) : value) + "\n";
      }
      out += "\n";
    }
    return out;
  }

  Digest256 digest() const { return sha256(resolved_text()); }

 private:
  static const std::set<std::string>* schema_keys(const std::string& section) {
    for (const auto& [name, keys] : detail::config_schema()) {
      if (name == section) return &keys;
    }
    return nullptr;
  }

  std::string resolve_path(const std::string& value) const {
    const std::filesystem::path p(value);
    const std::filesystem::path base(base_dir_);
    return (p.is_absolute() ? p : base / p).lexically_normal().string();
  }

  std::int64_t parse_int(const std::string& section, const std::string& key,
                         const std::string& v) const {
    size_t used = 0;
    std::int64_t out = 0;
    try {
      out = std::stoll(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty()) {
      throw ConfigError("config: key \"" + section + "." + key +
                        "\" is not an integer (got \"" + v + "\")");
    }
    return out;
  }

  double parse_double(const std::string& section, const std::string& key,
                      const std::string& v) const {
    size_t used = 0;
    double out = 0;
    try {
      out = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty()) {
      throw ConfigError("config: key \"" + section + "." + key +
                        "\" is not a number (got \"" + v + "\")");
    }
    return out;
  }

  std::map<std::string, std::map<std::string, std::string>> sections_;
  std::string base_dir_ = ".";
};

}  // namespace grasskit
