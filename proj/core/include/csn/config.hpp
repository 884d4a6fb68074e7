// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "csn/tensor.hpp"

// Line-oriented `key = value` run configuration. Blank lines and text after
// '#' are ignored; every key must be known and every key has a default.
namespace csn {

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string doc;
};

/// Every recognised key, in documentation order.
const std::vector<ConfigKey>& config_keys();

class Config;
Config resolve(const Config& config);

class Config {
 public:
  /// All keys at their defaults.
  Config();

  static Config parse(std::string_view text, const std::string& origin = "<config>");
  static Config load(const std::filesystem::path& path);

  /// Throws ConfigError naming the key if it is unknown.
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  bool is_default(const std::string& key) const;

  std::string get_string(const std::string& key) const { return get(key); }
  double get_double(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::size_t> get_sizes(const std::string& key) const;

  /// `key = value` lines for keys whose name starts with one of `prefixes`
  /// (all keys if empty), in documentation order.
  std::string to_text(const std::vector<std::string>& prefixes = {}) const;

 private:
  friend Config resolve(const Config& config);
  std::map<std::string, std::string> values_;
  std::map<std::string, bool> explicit_;
};

/// Replaces every 'auto' value with its concrete setting.
Config resolve(const Config& config);

/// Key prefixes that make up a model's architecture description.
const std::vector<std::string>& model_key_prefixes();

}  // namespace csn
