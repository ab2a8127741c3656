#pragma once

#include "factlab/types.hpp"

#include <cstdint>
#include <map>
#include <string>

namespace factlab::config {

// Flat "key = value" text config; '#' starts a comment. Unknown keys are a
// format error so typos surface early.
class Config {
 public:
  static Config from_file(const std::string& path);
  static Config from_string(const std::string& text);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  int get_int(const std::string& key, int fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace factlab::config
