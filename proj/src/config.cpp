#include "factlab/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace factlab::config {

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> kKeys = {
      "world.subjects", "world.relations", "world.objects_per_relation",
      "model.layers", "model.hidden_dim", "model.inner_dim", "model.heads",
      "model.max_seq_len", "model.mlp_input_mode",
      "train.max_epochs", "train.target_recall", "train.lr", "train.batch_size",
      "train.grad_clip", "train.eval_every", "train.include_paraphrases",
      "train.filler_prefix_prob",
      "trace.gamma_scale", "trace.facts", "trace.window",
      "lens.top_k", "lens.facts",
      "edit.v_steps", "edit.v_step_size", "edit.kl_beta", "edit.success_threshold",
      "edit.constraints", "edit.cov_samples", "edit.cov_multiplier", "edit.prefixes",
      "edit.constraint_weight", "edit.v_star_uses_prefixes", "edit.cov_ridge",
      "edit.v_norm_clamp",
      "eval.requests", "eval.probes_per_case", "eval.neighbors_per_case",
      "eval.edit_relation_fraction",
      "seed",
  };
  return kKeys;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

Config Config::from_string(const std::string& text) {
  Config cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      fail(ErrorCategory::format, "config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!known_keys().count(key))
      fail(ErrorCategory::format, "config: unknown key '" + key + "'");
    cfg.values_[key] = value;
  }
  return cfg;
}

Config Config::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCategory::io, "config: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return from_string(buf.str());
}

int Config::get_int(const std::string& key, int fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    size_t pos = 0;
    int v = std::stoi(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    fail(ErrorCategory::format, "config: key '" + key + "' is not an integer");
  }
}

double Config::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    size_t pos = 0;
    double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    fail(ErrorCategory::format, "config: key '" + key + "' is not a number");
  }
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::string v = it->second;
  std::transform(v.begin(), v.end(), v.begin(), ::tolower);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail(ErrorCategory::format, "config: key '" + key + "' is not a bool");
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::uint64_t Config::get_u64(const std::string& key, std::uint64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    size_t pos = 0;
    unsigned long long v = std::stoull(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    fail(ErrorCategory::format, "config: key '" + key + "' is not an unsigned integer");
  }
}

}  // namespace factlab::config
