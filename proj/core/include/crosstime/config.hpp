#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "crosstime/trainer.hpp"

namespace crosstime {

/// Plain-text key-value configuration ("key = value" lines, '#' comments).
/// Keys keep their insertion order so parse -> serialize -> parse is the
/// identity on the map. Unknown keys are rejected and missing required keys
/// are reported collectively.
class ConfigFile {
 public:
  static ConfigFile parse_file(const std::string& path);
  static ConfigFile parse_string(const std::string& text);

  std::string serialize() const;

  bool has(const std::string& key) const;
  void set(const std::string& key, const std::string& value);

  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::string require_string(const std::string& key) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int64_t> get_int_list(const std::string& key) const;
  std::vector<double> get_double_list(const std::string& key) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const {
    return entries_;
  }

  /// Schema check: every problem (unknown key, missing required key, bad
  /// value) is collected and thrown as one ConfigError.
  void validate() const;

 private:
  const std::string* find(const std::string& key) const;
  std::vector<std::pair<std::string, std::string>> entries_;
};

struct KeySpec {
  std::string key;
  std::string kind;  // "string" | "int" | "float" | "bool" | "enum:..." | "list"
  bool required;
  std::string fallback;
  std::string help;
};

const std::vector<KeySpec>& config_schema();

/// Everything a training/evaluation run needs, resolved against the data:
/// the run configuration plus split and data-loading details.
struct ResolvedRun {
  RunConfig run;
  SplitSpec split;
  std::string data_path;
  bool timestamp_col = false;
  std::string anomaly_labels_path;  // empty when absent
  std::vector<int64_t> horizons;    // sweep averaging; empty -> pred_len only
  std::vector<double> mask_rates;   // sweep averaging; empty -> mask_rate only
};

/// Channel-count-dependent resolution, including the compressed-attention
/// default (auto-enabled above 60 channels unless overridden) and MS target
/// lookup by name or index.
ResolvedRun resolve_run(const ConfigFile& cfg, const SeriesFrame& data);

/// Resolution that does not touch data; channels must be supplied (profiler).
ModelConfig resolve_model_config(const ConfigFile& cfg, int64_t channels);

}  // namespace crosstime
