#include "crosstime/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace crosstime {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t");
  size_t e = s.find_last_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, e - b + 1);
}

}  // namespace

ConfigFile ConfigFile::parse_string(const std::string& text) {
  ConfigFile cfg;
  std::istringstream in(text);
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": expected key = value, got \"" + t + "\"");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    cfg.set(key, value);
  }
  return cfg;
}

ConfigFile ConfigFile::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_string(buf.str());
}

std::string ConfigFile::serialize() const {
  std::ostringstream out;
  for (const auto& [k, v] : entries_) out << k << " = " << v << "\n";
  return out.str();
}

const std::string* ConfigFile::find(const std::string& key) const {
  for (const auto& [k, v] : entries_)
    if (k == key) return &v;
  return nullptr;
}

bool ConfigFile::has(const std::string& key) const { return find(key) != nullptr; }

void ConfigFile::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries_)
    if (k == key) {
      v = value;
      return;
    }
  entries_.emplace_back(key, value);
}

std::string ConfigFile::get_string(const std::string& key, const std::string& fallback) const {
  const std::string* v = find(key);
  return v ? *v : fallback;
}

std::string ConfigFile::require_string(const std::string& key) const {
  const std::string* v = find(key);
  if (!v) throw ConfigError("config: missing required key \"" + key + "\"");
  return *v;
}

int64_t ConfigFile::get_int(const std::string& key, int64_t fallback) const {
  const std::string* v = find(key);
  if (!v) return fallback;
  try {
    size_t used = 0;
    const int64_t r = std::stoll(*v, &used);
    if (used != v->size()) throw std::invalid_argument("trailing");
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config: key \"" + key + "\" is not an integer: " + *v);
  }
}

double ConfigFile::get_double(const std::string& key, double fallback) const {
  const std::string* v = find(key);
  if (!v) return fallback;
  try {
    size_t used = 0;
    const double r = std::stod(*v, &used);
    if (used != v->size()) throw std::invalid_argument("trailing");
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config: key \"" + key + "\" is not a number: " + *v);
  }
}

bool ConfigFile::get_bool(const std::string& key, bool fallback) const {
  const std::string* v = find(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
  if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
  throw ConfigError("config: key \"" + key + "\" is not a boolean: " + *v);
}

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      parts.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  const std::string last = trim(cur);
  if (!last.empty() || !parts.empty()) parts.push_back(last);
  return parts;
}

}  // namespace

std::vector<int64_t> ConfigFile::get_int_list(const std::string& key) const {
  const std::string* v = find(key);
  std::vector<int64_t> out;
  if (!v || trim(*v).empty()) return out;
  for (const auto& part : split_list(*v)) {
    try {
      out.push_back(std::stoll(part));
    } catch (const std::exception&) {
      throw ConfigError("config: key \"" + key + "\" holds a non-integer: " + part);
    }
  }
  return out;
}

std::vector<double> ConfigFile::get_double_list(const std::string& key) const {
  const std::string* v = find(key);
  std::vector<double> out;
  if (!v || trim(*v).empty()) return out;
  for (const auto& part : split_list(*v)) {
    try {
      out.push_back(std::stod(part));
    } catch (const std::exception&) {
      throw ConfigError("config: key \"" + key + "\" holds a non-number: " + part);
    }
  }
  return out;
}

const std::vector<KeySpec>& config_schema() {
  static const std::vector<KeySpec> schema = {
      {"task", "enum:forecast|impute|anomaly", true, "", "time-series task"},
      {"data_path", "string", true, "", "input CSV path"},
      {"timestamp_col", "bool", false, "false", "first column is a timestamp"},
      {"setting", "enum:M|MS", false, "M", "forecast over all channels or one target"},
      {"target_channel", "string", false, "", "MS target: channel name or 0-based index (default: last)"},
      {"split_mode", "enum:fractional|fixed", false, "fractional", "split specification mode"},
      {"train_frac", "float", false, "0.7", "fractional split: train share"},
      {"val_frac", "float", false, "0.1", "fractional split: validation share"},
      {"test_frac", "float", false, "0.2", "fractional split: test share"},
      {"train_rows", "int", false, "0", "fixed split: train rows"},
      {"val_rows", "int", false, "0", "fixed split: validation rows"},
      {"test_rows", "int", false, "0", "fixed split: test rows"},
      {"seq_len", "int", false, "96", "lookback window length"},
      {"pred_len", "int", false, "96", "forecast horizon"},
      {"patch_len", "int", false, "16", "patch length"},
      {"stride", "int", false, "8", "patch stride"},
      {"pad_end", "bool", false, "true", "append a replicate-padded final patch"},
      {"e_layers", "int", false, "2", "encoder layers"},
      {"n_heads", "int", false, "4", "attention heads"},
      {"d_model", "int", false, "32", "token embedding width"},
      {"d_ff", "int", false, "0", "feed-forward width; 0 means 2 * d_model"},
      {"dropout", "float", false, "0.1", "residual/embedding dropout"},
      {"fc_dropout", "float", false, "0.05", "head dropout"},
      {"attn_dropout", "float", false, "0.0", "attention weight dropout"},
      {"attention_mode", "enum:crab|crab_decop|crab_no_mask|softmax_masked|vanilla|sequence_only|channel_only|absact_clipped",
       false, "crab", "attention variant"},
      {"decop", "enum:auto|on|off", false, "auto", "compressed attention; auto enables it above 60 channels"},
      {"k", "int", false, "64", "compressed attention width"},
      {"revin", "bool", false, "true", "instance normalization"},
      {"revin_affine", "bool", false, "false", "learnable instance-normalization affine"},
      {"batch_size", "int", false, "32", "training batch size"},
      {"learning_rate", "float", false, "0.001", "one-cycle peak learning rate"},
      {"epochs", "int", false, "10", "training epochs"},
      {"seed", "int", false, "2021", "run seed"},
      {"pct_start", "float", false, "0.4", "one-cycle warm-up fraction"},
      {"div_factor", "float", false, "25", "initial lr = max_lr / div_factor"},
      {"final_div_factor", "float", false, "10000", "final lr = max_lr / final_div_factor"},
      {"grad_clip", "float", false, "0", "global gradient-norm clip; 0 disables"},
      {"mask_rate", "float", false, "0.25", "imputation mask rate"},
      {"eval_mask_seed", "int", false, "7", "seed of evaluation imputation masks"},
      {"alpha", "float", false, "0.01", "anomaly rate for the threshold quantile"},
      {"point_adjust", "bool", false, "false", "segment-level adjustment of anomaly labels"},
      {"anomaly_labels", "string", false, "", "CSV of 0/1 truth labels for the anomaly task"},
      {"horizons", "list", false, "", "horizons averaged by sweeps (comma-separated)"},
      {"mask_rates", "list", false, "", "mask rates averaged by sweeps (comma-separated)"},
      {"n_features", "int", false, "10", "channel count assumed by the profiler"},
  };
  return schema;
}

void ConfigFile::validate() const {
  std::vector<std::string> problems;
  const auto& schema = config_schema();
  for (const auto& [key, value] : entries_) {
    const auto it = std::find_if(schema.begin(), schema.end(),
                                 [&](const KeySpec& s) { return s.key == key; });
    if (it == schema.end()) {
      problems.push_back("unknown key \"" + key + "\"");
      continue;
    }
    if (it->kind.rfind("enum:", 0) == 0) {
      const std::string options = it->kind.substr(5);
      bool ok = false;
      std::string opt;
      std::istringstream os(options);
      while (std::getline(os, opt, '|'))
        if (opt == value) ok = true;
      if (!ok)
        problems.push_back("key \"" + key + "\" must be one of {" + options + "}, got \"" +
                           value + "\"");
    }
  }
  for (const auto& spec : schema) {
    if (spec.required && !has(spec.key))
      problems.push_back("missing required key \"" + spec.key + "\"");
  }
  if (!problems.empty()) {
    std::string msg = "config validation failed:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

ModelConfig resolve_model_config(const ConfigFile& cfg, int64_t channels) {
  ModelConfig m;
  m.task = task_from_string(cfg.get_string("task", "forecast"));
  m.channels = channels;
  m.seq_len = cfg.get_int("seq_len", 96);
  m.out_len = m.task == TaskType::kForecast ? cfg.get_int("pred_len", 96) : m.seq_len;
  m.patch.patch_len = cfg.get_int("patch_len", 16);
  m.patch.stride = cfg.get_int("stride", 8);
  m.patch.pad_end = cfg.get_bool("pad_end", true);
  m.e_layers = cfg.get_int("e_layers", 2);
  m.n_heads = cfg.get_int("n_heads", 4);
  m.d_model = cfg.get_int("d_model", 32);
  const int64_t d_ff = cfg.get_int("d_ff", 0);
  m.d_ff = d_ff > 0 ? d_ff : 2 * m.d_model;
  m.dropout = cfg.get_double("dropout", 0.1);
  m.fc_dropout = cfg.get_double("fc_dropout", 0.05);
  m.attn_dropout = cfg.get_double("attn_dropout", 0.0);
  m.mode = attention_mode_from_string(cfg.get_string("attention_mode", "crab"));
  m.k = cfg.get_int("k", 64);
  m.revin = cfg.get_bool("revin", true);
  m.revin_affine = cfg.get_bool("revin_affine", false);

  const std::string decop = cfg.get_string("decop", "auto");
  if (decop == "on") {
    m.mode = AttentionMode::kCrabDecop;
  } else if (decop == "auto" && !cfg.has("attention_mode") && channels > 60) {
    m.mode = AttentionMode::kCrabDecop;
  }
  if (m.mode != AttentionMode::kCrabDecop) m.k = 0;
  return m;
}

ResolvedRun resolve_run(const ConfigFile& cfg, const SeriesFrame& data) {
  cfg.validate();
  ResolvedRun r;
  r.data_path = cfg.require_string("data_path");
  r.timestamp_col = cfg.get_bool("timestamp_col", false);
  r.anomaly_labels_path = cfg.get_string("anomaly_labels", "");
  r.horizons = cfg.get_int_list("horizons");
  r.mask_rates = cfg.get_double_list("mask_rates");

  r.run.model = resolve_model_config(cfg, data.cols);
  r.run.task = r.run.model.task;
  r.run.seed = static_cast<uint64_t>(cfg.get_int("seed", 2021));
  r.run.epochs = cfg.get_int("epochs", 10);
  r.run.batch_size = cfg.get_int("batch_size", 32);
  r.run.learning_rate = cfg.get_double("learning_rate", 1e-3);
  r.run.pct_start = cfg.get_double("pct_start", 0.4);
  r.run.div_factor = cfg.get_double("div_factor", 25.0);
  r.run.final_div_factor = cfg.get_double("final_div_factor", 1e4);
  r.run.grad_clip = cfg.get_double("grad_clip", 0.0);
  r.run.mask_rate = cfg.get_double("mask_rate", 0.25);
  r.run.eval_mask_seed = static_cast<uint64_t>(cfg.get_int("eval_mask_seed", 7));
  r.run.alpha = cfg.get_double("alpha", 0.01);
  r.run.point_adjust = cfg.get_bool("point_adjust", false);

  if (cfg.get_string("setting", "M") == "MS") {
    r.run.setting.ms = true;
    const std::string target = cfg.get_string("target_channel", "");
    if (target.empty()) {
      r.run.setting.target_channel = data.cols - 1;
    } else {
      int64_t idx = data.channel_index(target);
      if (idx < 0) {
        try {
          idx = std::stoll(target);
        } catch (const std::exception&) {
          idx = -1;
        }
      }
      if (idx < 0 || idx >= data.cols)
        throw ConfigError("config: target_channel \"" + target + "\" not found among " +
                          std::to_string(data.cols) + " channels");
      r.run.setting.target_channel = idx;
    }
  }

  if (cfg.get_string("split_mode", "fractional") == "fixed") {
    r.split.mode = SplitSpec::Mode::kFixedCounts;
    r.split.train_rows = cfg.get_int("train_rows", 0);
    r.split.val_rows = cfg.get_int("val_rows", 0);
    r.split.test_rows = cfg.get_int("test_rows", 0);
  } else {
    r.split.mode = SplitSpec::Mode::kFractional;
    r.split.train_frac = cfg.get_double("train_frac", 0.7);
    r.split.val_frac = cfg.get_double("val_frac", 0.1);
    r.split.test_frac = cfg.get_double("test_frac", 0.2);
  }
  return r;
}

}  // namespace crosstime
