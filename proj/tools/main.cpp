// Command-line surface: config-driven training/evaluation, synthetic data
// generation, mask analysis, scaling profiles, hyperparameter and seed sweeps.
// Every command writes CSV (and PGM) artifacts under --out and exits nonzero
// with a single "error: ..." line on failure.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "crosstime/analysis.hpp"
#include "crosstime/config.hpp"
#include "crosstime/csv.hpp"
#include "crosstime/profile.hpp"
#include "crosstime/synth.hpp"
#include "crosstime/trainer.hpp"

namespace fs = std::filesystem;
using namespace crosstime;

namespace {

void ensure_dir(const std::string& dir) { fs::create_directories(dir); }

std::vector<int64_t> parse_values(const std::string& spec) {
  // Either "a,b,c" or "start:stop:step" (inclusive stop).
  std::vector<int64_t> out;
  if (spec.find(':') != std::string::npos) {
    int64_t a = 0, b = 0, s = 1;
    if (std::sscanf(spec.c_str(), "%ld:%ld:%ld", &a, &b, &s) != 3 || s < 1)
      throw ConfigError("values: expected start:stop:step, got " + spec);
    for (int64_t v = a; v <= b; v += s) out.push_back(v);
    return out;
  }
  std::string cur;
  for (char ch : spec + ",") {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(std::stoll(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  return out;
}

std::vector<int> load_label_csv(const std::string& path) {
  SeriesFrame f = load_csv(path, false);
  if (f.cols != 1) throw IoError("labels " + path + ": expected a single 0/1 column");
  std::vector<int> labels;
  labels.reserve(static_cast<size_t>(f.rows));
  for (int64_t t = 0; t < f.rows; ++t) labels.push_back(f.at(t, 0) != 0.0 ? 1 : 0);
  return labels;
}

struct LoadedRun {
  ConfigFile cfg;
  SeriesFrame data;
  ResolvedRun resolved;
  TaskData task_data;
};

LoadedRun load_run(const ConfigFile& cfg) {
  LoadedRun lr;
  lr.cfg = cfg;
  cfg.validate();
  lr.data = load_csv(cfg.require_string("data_path"), cfg.get_bool("timestamp_col", false));
  lr.resolved = resolve_run(cfg, lr.data);
  lr.task_data = prepare_task_data(lr.data, lr.resolved.split, lr.resolved.run);
  if (!lr.resolved.anomaly_labels_path.empty()) {
    const auto labels = load_label_csv(lr.resolved.anomaly_labels_path);
    if (static_cast<int64_t>(labels.size()) != lr.data.rows)
      throw IoError("labels do not cover all " + std::to_string(lr.data.rows) + " rows");
    // Rows of the test frame, context included, so window offsets line up.
    const int64_t test_begin = lr.data.rows - lr.task_data.test.rows;
    lr.task_data.test_labels.assign(labels.begin() + test_begin, labels.end());
  }
  return lr;
}

void write_history(const std::string& path, const TrainResult& result) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& row : result.history)
    rows.push_back({std::to_string(row.epoch), format_g17(row.train_loss),
                    format_g17(row.val_mse), format_g17(row.lr_last)});
  write_csv_rows(path, "epoch,train_loss,val_mse,lr", rows);
}

void write_metrics(const std::string& path, const std::vector<MetricReport>& metrics) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& m : metrics)
    rows.push_back({m.name, format_g17(m.value), std::to_string(m.count)});
  write_csv_rows(path, "metric,value,count", rows);
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
  LoadedRun lr = load_run(ConfigFile::parse_file(config_path));
  ensure_dir(out_dir);
  Rng rng(lr.resolved.run.seed);
  Model model(lr.resolved.run.model, rng);
  TrainResult result = train(model, lr.task_data, lr.resolved.run);
  write_history(out_dir + "/history.csv", result);
  write_metrics(out_dir + "/metrics.csv", result.test_metrics);
  save_checkpoint(out_dir + "/model.ckpt", model, lr.cfg.serialize());
  std::cout << "best_epoch " << result.best_epoch << "\n";
  for (const auto& m : result.test_metrics)
    std::cout << "test_" << m.name << " " << format_g17(m.value) << "\n";
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint,
             const std::string& out_dir) {
  CheckpointInfo info = read_checkpoint_info(checkpoint);
  ConfigFile cfg = config_path.empty() ? ConfigFile::parse_string(info.config_text)
                                       : ConfigFile::parse_file(config_path);
  LoadedRun lr = load_run(cfg);
  ensure_dir(out_dir);
  Rng rng(lr.resolved.run.seed);
  Model model(lr.resolved.run.model, rng);
  load_checkpoint(checkpoint, model);
  const auto metrics = evaluate_test(model, lr.task_data, lr.resolved.run);
  write_metrics(out_dir + "/metrics.csv", metrics);
  for (const auto& m : metrics)
    std::cout << "test_" << m.name << " " << format_g17(m.value) << "\n";
  return 0;
}

int cmd_synth(const std::string& config_path, const std::string& out_path,
              int64_t n_points, int64_t seed, double noise_std) {
  SynthSpec spec;
  if (!config_path.empty()) {
    ConfigFile cfg = ConfigFile::parse_file(config_path);
    // Synth configs are a separate small schema; reuse the parser only.
    spec.n_points = cfg.get_int("n_points", spec.n_points);
    spec.seed = static_cast<uint64_t>(cfg.get_int("seed", static_cast<int64_t>(spec.seed)));
    spec.noise_std = cfg.get_double("noise_std", spec.noise_std);
    spec.patch_len = cfg.get_int("patch_len", spec.patch_len);
    spec.stride = cfg.get_int("stride", spec.stride);
    spec.blend_period = cfg.get_int("blend_period", spec.blend_period);
  }
  if (n_points > 0) spec.n_points = n_points;
  if (seed >= 0) spec.seed = static_cast<uint64_t>(seed);
  if (noise_std >= 0.0) spec.noise_std = noise_std;
  if (const fs::path parent = fs::path(out_path).parent_path(); !parent.empty())
    fs::create_directories(parent);
  generate_synthetic_csv(spec, out_path);
  std::cout << "wrote " << out_path << " (" << spec.n_points << " rows)\n";
  return 0;
}

int cmd_mask_report(const std::string& checkpoint, int64_t layer, int64_t head,
                    const std::string& out_dir, bool with_weights) {
  CheckpointInfo info = read_checkpoint_info(checkpoint);
  ConfigFile cfg = ConfigFile::parse_string(info.config_text);
  LoadedRun lr = load_run(cfg);
  Rng rng(lr.resolved.run.seed);
  Model model(lr.resolved.run.model, rng);
  load_checkpoint(checkpoint, model);

  if (mode_is_decop(model.config().mode))
    throw ConfigError("mask not applicable: this checkpoint uses compressed attention");
  if (layer < 0 || layer >= model.num_layers())
    throw ConfigError("layer " + std::to_string(layer) + " out of range");
  if (head < 0 || head >= model.config().n_heads)
    throw ConfigError("head " + std::to_string(head) + " out of range");
  const Tensor& mask = model.layer(layer).heads[static_cast<size_t>(head)].mask;
  if (!mask.defined()) throw ConfigError("mask not applicable: mode without a mask");

  ensure_dir(out_dir);
  Tensor grid = heatmap_from_mask(mask, model.layout());
  write_csv_matrix(out_dir + "/heatmap.csv", grid);
  write_pgm(out_dir + "/heatmap.pgm", grid);
  write_histogram_csv(out_dir + "/mask_hist.csv",
                      histogram_symmetric(mask.values()));

  if (with_weights) {
    // One forward over the first test (or train) windows, tracing this layer.
    const auto& frame = lr.task_data.test.rows > 0 ? lr.task_data.test : lr.task_data.train;
    const auto& windows =
        lr.task_data.test.rows > 0 ? lr.task_data.test_windows : lr.task_data.train_windows;
    if (windows.empty()) throw ConfigError("no windows available for a weights histogram");
    const int64_t C = frame.cols, L = model.config().seq_len;
    std::vector<double> in(static_cast<size_t>(C * L));
    for (int64_t c = 0; c < C; ++c)
      for (int64_t t = 0; t < L; ++t)
        in[static_cast<size_t>(c * L + t)] = frame.at(windows[0].input_begin + t, c);
    AttentionTrace trace;
    ForwardCtx ctx = model.make_ctx(false, nullptr, &trace);
    ctx.trace_layer = layer;
    model.forward(Tensor::from_vector({C, L}, std::move(in)), nullptr, ctx);
    const Tensor& w = trace.heads[static_cast<size_t>(head)].weights;
    write_histogram_csv(out_dir + "/weights_hist.csv", histogram_symmetric(w.values()));
    export_trace(trace, out_dir, layer);
  }
  std::cout << "wrote " << out_dir << "/heatmap.csv (" << grid.dim(0) << "x" << grid.dim(1)
            << ")\n";
  return 0;
}

int cmd_profile(const std::string& config_path, const std::string& variable,
                const std::string& values_spec, bool decop, int64_t mask_cap,
                const std::string& out_dir) {
  ConfigFile cfg =
      config_path.empty() ? ConfigFile::parse_string("task = forecast\ndata_path = unused")
                          : ConfigFile::parse_file(config_path);
  ModelConfig base = resolve_model_config(cfg, cfg.get_int("n_features", 10));
  if (decop) {
    base.mode = AttentionMode::kCrabDecop;
    base.k = cfg.get_int("k", 64);
  }
  const auto values = parse_values(values_spec);
  ScalingReport report = profile_scaling(base, variable, values, mask_cap);

  ensure_dir(out_dir);
  std::vector<std::vector<std::string>> rows;
  for (const auto& p : report.points)
    rows.push_back({std::to_string(p.swept_value), std::to_string(p.tokens),
                    std::to_string(p.params), format_g17(p.flops_total),
                    format_g17(p.flops_score)});
  write_csv_rows(out_dir + "/scaling.csv", variable + ",tokens,params,flops_total,flops_score",
                 rows);
  write_csv_rows(out_dir + "/scaling_summary.csv", "name,value",
                 {{"param_exponent", format_g17(report.param_exponent)},
                  {"score_flop_exponent", format_g17(report.score_flop_exponent)}});
  std::cout << "param_exponent " << format_g17(report.param_exponent) << "\n"
            << "score_flop_exponent " << format_g17(report.score_flop_exponent) << "\n";
  return 0;
}

double average_over_settings(const ConfigFile& base, const std::string& out_dir,
                             std::vector<double>* maes) {
  // Trains one run per horizon (forecast) or mask rate (imputation) and
  // averages the test metrics; other tasks train once.
  LoadedRun probe = load_run(base);
  std::vector<int64_t> horizons = probe.resolved.horizons;
  std::vector<double> rates = probe.resolved.mask_rates;
  std::vector<ConfigFile> variants;
  if (probe.resolved.run.task == TaskType::kForecast && !horizons.empty()) {
    for (int64_t h : horizons) {
      ConfigFile c = base;
      c.set("pred_len", std::to_string(h));
      c.set("horizons", "");
      variants.push_back(c);
    }
  } else if (probe.resolved.run.task == TaskType::kImpute && !rates.empty()) {
    for (double r : rates) {
      ConfigFile c = base;
      c.set("mask_rate", format_g17(r));
      c.set("mask_rates", "");
      variants.push_back(c);
    }
  } else {
    variants.push_back(base);
  }
  double mse_sum = 0.0, mae_sum = 0.0;
  for (const auto& variant : variants) {
    LoadedRun lr = load_run(variant);
    Rng rng(lr.resolved.run.seed);
    Model model(lr.resolved.run.model, rng);
    TrainResult result = train(model, lr.task_data, lr.resolved.run);
    (void)out_dir;
    for (const auto& m : result.test_metrics) {
      if (m.name == "mse" || m.name == "f1") mse_sum += m.value;
      if (m.name == "mae") mae_sum += m.value;
    }
  }
  if (maes) maes->push_back(mae_sum / static_cast<double>(variants.size()));
  return mse_sum / static_cast<double>(variants.size());
}

int cmd_sweep(const std::string& config_path, const std::string& axis,
              const std::string& values_spec, const std::string& out_dir) {
  ConfigFile cfg = ConfigFile::parse_file(config_path);
  cfg.validate();
  if (axis != "k" && axis != "patch_len")
    throw ConfigError("sweep: axis must be k or patch_len, got " + axis);
  if (axis == "k") {
    // The compressed width only exists when compression is enabled.
    LoadedRun probe = load_run(cfg);
    if (!mode_is_decop(probe.resolved.run.model.mode))
      throw ConfigError("sweep: k axis needs compressed attention (decop = on)");
  }
  const auto values = parse_values(values_spec);
  if (values.empty()) throw ConfigError("sweep: no values");

  ensure_dir(out_dir);
  std::vector<std::vector<std::string>> rows;
  for (int64_t v : values) {
    ConfigFile point = cfg;
    point.set(axis, std::to_string(v));
    if (axis == "patch_len") point.set("stride", std::to_string(std::max<int64_t>(1, v / 2)));
    std::vector<double> maes;
    const double avg_mse = average_over_settings(point, out_dir, &maes);
    rows.push_back({std::to_string(v), format_g17(avg_mse), format_g17(maes[0])});
    std::cout << axis << " " << v << " avg_mse " << format_g17(avg_mse) << "\n";
  }
  write_csv_rows(out_dir + "/sweep.csv", axis + ",avg_mse,avg_mae", rows);
  return 0;
}

int cmd_seed_sweep(const std::string& config_path, const std::string& seeds_spec,
                   const std::string& out_dir) {
  LoadedRun lr = load_run(ConfigFile::parse_file(config_path));
  const auto seed_values = parse_values(seeds_spec);
  if (seed_values.size() < 2) throw ConfigError("seed-sweep: need at least 2 seeds");
  std::vector<uint64_t> seeds;
  for (int64_t s : seed_values) seeds.push_back(static_cast<uint64_t>(s));
  SeedSweepResult result = seed_sweep(lr.task_data, lr.resolved.run, seeds);

  ensure_dir(out_dir);
  std::vector<std::vector<std::string>> rows;
  for (size_t i = 0; i < result.values.size(); ++i)
    rows.push_back({std::to_string(result.seeds[i]), result.metric,
                    format_g17(result.values[i])});
  write_csv_rows(out_dir + "/seed_sweep.csv", "seed,metric,value", rows);
  write_csv_rows(out_dir + "/seed_sweep_summary.csv", "name,value",
                 {{"metric", result.metric},
                  {"mean", format_g17(result.mean)},
                  {"std", format_g17(result.stddev)},
                  {"cv", format_g17(result.cv)},
                  {"confidence", format_g17(result.confidence)},
                  {"partial", result.partial ? "true" : "false"}});
  std::cout << "mean " << format_g17(result.mean) << " std " << format_g17(result.stddev)
            << " confidence " << format_g17(result.confidence) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale signed-attention time-series workbench"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", checkpoint, out_path = "synthetic.csv";
  std::string variable = "n_features", values_spec, axis, seeds_spec = "2021:2025:1";
  int64_t layer = 0, head = 0, n_points = -1, seed = -1, mask_cap = int64_t{1} << 25;
  double noise_std = -1.0;
  bool decop = false, with_weights = false;

  auto* train_cmd = app.add_subcommand("train", "train a model from a config file");
  train_cmd->add_option("--config", config_path, "config file")->required();
  train_cmd->add_option("--out", out_dir, "output directory");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on its test split");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--config", config_path, "config override (default: embedded)");
  eval_cmd->add_option("--out", out_dir, "output directory");

  auto* synth_cmd = app.add_subcommand("synth", "generate the synthetic cross-lag dataset");
  synth_cmd->add_option("--out", out_path, "output CSV path");
  synth_cmd->add_option("--config", config_path, "generator config file");
  synth_cmd->add_option("--n-points", n_points, "series length");
  synth_cmd->add_option("--seed", seed, "generator seed");
  synth_cmd->add_option("--noise-std", noise_std, "target noise std");

  auto* mask_cmd = app.add_subcommand("mask-report", "heatmap and histograms of a learned mask");
  mask_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  mask_cmd->add_option("--layer", layer, "encoder layer");
  mask_cmd->add_option("--head", head, "attention head");
  mask_cmd->add_option("--out", out_dir, "output directory");
  mask_cmd->add_flag("--with-weights", with_weights,
                     "also trace one forward pass and histogram activated weights");

  auto* profile_cmd = app.add_subcommand("profile", "parameter/FLOP scaling sweep");
  profile_cmd->add_option("--config", config_path, "base config (optional)");
  profile_cmd->add_option("--variable", variable, "n_features or seq_len");
  profile_cmd->add_option("--values", values_spec, "comma list or start:stop:step")->required();
  profile_cmd->add_flag("--decop", decop, "profile the compressed variant");
  profile_cmd->add_option("--mask-cap", mask_cap, "max total mask entries for full attention");
  profile_cmd->add_option("--out", out_dir, "output directory");

  auto* sweep_cmd = app.add_subcommand("sweep", "train across k or patch_len values");
  sweep_cmd->add_option("--config", config_path, "config file")->required();
  sweep_cmd->add_option("--axis", axis, "k or patch_len")->required();
  sweep_cmd->add_option("--values", values_spec, "comma list or start:stop:step")->required();
  sweep_cmd->add_option("--out", out_dir, "output directory");

  auto* seed_cmd = app.add_subcommand("seed-sweep", "robustness across seeds");
  seed_cmd->add_option("--config", config_path, "config file")->required();
  seed_cmd->add_option("--seeds", seeds_spec, "comma list or start:stop:step");
  seed_cmd->add_option("--out", out_dir, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) return cmd_train(config_path, out_dir);
    if (eval_cmd->parsed()) return cmd_eval(config_path, checkpoint, out_dir);
    if (synth_cmd->parsed()) return cmd_synth(config_path, out_path, n_points, seed, noise_std);
    if (mask_cmd->parsed()) return cmd_mask_report(checkpoint, layer, head, out_dir, with_weights);
    if (profile_cmd->parsed())
      return cmd_profile(config_path, variable, values_spec, decop, mask_cap, out_dir);
    if (sweep_cmd->parsed()) return cmd_sweep(config_path, axis, values_spec, out_dir);
    if (seed_cmd->parsed()) return cmd_seed_sweep(config_path, seeds_spec, out_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
