#include "crosstime/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <thread>

namespace crosstime {

namespace {

// Rng stream ids of one run; all derived from the run seed.
constexpr uint64_t kStreamModelInit = 0x6d6f64656c;  // consumed inside Model
constexpr uint64_t kStreamShuffle = 1;
constexpr uint64_t kStreamDropout = 2;
constexpr uint64_t kStreamTrainMask = 3;

}  // namespace

void AdamState::init(const std::vector<Parameter>& params) {
  step = 0;
  m.clear();
  v.clear();
  for (const auto& p : params) {
    m.emplace_back(static_cast<size_t>(p.tensor.numel()), 0.0);
    v.emplace_back(static_cast<size_t>(p.tensor.numel()), 0.0);
  }
}

void adam_step(std::vector<Parameter>& params, AdamState& state, double lr) {
  if (state.m.size() != params.size())
    throw ConfigError("adam_step: state not initialized for these parameters");
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    const auto& grad = t.impl()->grad;
    double* w = t.data();
    auto& mi = state.m[i];
    auto& vi = state.v[i];
    const size_t n = mi.size();
    for (size_t j = 0; j < n; ++j) {
      const double g = j < grad.size() ? grad[j] : 0.0;
      if (std::isnan(g))
        throw NumericError("adam_step: NaN gradient in " + params[i].name);
      mi[j] = state.beta1 * mi[j] + (1.0 - state.beta1) * g;
      vi[j] = state.beta2 * vi[j] + (1.0 - state.beta2) * g * g;
      const double mh = mi[j] / bc1;
      const double vh = vi[j] / bc2;
      w[j] -= lr * mh / (std::sqrt(vh) + state.eps);
    }
  }
}

double OneCycleSchedule::lr(int64_t step) const {
  if (step < 0 || step > total_steps)
    throw ConfigError("onecycle_lr: step " + std::to_string(step) + " outside [0, " +
                      std::to_string(total_steps) + "]");
  const double start = max_lr / div_factor;
  const double floor_lr = max_lr / final_div_factor;
  const int64_t s1 = peak_step();
  if (step <= s1) {
    if (s1 == 0) return max_lr;
    const double t = static_cast<double>(step) / static_cast<double>(s1);
    return start + (max_lr - start) * 0.5 * (1.0 - std::cos(M_PI * t));
  }
  const double t = static_cast<double>(step - s1) / static_cast<double>(total_steps - s1);
  return floor_lr + (max_lr - floor_lr) * 0.5 * (1.0 + std::cos(M_PI * t));
}

// ---- data preparation ---------------------------------------------------------

TaskData prepare_task_data(const SeriesFrame& raw, const SplitSpec& split_spec,
                           const RunConfig& run) {
  SplitSpec spec = split_spec;
  spec.border_overlap = run.model.seq_len;
  Splits s = split(raw, spec);
  TaskData d;
  d.scaler = ChannelScaler::fit(s.train);
  d.train = std::move(s.train);
  d.val = std::move(s.val);
  d.test = std::move(s.test);
  d.scaler.apply(d.train);
  if (d.val.rows > 0) d.scaler.apply(d.val);
  if (d.test.rows > 0) d.scaler.apply(d.test);
  d.lookback = run.model.seq_len;
  d.horizon = run.task == TaskType::kForecast ? run.model.out_len : 0;
  // Anomaly windows tile the series without overlap; other tasks slide by 1.
  const int64_t stride = run.task == TaskType::kAnomaly ? d.lookback : 1;
  d.train_windows = sliding_windows(d.train, d.lookback, d.horizon, stride);
  if (d.val.rows > 0) d.val_windows = sliding_windows(d.val, d.lookback, d.horizon, stride);
  if (d.test.rows > 0) d.test_windows = sliding_windows(d.test, d.lookback, d.horizon, stride);
  return d;
}

namespace {

struct Batch {
  Tensor input;   // (B * C) x L
  Tensor target;  // (B * C) x H (or x L for reconstruction)
  Tensor mask;    // (B * C) x L, imputation only
  int64_t size = 0;
};

Batch make_batch(const SeriesFrame& frame, const std::vector<Window>& windows,
                 const std::vector<size_t>& order, size_t begin, size_t end,
                 int64_t L, int64_t H, TaskType task, double mask_rate, Rng* mask_rng) {
  const int64_t C = frame.cols;
  const int64_t B = static_cast<int64_t>(end - begin);
  const int64_t out_len = task == TaskType::kForecast ? H : L;
  std::vector<double> in(static_cast<size_t>(B * C * L));
  std::vector<double> tg(static_cast<size_t>(B * C * out_len));
  for (int64_t b = 0; b < B; ++b) {
    const Window& w = windows[order[begin + static_cast<size_t>(b)]];
    for (int64_t c = 0; c < C; ++c) {
      for (int64_t t = 0; t < L; ++t)
        in[static_cast<size_t>((b * C + c) * L + t)] = frame.at(w.input_begin + t, c);
      if (task == TaskType::kForecast) {
        for (int64_t t = 0; t < H; ++t)
          tg[static_cast<size_t>((b * C + c) * H + t)] = frame.at(w.target_begin + t, c);
      } else {
        for (int64_t t = 0; t < L; ++t)
          tg[static_cast<size_t>((b * C + c) * L + t)] = frame.at(w.input_begin + t, c);
      }
    }
  }
  Batch batch;
  batch.size = B;
  batch.input = Tensor::from_vector({B * C, L}, std::move(in));
  batch.target = Tensor::from_vector({B * C, out_len}, std::move(tg));
  if (task == TaskType::kImpute) {
    if (!mask_rng) throw ConfigError("imputation batches need a mask rng");
    batch.mask = make_imputation_mask(B * C, L, mask_rate, *mask_rng);
  }
  return batch;
}

Tensor batch_loss(const Model& model, const Batch& batch, const RunConfig& run,
                  ForwardCtx& ctx) {
  const Tensor* mask = batch.mask.defined() ? &batch.mask : nullptr;
  Tensor pred = model.forward(batch.input, mask, ctx);
  switch (run.task) {
    case TaskType::kForecast:
      return forecast_loss_rows(pred, batch.target, run.model.channels, run.setting);
    case TaskType::kImpute:
      return masked_impute_loss(pred, batch.target, batch.mask);
    case TaskType::kAnomaly:
      return forecast_loss_rows(pred, batch.target, run.model.channels, ForecastSetting{});
  }
  throw ConfigError("unknown task");
}

std::vector<size_t> identity_order(size_t n) {
  std::vector<size_t> v(n);
  std::iota(v.begin(), v.end(), size_t{0});
  return v;
}

// Weighted validation/test loss without gradients. For imputation the masks
// come from a fixed evaluation stream so repeated passes agree.
double eval_weighted_mse(const Model& model, const SeriesFrame& frame,
                         const std::vector<Window>& windows, const RunConfig& run) {
  if (windows.empty()) return 0.0;
  const auto order = identity_order(windows.size());
  std::vector<std::pair<int64_t, double>> folds;
  Rng eval_mask(run.eval_mask_seed);
  for (size_t begin = 0; begin < windows.size(); begin += static_cast<size_t>(run.batch_size)) {
    const size_t end = std::min(windows.size(), begin + static_cast<size_t>(run.batch_size));
    Batch b = make_batch(frame, windows, order, begin, end, run.model.seq_len,
                         run.model.out_len, run.task, run.mask_rate, &eval_mask);
    ForwardCtx ctx = model.make_ctx(false);
    folds.emplace_back(b.size, batch_loss(model, b, run, ctx).item());
  }
  return weighted_metric_fold("mse", folds).value;
}

void accumulate_errors(const Tensor& pred, const Tensor& target, int64_t channels,
                       const RunConfig& run, const Tensor* mask, double& se, double& ae,
                       int64_t& n) {
  const double* p = pred.data();
  const double* t = target.data();
  const double* m = mask ? mask->data() : nullptr;
  const int64_t rows = pred.dim(0), cols = pred.dim(1);
  for (int64_t r = 0; r < rows; ++r) {
    if (run.task == TaskType::kForecast && run.setting.ms &&
        (r % channels) != run.setting.target_channel)
      continue;
    for (int64_t c = 0; c < cols; ++c) {
      const int64_t i = r * cols + c;
      if (m && m[i] != 0.0) continue;  // imputation scores masked entries only
      const double d = p[i] - t[i];
      se += d * d;
      ae += std::abs(d);
      ++n;
    }
  }
}

}  // namespace

std::vector<MetricReport> evaluate_test(const Model& model, const TaskData& data,
                                        const RunConfig& run) {
  std::vector<MetricReport> out;
  if (data.test_windows.empty()) return out;
  const auto order = identity_order(data.test_windows.size());

  if (run.task == TaskType::kAnomaly) {
    // Reconstruction scores over train and test, pooled threshold, labels.
    auto scores_of = [&](const SeriesFrame& frame, const std::vector<Window>& windows) {
      std::vector<double> all;
      const auto ord = identity_order(windows.size());
      for (size_t begin = 0; begin < windows.size();
           begin += static_cast<size_t>(run.batch_size)) {
        const size_t end = std::min(windows.size(), begin + static_cast<size_t>(run.batch_size));
        Batch b = make_batch(frame, windows, ord, begin, end, run.model.seq_len, 0,
                             run.task, 0.0, nullptr);
        ForwardCtx ctx = model.make_ctx(false);
        Tensor pred = model.forward(b.input, nullptr, ctx);
        // Rows are (b, c); fold channels per time step.
        const int64_t C = run.model.channels, L = run.model.seq_len;
        const double* p = pred.data();
        const double* t = b.target.data();
        for (int64_t s = 0; s < b.size; ++s)
          for (int64_t step = 0; step < L; ++step) {
            double acc = 0.0;
            for (int64_t c = 0; c < C; ++c) {
              const int64_t i = ((s * C + c) * L) + step;
              const double d = p[i] - t[i];
              acc += d * d;
            }
            all.push_back(acc);
          }
      }
      return all;
    };
    const auto train_scores = scores_of(data.train, data.train_windows);
    const auto test_scores = scores_of(data.test, data.test_windows);
    ThresholdResult th = threshold_and_classify(train_scores, test_scores, run.alpha);
    MetricReport tau;
    tau.name = "tau";
    tau.value = th.tau;
    tau.count = static_cast<int64_t>(train_scores.size() + test_scores.size());
    tau.contributions.emplace_back(tau.count, th.tau);
    out.push_back(std::move(tau));
    if (!data.test_labels.empty()) {
      // Scored rows start where the first window starts (context rows and any
      // non-tiled tail are not scored).
      std::vector<int> truth;
      for (size_t w = 0; w < data.test_windows.size(); ++w) {
        const int64_t begin = data.test_windows[w].input_begin;
        for (int64_t t = 0; t < run.model.seq_len; ++t)
          truth.push_back(data.test_labels[static_cast<size_t>(begin + t)]);
      }
      std::vector<int> labels = th.labels;
      if (run.point_adjust) labels = point_adjust(labels, truth);
      ClassificationMetrics m = classification_metrics(labels, truth);
      const int64_t n = static_cast<int64_t>(labels.size());
      for (auto [name, value] : {std::pair<const char*, double>{"precision", m.precision},
                                 {"recall", m.recall},
                                 {"f1", m.f1},
                                 {"accuracy", m.accuracy}}) {
        MetricReport r;
        r.name = name;
        r.value = value;
        r.count = n;
        r.contributions.emplace_back(n, value);
        out.push_back(std::move(r));
      }
    }
    return out;
  }

  std::vector<std::pair<int64_t, double>> mse_folds, mae_folds;
  Rng eval_mask(run.eval_mask_seed);
  for (size_t begin = 0; begin < data.test_windows.size();
       begin += static_cast<size_t>(run.batch_size)) {
    const size_t end =
        std::min(data.test_windows.size(), begin + static_cast<size_t>(run.batch_size));
    Batch b = make_batch(data.test, data.test_windows, order, begin, end, run.model.seq_len,
                         run.model.out_len, run.task, run.mask_rate, &eval_mask);
    ForwardCtx ctx = model.make_ctx(false);
    const Tensor* mask = b.mask.defined() ? &b.mask : nullptr;
    Tensor pred = model.forward(b.input, mask, ctx);
    double se = 0.0, ae = 0.0;
    int64_t n = 0;
    accumulate_errors(pred, b.target, run.model.channels, run, mask, se, ae, n);
    if (n > 0) {
      mse_folds.emplace_back(n, se / static_cast<double>(n));
      mae_folds.emplace_back(n, ae / static_cast<double>(n));
    }
  }
  out.push_back(weighted_metric_fold("mse", mse_folds));
  out.push_back(weighted_metric_fold("mae", mae_folds));
  return out;
}

TrainResult train(Model& model, const TaskData& data, const RunConfig& run) {
  if (data.train_windows.empty()) throw ConfigError("train: no training windows");
  const int64_t batches_per_epoch =
      static_cast<int64_t>((data.train_windows.size() + static_cast<size_t>(run.batch_size) - 1) /
                           static_cast<size_t>(run.batch_size));
  OneCycleSchedule sched;
  sched.max_lr = run.learning_rate;
  sched.total_steps = run.epochs * batches_per_epoch;
  sched.pct_start = run.pct_start;
  sched.div_factor = run.div_factor;
  sched.final_div_factor = run.final_div_factor;

  AdamState adam;
  adam.init(model.parameters());
  Rng root(run.seed);
  Rng drop_rng = root.stream(kStreamDropout);
  Rng train_mask_rng = root.stream(kStreamTrainMask);

  TrainResult result;
  double best_val = 0.0;
  std::vector<std::vector<double>> best_params;
  int64_t global_step = 0;

  for (int64_t epoch = 1; epoch <= run.epochs; ++epoch) {
    auto order = identity_order(data.train_windows.size());
    Rng shuffle_rng = root.stream(kStreamShuffle).stream(static_cast<uint64_t>(epoch));
    shuffle(order, shuffle_rng);

    std::vector<std::pair<int64_t, double>> loss_folds;
    double lr_last = 0.0;
    for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(run.batch_size)) {
      const size_t end = std::min(order.size(), begin + static_cast<size_t>(run.batch_size));
      Batch b = make_batch(data.train, data.train_windows, order, begin, end,
                           run.model.seq_len, run.model.out_len, run.task, run.mask_rate,
                           &train_mask_rng);
      const double lr = sched.lr(global_step);
      lr_last = lr;
      Tape tape;
      ForwardCtx ctx = model.make_ctx(true, &drop_rng);
      Tensor loss = batch_loss(model, b, run, ctx);
      const double loss_value = loss.item();
      if (std::isnan(loss_value))
        throw NumericError("train: loss diverged to NaN at epoch " + std::to_string(epoch) +
                           " step " + std::to_string(global_step));
      model.zero_grads();
      tape.backward(loss);
      if (run.grad_clip > 0.0) {
        double norm2 = 0.0;
        for (auto& p : model.parameters())
          for (double g : p.tensor.impl()->grad) norm2 += g * g;
        const double norm = std::sqrt(norm2);
        if (norm > run.grad_clip) {
          const double s = run.grad_clip / norm;
          for (auto& p : model.parameters())
            for (double& g : p.tensor.impl()->grad) g *= s;
        }
      }
      adam_step(model.parameters(), adam, lr);
      ++global_step;
      loss_folds.emplace_back(b.size, loss_value);
    }

    const double val_mse =
        data.val_windows.empty()
            ? weighted_metric_fold("loss", loss_folds).value
            : eval_weighted_mse(model, data.val, data.val_windows, run);
    result.history.push_back(EpochRow{epoch, weighted_metric_fold("loss", loss_folds).value,
                                      val_mse, lr_last});
    if (result.best_epoch == 0 || val_mse < best_val) {
      best_val = val_mse;
      result.best_epoch = epoch;
      best_params.clear();
      for (const auto& p : model.parameters()) best_params.push_back(p.tensor.values());
    }
  }

  for (size_t i = 0; i < model.parameters().size(); ++i)
    model.parameters()[i].tensor.values() = best_params[i];
  result.test_metrics = evaluate_test(model, data, run);
  return result;
}

SeedSweepResult seed_sweep(const TaskData& data, const RunConfig& base,
                           const std::vector<uint64_t>& seeds) {
  if (seeds.size() < 2) throw ConfigError("seed_sweep: need at least 2 seeds");
  SeedSweepResult result;
  result.seeds = seeds;
  std::vector<std::optional<double>> values(seeds.size());
  std::vector<std::string> names(seeds.size());

  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= seeds.size()) return;
      RunConfig run = base;
      run.seed = seeds[i];
      try {
        Rng rng(run.seed);
        Model model(run.model, rng);
        TrainResult tr = train(model, data, run);
        // Primary metric: f1 when present (anomaly with labels), else the
        // first report (mse).
        const MetricReport* pick = nullptr;
        for (const auto& m : tr.test_metrics)
          if (m.name == "f1") pick = &m;
        if (!pick && !tr.test_metrics.empty()) pick = &tr.test_metrics.front();
        if (pick) {
          values[i] = pick->value;
          names[i] = pick->name;
        }
      } catch (const std::exception&) {
        // flagged below as a partial sweep
      }
    }
  };
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const size_t n_workers = std::min<size_t>(seeds.size(), hw);
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (size_t t = 0; t < n_workers; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }

  for (size_t i = 0; i < seeds.size(); ++i) {
    if (values[i]) {
      result.values.push_back(*values[i]);
      if (result.metric.empty()) result.metric = names[i];
    } else {
      result.partial = true;
    }
  }
  if (result.values.size() < 2)
    throw NumericError("seed_sweep: fewer than 2 runs completed");
  const double n = static_cast<double>(result.values.size());
  result.mean = std::accumulate(result.values.begin(), result.values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : result.values) ss += (v - result.mean) * (v - result.mean);
  result.stddev = std::sqrt(ss / (n - 1.0));
  result.cv = 100.0 * result.stddev / std::abs(result.mean);
  result.confidence = 100.0 - result.cv;
  return result;
}

}  // namespace crosstime
