#include "crosstime/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace crosstime {

SeriesFrame SeriesFrame::slice(int64_t begin, int64_t count) const {
  SeriesFrame out;
  out.rows = count;
  out.cols = cols;
  out.channel_names = channel_names;
  out.values.assign(values.begin() + begin * cols, values.begin() + (begin + count) * cols);
  if (!timestamps.empty())
    out.timestamps.assign(timestamps.begin() + begin, timestamps.begin() + begin + count);
  return out;
}

int64_t SeriesFrame::channel_index(const std::string& name) const {
  for (size_t i = 0; i < channel_names.size(); ++i)
    if (channel_names[i] == name) return static_cast<int64_t>(i);
  return -1;
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  cells.push_back(cur);
  return cells;
}

}  // namespace

SeriesFrame load_csv(const std::string& path, bool has_timestamp_col) {
  std::ifstream in(path);
  if (!in) throw IoError("load_csv: cannot open " + path);
  SeriesFrame frame;
  std::string line;
  int64_t line_no = 0;
  bool header_done = false;
  size_t n_cells = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    auto cells = split_line(line);
    if (!header_done) {
      n_cells = cells.size();
      const size_t first = has_timestamp_col ? 1 : 0;
      if (cells.size() <= first)
        throw IoError("load_csv: " + path + " header has no data columns");
      frame.channel_names.assign(cells.begin() + static_cast<long>(first), cells.end());
      frame.cols = static_cast<int64_t>(frame.channel_names.size());
      header_done = true;
      continue;
    }
    if (cells.size() != n_cells)
      throw IoError("load_csv: " + path + " line " + std::to_string(line_no) +
                    " has " + std::to_string(cells.size()) + " cells, expected " +
                    std::to_string(n_cells));
    size_t c = 0;
    if (has_timestamp_col) {
      frame.timestamps.push_back(cells[0]);
      c = 1;
    }
    for (; c < cells.size(); ++c) {
      try {
        size_t used = 0;
        const double v = std::stod(cells[c], &used);
        if (used != cells[c].size()) throw std::invalid_argument("trailing");
        if (std::isnan(v)) throw std::invalid_argument("nan");
        frame.values.push_back(v);
      } catch (const std::exception&) {
        throw IoError("load_csv: " + path + " line " + std::to_string(line_no) +
                      " column " + std::to_string(c + 1) + ": cannot parse \"" +
                      cells[c] + "\" as a number");
      }
    }
    ++frame.rows;
  }
  if (!header_done || frame.rows < 1)
    throw IoError("load_csv: " + path + " holds no data rows");
  return frame;
}

Splits split(const SeriesFrame& frame, const SplitSpec& spec) {
  int64_t n_train, n_val, n_test;
  if (spec.mode == SplitSpec::Mode::kFractional) {
    const double total = spec.train_frac + spec.val_frac + spec.test_frac;
    if (std::abs(total - 1.0) > 1e-9)
      throw ConfigError("split: fractions sum to " + std::to_string(total) + ", expected 1");
    n_train = static_cast<int64_t>(frame.rows * spec.train_frac);
    n_test = static_cast<int64_t>(frame.rows * spec.test_frac);
    n_val = frame.rows - n_train - n_test;
  } else {
    n_train = spec.train_rows;
    n_val = spec.val_rows;
    n_test = spec.test_rows;
    if (n_train + n_val + n_test > frame.rows)
      throw ConfigError("split: fixed counts exceed " + std::to_string(frame.rows) + " rows");
  }
  const int64_t lb = spec.border_overlap;
  if (n_train < std::max<int64_t>(lb, 1))
    throw ConfigError("split: train segment of " + std::to_string(n_train) +
                      " rows is shorter than the lookback " + std::to_string(lb));
  for (auto [name, n] : {std::pair<const char*, int64_t>{"val", n_val}, {"test", n_test}}) {
    if (n > 0 && n < 1)
      throw ConfigError(std::string("split: ") + name + " segment too short");
  }
  Splits out;
  out.train_base = n_train;
  out.val_base = n_val;
  out.test_base = n_test;
  out.train = frame.slice(0, n_train);
  if (n_val > 0) out.val = frame.slice(n_train - lb, n_val + lb);
  if (n_test > 0) out.test = frame.slice(n_train + n_val - lb, n_test + lb);
  return out;
}

ChannelScaler ChannelScaler::fit(const SeriesFrame& train) {
  if (train.rows < 1) throw ConfigError("scaler: empty training frame");
  ChannelScaler s;
  s.mean.assign(static_cast<size_t>(train.cols), 0.0);
  s.std.assign(static_cast<size_t>(train.cols), 0.0);
  for (int64_t t = 0; t < train.rows; ++t)
    for (int64_t c = 0; c < train.cols; ++c) s.mean[static_cast<size_t>(c)] += train.at(t, c);
  for (double& m : s.mean) m /= static_cast<double>(train.rows);
  for (int64_t t = 0; t < train.rows; ++t)
    for (int64_t c = 0; c < train.cols; ++c) {
      const double d = train.at(t, c) - s.mean[static_cast<size_t>(c)];
      s.std[static_cast<size_t>(c)] += d * d;
    }
  for (double& v : s.std) v = std::max(std::sqrt(v / static_cast<double>(train.rows)), kStdFloor);
  return s;
}

void ChannelScaler::apply(SeriesFrame& frame) const {
  for (int64_t t = 0; t < frame.rows; ++t)
    for (int64_t c = 0; c < frame.cols; ++c)
      frame.at(t, c) = (frame.at(t, c) - mean[static_cast<size_t>(c)]) / std[static_cast<size_t>(c)];
}

void ChannelScaler::invert(SeriesFrame& frame) const {
  for (int64_t t = 0; t < frame.rows; ++t)
    for (int64_t c = 0; c < frame.cols; ++c)
      frame.at(t, c) = frame.at(t, c) * std[static_cast<size_t>(c)] + mean[static_cast<size_t>(c)];
}

RevInState revin_normalize(std::vector<double>& window, int64_t rows, int64_t cols,
                           const std::vector<double>* observed) {
  RevInState st;
  st.mean.assign(static_cast<size_t>(cols), 0.0);
  st.std.assign(static_cast<size_t>(cols), 0.0);
  for (int64_t c = 0; c < cols; ++c) {
    double m = 0.0;
    int64_t n = 0;
    for (int64_t t = 0; t < rows; ++t) {
      if (observed && (*observed)[static_cast<size_t>(t * cols + c)] == 0.0) continue;
      m += window[static_cast<size_t>(t * cols + c)];
      ++n;
    }
    if (n > 0) m /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t t = 0; t < rows; ++t) {
      if (observed && (*observed)[static_cast<size_t>(t * cols + c)] == 0.0) continue;
      const double d = window[static_cast<size_t>(t * cols + c)] - m;
      var += d * d;
    }
    if (n > 0) var /= static_cast<double>(n);
    st.mean[static_cast<size_t>(c)] = m;
    st.std[static_cast<size_t>(c)] = std::max(std::sqrt(var), ChannelScaler::kStdFloor);
  }
  for (int64_t t = 0; t < rows; ++t)
    for (int64_t c = 0; c < cols; ++c)
      window[static_cast<size_t>(t * cols + c)] =
          (window[static_cast<size_t>(t * cols + c)] - st.mean[static_cast<size_t>(c)]) /
          st.std[static_cast<size_t>(c)];
  return st;
}

void revin_denormalize(std::vector<double>& output, int64_t rows, int64_t cols,
                       const RevInState& state) {
  for (int64_t t = 0; t < rows; ++t)
    for (int64_t c = 0; c < cols; ++c)
      output[static_cast<size_t>(t * cols + c)] =
          output[static_cast<size_t>(t * cols + c)] * state.std[static_cast<size_t>(c)] +
          state.mean[static_cast<size_t>(c)];
}

int64_t patch_count(int64_t lookback, const PatchSpec& spec) {
  if (spec.stride < 1 || spec.stride > spec.patch_len || spec.patch_len > lookback)
    throw ConfigError("patchify: need 1 <= stride <= patch_len <= lookback, got stride " +
                      std::to_string(spec.stride) + ", patch_len " +
                      std::to_string(spec.patch_len) + ", lookback " + std::to_string(lookback));
  const int64_t base = (lookback - spec.patch_len) / spec.stride + 1;
  return spec.pad_end ? base + 1 : base;
}

std::vector<int64_t> patch_index_map(int64_t lookback, int64_t channels,
                                     const PatchSpec& spec) {
  const int64_t p_count = patch_count(lookback, spec);
  std::vector<int64_t> map;
  map.reserve(static_cast<size_t>(channels * p_count * spec.patch_len));
  for (int64_t c = 0; c < channels; ++c)
    for (int64_t p = 0; p < p_count; ++p)
      for (int64_t j = 0; j < spec.patch_len; ++j) {
        const int64_t t = std::min(p * spec.stride + j, lookback - 1);
        map.push_back(c * lookback + t);
      }
  return map;
}

Tensor patchify(const Tensor& window, const PatchSpec& spec) {
  if (window.rank() != 2)
    throw ShapeError("patchify: window must be L x C, got " + shape_str(window.shape()));
  const int64_t L = window.dim(0), C = window.dim(1);
  const int64_t P = patch_count(L, spec);
  auto map = std::make_shared<std::vector<int64_t>>();
  map->reserve(static_cast<size_t>(C * P * spec.patch_len));
  for (int64_t c = 0; c < C; ++c)
    for (int64_t p = 0; p < P; ++p)
      for (int64_t j = 0; j < spec.patch_len; ++j) {
        const int64_t t = std::min(p * spec.stride + j, L - 1);
        map->push_back(t * C + c);
      }
  return gather_flat(window, std::move(map), {C, P, spec.patch_len});
}

TokenBatch embed_and_flatten(const Tensor& patches, const Tensor& projection,
                             const Tensor& proj_bias, const Tensor& pos_table) {
  const int r = patches.rank();
  if (r != 3 && r != 4)
    throw ShapeError("embed_and_flatten: patches must be (C,P,len) or (B,C,P,len), got " +
                     shape_str(patches.shape()));
  const int64_t B = r == 4 ? patches.dim(0) : 1;
  const int64_t C = patches.dim(r - 3);
  const int64_t P = patches.dim(r - 2);
  const int64_t plen = patches.dim(r - 1);
  if (projection.rank() != 2 || projection.dim(0) != plen)
    throw ShapeError("embed_and_flatten: projection " + shape_str(projection.shape()) +
                     " does not accept patch length " + std::to_string(plen));
  const int64_t d_model = projection.dim(1);
  if (pos_table.rank() != 2 || pos_table.dim(0) != P || pos_table.dim(1) != d_model)
    throw ShapeError("embed_and_flatten: pos_table " + shape_str(pos_table.shape()) +
                     " must be " + shape_str({P, d_model}));

  // Project all patches at once, rows ordered (b, c, p).
  Tensor rows = reshape(patches, {B * C * P, plen});
  Tensor projected = add_bias(matmul(rows, projection), proj_bias);

  // Add pos(p) to every row, then reorder rows (b, c, p) -> (b, p, c).
  std::vector<int64_t> pos_idx(static_cast<size_t>(B * C * P));
  for (int64_t i = 0; i < B * C * P; ++i) pos_idx[static_cast<size_t>(i)] = i % P;
  Tensor with_pos = add(projected, gather_rows(pos_table, pos_idx));
  std::vector<int64_t> perm(static_cast<size_t>(B * P * C));
  int64_t w = 0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t p = 0; p < P; ++p)
      for (int64_t c = 0; c < C; ++c) perm[static_cast<size_t>(w++)] = (b * C + c) * P + p;
  TokenBatch out;
  out.tokens = gather_rows(with_pos, perm);
  out.batch = B;
  out.patches = P;
  out.channels = C;
  out.d_model = d_model;
  return out;
}

Tensor make_imputation_mask(int64_t rows, int64_t cols, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw ConfigError("imputation mask: rate must be in [0, 1), got " + std::to_string(rate));
  std::vector<double> v(static_cast<size_t>(rows * cols));
  for (double& x : v) x = rng.uniform() < rate ? 0.0 : 1.0;
  return Tensor::from_vector({rows, cols}, std::move(v));
}

std::vector<Window> sliding_windows(const SeriesFrame& frame, int64_t lookback,
                                    int64_t horizon, int64_t stride) {
  if (stride < 1) throw ConfigError("sliding_windows: stride must be >= 1");
  if (frame.rows < lookback + horizon)
    throw ConfigError("sliding_windows: frame of " + std::to_string(frame.rows) +
                      " rows cannot hold lookback " + std::to_string(lookback) +
                      " + horizon " + std::to_string(horizon));
  std::vector<Window> out;
  for (int64_t s = 0; s + lookback + horizon <= frame.rows; s += stride)
    out.push_back(Window{s, s + lookback});
  return out;
}

}  // namespace crosstime
