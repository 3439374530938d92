#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "crosstime/tensor.hpp"

namespace crosstime {

/// In-memory multivariate series: T rows by C channels, row-major.
struct SeriesFrame {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<double> values;  // rows * cols
  std::vector<std::string> channel_names;
  std::vector<std::string> timestamps;  // empty when the file had none

  double at(int64_t t, int64_t c) const { return values[static_cast<size_t>(t * cols + c)]; }
  double& at(int64_t t, int64_t c) { return values[static_cast<size_t>(t * cols + c)]; }
  /// Contiguous row block [begin, begin+count) as a new frame.
  SeriesFrame slice(int64_t begin, int64_t count) const;
  int64_t channel_index(const std::string& name) const;  // -1 when absent
};

/// Reads a UTF-8 comma-separated file with a header row. Lines starting with
/// '#' are skipped. When has_timestamp_col, the first column is kept as text
/// and excluded from the numeric channels.
SeriesFrame load_csv(const std::string& path, bool has_timestamp_col);

struct SplitSpec {
  enum class Mode { kFractional, kFixedCounts };
  Mode mode = Mode::kFractional;
  double train_frac = 0.7, val_frac = 0.1, test_frac = 0.2;
  int64_t train_rows = 0, val_rows = 0, test_rows = 0;
  /// Lookback rows prepended to val/test from the preceding split so their
  /// first window is full-length.
  int64_t border_overlap = 0;
};

struct Splits {
  SeriesFrame train, val, test;
  int64_t train_base = 0, val_base = 0, test_base = 0;  // rows excluding overlap
};

Splits split(const SeriesFrame& frame, const SplitSpec& spec);

/// Per-channel standardization fitted on train rows only. Channels with
/// std below the floor are scaled by the floor (constant channels map to 0).
struct ChannelScaler {
  std::vector<double> mean, std;
  static constexpr double kStdFloor = 1e-8;

  static ChannelScaler fit(const SeriesFrame& train);
  void apply(SeriesFrame& frame) const;
  void invert(SeriesFrame& frame) const;
};

/// Per-instance per-channel statistics captured at normalization time.
struct RevInState {
  std::vector<double> mean, std;  // one entry per channel
};

/// Standardizes each channel of an L x C window; inverse restores it.
/// With `observed`, statistics use only rows where observed(t,c) != 0.
RevInState revin_normalize(std::vector<double>& window, int64_t rows, int64_t cols,
                           const std::vector<double>* observed = nullptr);
void revin_denormalize(std::vector<double>& output, int64_t rows, int64_t cols,
                       const RevInState& state);

struct PatchSpec {
  int64_t patch_len = 16;
  int64_t stride = 8;
  /// Appends one extra patch whose out-of-range tail replicates the final
  /// value. Gives P = floor((L - patch_len)/stride) + 2.
  bool pad_end = true;
};

int64_t patch_count(int64_t lookback, const PatchSpec& spec);

/// window is L x C (row t, column c); result is (C, P, patch_len).
Tensor patchify(const Tensor& window, const PatchSpec& spec);

/// Element index map for patchify against a (C x L) channel-rows matrix:
/// out(c, p, j) <- c * L + min(p * stride + j, L - 1). Shared by the batched
/// model path so padding and layout match patchify exactly.
std::vector<int64_t> patch_index_map(int64_t lookback, int64_t channels,
                                     const PatchSpec& spec);

/// Embedded, positionally encoded, patch-major-flattened token sequence.
/// Token (p, c) lives at flat index p * channels + c within its sample.
struct TokenBatch {
  Tensor tokens;  // (batch * patches * channels) x d_model
  int64_t batch = 1;
  int64_t patches = 0;
  int64_t channels = 0;
  int64_t d_model = 0;

  int64_t tokens_per_sample() const { return patches * channels; }
  int64_t flat_index(int64_t p, int64_t c) const { return p * channels + c; }
  std::pair<int64_t, int64_t> unflatten(int64_t i) const {
    return {i / channels, i % channels};
  }
};

/// patches: (C, P, patch_len) or (B, C, P, patch_len). Each patch is mapped
/// through `projection` (patch_len x d_model) plus `proj_bias`, the shared
/// positional row pos_table[p] is added, and tokens are flattened patch-major.
TokenBatch embed_and_flatten(const Tensor& patches, const Tensor& projection,
                             const Tensor& proj_bias, const Tensor& pos_table);

/// Binary mask, entries 0 (missing) with probability rate.
Tensor make_imputation_mask(int64_t rows, int64_t cols, double rate, Rng& rng);

struct Window {
  int64_t input_begin;   // row of the first input step
  int64_t target_begin;  // row of the first target step (== input_begin + L)
};

/// Chronological (input L x C, target H x C) start offsets. H = 0 yields
/// reconstruction windows (target == input). Throws when the frame is too
/// short for even one window.
std::vector<Window> sliding_windows(const SeriesFrame& frame, int64_t lookback,
                                    int64_t horizon, int64_t stride = 1);

}  // namespace crosstime
