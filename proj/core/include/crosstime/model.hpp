#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crosstime/attention.hpp"
#include "crosstime/data.hpp"
#include "crosstime/tasks.hpp"
#include "crosstime/tensor.hpp"

namespace crosstime {

/// Trainable tensor with a unique path-style name ("layer0.head1.mask").
struct Parameter {
  std::string name;
  Tensor tensor;
};

struct ModelConfig {
  TaskType task = TaskType::kForecast;
  int64_t channels = 7;
  int64_t seq_len = 96;
  int64_t out_len = 96;  // horizon for forecasting, seq_len for reconstruction
  PatchSpec patch;
  int64_t e_layers = 2;
  int64_t n_heads = 4;
  int64_t d_model = 32;
  int64_t d_ff = 64;  // 2 * d_model unless overridden
  double dropout = 0.1;
  double fc_dropout = 0.05;
  double attn_dropout = 0.0;
  AttentionMode mode = AttentionMode::kCrab;
  int64_t k = 0;  // compressed width, compressed mode only
  bool revin = true;
  bool revin_affine = false;
};

/// Encoder-only model: patch embedding with positional encoding, a stack of
/// attention encoder layers over the flattened (patch, channel) token grid,
/// and a channel-shared linear head. Instance normalization (when enabled)
/// wraps input and output.
class Model {
 public:
  Model(const ModelConfig& cfg, Rng& rng);

  /// input rows are (b, c) lookback vectors: shape (B * channels) x seq_len.
  /// observed_mask (same shape, 1 = observed) zero-fills missing entries and
  /// restricts the instance statistics to observed positions.
  /// Returns (B * channels) x out_len, denormalized when revin is on.
  Tensor forward(const Tensor& input, const Tensor* observed_mask, ForwardCtx& ctx) const;

  ForwardCtx make_ctx(bool training, Rng* rng = nullptr,
                      AttentionTrace* trace = nullptr) const;

  const ModelConfig& config() const { return cfg_; }
  const TokenLayout& layout() const { return layout_; }
  int64_t patches() const { return layout_.patches; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  int64_t parameter_count() const;
  const Tensor* find_parameter(const std::string& name) const;

  const CrabLayerParams& layer(int64_t i) const { return layers_[static_cast<size_t>(i)]; }
  int64_t num_layers() const { return static_cast<int64_t>(layers_.size()); }
  const HeadParams& head() const { return head_; }

  void zero_grads() const;

 private:
  void register_param(const std::string& name, const Tensor& t);

  ModelConfig cfg_;
  TokenLayout layout_;
  Tensor embed_w_, embed_b_, pos_table_;
  std::vector<CrabLayerParams> layers_;
  HeadParams head_;
  Tensor revin_gain_, revin_bias_;  // defined only with learnable affine
  std::vector<Parameter> params_;
};

// ---- checkpoints ------------------------------------------------------------

/// Versioned binary bundle: a manifest (name, shape, FNV-1a checksum) per
/// parameter plus an embedded configuration text block.
void save_checkpoint(const std::string& path, const Model& model,
                     const std::string& config_text);

struct CheckpointInfo {
  std::string config_text;
  std::vector<std::string> parameter_names;
};

/// Reads the manifest without loading values into a model.
CheckpointInfo read_checkpoint_info(const std::string& path);

/// Loads values into an already-constructed model; names, shapes and
/// checksums must all match.
void load_checkpoint(const std::string& path, Model& model);

}  // namespace crosstime
