#include "crosstime/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace crosstime {

Model::Model(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg_.channels < 1 || cfg_.seq_len < 1 || cfg_.out_len < 1)
    throw ConfigError("model: channels, seq_len and out_len must be >= 1");
  layout_.patches = patch_count(cfg_.seq_len, cfg_.patch);
  layout_.channels = cfg_.channels;

  Rng init = rng.stream(0x6d6f64656c);  // independent of any later draws
  embed_w_ = Tensor::randn({cfg_.patch.patch_len, cfg_.d_model}, init,
                           std::sqrt(1.0 / static_cast<double>(cfg_.patch.patch_len)), true);
  embed_b_ = Tensor::zeros({cfg_.d_model}, true);
  pos_table_ = Tensor::randn({layout_.patches, cfg_.d_model}, init, 0.02, true);
  register_param("embed.proj_w", embed_w_);
  register_param("embed.proj_b", embed_b_);
  register_param("embed.pos", pos_table_);

  for (int64_t l = 0; l < cfg_.e_layers; ++l) {
    CrabLayerParams lp = make_crab_layer(layout_, cfg_.d_model, cfg_.n_heads,
                                         cfg_.d_ff, cfg_.mode, cfg_.k, init);
    const std::string prefix = "layer" + std::to_string(l) + ".";
    for (int64_t h = 0; h < cfg_.n_heads; ++h) {
      const auto& hp = lp.heads[static_cast<size_t>(h)];
      const std::string hp_prefix = prefix + "head" + std::to_string(h) + ".";
      register_param(hp_prefix + "w_q", hp.w_q);
      register_param(hp_prefix + "w_k", hp.w_k);
      register_param(hp_prefix + "w_v", hp.w_v);
      if (hp.mask.defined()) register_param(hp_prefix + "mask", hp.mask);
      if (hp.compressor.defined()) register_param(hp_prefix + "compressor", hp.compressor);
      if (hp.value_map.defined()) register_param(hp_prefix + "value_map", hp.value_map);
    }
    register_param(prefix + "w_out", lp.w_out);
    register_param(prefix + "ffn_w1", lp.ffn_w1);
    register_param(prefix + "ffn_b1", lp.ffn_b1);
    register_param(prefix + "ffn_w2", lp.ffn_w2);
    register_param(prefix + "ffn_b2", lp.ffn_b2);
    register_param(prefix + "ln1_gain", lp.ln1_gain);
    register_param(prefix + "ln1_bias", lp.ln1_bias);
    register_param(prefix + "ln2_gain", lp.ln2_gain);
    register_param(prefix + "ln2_bias", lp.ln2_bias);
    layers_.push_back(std::move(lp));
  }

  head_ = make_head(layout_.patches, cfg_.d_model, cfg_.out_len, init);
  register_param("head.w", head_.w);
  register_param("head.b", head_.b);

  if (cfg_.revin && cfg_.revin_affine) {
    revin_gain_ = Tensor::full({cfg_.channels, 1}, 1.0, true);
    revin_bias_ = Tensor::zeros({cfg_.channels, 1}, true);
    register_param("revin.gain", revin_gain_);
    register_param("revin.bias", revin_bias_);
  }
}

void Model::register_param(const std::string& name, const Tensor& t) {
  for (const auto& p : params_)
    if (p.name == name) throw ConfigError("duplicate parameter name " + name);
  params_.push_back(Parameter{name, t});
}

int64_t Model::parameter_count() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

const Tensor* Model::find_parameter(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p.tensor;
  return nullptr;
}

void Model::zero_grads() const {
  for (const auto& p : params_) p.tensor.impl()->grad.clear();
}

ForwardCtx Model::make_ctx(bool training, Rng* rng, AttentionTrace* trace) const {
  ForwardCtx ctx;
  ctx.training = training;
  ctx.rng = rng;
  ctx.dropout = cfg_.dropout;
  ctx.attn_dropout = cfg_.attn_dropout;
  ctx.trace = trace;
  return ctx;
}

Tensor Model::forward(const Tensor& input, const Tensor* observed_mask,
                      ForwardCtx& ctx) const {
  const int64_t C = cfg_.channels, L = cfg_.seq_len;
  if (input.rank() != 2 || input.dim(1) != L || input.dim(0) % C != 0)
    throw ShapeError("model: input " + shape_str(input.shape()) +
                     " is not (batch * " + std::to_string(C) + ") x " + std::to_string(L));
  if (observed_mask && observed_mask->shape() != input.shape())
    throw ShapeError("model: mask " + shape_str(observed_mask->shape()) +
                     " does not match input " + shape_str(input.shape()));
  const int64_t rows = input.dim(0);
  const int64_t B = rows / C;

  Tensor x = input;
  Tensor denorm_scale, denorm_shift;
  if (cfg_.revin) {
    // Per-(sample, channel) statistics; constants with respect to parameters.
    std::vector<double> mu(static_cast<size_t>(rows), 0.0);
    std::vector<double> sd(static_cast<size_t>(rows), 0.0);
    const double* p = input.data();
    const double* m = observed_mask ? observed_mask->data() : nullptr;
    for (int64_t r = 0; r < rows; ++r) {
      double s = 0.0;
      int64_t n = 0;
      for (int64_t t = 0; t < L; ++t) {
        if (m && m[r * L + t] == 0.0) continue;
        s += p[r * L + t];
        ++n;
      }
      const double mean = n > 0 ? s / static_cast<double>(n) : 0.0;
      double var = 0.0;
      for (int64_t t = 0; t < L; ++t) {
        if (m && m[r * L + t] == 0.0) continue;
        const double d = p[r * L + t] - mean;
        var += d * d;
      }
      if (n > 0) var /= static_cast<double>(n);
      mu[static_cast<size_t>(r)] = mean;
      sd[static_cast<size_t>(r)] = std::max(std::sqrt(var), ChannelScaler::kStdFloor);
    }
    std::vector<double> inv_sd(static_cast<size_t>(rows)), neg_mu_sd(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
      inv_sd[static_cast<size_t>(r)] = 1.0 / sd[static_cast<size_t>(r)];
      neg_mu_sd[static_cast<size_t>(r)] =
          -mu[static_cast<size_t>(r)] / sd[static_cast<size_t>(r)];
    }
    x = row_affine(x, Tensor::from_vector({rows}, inv_sd),
                   Tensor::from_vector({rows}, neg_mu_sd));
    if (cfg_.revin_affine) {
      std::vector<int64_t> ch(static_cast<size_t>(rows));
      for (int64_t r = 0; r < rows; ++r) ch[static_cast<size_t>(r)] = r % C;
      Tensor gain_rows = reshape(gather_rows(revin_gain_, ch), {rows});
      Tensor bias_rows = reshape(gather_rows(revin_bias_, ch), {rows});
      x = row_affine(x, gain_rows, bias_rows);
    }
    denorm_scale = Tensor::from_vector({rows}, sd);
    denorm_shift = Tensor::from_vector({rows}, mu);
  }
  if (observed_mask) x = mul(x, *observed_mask);  // missing entries stay zero

  // Patchify against channel rows, then embed and flatten patch-major.
  auto map = std::make_shared<std::vector<int64_t>>();
  const auto sample_map = patch_index_map(L, C, cfg_.patch);
  map->reserve(static_cast<size_t>(B) * sample_map.size());
  for (int64_t b = 0; b < B; ++b)
    for (int64_t idx : sample_map) map->push_back(b * C * L + idx);
  const int64_t P = layout_.patches;
  Tensor patches = gather_flat(x, map, {B, C, P, cfg_.patch.patch_len});
  TokenBatch tb = embed_and_flatten(patches, embed_w_, embed_b_, pos_table_);
  Tensor tokens = tb.tokens;
  if (ctx.training && ctx.dropout > 0.0) {
    if (!ctx.rng) throw NumericError("dropout needs an rng in training mode");
    tokens = dropout(tokens, ctx.dropout, true, *ctx.rng);
  }

  for (size_t l = 0; l < layers_.size(); ++l) {
    ForwardCtx layer_ctx = ctx;
    if (ctx.trace && static_cast<int64_t>(l) != ctx.trace_layer) layer_ctx.trace = nullptr;
    tokens = encoder_layer(tokens, B, layers_[l], cfg_.mode, layout_, layer_ctx);
  }

  TokenBatch encoded = tb;
  encoded.tokens = tokens;
  Tensor flat_in = encoded.tokens;
  if (ctx.training && cfg_.fc_dropout > 0.0) {
    if (!ctx.rng) throw NumericError("dropout needs an rng in training mode");
    flat_in = dropout(flat_in, cfg_.fc_dropout, true, *ctx.rng);
  }
  encoded.tokens = flat_in;
  Tensor out = head_forward(encoded, head_);

  if (cfg_.revin) {
    if (cfg_.revin_affine) {
      std::vector<int64_t> ch(static_cast<size_t>(rows));
      for (int64_t r = 0; r < rows; ++r) ch[static_cast<size_t>(r)] = r % C;
      Tensor gain_rows = reshape(gather_rows(revin_gain_, ch), {rows});
      Tensor bias_rows = reshape(gather_rows(revin_bias_, ch), {rows});
      Tensor neg_bias = mul(bias_rows, -1.0);
      Tensor ones = Tensor::full({rows}, 1.0);
      out = row_affine(out, ones, neg_bias);
      out = row_div(out, gain_rows);
    }
    out = row_affine(out, denorm_scale, denorm_shift);
  }
  return out;
}

// ---- checkpoints ------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'T', 'C', 'K', 'P', 'T', '0', '1'};

uint64_t fnv1a(const void* data, size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = 1469598103934665603ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

template <typename T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("checkpoint " + path + ": truncated");
  return v;
}

void write_string(std::ofstream& out, const std::string& s) {
  write_pod<uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::ifstream& in, const std::string& path) {
  const auto n = read_pod<uint64_t>(in, path);
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw IoError("checkpoint " + path + ": truncated");
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model,
                     const std::string& config_text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot write " + path);
  out.write(kMagic, sizeof(kMagic));
  write_string(out, config_text);
  write_pod<uint64_t>(out, model.parameters().size());
  for (const auto& p : model.parameters()) {
    write_string(out, p.name);
    write_pod<uint32_t>(out, static_cast<uint32_t>(p.tensor.rank()));
    for (int64_t d : p.tensor.shape()) write_pod<int64_t>(out, d);
    const auto& v = p.tensor.values();
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
    write_pod<uint64_t>(out, fnv1a(v.data(), v.size() * sizeof(double)));
  }
  if (!out) throw IoError("checkpoint: write to " + path + " failed");
}

namespace {

struct RawCheckpoint {
  std::string config_text;
  std::vector<std::pair<std::string, std::pair<Shape, std::vector<double>>>> params;
};

RawCheckpoint read_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("checkpoint " + path + ": bad magic or unsupported version");
  RawCheckpoint ck;
  ck.config_text = read_string(in, path);
  const auto n_params = read_pod<uint64_t>(in, path);
  for (uint64_t i = 0; i < n_params; ++i) {
    const std::string name = read_string(in, path);
    const auto rank = read_pod<uint32_t>(in, path);
    Shape shape;
    for (uint32_t d = 0; d < rank; ++d) shape.push_back(read_pod<int64_t>(in, path));
    const int64_t count = shape_numel(shape);
    std::vector<double> values(static_cast<size_t>(count));
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw IoError("checkpoint " + path + ": truncated at " + name);
    const auto checksum = read_pod<uint64_t>(in, path);
    if (checksum != fnv1a(values.data(), values.size() * sizeof(double)))
      throw IoError("checkpoint " + path + ": checksum mismatch for " + name);
    ck.params.emplace_back(name, std::make_pair(std::move(shape), std::move(values)));
  }
  return ck;
}

}  // namespace

CheckpointInfo read_checkpoint_info(const std::string& path) {
  RawCheckpoint ck = read_raw(path);
  CheckpointInfo info;
  info.config_text = std::move(ck.config_text);
  for (const auto& [name, rest] : ck.params) info.parameter_names.push_back(name);
  return info;
}

void load_checkpoint(const std::string& path, Model& model) {
  RawCheckpoint ck = read_raw(path);
  if (ck.params.size() != model.parameters().size())
    throw IoError("checkpoint " + path + ": holds " + std::to_string(ck.params.size()) +
                  " parameters, model has " + std::to_string(model.parameters().size()));
  for (size_t i = 0; i < ck.params.size(); ++i) {
    auto& target = model.parameters()[i];
    const auto& [name, payload] = ck.params[i];
    if (name != target.name)
      throw IoError("checkpoint " + path + ": parameter " + name + " where " +
                    target.name + " was expected");
    if (payload.first != target.tensor.shape())
      throw IoError("checkpoint " + path + ": shape mismatch for " + name);
    target.tensor.values() = payload.second;
  }
}

}  // namespace crosstime
