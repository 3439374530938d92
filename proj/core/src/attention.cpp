#include "crosstime/attention.hpp"

#include <cmath>

namespace crosstime {

std::string to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::kCrab: return "crab";
    case AttentionMode::kCrabDecop: return "crab_decop";
    case AttentionMode::kCrabNoMask: return "crab_no_mask";
    case AttentionMode::kSoftmaxMasked: return "softmax_masked";
    case AttentionMode::kVanilla: return "vanilla";
    case AttentionMode::kSequenceOnly: return "sequence_only";
    case AttentionMode::kChannelOnly: return "channel_only";
    case AttentionMode::kAbsactClipped: return "absact_clipped";
  }
  return "?";
}

AttentionMode attention_mode_from_string(const std::string& s) {
  for (AttentionMode m :
       {AttentionMode::kCrab, AttentionMode::kCrabDecop, AttentionMode::kCrabNoMask,
        AttentionMode::kSoftmaxMasked, AttentionMode::kVanilla,
        AttentionMode::kSequenceOnly, AttentionMode::kChannelOnly,
        AttentionMode::kAbsactClipped}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown attention mode \"" + s + "\"");
}

bool mode_uses_mask(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::kCrab:
    case AttentionMode::kSoftmaxMasked:
    case AttentionMode::kSequenceOnly:
    case AttentionMode::kChannelOnly:
    case AttentionMode::kAbsactClipped:
      return true;
    default:
      return false;
  }
}

bool mode_uses_softmax(AttentionMode mode) {
  return mode == AttentionMode::kSoftmaxMasked || mode == AttentionMode::kVanilla;
}

bool mode_scales_scores(AttentionMode mode) { return mode_uses_softmax(mode); }

bool mode_is_decop(AttentionMode mode) { return mode == AttentionMode::kCrabDecop; }

bool mode_clips_weights(AttentionMode mode) {
  return mode == AttentionMode::kAbsactClipped;
}

std::optional<Restriction> mode_restriction(AttentionMode mode) {
  if (mode == AttentionMode::kSequenceOnly) return Restriction::kSequenceOnly;
  if (mode == AttentionMode::kChannelOnly) return Restriction::kChannelOnly;
  return std::nullopt;
}

CrabLayerParams make_crab_layer(const TokenLayout& layout, int64_t d_model,
                                int64_t n_heads, int64_t d_ff, AttentionMode mode,
                                int64_t k, Rng& rng) {
  if (d_model % n_heads != 0)
    throw ConfigError("d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  const int64_t n = layout.n();
  const bool decop = mode_is_decop(mode);
  if (decop && (k < 1 || k >= n))
    throw ConfigError("compressed attention needs 1 <= k < N, got k " +
                      std::to_string(k) + " with N " + std::to_string(n));
  CrabLayerParams p;
  p.d_model = d_model;
  p.n_heads = n_heads;
  p.d_head = d_model / n_heads;
  p.d_ff = d_ff;
  p.k = decop ? k : 0;
  const double proj_std = std::sqrt(1.0 / static_cast<double>(d_model));
  const double he_n = std::sqrt(2.0 / static_cast<double>(n));
  for (int64_t h = 0; h < n_heads; ++h) {
    CrabHeadParams hp;
    hp.w_q = Tensor::randn({d_model, p.d_head}, rng, proj_std, true);
    hp.w_k = Tensor::randn({d_model, p.d_head}, rng, proj_std, true);
    hp.w_v = Tensor::randn({d_model, p.d_head}, rng, proj_std, true);
    if (mode_uses_mask(mode)) hp.mask = Tensor::randn({n, n}, rng, he_n, true);
    if (decop) {
      hp.compressor = Tensor::randn({n, k}, rng, he_n, true);
      hp.value_map = Tensor::randn({k, n}, rng, he_n, true);
    }
    p.heads.push_back(std::move(hp));
  }
  p.w_out = Tensor::randn({d_model, d_model}, rng, proj_std, true);
  p.ffn_w1 = Tensor::randn({d_model, d_ff}, rng, proj_std, true);
  p.ffn_b1 = Tensor::zeros({d_ff}, true);
  p.ffn_w2 = Tensor::randn({d_ff, d_model}, rng,
                           std::sqrt(1.0 / static_cast<double>(d_ff)), true);
  p.ffn_b2 = Tensor::zeros({d_model}, true);
  p.ln1_gain = Tensor::full({d_model}, 1.0, true);
  p.ln1_bias = Tensor::zeros({d_model}, true);
  p.ln2_gain = Tensor::full({d_model}, 1.0, true);
  p.ln2_bias = Tensor::zeros({d_model}, true);
  return p;
}

Tensor scores(const Tensor& q, const Tensor& k, bool scale) {
  if (q.rank() != 2 || k.rank() != 2 || q.dim(1) != k.dim(1))
    throw ShapeError("scores: shapes " + shape_str(q.shape()) + " and " +
                     shape_str(k.shape()) + " disagree on the head dimension");
  Tensor a = matmul(q, transpose(k));
  if (scale) a = mul(a, 1.0 / std::sqrt(static_cast<double>(q.dim(1))));
  return a;
}

Tensor positive_shift(const Tensor& a) { return sub(a, min_all(a)); }

Tensor apply_mask(const Tensor& a_pos, const Tensor& m) {
  if (a_pos.shape() != m.shape())
    throw ShapeError("apply_mask: score shape " + shape_str(a_pos.shape()) +
                     " vs mask shape " + shape_str(m.shape()));
  return mul(a_pos, m);
}

Tensor absact(const Tensor& a, bool stabilized) {
  if (a.rank() != 2)
    throw ShapeError("absact needs rank 2, got " + shape_str(a.shape()));
  if (stabilized) {
    Tensor b = add(a, kAbsActEps);
    return row_div(b, add(row_abs_sum(b), kAbsActDelta));
  }
  Tensor s = row_abs_sum(a);
  for (int64_t i = 0; i < s.numel(); ++i)
    if (s.data()[i] == 0.0)
      throw NumericError("absact(pure): zero absolute sum in row " + std::to_string(i));
  return row_div(a, s);
}

Tensor absact_clipped(const Tensor& a) { return relu(absact(a, true)); }

Tensor restrict_block_allow(const TokenLayout& layout, Restriction r) {
  const int64_t n = layout.n();
  if (n < 1) throw ShapeError("restrict_block: empty token layout");
  const int64_t c = layout.channels;
  Tensor allow = Tensor::zeros({n, n});
  double* p = allow.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      const bool same_channel = (i % c) == (j % c);
      const bool same_patch = (i / c) == (j / c);
      const bool keep = r == Restriction::kSequenceOnly ? same_channel : same_patch;
      p[i * n + j] = keep ? 1.0 : 0.0;
    }
  return allow;
}

Tensor restricted_absact(const Tensor& a, const Tensor& allow) {
  if (a.shape() != allow.shape())
    throw ShapeError("restricted_absact: shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(allow.shape()));
  Tensor g = mul(add(a, kAbsActEps), allow);
  return row_div(g, add(row_abs_sum(g), kAbsActDelta));
}

Tensor restrict_softmax_bias(const TokenLayout& layout, Restriction r) {
  Tensor allow = restrict_block_allow(layout, r);
  const int64_t n = allow.numel();
  double* p = allow.data();
  for (int64_t i = 0; i < n; ++i) p[i] = p[i] == 1.0 ? 0.0 : -1e30;
  return allow;
}

namespace {

// Shift by the minimum over permitted entries only; structurally absent
// pairs do not move the shift. Gradient flows through the winning entry,
// exactly like the unrestricted shift.
Tensor allowed_positive_shift(const Tensor& a, const Tensor& allow) {
  std::vector<double> penalty(static_cast<size_t>(allow.numel()));
  for (int64_t i = 0; i < allow.numel(); ++i)
    penalty[static_cast<size_t>(i)] = allow.data()[i] == 0.0 ? 1e30 : 0.0;
  Tensor masked = add(mul(a, allow), Tensor::from_vector(allow.shape(), std::move(penalty)));
  return sub(a, min_all(masked));
}

Tensor one_head_full(const Tensor& x_b, const CrabHeadParams& hp,
                     const CrabLayerParams& params, AttentionMode mode,
                     const Tensor* allow, const Tensor* softmax_bias,
                     ForwardCtx& ctx, AttentionTrace::Head* tr) {
  Tensor q = matmul(x_b, hp.w_q);
  Tensor k = matmul(x_b, hp.w_k);
  Tensor v = matmul(x_b, hp.w_v);
  Tensor a = scores(q, k, mode_scales_scores(mode));
  if (tr) tr->scores = a.detached();

  Tensor w;
  if (mode_uses_softmax(mode)) {
    Tensor pre = a;
    if (mode == AttentionMode::kSoftmaxMasked) {
      pre = positive_shift(pre);
      if (tr) tr->shifted = pre.detached();
      pre = apply_mask(pre, hp.mask);
      if (tr) tr->masked = pre.detached();
    }
    if (softmax_bias) pre = add(pre, *softmax_bias);
    w = softmax_rows(pre);
  } else {
    Tensor shifted = allow ? allowed_positive_shift(a, *allow) : positive_shift(a);
    if (tr) tr->shifted = shifted.detached();
    Tensor pre = mode_uses_mask(mode) ? apply_mask(shifted, hp.mask) : shifted;
    if (tr) tr->masked = pre.detached();
    w = allow ? restricted_absact(pre, *allow) : absact(pre, true);
    if (mode_clips_weights(mode)) w = relu(w);
  }
  if (tr) tr->weights = w.detached();
  if (ctx.training && ctx.attn_dropout > 0.0) {
    if (!ctx.rng) throw NumericError("attention dropout needs an rng in training mode");
    w = dropout(w, ctx.attn_dropout, true, *ctx.rng);
  }
  (void)params;
  return matmul(w, v);
}

Tensor one_head_decop(const Tensor& x_b, const CrabHeadParams& hp, ForwardCtx& ctx,
                      AttentionTrace::Head* tr) {
  if (!hp.compressor.defined() || !hp.value_map.defined())
    throw ConfigError("compressed attention parameters are absent for this layer");
  Tensor q = matmul(x_b, hp.w_q);
  Tensor k = matmul(x_b, hp.w_k);
  Tensor xv = matmul(x_b, hp.w_v);
  // S = K^T C first: the N x N score matrix is never materialized.
  Tensor s = matmul(transpose(k), hp.compressor);  // d_head x k
  Tensor a_c = matmul(q, s);                       // N x k
  if (tr) tr->scores = a_c.detached();
  Tensor w = absact(a_c, true);
  if (tr) tr->weights = w.detached();
  if (ctx.training && ctx.attn_dropout > 0.0) {
    if (!ctx.rng) throw NumericError("attention dropout needs an rng in training mode");
    w = dropout(w, ctx.attn_dropout, true, *ctx.rng);
  }
  Tensor v = matmul(hp.value_map, xv);  // k x d_head
  return matmul(w, v);
}

}  // namespace

Tensor attention_block(const Tensor& tokens, int64_t batch,
                       const CrabLayerParams& params, AttentionMode mode,
                       const TokenLayout& layout, ForwardCtx& ctx) {
  const int64_t n = layout.n();
  if (tokens.rank() != 2 || tokens.dim(0) != batch * n || tokens.dim(1) != params.d_model)
    throw ShapeError("attention_block: tokens " + shape_str(tokens.shape()) +
                     " do not match batch " + std::to_string(batch) + " x N " +
                     std::to_string(n) + " x d_model " + std::to_string(params.d_model));
  if (mode_uses_mask(mode)) {
    for (const auto& hp : params.heads) {
      if (!hp.mask.defined())
        throw ConfigError("mode " + to_string(mode) + " needs mask parameters");
      if (hp.mask.dim(0) != n)
        throw ShapeError("mask is " + shape_str(hp.mask.shape()) + " but N is " +
                         std::to_string(n));
    }
  }
  const auto restr = mode_restriction(mode);
  Tensor allow, softmax_bias;
  if (restr) {
    if (mode_uses_softmax(mode))
      softmax_bias = restrict_softmax_bias(layout, *restr);
    else
      allow = restrict_block_allow(layout, *restr);
  }
  if (ctx.trace) ctx.trace->heads.resize(static_cast<size_t>(params.n_heads));

  std::vector<Tensor> head_outputs;
  for (int64_t h = 0; h < params.n_heads; ++h) {
    const auto& hp = params.heads[static_cast<size_t>(h)];
    std::vector<Tensor> per_sample;
    for (int64_t b = 0; b < batch; ++b) {
      Tensor x_b = slice_rows(tokens, b * n, n);
      AttentionTrace::Head* tr =
          (ctx.trace && b == 0) ? &ctx.trace->heads[static_cast<size_t>(h)] : nullptr;
      Tensor o = mode_is_decop(mode)
                     ? one_head_decop(x_b, hp, ctx, tr)
                     : one_head_full(x_b, hp, params, mode,
                                     allow.defined() ? &allow : nullptr,
                                     softmax_bias.defined() ? &softmax_bias : nullptr,
                                     ctx, tr);
      per_sample.push_back(std::move(o));
    }
    head_outputs.push_back(batch == 1 ? per_sample[0] : concat_rows(per_sample));
  }
  Tensor merged =
      params.n_heads == 1 ? head_outputs[0] : concat_cols(head_outputs);
  return matmul(merged, params.w_out);
}

Tensor crab_attention(const Tensor& tokens, const CrabLayerParams& params,
                      AttentionMode mode, const TokenLayout& layout, ForwardCtx& ctx) {
  return attention_block(tokens, 1, params, mode, layout, ctx);
}

Tensor decop_attention(const Tensor& tokens, const CrabLayerParams& params,
                       const TokenLayout& layout, ForwardCtx& ctx) {
  return attention_block(tokens, 1, params, AttentionMode::kCrabDecop, layout, ctx);
}

Tensor encoder_layer(const Tensor& tokens, int64_t batch,
                     const CrabLayerParams& params, AttentionMode mode,
                     const TokenLayout& layout, ForwardCtx& ctx) {
  auto drop = [&ctx](Tensor t) {
    if (ctx.training && ctx.dropout > 0.0) {
      if (!ctx.rng) throw NumericError("dropout needs an rng in training mode");
      return dropout(t, ctx.dropout, true, *ctx.rng);
    }
    return t;
  };
  Tensor attn = drop(attention_block(tokens, batch, params, mode, layout, ctx));
  Tensor y = layernorm(add(tokens, attn), params.ln1_gain, params.ln1_bias);
  Tensor h = gelu(add_bias(matmul(y, params.ffn_w1), params.ffn_b1));
  h = drop(h);
  h = add_bias(matmul(h, params.ffn_w2), params.ffn_b2);
  h = drop(h);
  return layernorm(add(y, h), params.ln2_gain, params.ln2_bias);
}

}  // namespace crosstime
