#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "crosstime/tensor.hpp"

namespace crosstime {

/// Attention variants. kCrabDecop never applies the element-wise mask: the
/// compressed scores lose the pairwise structure the mask indexes.
enum class AttentionMode {
  kCrab,
  kCrabDecop,
  kCrabNoMask,
  kSoftmaxMasked,
  kVanilla,
  kSequenceOnly,
  kChannelOnly,
  kAbsactClipped,
};

std::string to_string(AttentionMode mode);
AttentionMode attention_mode_from_string(const std::string& s);

enum class Restriction { kSequenceOnly, kChannelOnly };

bool mode_uses_mask(AttentionMode mode);
bool mode_uses_softmax(AttentionMode mode);
/// Softmax modes keep the 1/sqrt(d_head) score scaling; the absolute-sum
/// normalization is scale-invariant, so its modes drop it.
bool mode_scales_scores(AttentionMode mode);
bool mode_is_decop(AttentionMode mode);
bool mode_clips_weights(AttentionMode mode);
std::optional<Restriction> mode_restriction(AttentionMode mode);

/// Numerical stabilizers of the absolute-sum normalization.
inline constexpr double kAbsActEps = 1e-4;
inline constexpr double kAbsActDelta = 1e-8;

/// Token grid of one sample: N = patches * channels, token (p, c) at
/// flat index p * channels + c.
struct TokenLayout {
  int64_t patches = 0;
  int64_t channels = 0;
  int64_t n() const { return patches * channels; }
};

struct CrabHeadParams {
  Tensor w_q, w_k, w_v;  // d_model x d_head
  Tensor mask;           // N x N, modes with a mask
  Tensor compressor;     // N x k, compressed mode
  Tensor value_map;      // k x N, compressed mode
};

struct CrabLayerParams {
  int64_t d_model = 0, n_heads = 0, d_head = 0, d_ff = 0, k = 0;
  std::vector<CrabHeadParams> heads;
  Tensor w_out;  // (n_heads * d_head) x d_model
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

/// Masks start zero-mean with std sqrt(2/N); the compressor and compressed
/// value map are He-initialized over their fan-in N.
CrabLayerParams make_crab_layer(const TokenLayout& layout, int64_t d_model,
                                int64_t n_heads, int64_t d_ff, AttentionMode mode,
                                int64_t k, Rng& rng);

/// Optional capture of the per-head attention pipeline (sample 0 of a batch),
/// detached from gradients. Compressed mode fills scores/weights only, with
/// N x k shapes.
struct AttentionTrace {
  struct Head {
    Tensor scores;   // raw A
    Tensor shifted;  // A+
    Tensor masked;   // M o A+
    Tensor weights;  // activated W
  };
  std::vector<Head> heads;
};

struct ForwardCtx {
  bool training = false;
  Rng* rng = nullptr;  // required when training with nonzero dropout
  double dropout = 0.0;
  double attn_dropout = 0.0;
  AttentionTrace* trace = nullptr;
  int64_t trace_layer = 0;  // encoder layer the model routes the trace to
};

// ---- pipeline stages --------------------------------------------------------

/// A = Q K^T, divided by sqrt(d_head) only when scale is set.
Tensor scores(const Tensor& q, const Tensor& k, bool scale);

/// A+ = A - min(A) over the whole matrix; the subtracted minimum carries its
/// subgradient so analytic and numerical gradients agree end to end.
/// Preserves pairwise differences and row rankings.
Tensor positive_shift(const Tensor& a);

/// Element-wise M o A+; the mask sets signs and reweighs magnitudes.
Tensor apply_mask(const Tensor& a_pos, const Tensor& m);

/// Row-wise signed normalization. Stabilized:
///   W[i,j] = (A[i,j] + eps) / (sum_k |A[i,k] + eps| + delta).
/// Pure drops eps and delta (invariance analysis only) and rejects rows whose
/// absolute sum is zero. Accepts N x m with m == N or the compressed width.
Tensor absact(const Tensor& a, bool stabilized = true);

/// Stabilized absact followed by a ReLU that clips negatives to zero.
Tensor absact_clipped(const Tensor& a);

/// 0/1 matrix of permitted token pairs: sequence-only keeps same-channel
/// pairs, channel-only keeps same-patch pairs.
Tensor restrict_block_allow(const TokenLayout& layout, Restriction r);

/// Stabilized absact with excluded entries structurally absent: they appear
/// in neither the numerator nor the row's absolute sum, so no stabilizer mass
/// leaks into forbidden positions.
Tensor restricted_absact(const Tensor& a, const Tensor& allow);

/// -inf-style additive mask for the softmax path.
Tensor restrict_softmax_bias(const TokenLayout& layout, Restriction r);

// ---- blocks -----------------------------------------------------------------

/// Full attention sub-block over a (batch * N) x d_model token matrix.
/// Per head: scores -> shift -> mask -> normalization -> attention dropout ->
/// weighted values; heads concatenated and output-projected. Softmax and
/// restricted variants follow their mode.
Tensor attention_block(const Tensor& tokens, int64_t batch,
                       const CrabLayerParams& params, AttentionMode mode,
                       const TokenLayout& layout, ForwardCtx& ctx);

/// Single-sample convenience: tokens is N x d_model.
Tensor crab_attention(const Tensor& tokens, const CrabLayerParams& params,
                      AttentionMode mode, const TokenLayout& layout, ForwardCtx& ctx);

/// Compressed attention: A_c = Q (K^T C) is formed without materializing the
/// N x N matrix, the value path is V = value_map * (X w_v), and no element
/// -wise mask participates.
Tensor decop_attention(const Tensor& tokens, const CrabLayerParams& params,
                       const TokenLayout& layout, ForwardCtx& ctx);

/// Post-norm encoder layer: x + attention sublayer, layernorm, + GELU
/// feed-forward sublayer, layernorm.
Tensor encoder_layer(const Tensor& tokens, int64_t batch,
                     const CrabLayerParams& params, AttentionMode mode,
                     const TokenLayout& layout, ForwardCtx& ctx);

}  // namespace crosstime
