#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "crosstime/attention.hpp"
#include "support/grad_check.hpp"

using namespace crosstime;
using crosstime::testing::max_relative_grad_error;
using crosstime::testing::uniform_tensor;

namespace {

Tensor identity(int64_t n) {
  Tensor t = Tensor::zeros({n, n});
  for (int64_t i = 0; i < n; ++i) t.data()[i * n + i] = 1.0;
  return t;
}

double frobenius(const Tensor& t) {
  double s = 0.0;
  for (int64_t i = 0; i < t.numel(); ++i) s += t.data()[i] * t.data()[i];
  return std::sqrt(s);
}

std::vector<int64_t> argsort_row(const Tensor& a, int64_t row) {
  std::vector<int64_t> idx(static_cast<size_t>(a.dim(1)));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int64_t x, int64_t y) {
    return a.at(row, x) < a.at(row, y);
  });
  return idx;
}

}  // namespace

TEST_CASE("scores") {
  Tensor q = identity(2);
  Tensor a = scores(q, q, false);
  CHECK(a.values() == identity(2).values());

  Rng rng(1);
  Tensor q4 = uniform_tensor({3, 4}, rng);
  Tensor k4 = uniform_tensor({3, 4}, rng);
  Tensor unscaled = scores(q4, k4, false);
  Tensor scaled = scores(q4, k4, true);
  for (int64_t i = 0; i < unscaled.numel(); ++i)
    CHECK(scaled.data()[i] == doctest::Approx(unscaled.data()[i] / 2.0).epsilon(1e-12));

  CHECK_THROWS_AS(scores(uniform_tensor({3, 4}, rng), uniform_tensor({3, 5}, rng), false),
                  ShapeError);
}

TEST_CASE("pure normalization ignores score scaling") {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor q = uniform_tensor({6, 4}, rng);
    Tensor k = uniform_tensor({6, 4}, rng);
    Tensor w_scaled = absact(scores(q, k, true), false);
    Tensor w_unscaled = absact(scores(q, k, false), false);
    for (int64_t i = 0; i < w_scaled.numel(); ++i)
      CHECK(std::abs(w_scaled.data()[i] - w_unscaled.data()[i]) < 1e-12);
  }
}

TEST_CASE("positive shift") {
  Tensor a = Tensor::from_vector({2, 2}, {-1, 2, 0, 3});
  Tensor shifted = positive_shift(a);
  CHECK(shifted.values() == std::vector<double>{0, 3, 1, 4});

  Tensor flat = positive_shift(Tensor::full({3, 3}, 7.0));
  for (double v : flat.values()) CHECK(v == 0.0);

  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = uniform_tensor({5, 5}, rng, -3, 3);
    Tensor y = positive_shift(x);
    for (double v : y.values()) CHECK(v >= 0.0);
    for (int64_t r = 0; r < 5; ++r) CHECK(argsort_row(x, r) == argsort_row(y, r));
    // Pairwise differences preserved (up to one rounding of the shift).
    CHECK(std::abs((x.at(1, 2) - x.at(0, 4)) - (y.at(1, 2) - y.at(0, 4))) < 1e-12);
  }
}

TEST_CASE("apply_mask") {
  Rng rng(4);
  Tensor a = positive_shift(uniform_tensor({4, 4}, rng));
  CHECK(apply_mask(a, Tensor::full({4, 4}, 1.0)).values() == a.values());

  Tensor strict = add(a, 0.5);  // strictly positive
  Tensor neg = apply_mask(strict, Tensor::full({4, 4}, -1.0));
  for (int64_t i = 0; i < neg.numel(); ++i) CHECK(neg.data()[i] < 0.0);

  // A zero mask row yields a stabilizer-driven uniform attention row.
  Tensor m = Tensor::full({4, 4}, 1.0);
  for (int64_t j = 0; j < 4; ++j) m.data()[2 * 4 + j] = 0.0;
  Tensor w = absact(apply_mask(strict, m), true);
  const double uniform_w = kAbsActEps / (4 * kAbsActEps + kAbsActDelta);
  for (int64_t j = 0; j < 4; ++j)
    CHECK(w.at(2, j) == doctest::Approx(uniform_w).epsilon(1e-12));

  CHECK_THROWS_AS(apply_mask(a, Tensor::full({3, 3}, 1.0)), ShapeError);
}

TEST_CASE("absact hand values") {
  Tensor w1 = absact(Tensor::from_vector({1, 2}, {1, 1}), false);
  CHECK(w1.values() == std::vector<double>{0.5, 0.5});

  Tensor w2 = absact(Tensor::from_vector({1, 2}, {2, -1}), false);
  CHECK(w2.at(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(w2.at(0, 1) == doctest::Approx(-1.0 / 3.0).epsilon(1e-15));

  CHECK_THROWS_AS(absact(Tensor::zeros({2, 2}), false), NumericError);
}

TEST_CASE("absact Frobenius bound across sizes") {
  Rng rng(5);
  for (int64_t n : {2, 4, 8, 16, 32, 64}) {
    for (int trial = 0; trial < 40; ++trial) {
      Tensor a = uniform_tensor({n, n}, rng, -3, 3);
      CHECK(frobenius(absact(a, true)) <= std::sqrt(static_cast<double>(n)));
      CHECK(frobenius(absact(a, false)) <= std::sqrt(static_cast<double>(n)));
    }
  }
}

TEST_CASE("pure absact row contract") {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor a = uniform_tensor({8, 8}, rng, -2, 2);
    Tensor w = absact(a, false);
    for (int64_t i = 0; i < 8; ++i) {
      double s = 0.0;
      for (int64_t j = 0; j < 8; ++j) s += std::abs(w.at(i, j));
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("scale invariance") {
  Rng rng(7);
  for (double alpha : {0.5, 2.0, 10.0}) {
    for (int trial = 0; trial < 30; ++trial) {
      Tensor a = uniform_tensor({8, 8}, rng, -2, 2);
      Tensor w1 = absact(a, false);
      Tensor w2 = absact(mul(a, alpha), false);
      for (int64_t i = 0; i < w1.numel(); ++i)
        CHECK(std::abs(w1.data()[i] - w2.data()[i]) <= 1e-12);

      // Stabilized agreement for well-scaled scores.
      Tensor big = uniform_tensor({32, 32}, rng, -20, 20);
      Tensor s1 = absact(big, true);
      Tensor s2 = absact(mul(big, alpha), true);
      for (int64_t i = 0; i < s1.numel(); ++i)
        CHECK(std::abs(s1.data()[i] - s2.data()[i]) <= 1e-6);
    }
  }
}

TEST_CASE("mask sign control") {
  Rng rng(8);
  Tensor a = add(positive_shift(uniform_tensor({6, 6}, rng)), 1.0);  // strictly positive
  Tensor m = uniform_tensor({6, 6}, rng, -2, 2);
  // Keep |M o A+| well above the numerical stabilizer.
  for (int64_t i = 0; i < m.numel(); ++i)
    if (std::abs(m.data()[i]) < 0.1) m.data()[i] = 0.1;
  Tensor w = absact(apply_mask(a, m), true);
  for (int64_t i = 0; i < w.numel(); ++i) {
    CHECK((w.data()[i] > 0) == (m.data()[i] > 0));
  }
}

TEST_CASE("absact_clipped") {
  Tensor pure = absact(Tensor::from_vector({1, 2}, {2, -1}), false);
  Tensor clipped_pure = relu(pure);
  CHECK(clipped_pure.at(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(clipped_pure.at(0, 1) == 0.0);

  Rng rng(9);
  Tensor a = uniform_tensor({5, 5}, rng, 0.5, 2.0);  // nonnegative scores
  Tensor w = absact_clipped(a);
  CHECK(w.values() == absact(a, true).values());

  Tensor signed_in = uniform_tensor({5, 5}, rng, -2, 2);
  Tensor clipped = absact_clipped(signed_in);
  for (double v : clipped.values()) CHECK(v >= 0.0);
}

TEST_CASE("crab attention closed form on three orthonormal tokens") {
  TokenLayout layout{3, 1};
  CrabLayerParams p;
  p.d_model = 3;
  p.n_heads = 1;
  p.d_head = 3;
  p.heads.push_back(CrabHeadParams{identity(3), identity(3), identity(3),
                                   Tensor::full({3, 3}, 1.0), Tensor(), Tensor()});
  p.w_out = identity(3);
  ForwardCtx ctx;
  Tensor out = crab_attention(identity(3), p, AttentionMode::kCrab, layout, ctx);
  // Scores are I, the global minimum is 0, the mask is neutral; each row of
  // the activated weights is [(1+eps), eps, eps] / (1 + 3 eps + delta) in some
  // order, and values are the tokens themselves.
  const double denom = 1.0 + 3.0 * kAbsActEps + kAbsActDelta;
  for (int64_t i = 0; i < 3; ++i) {
    double abs_sum = 0.0;
    for (int64_t j = 0; j < 3; ++j) {
      const double expect = (i == j ? 1.0 + kAbsActEps : kAbsActEps) / denom;
      CHECK(out.at(i, j) == doctest::Approx(expect).epsilon(1e-12));
      abs_sum += std::abs(out.at(i, j));
    }
    CHECK(abs_sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("no-mask mode equals all-ones mask") {
  TokenLayout layout{4, 3};
  Rng rng(10);
  CrabLayerParams p = make_crab_layer(layout, 8, 2, 16, AttentionMode::kCrab, 0, rng);
  for (auto& h : p.heads)
    for (int64_t i = 0; i < h.mask.numel(); ++i) h.mask.data()[i] = 1.0;
  Tensor tokens = uniform_tensor({12, 8}, rng);
  ForwardCtx ctx;
  Tensor with_mask = crab_attention(tokens, p, AttentionMode::kCrab, layout, ctx);
  Tensor without = crab_attention(tokens, p, AttentionMode::kCrabNoMask, layout, ctx);
  for (int64_t i = 0; i < with_mask.numel(); ++i)
    CHECK(std::abs(with_mask.data()[i] - without.data()[i]) <= 1e-12);
}

TEST_CASE("mask gradient matches finite differences") {
  TokenLayout layout{2, 2};
  Rng rng(11);
  CrabLayerParams p = make_crab_layer(layout, 4, 1, 8, AttentionMode::kCrab, 0, rng);
  Tensor tokens = uniform_tensor({4, 4}, rng);
  auto forward = [&]() {
    ForwardCtx ctx;
    return sum(crab_attention(tokens, p, AttentionMode::kCrab, layout, ctx));
  };
  CHECK(max_relative_grad_error({p.heads[0].mask}, forward) < 1e-4);
}

TEST_CASE("compressed scores equal reassociated full scores") {
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor q = uniform_tensor({32, 16}, rng);
    Tensor k = uniform_tensor({32, 16}, rng);
    Tensor c = uniform_tensor({32, 8}, rng);
    Tensor lhs = matmul(q, matmul(transpose(k), c));
    Tensor rhs = matmul(matmul(q, transpose(k)), c);
    for (int64_t i = 0; i < lhs.numel(); ++i)
      CHECK(std::abs(lhs.data()[i] - rhs.data()[i]) <= 1e-10);
  }
}

TEST_CASE("compressed attention with identity compressor reduces to full scores") {
  const int64_t n = 4, d = 4;
  TokenLayout layout{2, 2};
  Rng rng(13);
  CrabLayerParams p = make_crab_layer(layout, d, 1, 8, AttentionMode::kCrabNoMask, 0, rng);
  p.k = n;
  p.heads[0].compressor = identity(n);
  p.heads[0].value_map = identity(n);
  p.w_out = identity(d);
  Tensor tokens = uniform_tensor({n, d}, rng);
  ForwardCtx ctx;
  Tensor compressed = decop_attention(tokens, p, layout, ctx);
  // Manual path: stabilized normalization applied to the raw scores (no
  // shift, no mask), then the standard value aggregation.
  Tensor q = matmul(tokens, p.heads[0].w_q);
  Tensor k = matmul(tokens, p.heads[0].w_k);
  Tensor v = matmul(tokens, p.heads[0].w_v);
  Tensor manual = matmul(absact(scores(q, k, false), true), v);
  for (int64_t i = 0; i < manual.numel(); ++i)
    CHECK(std::abs(compressed.data()[i] - manual.data()[i]) <= 1e-12);
}

TEST_CASE("compressed attention rejects missing compressor") {
  TokenLayout layout{2, 2};
  Rng rng(14);
  CrabLayerParams p = make_crab_layer(layout, 4, 1, 8, AttentionMode::kCrab, 0, rng);
  Tensor tokens = uniform_tensor({4, 4}, rng);
  ForwardCtx ctx;
  CHECK_THROWS_AS(decop_attention(tokens, p, layout, ctx), ConfigError);
  CHECK_THROWS_AS(make_crab_layer(layout, 4, 1, 8, AttentionMode::kCrabDecop, 4, rng),
                  ConfigError);  // k must stay below N
}

TEST_CASE("compressed mode never carries a mask") {
  TokenLayout layout{4, 3};
  Rng rng(15);
  CrabLayerParams p = make_crab_layer(layout, 8, 2, 16, AttentionMode::kCrabDecop, 3, rng);
  for (const auto& h : p.heads) {
    CHECK(!h.mask.defined());
    CHECK(h.compressor.defined());
    CHECK(h.value_map.defined());
  }
}

TEST_CASE("block restrictions") {
  TokenLayout layout{2, 2};
  Tensor seq = restrict_block_allow(layout, Restriction::kSequenceOnly);
  Tensor chan = restrict_block_allow(layout, Restriction::kChannelOnly);
  int64_t seq_kept = 0, chan_kept = 0, both = 0;
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 4; ++j) {
      seq_kept += seq.at(i, j) == 1.0;
      chan_kept += chan.at(i, j) == 1.0;
      if (seq.at(i, j) == 1.0 && chan.at(i, j) == 1.0) {
        ++both;
        CHECK(i == j);  // intersection is the diagonal
      }
    }
  CHECK(seq_kept == 8);
  CHECK(chan_kept == 8);
  CHECK(both == 4);
  // Same-channel pairs only.
  CHECK(seq.at(0, 2) == 1.0);  // (p0,c0) and (p1,c0)
  CHECK(seq.at(0, 1) == 0.0);  // (p0,c0) and (p0,c1)
  CHECK(chan.at(0, 1) == 1.0);
  CHECK(chan.at(0, 2) == 0.0);
}

TEST_CASE("restricted normalization leaks no stabilizer mass") {
  TokenLayout layout{2, 2};
  Rng rng(16);
  Tensor a = uniform_tensor({4, 4}, rng, -2, 2);
  Tensor allow = restrict_block_allow(layout, Restriction::kSequenceOnly);
  Tensor w = restricted_absact(a, allow);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 4; ++j) {
      if (allow.at(i, j) == 0.0) CHECK(w.at(i, j) == 0.0);
    }
  // Denominator counts permitted entries only.
  const double expect = (a.at(0, 0) + kAbsActEps) /
                        (std::abs(a.at(0, 0) + kAbsActEps) +
                         std::abs(a.at(0, 2) + kAbsActEps) + kAbsActDelta);
  CHECK(w.at(0, 0) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("softmax modes") {
  TokenLayout layout{4, 3};
  Rng rng(17);
  CrabLayerParams p = make_crab_layer(layout, 8, 2, 16, AttentionMode::kSoftmaxMasked, 0, rng);
  Tensor tokens = uniform_tensor({12, 8}, rng);

  AttentionTrace trace;
  ForwardCtx ctx;
  ctx.trace = &trace;
  crab_attention(tokens, p, AttentionMode::kSoftmaxMasked, layout, ctx);
  for (const auto& head : trace.heads) {
    for (int64_t i = 0; i < 12; ++i) {
      double s = 0.0;
      for (int64_t j = 0; j < 12; ++j) {
        CHECK(head.weights.at(i, j) >= 0.0);
        s += head.weights.at(i, j);
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }

  // Vanilla reproduces scaled scores + softmax with no shift or mask.
  AttentionTrace vtrace;
  ForwardCtx vctx;
  vctx.trace = &vtrace;
  crab_attention(tokens, p, AttentionMode::kVanilla, layout, vctx);
  Tensor q = matmul(tokens, p.heads[0].w_q);
  Tensor k = matmul(tokens, p.heads[0].w_k);
  Tensor manual = softmax_rows(scores(q, k, true));
  for (int64_t i = 0; i < manual.numel(); ++i)
    CHECK(vtrace.heads[0].weights.data()[i] == doctest::Approx(manual.data()[i]).epsilon(1e-12));
  CHECK(!vtrace.heads[0].masked.defined());
}

TEST_CASE("clipped mode output is the clipped weights") {
  TokenLayout layout{2, 3};
  Rng rng(18);
  CrabLayerParams p = make_crab_layer(layout, 4, 1, 8, AttentionMode::kAbsactClipped, 0, rng);
  Tensor tokens = uniform_tensor({6, 4}, rng);
  AttentionTrace trace;
  ForwardCtx ctx;
  ctx.trace = &trace;
  crab_attention(tokens, p, AttentionMode::kAbsactClipped, layout, ctx);
  const Tensor& w = trace.heads[0].weights;
  const Tensor& masked = trace.heads[0].masked;
  Tensor expect = relu(absact(masked, true));
  for (int64_t i = 0; i < w.numel(); ++i) {
    CHECK(w.data()[i] >= 0.0);
    CHECK(w.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("mask initialization statistics") {
  TokenLayout layout{12, 7};  // N = 84
  Rng rng(19);
  CrabLayerParams p = make_crab_layer(layout, 8, 1, 16, AttentionMode::kCrab, 0, rng);
  const Tensor& m = p.heads[0].mask;
  const double n = static_cast<double>(m.numel());
  double mean = 0.0;
  for (int64_t i = 0; i < m.numel(); ++i) mean += m.data()[i];
  mean /= n;
  double var = 0.0;
  for (int64_t i = 0; i < m.numel(); ++i) var += (m.data()[i] - mean) * (m.data()[i] - mean);
  var /= n;
  const double sigma = std::sqrt(2.0 / 84.0);
  CHECK(std::abs(mean) <= 3.0 * sigma / std::sqrt(n));
  CHECK(std::abs(std::sqrt(var) - sigma) <= 0.05 * sigma);
  // Roughly half the entries start negative.
  int64_t neg = 0;
  for (int64_t i = 0; i < m.numel(); ++i) neg += m.data()[i] < 0.0;
  CHECK(std::abs(static_cast<double>(neg) / n - 0.5) < 0.05);
}

TEST_CASE("encoder layer") {
  TokenLayout layout{4, 3};
  Rng rng(20);
  Tensor tokens = uniform_tensor({12, 8}, rng);

  SUBCASE("zero sublayers reduce to stacked layernorms") {
    CrabLayerParams p = make_crab_layer(layout, 8, 2, 16, AttentionMode::kCrab, 0, rng);
    for (auto& h : p.heads) {
      h.w_q = Tensor::zeros({8, 4});
      h.w_k = Tensor::zeros({8, 4});
      h.w_v = Tensor::zeros({8, 4});
    }
    p.w_out = Tensor::zeros({8, 8});
    p.ffn_w1 = Tensor::zeros({8, 16});
    p.ffn_w2 = Tensor::zeros({16, 8});
    ForwardCtx ctx;
    Tensor out = encoder_layer(tokens, 1, p, AttentionMode::kCrab, layout, ctx);
    Tensor expect = layernorm(layernorm(tokens, p.ln1_gain, p.ln1_bias), p.ln2_gain, p.ln2_bias);
    for (int64_t i = 0; i < out.numel(); ++i)
      CHECK(out.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-12));
  }

  SUBCASE("shape contract holds for every mode") {
    for (AttentionMode mode :
         {AttentionMode::kCrab, AttentionMode::kCrabDecop, AttentionMode::kCrabNoMask,
          AttentionMode::kSoftmaxMasked, AttentionMode::kVanilla, AttentionMode::kSequenceOnly,
          AttentionMode::kChannelOnly, AttentionMode::kAbsactClipped}) {
      CrabLayerParams p = make_crab_layer(layout, 8, 2, 16, mode, 3, rng);
      ForwardCtx ctx;
      Tensor out = encoder_layer(tokens, 1, p, mode, layout, ctx);
      CHECK(out.shape() == tokens.shape());
    }
  }

  SUBCASE("two stacked layers pass a finite-difference check") {
    CrabLayerParams p1 = make_crab_layer(layout, 8, 2, 16, AttentionMode::kCrab, 0, rng);
    CrabLayerParams p2 = make_crab_layer(layout, 8, 2, 16, AttentionMode::kCrab, 0, rng);
    auto forward = [&]() {
      ForwardCtx ctx;
      Tensor h = encoder_layer(tokens, 1, p1, AttentionMode::kCrab, layout, ctx);
      h = encoder_layer(h, 1, p2, AttentionMode::kCrab, layout, ctx);
      return mean(mul(h, h));
    };
    std::vector<Tensor> watched = {p1.heads[0].mask, p1.heads[1].w_q, p1.ffn_w1,
                                   p2.heads[0].w_v, p2.ln2_gain, p2.w_out};
    CHECK(max_relative_grad_error(watched, forward) < 1e-3);
  }
}

TEST_CASE("batched attention equals per-sample attention") {
  TokenLayout layout{3, 2};
  Rng rng(21);
  CrabLayerParams p = make_crab_layer(layout, 6, 2, 12, AttentionMode::kCrab, 0, rng);
  Tensor sample0 = uniform_tensor({6, 6}, rng);
  Tensor sample1 = uniform_tensor({6, 6}, rng);
  std::vector<Tensor> parts{sample0, sample1};
  Tensor both = concat_rows(parts);
  ForwardCtx ctx;
  Tensor batched = attention_block(both, 2, p, AttentionMode::kCrab, layout, ctx);
  Tensor out0 = crab_attention(sample0, p, AttentionMode::kCrab, layout, ctx);
  Tensor out1 = crab_attention(sample1, p, AttentionMode::kCrab, layout, ctx);
  for (int64_t i = 0; i < 36; ++i) {
    CHECK(batched.data()[i] == doctest::Approx(out0.data()[i]).epsilon(1e-12));
    CHECK(batched.data()[36 + i] == doctest::Approx(out1.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("compressed attention Frobenius bound") {
  TokenLayout layout{4, 4};
  Rng rng(22);
  CrabLayerParams p = make_crab_layer(layout, 8, 1, 16, AttentionMode::kCrabDecop, 5, rng);
  Tensor tokens = uniform_tensor({16, 8}, rng);
  AttentionTrace trace;
  ForwardCtx ctx;
  ctx.trace = &trace;
  decop_attention(tokens, p, layout, ctx);
  CHECK(trace.heads[0].weights.shape() == Shape{16, 5});
  CHECK(frobenius(trace.heads[0].weights) <= std::sqrt(16.0));
}
