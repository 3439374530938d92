#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "crosstime/tensor.hpp"
#include "support/grad_check.hpp"

using namespace crosstime;
using crosstime::testing::max_relative_grad_error;
using crosstime::testing::uniform_tensor;

namespace {

Tensor t2(std::vector<double> v, int64_t r, int64_t c) {
  return Tensor::from_vector({r, c}, std::move(v));
}

}  // namespace

TEST_CASE("matmul basics") {
  Tensor a = t2({1, 2, 3, 4}, 2, 2);
  Tensor id = t2({1, 0, 0, 1}, 2, 2);
  Tensor r = matmul(a, id);
  CHECK(r.values() == std::vector<double>{1, 2, 3, 4});

  Tensor z = matmul(t2({1, 0, 0, 0}, 2, 2), t2({0, 0, 0, 0}, 2, 2));
  for (double v : z.values()) CHECK(v == 0.0);

  CHECK_THROWS_AS(matmul(t2({1, 2}, 1, 2), t2({1, 2}, 1, 2)), ShapeError);
}

TEST_CASE("matmul against element-loop oracle") {
  Rng rng(1);
  Tensor a = uniform_tensor({3, 4}, rng);
  Tensor b = uniform_tensor({4, 2}, rng);
  Tensor r = matmul(a, b);
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 2; ++j) {
      double acc = 0.0;
      for (int64_t k = 0; k < 4; ++k) acc += a.at(i, k) * b.at(k, j);
      CHECK(std::abs(r.at(i, j) - acc) < 1e-12);
    }
}

TEST_CASE("matmul associativity at 8x8") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = uniform_tensor({8, 8}, rng);
    Tensor b = uniform_tensor({8, 8}, rng);
    Tensor c = uniform_tensor({8, 8}, rng);
    Tensor lhs = matmul(matmul(a, b), c);
    Tensor rhs = matmul(a, matmul(b, c));
    double worst = 0.0;
    for (int64_t i = 0; i < 64; ++i)
      worst = std::max(worst, std::abs(lhs.data()[i] - rhs.data()[i]));
    CHECK(worst < 1e-9);
  }
}

TEST_CASE("elementwise examples") {
  Tensor r = abs(Tensor::from_vector({3}, {-1, 2, 0}));
  CHECK(r.values() == std::vector<double>{1, 2, 0});

  Rng rng(3);
  Tensor a = uniform_tensor({4, 3}, rng);
  Tensor ones = Tensor::full({4, 3}, 1.0);
  CHECK(mul(a, ones).values() == a.values());

  CHECK_THROWS_WITH_AS(div(Tensor::from_vector({2}, {1, 1}), Tensor::from_vector({2}, {2, 0})),
                       doctest::Contains("index 1"), NumericError);
}

TEST_CASE("gelu gradient at 0.5 matches central differences") {
  Tensor x = Tensor::scalar(0.5, true);
  {
    Tape tape;
    Tensor y = gelu(x);
    tape.backward(y);
  }
  const double h = 1e-6;
  auto f = [](double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); };
  const double fd = (f(0.5 + h) - f(0.5 - h)) / (2 * h);
  CHECK(std::abs((*x.grad())[0] - fd) < 1e-6);
}

TEST_CASE("reduce examples") {
  Tensor r = row_abs_sum(t2({1, -2, 0, 3}, 2, 2));
  CHECK(r.values() == std::vector<double>{3, 3});

  CHECK(min_all(t2({2, 5, -1, 0}, 2, 2)).item() == -1.0);
  CHECK(max_all(t2({2, 5, -1, 0}, 2, 2)).item() == 5.0);

  Rng rng(4);
  Tensor a = uniform_tensor({4, 3}, rng);
  Tensor s = sum(a, 0);
  for (int64_t j = 0; j < 3; ++j) {
    double acc = 0.0;
    for (int64_t i = 0; i < 4; ++i) acc += a.at(i, j);
    CHECK(std::abs(s.values()[static_cast<size_t>(j)] - acc) < 1e-12);
  }
  CHECK_THROWS_AS(sum(a, 2), ShapeError);
}

TEST_CASE("permute_reshape patch-major flatten") {
  // (B, C, P, D) = (1, 2, 3, 1), channel c value block {c0: 10,11,12, c1: 20,21,22}.
  Tensor x = Tensor::from_vector({1, 2, 3, 1}, {10, 11, 12, 20, 21, 22});
  Tensor flat = permute_reshape(x, {0, 2, 1, 3}, {1, 6, 1});
  // Patch-major: [c0p0, c1p0, c0p1, c1p1, c0p2, c1p2].
  CHECK(flat.values() == std::vector<double>{10, 20, 11, 21, 12, 22});

  Tensor same = permute_reshape(x, {0, 1, 2, 3}, x.shape());
  CHECK(same.values() == x.values());

  Tensor back = permute_reshape(reshape(flat, {1, 3, 2, 1}), {0, 2, 1, 3}, x.shape());
  CHECK(back.values() == x.values());  // inverse permutation is the identity, bit-for-bit

  CHECK_THROWS_AS(permute_reshape(x, {0, 1, 2, 3}, {1, 5, 1}), ShapeError);
}

TEST_CASE("softmax rows") {
  Tensor r = softmax_rows(t2({0, 0}, 1, 2));
  CHECK(r.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r.at(0, 1) == doctest::Approx(0.5).epsilon(1e-12));

  Tensor sat = softmax_rows(t2({1000, 0}, 1, 2));
  CHECK(sat.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::isfinite(sat.at(0, 1)));

  Rng rng(5);
  Tensor a = uniform_tensor({5, 5}, rng);
  Tensor w = softmax_rows(a);
  for (int64_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < 5; ++j) {
      CHECK(w.at(i, j) >= 0.0);
      s += w.at(i, j);
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }

  CHECK_THROWS_AS(softmax_rows(t2({std::nan(""), 0}, 1, 2)), NumericError);
}

TEST_CASE("layernorm") {
  Tensor gain = Tensor::full({3}, 1.0);
  Tensor bias = Tensor::zeros({3});
  Tensor c = layernorm(t2({4, 4, 4}, 1, 3), gain, bias);
  for (double v : c.values()) CHECK(std::abs(v) < 1e-9);

  Tensor y = layernorm(t2({1, 2, 3}, 1, 3), gain, bias, 1e-12);
  double m = 0.0, var = 0.0;
  for (double v : y.values()) m += v / 3.0;
  for (double v : y.values()) var += (v - m) * (v - m) / 3.0;
  CHECK(std::abs(m) < 1e-9);
  CHECK(std::abs(var - 1.0) < 1e-6);
}

TEST_CASE("backward basics") {
  Rng rng(6);
  Tensor a = uniform_tensor({3, 4}, rng, -2, 2, true);
  Tensor b = uniform_tensor({4, 2}, rng);
  {
    Tape tape;
    Tensor loss = sum(matmul(a, b));
    tape.backward(loss);
  }
  // d(sum(A B))/dA[i,k] = sum_j B[k,j]
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t k = 0; k < 4; ++k) {
      double expect = 0.0;
      for (int64_t j = 0; j < 2; ++j) expect += b.at(k, j);
      CHECK((*a.grad())[static_cast<size_t>(i * 4 + k)] == doctest::Approx(expect).epsilon(1e-12));
    }

  Tensor x = Tensor::from_vector({4}, {1, 2, 3, 4}, true);
  {
    Tape tape;
    tape.backward(sum(x));
  }
  CHECK(*x.grad() == std::vector<double>(4, 1.0));

  Tensor y = Tensor::from_vector({2}, {1, 2}, true);
  Tape tape;
  Tensor z = mul(y, 2.0);
  CHECK_THROWS_AS(tape.backward(z), ShapeError);  // loss not scalar
}

TEST_CASE("dropout") {
  Rng rng(7);
  Tensor a = uniform_tensor({100}, rng);
  Rng d1(8);
  CHECK(dropout(a, 0.0, true, d1).values() == a.values());
  CHECK(dropout(a, 0.9, false, d1).values() == a.values());
  CHECK_THROWS_AS(dropout(a, 1.0, true, d1), NumericError);

  Tensor big = Tensor::full({100000}, 1.0);
  Rng d2(9);
  Tensor out = dropout(big, 0.5, true, d2);
  int64_t survivors = 0;
  for (double v : out.values())
    if (v != 0.0) ++survivors;
  const double frac = static_cast<double>(survivors) / 1e5;
  CHECK(std::abs(frac - 0.5) < 0.01);
  for (double v : out.values()) CHECK((v == 0.0 || v == 2.0));
}

TEST_CASE("every differentiable op passes a finite-difference check") {
  Rng rng(10);
  auto weighted = [&rng](const Tensor& t) {
    // Fixed random positive weights turn any output into a scalar loss.
    Rng wr(99);
    Tensor w = uniform_tensor(t.shape(), wr, 0.1, 1.0);
    return sum(mul(t, w));
  };

  SUBCASE("binary and unary elementwise") {
    Tensor a = uniform_tensor({4, 3}, rng, -2, 2, true);
    Tensor b = uniform_tensor({4, 3}, rng, 0.5, 2.0, true);  // away from 0 for div
    for (int which = 0; which < 4; ++which) {
      auto fwd = [&]() {
        switch (which) {
          case 0: return weighted(add(a, b));
          case 1: return weighted(sub(a, b));
          case 2: return weighted(mul(a, b));
          default: return weighted(div(a, b));
        }
      };
      CHECK(max_relative_grad_error({a, b}, fwd) < 1e-4);
    }
    Tensor c = uniform_tensor({4, 3}, rng, 0.2, 2.0, true);  // relu/abs kink-free
    CHECK(max_relative_grad_error({c}, [&]() { return weighted(abs(c)); }) < 1e-4);
    CHECK(max_relative_grad_error({c}, [&]() { return weighted(relu(c)); }) < 1e-4);
    CHECK(max_relative_grad_error({c}, [&]() { return weighted(gelu(c)); }) < 1e-4);
  }

  SUBCASE("scalar broadcast") {
    Tensor a = uniform_tensor({3, 3}, rng, -2, 2, true);
    Tensor s = Tensor::scalar(1.5, true);
    CHECK(max_relative_grad_error({a, s}, [&]() { return weighted(mul(a, s)); }) < 1e-4);
    CHECK(max_relative_grad_error({a, s}, [&]() { return weighted(add(s, a)); }) < 1e-4);
  }

  SUBCASE("matmul and reductions") {
    Tensor a = uniform_tensor({3, 4}, rng, -2, 2, true);
    Tensor b = uniform_tensor({4, 2}, rng, -2, 2, true);
    CHECK(max_relative_grad_error({a, b}, [&]() { return weighted(matmul(a, b)); }) < 1e-4);
    CHECK(max_relative_grad_error({a}, [&]() { return weighted(sum(a, 1)); }) < 1e-4);
    CHECK(max_relative_grad_error({a}, [&]() { return weighted(mean(a, 0)); }) < 1e-4);
    CHECK(max_relative_grad_error({a}, [&]() { return mean(a); }) < 1e-4);
    Tensor c = uniform_tensor({3, 4}, rng, 0.3, 2.0, true);
    CHECK(max_relative_grad_error({c}, [&]() { return weighted(row_abs_sum(c)); }) < 1e-4);
  }

  SUBCASE("structure ops") {
    Tensor a = uniform_tensor({2, 3, 4}, rng, -2, 2, true);
    CHECK(max_relative_grad_error(
              {a}, [&]() { return weighted(permute_reshape(a, {2, 0, 1}, {4, 6})); }) < 1e-4);
    Tensor m = uniform_tensor({5, 3}, rng, -2, 2, true);
    CHECK(max_relative_grad_error(
              {m}, [&]() { return weighted(gather_rows(m, {4, 0, 0, 2})); }) < 1e-4);
    CHECK(max_relative_grad_error({m}, [&]() { return weighted(slice_rows(m, 1, 3)); }) < 1e-4);
    Tensor n = uniform_tensor({2, 3}, rng, -2, 2, true);
    CHECK(max_relative_grad_error({m, n}, [&]() {
            std::vector<Tensor> parts{m, n};
            return weighted(concat_rows(parts));
          }) < 1e-4);
    Tensor q = uniform_tensor({5, 2}, rng, -2, 2, true);
    CHECK(max_relative_grad_error({m, q}, [&]() {
            std::vector<Tensor> parts{m, q};
            return weighted(concat_cols(parts));
          }) < 1e-4);
  }

  SUBCASE("broadcast ops") {
    Tensor a = uniform_tensor({4, 3}, rng, -2, 2, true);
    Tensor bias = uniform_tensor({3}, rng, -2, 2, true);
    CHECK(max_relative_grad_error({a, bias}, [&]() { return weighted(add_bias(a, bias)); }) <
          1e-4);
    CHECK(max_relative_grad_error({a, bias},
                                  [&]() { return weighted(scale_columns(a, bias)); }) < 1e-4);
    Tensor s = uniform_tensor({4}, rng, 0.5, 2.0, true);
    CHECK(max_relative_grad_error({a, s}, [&]() { return weighted(row_div(a, s)); }) < 1e-4);
    Tensor t = uniform_tensor({4}, rng, -2, 2, true);
    CHECK(max_relative_grad_error({a, s, t},
                                  [&]() { return weighted(row_affine(a, s, t)); }) < 1e-4);
  }

  SUBCASE("fused ops") {
    Tensor a = uniform_tensor({4, 5}, rng, -2, 2, true);
    CHECK(max_relative_grad_error({a}, [&]() { return weighted(softmax_rows(a)); }) < 1e-4);
    Tensor gain = uniform_tensor({5}, rng, 0.5, 1.5, true);
    Tensor bias = uniform_tensor({5}, rng, -1, 1, true);
    CHECK(max_relative_grad_error({a, gain, bias}, [&]() {
            return weighted(layernorm(a, gain, bias));
          }) < 1e-5);
    CHECK(max_relative_grad_error({a}, [&]() {
            Rng dr(123);  // same mask on every evaluation
            return weighted(dropout(a, 0.3, true, dr));
          }) < 1e-4);
  }
}

TEST_CASE("tape populates every reachable gradient") {
  Rng rng(11);
  Tensor a = uniform_tensor({3, 3}, rng, -1, 1, true);
  Tensor b = uniform_tensor({3, 3}, rng, -1, 1, true);
  Tensor unused = uniform_tensor({2, 2}, rng, -1, 1, true);
  Tape tape;
  Tensor loss = sum(mul(matmul(a, b), 2.0));
  tape.backward(loss);
  CHECK(a.grad() != nullptr);
  CHECK(b.grad() != nullptr);
  CHECK(unused.grad() == nullptr);
  CHECK(tape.size() == 3);  // matmul, scalar mul, sum
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor::from_vector({2, 2}, {1, 2, 3}), ShapeError);
  Tensor s = Tensor::scalar(4.0);
  CHECK(s.item() == 4.0);
  CHECK_THROWS_AS(Tensor::from_vector({2}, {1, 2}).item(), ShapeError);
}
