#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "fsts/tensor.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace fsts;
using testutil::fd_partial;
using testutil::rel_err;

TEST_CASE("matmul basic products") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor col({2, 1}, {3, 4});
  Tensor r = matmul(eye, col);
  CHECK(r.values() == std::vector<double>{3, 4});

  Tensor row({1, 2}, {1, 2});
  CHECK(matmul(row, col).item() == 11.0);

  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL("expected throw");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4, 5]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient equals ones times b-transpose") {
  std::mt19937_64 rng(11);
  Tensor a = Tensor::uniform({3, 4}, -2, 2, rng, true);
  Tensor b = Tensor::uniform({4, 2}, -2, 2, rng);
  {
    GradientTape tape;
    tape.backward(sum_all(matmul(a, b)));
  }
  // d/da sum(a.b) = ones(3,2) . b^T
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) {
      double expect = 0.0;
      for (std::size_t j = 0; j < 2; ++j) expect += b.values()[k * 2 + j];
      CHECK(std::abs(a.grad()[i * 4 + k] - expect) < 1e-10);
    }
  // and against central differences
  auto loss = [&]() { return sum_all(matmul(a, b)).item(); };
  for (std::size_t idx : {0u, 5u, 11u}) {
    CHECK(rel_err(a.grad()[idx], fd_partial(a, idx, loss)) < 1e-7);
  }
}

TEST_CASE("matmul matches loop oracle on batched shapes") {
  std::mt19937_64 rng(12);
  Tensor a = Tensor::uniform({3, 5}, -2, 2, rng);
  Tensor b = Tensor::uniform({5, 4}, -2, 2, rng);
  const auto expect = oracle::matmul2d(a.values(), 3, 5, b.values(), 4);
  CHECK(testutil::max_abs_diff(matmul(a, b).values(), expect) < 1e-12);

  Tensor ab = Tensor::uniform({2, 3, 5}, -2, 2, rng);
  Tensor r = matmul(ab, b);
  REQUIRE(r.shape() == Shape{2, 3, 4});
  for (std::size_t i = 0; i < 2; ++i) {
    std::vector<double> slice(ab.values().begin() + i * 15,
                              ab.values().begin() + (i + 1) * 15);
    const auto e = oracle::matmul2d(slice, 3, 5, b.values(), 4);
    std::vector<double> got(r.values().begin() + i * 12,
                            r.values().begin() + (i + 1) * 12);
    CHECK(testutil::max_abs_diff(got, e) < 1e-12);
  }
}

TEST_CASE("contract_nodes spec examples") {
  // Uniform half-weights over two nodes average their values: (1+3)/2.
  Tensor g({2, 1}, {0.5, 0.5});
  Tensor x({1, 2, 1, 1}, {1, 3});
  CHECK(contract_nodes(g, x).item() == 2.0);

  // One-hot column selects node 1.
  Tensor sel({3, 1}, {0, 1, 0});
  Tensor x3({1, 3, 2, 1}, {10, 11, 20, 21, 30, 31});
  Tensor out = contract_nodes(sel, x3);
  CHECK(out.values() == std::vector<double>{20, 21});

  CHECK_THROWS_AS(contract_nodes(Tensor::zeros({4, 2}), Tensor::zeros({1, 3, 2, 1})),
                  ShapeError);
}

TEST_CASE("contract_nodes matches the dense loop oracle") {
  std::mt19937_64 rng(13);
  const std::size_t B = 2, N = 6, T = 3, C = 4, n = 3;
  Tensor x = Tensor::uniform({B, N, T, C}, -2, 2, rng);
  SUBCASE("shared graph") {
    Tensor g = Tensor::uniform({N, n}, -2, 2, rng);
    const auto expect = oracle::contract(g.values(), false, x.values(), B, N, T, C, n);
    CHECK(testutil::max_abs_diff(contract_nodes(g, x).values(), expect) < 1e-12);
  }
  SUBCASE("per-channel graph") {
    Tensor g = Tensor::uniform({C, N, n}, -2, 2, rng);
    const auto expect = oracle::contract(g.values(), true, x.values(), B, N, T, C, n);
    CHECK(testutil::max_abs_diff(contract_nodes(g, x).values(), expect) < 1e-12);
  }
}

TEST_CASE("contract_nodes oracle equivalence across the shape envelope") {
  // random shapes with N <= 16, n <= 8, B,T,C <= 4, both graph layouts
  std::mt19937_64 rng(131);
  std::uniform_int_distribution<std::size_t> nd(1, 16), kd(1, 8), sd(1, 4);
  for (int rep = 0; rep < 40; ++rep) {
    const std::size_t N = nd(rng), n = kd(rng), B = sd(rng), T = sd(rng),
                      C = sd(rng);
    const bool per_channel = rep % 2 == 0;
    Tensor x = Tensor::uniform({B, N, T, C}, -2, 2, rng);
    Tensor g = per_channel ? Tensor::uniform({C, N, n}, -2, 2, rng)
                           : Tensor::uniform({N, n}, -2, 2, rng);
    const auto expect =
        oracle::contract(g.values(), per_channel, x.values(), B, N, T, C, n);
    CHECK(testutil::max_abs_diff(contract_nodes(g, x).values(), expect) < 1e-12);
  }
}

TEST_CASE("softmax_columns spec examples") {
  Tensor z = Tensor::zeros({4, 1});
  Tensor sz = softmax_columns(z);
  for (double v : sz.values()) CHECK(v == doctest::Approx(0.25));

  Tensor z2({2, 1}, {std::log(1.0), std::log(3.0)});
  Tensor s2 = softmax_columns(z2);
  CHECK(s2.values()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(s2.values()[1] == doctest::Approx(0.75).epsilon(1e-12));

  Tensor big({2, 1}, {1000.0, 1000.0});
  Tensor sb = softmax_columns(big);
  CHECK(sb.values()[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("softmax_columns columns always sum to one") {
  std::mt19937_64 rng(14);
  for (int rep = 0; rep < 20; ++rep) {
    std::uniform_int_distribution<std::size_t> dim(1, 7);
    const std::size_t R = dim(rng), C = dim(rng);
    Tensor z = Tensor::uniform({2, R, C}, -50, 50, rng);
    Tensor s = softmax_columns(z);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        double sum = 0.0;
        for (std::size_t r = 0; r < R; ++r) sum += s.values()[(b * R + r) * C + c];
        CHECK(std::abs(sum - 1.0) < 1e-9);
      }
  }
}

TEST_CASE("layernorm spec examples and gradient") {
  Tensor ones3({3}, {1, 1, 1});
  Tensor gain({3}, {1, 1, 1});
  Tensor bias = Tensor::zeros({3});
  Tensor ln = layernorm(ones3, gain, bias);
  for (double v : ln.values()) CHECK(std::abs(v) < 1e-12);

  Tensor x2({2}, {1, 3});
  Tensor g2({2}, {1, 1});
  Tensor b2 = Tensor::zeros({2});
  Tensor out = layernorm(x2, g2, b2);
  CHECK(out.values()[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(out.values()[1] == doctest::Approx(1.0).epsilon(1e-4));

  std::mt19937_64 rng(15);
  Tensor x = Tensor::uniform({2, 3, 4}, -2, 2, rng, true);
  Tensor gg = Tensor::uniform({4}, 0.5, 1.5, rng, true);
  Tensor bb = Tensor::uniform({4}, -1, 1, rng, true);
  Tensor w = Tensor::uniform({2, 3, 4}, -1, 1, rng);
  auto scalar = [&]() { return sum_all(hadamard(layernorm(x, gg, bb), w)).item(); };
  {
    GradientTape tape;
    tape.backward(sum_all(hadamard(layernorm(x, gg, bb), w)));
  }
  for (std::size_t idx : {0u, 7u, 23u}) {
    CHECK(rel_err(x.grad()[idx], fd_partial(x, idx, scalar)) < 1e-6);
  }
  for (std::size_t idx : {0u, 3u}) {
    CHECK(rel_err(gg.grad()[idx], fd_partial(gg, idx, scalar)) < 1e-6);
    CHECK(rel_err(bb.grad()[idx], fd_partial(bb, idx, scalar)) < 1e-6);
  }
}

TEST_CASE("elementwise and shaping ops") {
  Tensor x({2}, {-1, 2});
  CHECK(relu(x).values() == std::vector<double>{0, 2});

  std::mt19937_64 rng(16);
  Tensor t = Tensor::uniform({3, 4, 5}, -2, 2, rng);
  Tensor back = reshape(reshape(t, {60}), {3, 4, 5});
  CHECK(back.values() == t.values());

  // transpose and reshape preserve the multiset of values
  Tensor p = transpose_axes(t, {2, 0, 1});
  auto sorted_vals = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  CHECK(sorted_vals(p.values()) == sorted_vals(t.values()));
  // and transposing back is the identity
  Tensor p2 = transpose_axes(p, {1, 2, 0});
  CHECK(p2.values() == t.values());

  Tensor table = Tensor::uniform({7, 2}, -2, 2, rng);
  IntTensor idx({1}, {3});
  Tensor row = embedding_lookup(table, idx);
  CHECK(row.values()[0] == table.values()[6]);
  CHECK(row.values()[1] == table.values()[7]);
  CHECK_THROWS_AS(embedding_lookup(table, IntTensor({1}, {7})), IndexError);
  CHECK_THROWS_AS(embedding_lookup(table, IntTensor({1}, {-1})), IndexError);
}

TEST_CASE("backward populates leaf gradients and clears the tape") {
  Tensor w({3}, {1, 2, 3}, true);
  Tensor x({3}, {2, 5, 7});
  {
    GradientTape tape;
    Tensor loss = sum_all(hadamard(w, x));
    tape.backward(loss);
    CHECK(w.grad() == std::vector<double>{2, 5, 7});
    CHECK_THROWS_AS(tape.backward(loss), Error);  // tape already consumed
  }
  w.clear_grad();

  // composite: softmax + matmul vs finite differences
  std::mt19937_64 rng(17);
  Tensor a = Tensor::uniform({4, 3}, -2, 2, rng, true);
  Tensor b = Tensor::uniform({3, 2}, -2, 2, rng, true);
  auto scalar = [&]() { return sum_all(matmul(softmax_columns(a), b)).item(); };
  {
    GradientTape tape;
    tape.backward(sum_all(matmul(softmax_columns(a), b)));
  }
  for (std::size_t idx = 0; idx < a.numel(); ++idx) {
    CHECK(rel_err(a.grad()[idx], fd_partial(a, idx, scalar)) < 1e-4);
  }
  for (std::size_t idx = 0; idx < b.numel(); ++idx) {
    CHECK(rel_err(b.grad()[idx], fd_partial(b, idx, scalar)) < 1e-4);
  }

  CHECK_THROWS_AS(
      []() {
        GradientTape tape;
        Tensor t({2}, {1, 2}, true);
        Tensor nonscalar = relu(t);
        tape.backward(nonscalar);
      }(),
      Error);
}

TEST_CASE("ops refuse to emit non-finite values") {
  Tensor huge = Tensor::full({2}, 1e308);
  CHECK_THROWS_AS(hadamard(huge, huge), NumericError);
  Tensor big = Tensor::full({1, 3}, 1e200);
  CHECK_THROWS_AS(matmul(big, reshape(big, {3, 1})), NumericError);
}

TEST_CASE("broadcast add/hadamard against manual expansion") {
  std::mt19937_64 rng(18);
  Tensor a = Tensor::uniform({2, 3, 4}, -2, 2, rng);
  Tensor b = Tensor::uniform({3, 1}, -2, 2, rng);
  Tensor s = add(a, b);
  Tensor h = hadamard(a, b);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) {
        const double av = a.values()[(i * 3 + j) * 4 + k];
        const double bv = b.values()[j];
        CHECK(s.values()[(i * 3 + j) * 4 + k] == doctest::Approx(av + bv));
        CHECK(h.values()[(i * 3 + j) * 4 + k] == doctest::Approx(av * bv));
      }
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({4})), ShapeError);
}
