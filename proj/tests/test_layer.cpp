#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fsts/layer.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace fsts;

namespace {

LayerParams tiny_layer(std::uint64_t seed, bool dynamic = true, bool ep = true,
                       bool per_dim = true) {
  LayerSettings ls;
  ls.num_nodes = 4;
  ls.t = 2;
  ls.h = 2;
  ls.d_e = 2;
  ls.l = 3;
  ls.d = 3;
  ls.use_dynamic = dynamic;
  ls.use_ep = ep;
  ls.per_dim_graphs = per_dim;
  std::mt19937_64 rng(seed);
  return LayerParams::init(ls, rng);
}

void fill(Tensor& t, double v) {
  std::fill(t.values().begin(), t.values().end(), v);
}

}  // namespace

TEST_CASE("static kernel part: zero projection weights give zero") {
  std::mt19937_64 rng(1);
  StsgKernelParams k = StsgKernelParams::init(2, 3, 4, 2, 5, true, true, rng);
  fill(k.ep_in_w, 0.0);
  fill(k.ep_in_b, 0.0);
  fill(k.ep_out_w, 0.0);
  fill(k.ep_out_b, 0.0);
  Tensor st = static_kernel_part(k);
  for (double v : st.values()) CHECK(v == 0.0);
}

TEST_CASE("static kernel part: identity EP maps pass nonnegative embeddings through") {
  // L == H so T*L == T*H and the identity is shape-legal.
  std::mt19937_64 rng(2);
  StsgKernelParams k = StsgKernelParams::init(2, 3, 3, 2, 5, true, true, rng);
  for (auto& v : k.static_embed.values()) v = std::abs(v);
  const std::size_t th = 6;
  fill(k.ep_in_w, 0.0);
  fill(k.ep_out_w, 0.0);
  for (std::size_t i = 0; i < th; ++i) {
    k.ep_in_w.values()[i * th + i] = 1.0;
    k.ep_out_w.values()[i * th + i] = 1.0;
  }
  fill(k.ep_in_b, 0.0);
  fill(k.ep_out_b, 0.0);
  Tensor out = static_kernel_part(k);
  CHECK(testutil::max_abs_diff(out.values(), k.static_embed.values()) == 0.0);
}

TEST_CASE("static kernel part gradient vs finite differences") {
  std::mt19937_64 rng(3);
  StsgKernelParams k = StsgKernelParams::init(2, 2, 3, 2, 4, true, true, rng);
  auto scalar = [&]() { return sum_all(static_kernel_part(k)).item(); };
  {
    GradientTape tape;
    tape.backward(sum_all(static_kernel_part(k)));
  }
  for (std::size_t idx = 0; idx < k.static_embed.numel(); ++idx) {
    CHECK(testutil::rel_err(k.static_embed.grad()[idx],
                            testutil::fd_partial(k.static_embed, idx, scalar)) < 1e-4);
  }
}

TEST_CASE("dynamic kernel part spec examples") {
  std::mt19937_64 rng(4);
  StsgKernelParams k = StsgKernelParams::init(2, 2, 3, 3, 2, true, true, rng);
  Tensor agg = Tensor::uniform({2, 2, 2, 2}, -2, 2, rng);

  SUBCASE("zero dynamic projection collapses the kernel to uniform") {
    fill(k.dyn_proj, 0.0);
    Tensor psi = build_kernel(k, agg);
    for (double v : psi.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
  }
  SUBCASE("all-ones static factor returns the projected signal exactly") {
    fill(k.ep_in_w, 0.0);
    fill(k.ep_in_b, 0.0);
    fill(k.ep_out_w, 0.0);
    for (auto& v : k.ep_out_b.values()) v = 1.0;
    Tensor z = dynamic_kernel_part(k, agg);
    Tensor xprime = matmul(kernel_proxy(agg), k.dyn_proj);
    CHECK(testutil::max_abs_diff(z.values(), xprime.values()) == 0.0);
  }
  SUBCASE("identical batch entries produce identical kernel slices") {
    std::vector<double> one(agg.values().begin(), agg.values().begin() + 8);
    std::vector<double> two = one;
    two.insert(two.end(), one.begin(), one.end());
    Tensor dup({2, 2, 2, 2}, two);
    Tensor psi = build_kernel(k, dup);
    for (std::size_t i = 0; i < psi.numel() / 2; ++i) {
      CHECK(psi.values()[i] == psi.values()[i + psi.numel() / 2]);
    }
  }
}

TEST_CASE("build_kernel saturation and column sums") {
  std::mt19937_64 rng(5);
  StsgKernelParams k = StsgKernelParams::init(2, 2, 3, 3, 2, true, true, rng);
  Tensor agg = Tensor::uniform({3, 2, 2, 2}, -2, 2, rng);
  Tensor psi = build_kernel(k, agg);
  const std::size_t th = 4, d = 3;
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t c = 0; c < d; ++c) {
      double sum = 0.0;
      for (std::size_t r = 0; r < th; ++r) sum += psi.values()[(b * th + r) * d + c];
      CHECK(std::abs(sum - 1.0) < 1e-9);
    }

  // a hugely dominant entry saturates its column
  Tensor z({3, 2}, {50.0, 0.0, 0.0, 0.0, 0.0, 0.0});
  Tensor sat = softmax_columns(z);
  CHECK(sat.values()[0] > 1.0 - 1e-12);
}

TEST_CASE("stsg_convolve: zero out-projection leaves only the bias") {
  LayerParams layer = tiny_layer(6);
  fill(layer.kernel.out_proj_w, 0.0);
  for (std::size_t i = 0; i < layer.kernel.out_proj_b.numel(); ++i) {
    layer.kernel.out_proj_b.values()[i] = double(i);
  }
  std::mt19937_64 rng(7);
  Tensor x = Tensor::uniform({2, 4, 2, 2}, -2, 2, rng);
  Tensor out = stsg_convolve(layer, x);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t r = 0; r < 4; ++r) {
        CHECK(out.values()[(b * 4 + j) * 4 + r] == doctest::Approx(double(r)));
      }
}

TEST_CASE("stsg_convolve matches the straight-line oracle") {
  std::mt19937_64 rng(8);
  LayerSettings ls;
  ls.num_nodes = 4;
  ls.t = 2;
  ls.h = 2;
  ls.d_e = 2;
  ls.l = 3;
  ls.d = 3;
  for (int rep = 0; rep < 5; ++rep) {
    std::mt19937_64 init(100 + std::uint64_t(rep));
    LayerParams layer = LayerParams::init(ls, init);
    Tensor x = Tensor::uniform({1, 4, 2, 2}, -2, 2, rng);
    const auto expect = oracle::stsg_convolve(layer, x.values(), 1);
    CHECK(testutil::max_abs_diff(stsg_convolve(layer, x).values(), expect) < 1e-10);
  }
}

TEST_CASE("layer_forward: zero weights reduce to layered normalization") {
  LayerParams layer = tiny_layer(9);
  layer.visit_params([&](const std::string& name, Tensor& t) {
    if (name.rfind("ln", 0) == 0) return;  // keep gains at one, biases at zero
    fill(t, 0.0);
  });
  fill(layer.ln1_gain, 1.0);
  fill(layer.ln1_bias, 0.0);
  fill(layer.ln2_gain, 1.0);
  fill(layer.ln2_bias, 0.0);
  Tensor x({1, 4, 2, 2},
           {0.5, -1.5, 2.0, 0.25, 1.0, -0.5, 0.75, -2.0,
            -0.25, 1.5, 0.0, 2.0, -1.0, 0.5, 1.25, -0.75});
  const auto expect = oracle::layer_forward(layer, x.values(), 1);
  CHECK(testutil::max_abs_diff(layer_forward(layer, x).values(), expect) < 1e-12);
  // with every affine map zeroed the result is layernorm(layernorm(x))
  const auto ln1 = oracle::layernorm(x.values(), {1, 1}, {0, 0}, 8, 2);
  const auto ln2 = oracle::layernorm(ln1, {1, 1}, {0, 0}, 8, 2);
  CHECK(testutil::max_abs_diff(layer_forward(layer, x).values(), ln2) < 1e-12);
}

TEST_CASE("layer_forward matches the oracle on random parameters") {
  std::mt19937_64 rng(10);
  for (int rep = 0; rep < 5; ++rep) {
    LayerParams layer = tiny_layer(200 + std::uint64_t(rep));
    Tensor x = Tensor::uniform({2, 4, 2, 2}, -2, 2, rng);
    const auto expect = oracle::layer_forward(layer, x.values(), 2);
    CHECK(testutil::max_abs_diff(layer_forward(layer, x).values(), expect) < 1e-9);
  }
}

TEST_CASE("layer_forward keeps the input shape and is bitwise deterministic") {
  LayerParams layer = tiny_layer(11);
  std::mt19937_64 rng(12);
  Tensor x = Tensor::uniform({3, 4, 2, 2}, -2, 2, rng);
  Tensor a = layer_forward(layer, x);
  Tensor b = layer_forward(layer, x);
  REQUIRE(a.shape() == x.shape());
  CHECK(a.values() == b.values());
}

TEST_CASE("zero inter-layer projection degenerates to the identity") {
  LayerParams layer = tiny_layer(13);
  fill(layer.inter_w, 0.0);
  fill(layer.inter_b, 0.0);
  std::mt19937_64 rng(14);
  Tensor x = Tensor::uniform({1, 4, 2, 2}, -2, 2, rng);
  // with W6 = 0, b6 = 0 the output equals the second normalization result
  Tensor conv = stsg_convolve(layer, x);
  Tensor n1 = layernorm(add(conv, x), layer.ln1_gain, layer.ln1_bias);
  Tensor ffn = add(matmul(relu(add(matmul(n1, layer.ffn_in_w), layer.ffn_in_b)),
                          layer.ffn_out_w),
                   layer.ffn_out_b);
  Tensor n2 = layernorm(add(ffn, n1), layer.ln2_gain, layer.ln2_bias);
  CHECK(testutil::max_abs_diff(layer_forward(layer, x).values(), n2.values()) == 0.0);
}

TEST_CASE("batch-independent kernel makes the layer batch-equivariant") {
  LayerParams layer = tiny_layer(15, /*dynamic=*/false);
  std::mt19937_64 rng(16);
  Tensor x = Tensor::uniform({3, 4, 2, 2}, -2, 2, rng);
  Tensor out = layer_forward(layer, x);

  // permute the batch (order 2,0,1) and compare slices
  const std::size_t block = 4 * 2 * 2;
  std::vector<double> perm_vals(x.numel());
  const std::size_t perm[3] = {2, 0, 1};
  for (std::size_t b = 0; b < 3; ++b) {
    std::copy(x.values().begin() + perm[b] * block,
              x.values().begin() + (perm[b] + 1) * block,
              perm_vals.begin() + b * block);
  }
  Tensor out_perm = layer_forward(layer, Tensor({3, 4, 2, 2}, perm_vals));
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t i = 0; i < block; ++i) {
      CHECK(out_perm.values()[b * block + i] ==
            doctest::Approx(out.values()[perm[b] * block + i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("kernel path parameter and flop accounting") {
  const std::size_t T = 2, H = 3, L = 4, d = 2, de = 5;
  std::mt19937_64 rng(17);
  StsgKernelParams k = StsgKernelParams::init(T, H, L, d, de, true, true, rng);
  const std::size_t th = T * H, tl = T * L;
  std::size_t count = k.static_embed.numel() + k.ep_in_w.numel() +
                      k.ep_in_b.numel() + k.ep_out_w.numel() + k.ep_out_b.numel() +
                      k.dyn_proj.numel() + k.out_proj_w.numel() +
                      k.out_proj_b.numel();
  const std::size_t ep_weights = th * tl + th + th * th + th;
  CHECK(count == tl * d + ep_weights + de * d + d * th + th);

  // per-node contraction cost of steps 5-6: 2*(T*H)*d + 2*d*(T*H)
  CHECK(kernel_flop_count(GraphMode::Fast, 1, T, H, d) == 2 * th * d + 2 * d * th);
  // versus the quadratic kernel
  CHECK(kernel_flop_count(GraphMode::Dense, 1, T, H, d) == 2 * th * th);
  CHECK(kernel_flop_count(GraphMode::Dense, 7, 12, 32, 8) /
            kernel_flop_count(GraphMode::Fast, 7, 12, 32, 8) ==
        24);
}

TEST_CASE("per-channel graphs off shares one graph across channels") {
  LayerParams layer = tiny_layer(18, true, true, /*per_dim=*/false);
  CHECK(layer.bank.local_embeddings.dim(0) == 1);
  std::mt19937_64 rng(19);
  Tensor x = Tensor::uniform({1, 4, 2, 2}, -2, 2, rng);
  // forward works and matches the oracle (which handles G == 1)
  const auto expect = oracle::stsg_convolve(layer, x.values(), 1);
  CHECK(testutil::max_abs_diff(stsg_convolve(layer, x).values(), expect) < 1e-10);
}

TEST_CASE("EP disabled uses the embedding directly at width H") {
  LayerParams layer = tiny_layer(20, true, /*ep=*/false);
  CHECK(layer.kernel.static_embed.shape() == Shape{2, 2, 3});
  CHECK_FALSE(layer.kernel.ep_in_w.defined());
  std::mt19937_64 rng(21);
  Tensor x = Tensor::uniform({1, 4, 2, 2}, -2, 2, rng);
  const auto expect = oracle::stsg_convolve(layer, x.values(), 1);
  CHECK(testutil::max_abs_diff(stsg_convolve(layer, x).values(), expect) < 1e-10);
}
