#include "fsts/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "fsts/layer.hpp"
#include "fsts/model.hpp"
#include "fsts/tensor.hpp"

namespace fsts {

namespace {

constexpr double kStep = 1e-5;
constexpr std::size_t kChecksPerTensor = 6;

using LossFn = std::function<Tensor()>;

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3});
}

// Analytic gradients vs central differences on subsampled entries. loss_fn
// must be re-runnable: each call executes a fresh forward pass over the
// current leaf values.
double check_gradients(std::vector<Tensor>& leaves, const LossFn& loss_fn,
                       std::mt19937_64& rng) {
  std::vector<std::vector<double>> analytic;
  {
    GradientTape tape;
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  for (auto& leaf : leaves) {
    analytic.push_back(leaf.has_grad() ? leaf.grad()
                                       : std::vector<double>(leaf.numel(), 0.0));
    leaf.clear_grad();
  }

  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& vals = leaves[li].values();
    std::vector<std::size_t> picks(vals.size());
    for (std::size_t i = 0; i < picks.size(); ++i) picks[i] = i;
    if (picks.size() > kChecksPerTensor) {
      std::shuffle(picks.begin(), picks.end(), rng);
      picks.resize(kChecksPerTensor);
    }
    for (std::size_t idx : picks) {
      const double saved = vals[idx];
      vals[idx] = saved + kStep;
      const double up = loss_fn().item();
      vals[idx] = saved - kStep;
      const double down = loss_fn().item();
      vals[idx] = saved;
      const double fd = (up - down) / (2.0 * kStep);
      worst = std::max(worst, rel_err(analytic[li][idx], fd));
    }
  }
  return worst;
}

struct Harness {
  GradCheckReport report;
  std::mt19937_64 rng;

  explicit Harness(std::uint64_t seed) : rng(seed) {}

  // Wraps the forward pass in a fixed pseudo-random cotangent: the checked
  // scalar is sum(w * fwd()). w is drawn once so repeated evaluations see
  // the identical loss surface.
  void run(const std::string& name, std::vector<Tensor> leaves,
           const std::function<Tensor()>& fwd, double tolerance = 1e-4) {
    GradCheckCase c;
    c.name = name;
    c.tolerance = tolerance;
    const Tensor probe = fwd();
    const Tensor w = Tensor::uniform(probe.shape(), -1.0, 1.0, rng);
    LossFn loss_fn = [&fwd, w]() { return sum_all(hadamard(fwd(), w)); };
    c.max_rel_err = check_gradients(leaves, loss_fn, rng);
    c.pass = c.max_rel_err < tolerance;
    if (!c.pass) report.all_pass = false;
    report.cases.push_back(std::move(c));
  }

  // As above but with the scalar produced by the forward pass itself.
  void run_scalar(const std::string& name, std::vector<Tensor> leaves,
                  const std::function<Tensor()>& fwd, double tolerance = 1e-4) {
    GradCheckCase c;
    c.name = name;
    c.tolerance = tolerance;
    c.max_rel_err = check_gradients(leaves, fwd, rng);
    c.pass = c.max_rel_err < tolerance;
    if (!c.pass) report.all_pass = false;
    report.cases.push_back(std::move(c));
  }

  Tensor rand(Shape s, double lo = -2.0, double hi = 2.0) {
    return Tensor::uniform(std::move(s), lo, hi, rng, true);
  }
  Tensor rand_const(Shape s, double lo = -2.0, double hi = 2.0) {
    return Tensor::uniform(std::move(s), lo, hi, rng, false);
  }
  // Values bounded away from zero, for kinked ops.
  Tensor rand_offzero(Shape s) {
    Tensor t = rand(std::move(s));
    for (auto& v : t.values()) {
      if (std::abs(v) < 0.2) v = v < 0.0 ? v - 0.2 : v + 0.2;
    }
    return t;
  }
};

}  // namespace

GradCheckReport run_gradcheck(std::uint64_t seed) {
  Harness hx(seed);

  {
    Tensor a = hx.rand({3, 4});
    Tensor b = hx.rand_const({4, 2});
    hx.run("matmul", {a}, [a, b]() { return matmul(a, b); });
  }
  {
    Tensor a = hx.rand({2, 1, 3, 4});
    Tensor b = hx.rand({5, 4, 2});
    hx.run("matmul_batched", {a, b}, [a, b]() { return matmul(a, b); });
  }
  {
    Tensor g = hx.rand({6, 3});
    Tensor x = hx.rand({2, 6, 2, 3});
    hx.run("contract_nodes_shared", {g, x}, [g, x]() { return contract_nodes(g, x); });
  }
  {
    Tensor g = hx.rand({3, 6, 2});
    Tensor x = hx.rand({2, 6, 2, 3});
    hx.run("contract_nodes_per_channel", {g, x},
           [g, x]() { return contract_nodes(g, x); });
  }
  {
    Tensor w = hx.rand({3, 5});
    Tensor b = hx.rand({5});
    Tensor agg = hx.rand({2, 3, 2, 4});
    hx.run("project_nodes", {w, b, agg},
           [w, b, agg]() { return project_nodes(w, b, agg); });
  }
  {
    Tensor w = hx.rand({4, 3, 5});
    Tensor b = hx.rand({5});
    Tensor agg = hx.rand({2, 3, 2, 4});
    hx.run("project_nodes_per_channel", {w, b, agg},
           [w, b, agg]() { return project_nodes(w, b, agg); });
  }
  {
    Tensor adj = hx.rand({5, 5});
    Tensor x = hx.rand({2, 5, 3, 2});
    hx.run("dense_graph_apply", {adj, x},
           [adj, x]() { return dense_graph_apply(adj, x); });
  }
  {
    Tensor z = hx.rand({2, 5, 3});
    hx.run("softmax_columns", {z}, [z]() { return softmax_columns(z); });
  }
  {
    Tensor x = hx.rand({2, 3, 4});
    Tensor g = hx.rand({4}, 0.5, 1.5);
    Tensor b = hx.rand({4});
    hx.run("layernorm", {x, g, b}, [x, g, b]() { return layernorm(x, g, b); });
  }
  {
    Tensor x = hx.rand_offzero({3, 4});
    hx.run("relu", {x}, [x]() { return relu(x); });
  }
  {
    Tensor a = hx.rand({2, 3, 4});
    Tensor b = hx.rand({4});
    hx.run("add_broadcast", {a, b}, [a, b]() { return add(a, b); });
  }
  {
    Tensor a = hx.rand({2, 3, 4});
    Tensor b = hx.rand({3, 1});
    hx.run("hadamard_broadcast", {a, b}, [a, b]() { return hadamard(a, b); });
  }
  {
    Tensor x = hx.rand_offzero({3, 5});
    hx.run_scalar("abs_mean", {x}, [x]() { return mean_all(abs_val(x)); });
  }
  {
    Tensor a = hx.rand({2, 4});
    Tensor b = hx.rand({4});
    hx.run("sub_scale", {a, b}, [a, b]() { return scale(sub(a, b), 2.5); });
  }
  {
    Tensor x = hx.rand({2, 3, 4});
    hx.run("reshape_transpose", {x}, [x]() {
      return reshape(transpose_axes(x, {2, 0, 1}), {4, 6});
    });
  }
  {
    Tensor table = hx.rand({7, 3});
    IntTensor idx({2, 2}, {0, 3, 6, 3});
    hx.run("embedding_lookup", {table},
           [table, idx]() { return embedding_lookup(table, idx); });
  }

  // Kernel path and the full layer on a tiny configuration.
  {
    std::mt19937_64 init_rng(seed + 1);
    StsgKernelParams k = StsgKernelParams::init(2, 3, 2, 2, 4, true, true, init_rng);
    Tensor agg = hx.rand({2, 4, 2, 3}, -1.0, 1.0);
    std::vector<Tensor> leaves = {k.static_embed, k.ep_in_w,  k.ep_in_b,
                                  k.ep_out_w,     k.ep_out_b, k.dyn_proj,
                                  agg};
    hx.run("build_kernel", leaves, [k, agg]() { return build_kernel(k, agg); });
  }
  {
    std::mt19937_64 init_rng(seed + 2);
    LayerSettings ls;
    ls.num_nodes = 4;
    ls.t = 2;
    ls.h = 3;
    ls.d_e = 2;
    ls.l = 2;
    ls.d = 2;
    LayerParams layer = LayerParams::init(ls, init_rng);
    Tensor x = hx.rand({2, 4, 2, 3}, -1.0, 1.0);
    std::vector<Tensor> leaves;
    layer.visit_params([&](const std::string&, Tensor& t) { leaves.push_back(t); });
    leaves.push_back(x);
    hx.run("stsg_convolve", leaves, [layer, x]() { return stsg_convolve(layer, x); });
    hx.run("layer_forward", leaves, [layer, x]() { return layer_forward(layer, x); });
  }
  {
    // dense-mixing variant: N-wide dynamic projection, no factorized path
    std::mt19937_64 init_rng(seed + 5);
    LayerSettings ls;
    ls.num_nodes = 4;
    ls.t = 2;
    ls.h = 3;
    ls.d_e = 2;
    ls.l = 2;
    ls.d = 2;
    ls.use_fast_graph = false;
    LayerParams layer = LayerParams::init(ls, init_rng);
    Tensor x = hx.rand({2, 4, 2, 3}, -1.0, 1.0);
    std::vector<Tensor> leaves;
    layer.visit_params([&](const std::string&, Tensor& t) { leaves.push_back(t); });
    leaves.push_back(x);
    hx.run("layer_forward_dense_variant", leaves,
           [layer, x]() { return layer_forward(layer, x); });
  }

  // Tiny end-to-end model: every parameter tensor vs finite differences.
  {
    ModelConfig cfg;
    cfg.num_nodes = 4;
    cfg.input_steps = 4;
    cfg.output_steps = 4;
    cfg.hidden_dim = 4;
    cfg.num_layers = 1;
    cfg.graph_embed_dim = 2;
    cfg.kernel_dim = 2;
    cfg.static_embed_width = 2;
    cfg.head_hidden = 8;
    cfg.tod_slots = 16;  // small tables so the subsample covers used rows
    cfg.dow_slots = 7;
    cfg.seed = seed + 3;
    auto model = std::make_shared<Model>(cfg);

    std::mt19937_64 data_rng(seed + 4);
    Tensor x_raw = Tensor::uniform({2, 4, 4, 1}, -2.0, 2.0, data_rng);
    std::vector<std::int64_t> tod_v(8), dow_v(8);
    std::uniform_int_distribution<std::int64_t> tod_d(0, 15), dow_d(0, 6);
    for (auto& v : tod_v) v = tod_d(data_rng);
    for (auto& v : dow_v) v = dow_d(data_rng);
    IntTensor tod({2, 4}, tod_v), dow({2, 4}, dow_v);
    Tensor target = Tensor::uniform({2, 4, 4}, -2.0, 2.0, data_rng);

    std::vector<Tensor> leaves;
    model->visit_params([&](const std::string&, Tensor& t) { leaves.push_back(t); });
    hx.run_scalar(
        "model_end_to_end", leaves,
        [model, x_raw, tod, dow, target]() {
          // Squared error keeps the loss smooth; MAE kinks would trip
          // finite differences whenever a residual crosses zero.
          Tensor diff = sub(model->forward(x_raw, tod, dow), target);
          return mean_all(hadamard(diff, diff));
        },
        1e-3);
  }

  return hx.report;
}

}  // namespace fsts
