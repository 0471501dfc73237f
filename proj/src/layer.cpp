#include "fsts/layer.hpp"

#include <cmath>

namespace fsts {

StsgKernelParams StsgKernelParams::init(std::size_t t, std::size_t h,
                                        std::size_t l, std::size_t d,
                                        std::size_t dyn_width, bool use_ep,
                                        bool use_dynamic, std::mt19937_64& rng) {
  if (t == 0 || h == 0 || l == 0 || d == 0) {
    throw ConfigError("kernel params: dimensions must be positive");
  }
  StsgKernelParams k;
  k.t = t;
  k.h = h;
  k.l = use_ep ? l : h;  // without EP the embedding must already be [T,H,d]
  k.d = d;
  k.use_ep = use_ep;
  k.use_dynamic = use_dynamic;

  const double limit = 1.0 / std::sqrt(double(d));
  k.static_embed = Tensor::uniform({t, k.l, d}, -limit, limit, rng, true);
  const std::size_t th = t * h;
  if (use_ep) {
    const std::size_t tl = t * k.l;
    k.ep_in_w = Tensor::glorot({th, tl}, tl, th, rng, true);
    k.ep_in_b = Tensor::zeros({th}, true);
    k.ep_out_w = Tensor::glorot({th, th}, th, th, rng, true);
    k.ep_out_b = Tensor::zeros({th}, true);
  }
  if (use_dynamic) {
    k.dyn_proj = Tensor::glorot({dyn_width, d}, dyn_width, d, rng, true);
  }
  k.out_proj_w = Tensor::glorot({d, th}, d, th, rng, true);
  k.out_proj_b = Tensor::zeros({th}, true);
  return k;
}

LayerParams LayerParams::init(const LayerSettings& cfg, std::mt19937_64& rng) {
  LayerParams p;
  p.cfg = cfg;
  const std::size_t n = cfg.num_nodes, h = cfg.h;
  if (cfg.use_fast_graph) {
    p.bank = AdaptiveGraphBank::init(n, cfg.d_e, h, cfg.per_dim_graphs, rng);
    p.proj = cfg.per_channel_projection
                 ? FastProjection::init_per_channel(n, cfg.d_e, h, rng)
                 : FastProjection::init(n, cfg.d_e, rng);
  } else {
    const double limit = 1.0 / std::sqrt(double(n));
    p.dense_mix = Tensor::uniform({n, n}, -limit, limit, rng, true);
  }
  const std::size_t dyn_width = cfg.use_fast_graph ? cfg.d_e : n;
  p.kernel = StsgKernelParams::init(cfg.t, h, cfg.l, cfg.d, dyn_width,
                                    cfg.use_ep, cfg.use_dynamic, rng);

  p.ffn_in_w = Tensor::glorot({h, h}, h, h, rng, true);
  p.ffn_in_b = Tensor::zeros({h}, true);
  p.ffn_out_w = Tensor::glorot({h, h}, h, h, rng, true);
  p.ffn_out_b = Tensor::zeros({h}, true);
  p.inter_w = Tensor::glorot({h, h}, h, h, rng, true);
  p.inter_b = Tensor::zeros({h}, true);
  p.ln1_gain = Tensor::full({h}, 1.0, true);
  p.ln1_bias = Tensor::zeros({h}, true);
  p.ln2_gain = Tensor::full({h}, 1.0, true);
  p.ln2_bias = Tensor::zeros({h}, true);
  return p;
}

void LayerParams::visit_params(
    const std::function<void(const std::string&, Tensor&)>& fn) {
  if (cfg.use_fast_graph) {
    fn("bank.global", bank.global_embedding);
    fn("bank.local", bank.local_embeddings);
    fn("proj.weight", proj.weight);
    fn("proj.bias", proj.bias);
  } else {
    fn("dense_mix", dense_mix);
  }
  fn("kernel.static_embed", kernel.static_embed);
  if (kernel.use_ep) {
    fn("kernel.ep_in_w", kernel.ep_in_w);
    fn("kernel.ep_in_b", kernel.ep_in_b);
    fn("kernel.ep_out_w", kernel.ep_out_w);
    fn("kernel.ep_out_b", kernel.ep_out_b);
  }
  if (kernel.use_dynamic) fn("kernel.dyn_proj", kernel.dyn_proj);
  fn("kernel.out_proj_w", kernel.out_proj_w);
  fn("kernel.out_proj_b", kernel.out_proj_b);
  fn("ffn_in_w", ffn_in_w);
  fn("ffn_in_b", ffn_in_b);
  fn("ffn_out_w", ffn_out_w);
  fn("ffn_out_b", ffn_out_b);
  fn("inter_w", inter_w);
  fn("inter_b", inter_b);
  fn("ln1_gain", ln1_gain);
  fn("ln1_bias", ln1_bias);
  fn("ln2_gain", ln2_gain);
  fn("ln2_bias", ln2_bias);
}

std::size_t LayerParams::param_count() const {
  std::size_t count = 0;
  const_cast<LayerParams*>(this)->visit_params(
      [&](const std::string&, Tensor& t) { count += t.numel(); });
  return count;
}

Tensor static_kernel_part(const StsgKernelParams& k) {
  const std::size_t th = k.t * k.h;
  Tensor base = reshape(k.static_embed, {k.t * k.l, k.d});
  if (!k.use_ep) return base;
  Tensor mid = relu(add(matmul(k.ep_in_w, base), reshape(k.ep_in_b, {th, 1})));
  return add(matmul(k.ep_out_w, mid), reshape(k.ep_out_b, {th, 1}));
}

Tensor kernel_proxy(const Tensor& agg) {
  if (agg.rank() != 4) {
    throw ShapeError("kernel_proxy: expected [B,W,T,H], got " +
                     shape_str(agg.shape()));
  }
  Tensor t = transpose_axes(agg, {0, 2, 3, 1});
  return reshape(t, {agg.dim(0), agg.dim(2) * agg.dim(3), agg.dim(1)});
}

Tensor dynamic_kernel_part(const StsgKernelParams& k, const Tensor& agg) {
  if (!k.dyn_proj.defined()) {
    throw ConfigError("dynamic_kernel_part: dynamic path is disabled");
  }
  Tensor proxy = kernel_proxy(agg);  // [B, T*H, W]
  if (proxy.dim(2) != k.dyn_proj.dim(0)) {
    throw ShapeError("dynamic_kernel_part: proxy width " +
                     std::to_string(proxy.dim(2)) + " does not match dyn_proj " +
                     shape_str(k.dyn_proj.shape()));
  }
  Tensor xprime = matmul(proxy, k.dyn_proj);        // [B, T*H, d]
  return hadamard(xprime, static_kernel_part(k));   // static factor broadcasts
}

Tensor build_kernel(const StsgKernelParams& k, const Tensor& agg) {
  if (!k.use_dynamic) return softmax_columns(static_kernel_part(k));
  return softmax_columns(dynamic_kernel_part(k, agg));
}

Tensor stsg_convolve(const LayerParams& layer, const Tensor& x) {
  if (x.rank() != 4) {
    throw ShapeError("stsg_convolve: expected [B,N,T,H], got " +
                     shape_str(x.shape()));
  }
  const std::size_t B = x.dim(0), N = x.dim(1), T = x.dim(2), H = x.dim(3);
  const std::size_t th = T * H;

  Tensor xhat, psi;
  if (layer.cfg.use_fast_graph) {
    Tensor agg = fast_aggregate(layer.bank, x);  // [B,d_e,T,H]
    xhat = fast_project(layer.proj, agg);        // [B,N,T,H]
    psi = build_kernel(layer.kernel, agg);
  } else {
    xhat = dense_graph_apply(softmax_columns(layer.dense_mix), x);
    psi = build_kernel(layer.kernel, xhat);
  }

  Tensor flat = reshape(xhat, {B, N, th});
  Tensor mixed = matmul(flat, psi);  // [B,N,d]
  Tensor stg = add(matmul(mixed, layer.kernel.out_proj_w), layer.kernel.out_proj_b);
  return reshape(stg, {B, N, T, H});
}

Tensor layer_forward(const LayerParams& layer, const Tensor& x) {
  Tensor conv = stsg_convolve(layer, x);
  Tensor norm1 = layernorm(add(conv, x), layer.ln1_gain, layer.ln1_bias);
  Tensor ffn = add(matmul(relu(add(matmul(norm1, layer.ffn_in_w), layer.ffn_in_b)),
                          layer.ffn_out_w),
                   layer.ffn_out_b);
  Tensor norm2 = layernorm(add(ffn, norm1), layer.ln2_gain, layer.ln2_bias);
  return add(add(matmul(norm2, layer.inter_w), layer.inter_b), norm2);
}

}  // namespace fsts
