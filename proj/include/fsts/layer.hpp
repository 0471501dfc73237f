#pragma once

#include <functional>
#include <string>

#include "fsts/graph.hpp"
#include "fsts/tensor.hpp"

namespace fsts {

// Everything that produces the synchronous kernel: a static embedding with
// its two-stage projection (the EP path) and the data-dependent projection
// that modulates it per sample.
struct StsgKernelParams {
  Tensor static_embed;  // [T, L, d]; [T, H, d] when the EP path is disabled
  Tensor ep_in_w;       // [T*H, T*L]
  Tensor ep_in_b;       // [T*H]
  Tensor ep_out_w;      // [T*H, T*H]
  Tensor ep_out_b;      // [T*H]
  Tensor dyn_proj;      // [W, d]; W = d_e on the fast path, N on the dense one
  Tensor out_proj_w;    // [d, T*H]
  Tensor out_proj_b;    // [T*H]

  std::size_t t = 0, h = 0, l = 0, d = 0;
  bool use_ep = true;
  bool use_dynamic = true;

  static StsgKernelParams init(std::size_t t, std::size_t h, std::size_t l,
                               std::size_t d, std::size_t dyn_width, bool use_ep,
                               bool use_dynamic, std::mt19937_64& rng);
};

struct LayerSettings {
  std::size_t num_nodes = 0;
  std::size_t t = 0;    // input steps
  std::size_t h = 0;    // hidden channels
  std::size_t d_e = 0;  // graph embedding width
  std::size_t l = 0;    // static-embedding width
  std::size_t d = 0;    // kernel width
  bool use_fast_graph = true;
  bool use_dynamic = true;
  bool per_dim_graphs = true;
  bool use_ep = true;
  bool per_channel_projection = false;
};

// One spatio-temporal synchronous graph convolutional layer.
struct LayerParams {
  LayerSettings cfg;

  // Fast graph path.
  AdaptiveGraphBank bank;
  FastProjection proj;
  // Dense fallback (use_fast_graph == false): one learned full mixing matrix.
  Tensor dense_mix;  // [N, N]

  StsgKernelParams kernel;

  Tensor ffn_in_w, ffn_in_b;    // [H,H],[H]
  Tensor ffn_out_w, ffn_out_b;  // [H,H],[H]
  Tensor inter_w, inter_b;      // [H,H],[H]
  Tensor ln1_gain, ln1_bias;    // [H]
  Tensor ln2_gain, ln2_bias;    // [H]

  static LayerParams init(const LayerSettings& cfg, std::mt19937_64& rng);

  void visit_params(const std::function<void(const std::string&, Tensor&)>& fn);
  std::size_t param_count() const;
};

// Static factor of the kernel: reshape the embedding to [T*L, d] and project
// it to [T*H, d] with two affine maps along the first axis, ReLU between.
Tensor static_kernel_part(const StsgKernelParams& k);

// [B,W,T,H] -> [B, T*H, W]: arranges an aggregated signal so the node-proxy
// axis is last, ordered to match reshape(x, [B,N,T*H]).
Tensor kernel_proxy(const Tensor& agg);

// Data-dependent factor times the static one: Z = (proxy . dyn_proj) * static.
Tensor dynamic_kernel_part(const StsgKernelParams& k, const Tensor& agg);

// Column softmax of the combined factor. [B, T*H, d] per-sample when the
// dynamic path is on, batch-independent [T*H, d] otherwise.
Tensor build_kernel(const StsgKernelParams& k, const Tensor& agg);

// The synchronous graph convolution: spatial mixing via the (fast or dense)
// graph path, then contraction with the kernel and projection back to [T*H].
Tensor stsg_convolve(const LayerParams& layer, const Tensor& x);

// stsg_convolve + residual/layernorm sublayers + inter-layer residual.
Tensor layer_forward(const LayerParams& layer, const Tensor& x);

}  // namespace fsts
