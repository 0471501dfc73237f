#pragma once

#include <cstdint>

#include "fsts/tensor.hpp"

namespace fsts {

// Learned node embeddings producing one column-stochastic mixing graph per
// hidden channel: A[g] = softmax_columns(global + local[g]). When per-channel
// graphs are disabled the bank holds a single shared local embedding.
struct AdaptiveGraphBank {
  Tensor global_embedding;  // [N, d_e]
  Tensor local_embeddings;  // [G, N, d_e]; G == channels, or 1 when shared
  std::size_t d_e = 0;

  static AdaptiveGraphBank init(std::size_t num_nodes, std::size_t d_e,
                                std::size_t channels, bool per_channel,
                                std::mt19937_64& rng);

  std::size_t num_nodes() const { return global_embedding.dim(0); }
  std::size_t num_graphs() const { return local_embeddings.dim(0); }
};

// Learned map from the d_e aggregated slots back to N nodes (the 1x1
// projection of the fast path). Weight is [d_e, N], or [C, d_e, N] when the
// per-channel variant is enabled.
struct FastProjection {
  Tensor weight;
  Tensor bias;  // [N]

  static FastProjection init(std::size_t num_nodes, std::size_t d_e,
                             std::mt19937_64& rng);
  static FastProjection init_per_channel(std::size_t num_nodes, std::size_t d_e,
                                         std::size_t channels, std::mt19937_64& rng);
};

// A[g] = softmax over the node axis of (global + local[g]); differentiable
// through both embeddings. Shape [G, N, d_e].
Tensor materialize_graphs(const AdaptiveGraphBank& bank);

// out[b,k,t,h] = sum_i A[h,i,k] * x[b,i,t,h]. x is [B,N,T,H].
Tensor fast_aggregate(const AdaptiveGraphBank& bank, const Tensor& x);

// out[b,j,t,h] = sum_k weight[k,j] * agg[b,k,t,h] + bias[j].
Tensor fast_project(const FastProjection& proj, const Tensor& agg);

enum class GraphMode { Fast, Dense };

// Multiply-add count of one node-mixing application.
// Dense: 2*N^2*T*H. Fast: 2*N*d_e*T*H (aggregate) + 2*d_e*N*T*H (project).
std::uint64_t flop_count(GraphMode mode, std::uint64_t n, std::uint64_t d_e,
                         std::uint64_t t, std::uint64_t h);

// Same accounting for the synchronous kernel contraction at N nodes:
// dense kernel 2*N*(T*H)^2, factorized 2*N*T*H*d + 2*N*d*T*H.
std::uint64_t kernel_flop_count(GraphMode mode, std::uint64_t n, std::uint64_t t,
                                std::uint64_t h, std::uint64_t d);

}  // namespace fsts
