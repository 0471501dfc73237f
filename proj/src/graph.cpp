#include "fsts/graph.hpp"

#include <cmath>
#include <iostream>

namespace fsts {

AdaptiveGraphBank AdaptiveGraphBank::init(std::size_t num_nodes, std::size_t d_e,
                                          std::size_t channels, bool per_channel,
                                          std::mt19937_64& rng) {
  if (num_nodes == 0 || d_e == 0 || channels == 0) {
    throw ConfigError("graph bank: dimensions must be positive");
  }
  if (d_e >= num_nodes) {
    std::cerr << "warning: graph embedding width " << d_e
              << " >= node count " << num_nodes
              << "; the factorized path no longer saves work\n";
  }
  const double limit = 1.0 / std::sqrt(double(d_e));
  AdaptiveGraphBank bank;
  bank.d_e = d_e;
  bank.global_embedding =
      Tensor::uniform({num_nodes, d_e}, -limit, limit, rng, true);
  const std::size_t g = per_channel ? channels : 1;
  bank.local_embeddings =
      Tensor::uniform({g, num_nodes, d_e}, -limit, limit, rng, true);
  return bank;
}

FastProjection FastProjection::init(std::size_t num_nodes, std::size_t d_e,
                                    std::mt19937_64& rng) {
  FastProjection p;
  p.weight = Tensor::glorot({d_e, num_nodes}, d_e, num_nodes, rng, true);
  p.bias = Tensor::zeros({num_nodes}, true);
  return p;
}

FastProjection FastProjection::init_per_channel(std::size_t num_nodes,
                                                std::size_t d_e,
                                                std::size_t channels,
                                                std::mt19937_64& rng) {
  FastProjection p;
  p.weight =
      Tensor::glorot({channels, d_e, num_nodes}, d_e, num_nodes, rng, true);
  p.bias = Tensor::zeros({num_nodes}, true);
  return p;
}

Tensor materialize_graphs(const AdaptiveGraphBank& bank) {
  // local is [G,N,d_e], global [N,d_e] broadcasts over the graph axis.
  return softmax_columns(add(bank.local_embeddings, bank.global_embedding));
}

Tensor fast_aggregate(const AdaptiveGraphBank& bank, const Tensor& x) {
  if (x.rank() != 4) {
    throw ShapeError("fast_aggregate: signal must be [B,N,T,H], got " +
                     shape_str(x.shape()));
  }
  Tensor graphs = materialize_graphs(bank);
  const std::size_t g = graphs.dim(0);
  if (g == 1) {
    // One shared graph: drop the channel axis so any H is accepted.
    Tensor shared = reshape(graphs, {graphs.dim(1), graphs.dim(2)});
    return contract_nodes(shared, x);
  }
  if (g != x.dim(3)) {
    throw ShapeError("fast_aggregate: bank holds " + std::to_string(g) +
                     " per-channel graphs but signal has " +
                     std::to_string(x.dim(3)) + " channels");
  }
  return contract_nodes(graphs, x);
}

Tensor fast_project(const FastProjection& proj, const Tensor& agg) {
  return project_nodes(proj.weight, proj.bias, agg);
}

std::uint64_t flop_count(GraphMode mode, std::uint64_t n, std::uint64_t d_e,
                         std::uint64_t t, std::uint64_t h) {
  if (mode == GraphMode::Dense) return 2 * n * n * t * h;
  return 2 * n * d_e * t * h + 2 * d_e * n * t * h;
}

std::uint64_t kernel_flop_count(GraphMode mode, std::uint64_t n, std::uint64_t t,
                                std::uint64_t h, std::uint64_t d) {
  const std::uint64_t th = t * h;
  if (mode == GraphMode::Dense) return 2 * n * th * th;
  return 2 * n * th * d + 2 * n * d * th;
}

}  // namespace fsts
