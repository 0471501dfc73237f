#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fsts/layer.hpp"
#include "fsts/tensor.hpp"

namespace fsts {

struct AblationFlags {
  bool use_fast_graph = true;   // off: dense learned N x N mixing
  bool use_dynamic = true;      // off: batch-independent kernel from the static part
  bool per_dim_graphs = true;   // off: one shared adaptive graph for all channels
  bool use_ep = true;           // off: static embedding used directly, width H
};

struct ModelConfig {
  std::size_t num_nodes = 8;
  std::size_t input_steps = 12;   // T
  std::size_t output_steps = 12;  // tau
  std::size_t hidden_dim = 32;    // H
  std::size_t num_layers = 2;
  std::size_t graph_embed_dim = 8;     // d_e
  std::size_t kernel_dim = 8;          // d
  std::size_t static_embed_width = 8;  // L
  std::size_t skip_dim = 0;            // 0 means "same as hidden_dim"
  std::size_t head_hidden = 256;
  std::size_t tod_slots = 1440;
  std::size_t dow_slots = 7;
  std::size_t in_channels = 1;
  std::size_t batch_size = 16;
  std::size_t epochs = 200;
  std::size_t patience = 15;
  double lr = 0.001;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;
  bool per_channel_projection = false;
  AblationFlags ablations;

  std::size_t effective_skip_dim() const {
    return skip_dim ? skip_dim : hidden_dim;
  }
  void validate() const;
};

nlohmann::json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

// Value projection plus periodic and positional tables (all learned).
struct InputEmbedding {
  Tensor value_w;    // [C, H]
  Tensor value_b;    // [H]
  Tensor tod_table;  // [tod_slots, H]
  Tensor dow_table;  // [dow_slots, H]
  Tensor pos_embed;  // [T, N, H]

  static InputEmbedding init(const ModelConfig& cfg, std::mt19937_64& rng);
};

// x_raw [B,T,N,C] + slot indices [B,T] -> node-major [B,N,T,H].
Tensor embed(const InputEmbedding& e, const Tensor& x_raw, const IntTensor& tod,
             const IntTensor& dow);

// Per-representation skip projections plus the two-stage forecasting head.
struct FusionHead {
  std::vector<Tensor> skip_projs;  // (num_layers + 1) x [H, skip_dim]
  Tensor head_in_w;                // [T*skip_dim, head_hidden]
  Tensor head_in_b;                // [head_hidden]
  Tensor head_out_w;               // [head_hidden, tau]
  Tensor head_out_b;               // [tau]

  static FusionHead init(const ModelConfig& cfg, std::mt19937_64& rng);
};

class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }

  Tensor forward(const Tensor& x_raw, const IntTensor& tod,
                 const IntTensor& dow) const;

  struct Trace {
    Tensor embedded;
    std::vector<Tensor> representations;  // embedded + each layer output
    Tensor fused;
    Tensor prediction;
  };
  Trace forward_traced(const Tensor& x_raw, const IntTensor& tod,
                       const IntTensor& dow) const;

  void visit_params(const std::function<void(const std::string&, Tensor&)>& fn);
  std::size_t param_count() const;
  std::size_t layer_param_count(std::size_t idx) const;

  InputEmbedding& embedding() { return embed_; }
  std::vector<LayerParams>& layers() { return layers_; }
  const std::vector<LayerParams>& layers() const { return layers_; }
  FusionHead& head() { return head_; }

 private:
  ModelConfig cfg_;
  InputEmbedding embed_;
  std::vector<LayerParams> layers_;
  FusionHead head_;
};

// Mean of |pred - target| over all elements; both on the same scale.
Tensor mae_loss(const Tensor& pred, const Tensor& target);

struct Metrics {
  double mae = 0.0;
  double rmse = 0.0;
  double mape_percent = 0.0;  // NaN when every entry is masked
};

// Plain (non-differentiable) evaluation on de-normalized values. When
// mask_zero is set, entries with |target| < 1.0 are excluded from MAPE.
Metrics metrics(const std::vector<double>& pred, const std::vector<double>& target,
                bool mask_zero);
Metrics metrics(const Tensor& pred, const Tensor& target, bool mask_zero);

}  // namespace fsts
