#include "fsts/model.hpp"

#include <cmath>
#include <limits>

namespace fsts {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("config: ") + name + " must be positive");
  };
  positive(num_nodes, "num_nodes");
  positive(input_steps, "input_steps");
  positive(output_steps, "output_steps");
  positive(hidden_dim, "hidden_dim");
  positive(num_layers, "num_layers");
  positive(graph_embed_dim, "graph_embed_dim");
  positive(kernel_dim, "kernel_dim");
  positive(static_embed_width, "static_embed_width");
  positive(head_hidden, "head_hidden");
  positive(tod_slots, "tod_slots");
  positive(dow_slots, "dow_slots");
  positive(in_channels, "in_channels");
  positive(batch_size, "batch_size");
  positive(epochs, "epochs");
  if (lr < 0.0) throw ConfigError("config: lr must be >= 0");
  if (clip_norm <= 0.0) throw ConfigError("config: clip_norm must be > 0");
}

namespace {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{
      {"num_nodes", c.num_nodes},
      {"input_steps", c.input_steps},
      {"output_steps", c.output_steps},
      {"hidden_dim", c.hidden_dim},
      {"num_layers", c.num_layers},
      {"graph_embed_dim", c.graph_embed_dim},
      {"kernel_dim", c.kernel_dim},
      {"static_embed_width", c.static_embed_width},
      {"skip_dim", c.skip_dim},
      {"head_hidden", c.head_hidden},
      {"tod_slots", c.tod_slots},
      {"dow_slots", c.dow_slots},
      {"in_channels", c.in_channels},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
      {"patience", c.patience},
      {"lr", c.lr},
      {"clip_norm", c.clip_norm},
      {"seed", c.seed},
      {"per_channel_projection", c.per_channel_projection},
      {"ablations",
       {{"use_fast_graph", c.ablations.use_fast_graph},
        {"use_dynamic", c.ablations.use_dynamic},
        {"per_dim_graphs", c.ablations.per_dim_graphs},
        {"use_ep", c.ablations.use_ep}}},
  };
}

ModelConfig config_from_json(const nlohmann::json& j) {
  static const char* known[] = {
      "num_nodes",      "input_steps",  "output_steps",
      "hidden_dim",     "num_layers",   "graph_embed_dim",
      "kernel_dim",     "static_embed_width", "skip_dim",
      "head_hidden",    "tod_slots",    "dow_slots",
      "in_channels",    "batch_size",   "epochs",
      "patience",       "lr",           "clip_norm",
      "seed",           "per_channel_projection", "ablations"};
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) {
      if (it.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) throw ConfigError("config: unknown key '" + it.key() + "'");
  }
  ModelConfig c;
  read_field(j, "num_nodes", c.num_nodes);
  read_field(j, "input_steps", c.input_steps);
  read_field(j, "output_steps", c.output_steps);
  read_field(j, "hidden_dim", c.hidden_dim);
  read_field(j, "num_layers", c.num_layers);
  read_field(j, "graph_embed_dim", c.graph_embed_dim);
  read_field(j, "kernel_dim", c.kernel_dim);
  read_field(j, "static_embed_width", c.static_embed_width);
  read_field(j, "skip_dim", c.skip_dim);
  read_field(j, "head_hidden", c.head_hidden);
  read_field(j, "tod_slots", c.tod_slots);
  read_field(j, "dow_slots", c.dow_slots);
  read_field(j, "in_channels", c.in_channels);
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "epochs", c.epochs);
  read_field(j, "patience", c.patience);
  read_field(j, "lr", c.lr);
  read_field(j, "clip_norm", c.clip_norm);
  read_field(j, "seed", c.seed);
  read_field(j, "per_channel_projection", c.per_channel_projection);
  if (j.contains("ablations")) {
    const auto& a = j.at("ablations");
    for (auto it = a.begin(); it != a.end(); ++it) {
      if (it.key() != "use_fast_graph" && it.key() != "use_dynamic" &&
          it.key() != "per_dim_graphs" && it.key() != "use_ep") {
        throw ConfigError("config: unknown ablation flag '" + it.key() + "'");
      }
    }
    read_field(a, "use_fast_graph", c.ablations.use_fast_graph);
    read_field(a, "use_dynamic", c.ablations.use_dynamic);
    read_field(a, "per_dim_graphs", c.ablations.per_dim_graphs);
    read_field(a, "use_ep", c.ablations.use_ep);
  }
  c.validate();
  return c;
}

InputEmbedding InputEmbedding::init(const ModelConfig& cfg, std::mt19937_64& rng) {
  InputEmbedding e;
  const std::size_t h = cfg.hidden_dim;
  e.value_w = Tensor::glorot({cfg.in_channels, h}, cfg.in_channels, h, rng, true);
  e.value_b = Tensor::zeros({h}, true);
  const double limit = 1.0 / std::sqrt(double(h));
  e.tod_table = Tensor::uniform({cfg.tod_slots, h}, -limit, limit, rng, true);
  e.dow_table = Tensor::uniform({cfg.dow_slots, h}, -limit, limit, rng, true);
  e.pos_embed = Tensor::uniform({cfg.input_steps, cfg.num_nodes, h}, -limit,
                                limit, rng, true);
  return e;
}

Tensor embed(const InputEmbedding& e, const Tensor& x_raw, const IntTensor& tod,
             const IntTensor& dow) {
  if (x_raw.rank() != 4) {
    throw ShapeError("embed: expected [B,T,N,C], got " + shape_str(x_raw.shape()));
  }
  const std::size_t B = x_raw.dim(0), T = x_raw.dim(1);
  if (tod.shape != Shape{B, T} || dow.shape != Shape{B, T}) {
    throw ShapeError("embed: slot indices must be [B,T] = [" + std::to_string(B) +
                     ", " + std::to_string(T) + "]");
  }
  const std::size_t H = e.value_w.dim(1);
  Tensor v = add(matmul(x_raw, e.value_w), e.value_b);                 // [B,T,N,H]
  Tensor w = reshape(embedding_lookup(e.tod_table, tod), {B, T, 1, H});
  Tensor d = reshape(embedding_lookup(e.dow_table, dow), {B, T, 1, H});
  Tensor s = add(add(add(v, w), d), e.pos_embed);  // pos [T,N,H] broadcasts on B
  return transpose_axes(s, {0, 2, 1, 3});          // [B,N,T,H]
}

FusionHead FusionHead::init(const ModelConfig& cfg, std::mt19937_64& rng) {
  FusionHead f;
  const std::size_t h = cfg.hidden_dim, skip = cfg.effective_skip_dim();
  f.skip_projs.reserve(cfg.num_layers + 1);
  for (std::size_t i = 0; i <= cfg.num_layers; ++i) {
    f.skip_projs.push_back(Tensor::glorot({h, skip}, h, skip, rng, true));
  }
  const std::size_t flat = cfg.input_steps * skip;
  f.head_in_w = Tensor::glorot({flat, cfg.head_hidden}, flat, cfg.head_hidden, rng, true);
  f.head_in_b = Tensor::zeros({cfg.head_hidden}, true);
  f.head_out_w = Tensor::glorot({cfg.head_hidden, cfg.output_steps},
                                cfg.head_hidden, cfg.output_steps, rng, true);
  f.head_out_b = Tensor::zeros({cfg.output_steps}, true);
  return f;
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  embed_ = InputEmbedding::init(cfg_, rng);
  LayerSettings ls;
  ls.num_nodes = cfg_.num_nodes;
  ls.t = cfg_.input_steps;
  ls.h = cfg_.hidden_dim;
  ls.d_e = cfg_.graph_embed_dim;
  ls.l = cfg_.static_embed_width;
  ls.d = cfg_.kernel_dim;
  ls.use_fast_graph = cfg_.ablations.use_fast_graph;
  ls.use_dynamic = cfg_.ablations.use_dynamic;
  ls.per_dim_graphs = cfg_.ablations.per_dim_graphs;
  ls.use_ep = cfg_.ablations.use_ep;
  ls.per_channel_projection = cfg_.per_channel_projection;
  layers_.reserve(cfg_.num_layers);
  for (std::size_t i = 0; i < cfg_.num_layers; ++i) {
    layers_.push_back(LayerParams::init(ls, rng));
  }
  head_ = FusionHead::init(cfg_, rng);
}

Model::Trace Model::forward_traced(const Tensor& x_raw, const IntTensor& tod,
                                   const IntTensor& dow) const {
  Trace tr;
  tr.embedded = embed(embed_, x_raw, tod, dow);
  tr.representations.push_back(tr.embedded);
  Tensor cur = tr.embedded;
  for (const auto& layer : layers_) {
    cur = layer_forward(layer, cur);
    tr.representations.push_back(cur);
  }

  Tensor fused;
  for (std::size_t i = 0; i < tr.representations.size(); ++i) {
    Tensor part = matmul(tr.representations[i], head_.skip_projs[i]);
    fused = fused.defined() ? add(fused, part) : part;
  }
  tr.fused = fused;  // [B,N,T,skip]

  const std::size_t B = fused.dim(0), N = fused.dim(1);
  Tensor flat = reshape(fused, {B, N, fused.dim(2) * fused.dim(3)});
  Tensor mid = relu(add(matmul(flat, head_.head_in_w), head_.head_in_b));
  tr.prediction = add(matmul(mid, head_.head_out_w), head_.head_out_b);
  return tr;
}

Tensor Model::forward(const Tensor& x_raw, const IntTensor& tod,
                      const IntTensor& dow) const {
  return forward_traced(x_raw, tod, dow).prediction;
}

void Model::visit_params(
    const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("embed.value_w", embed_.value_w);
  fn("embed.value_b", embed_.value_b);
  fn("embed.tod_table", embed_.tod_table);
  fn("embed.dow_table", embed_.dow_table);
  fn("embed.pos_embed", embed_.pos_embed);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string prefix = "layers." + std::to_string(i) + ".";
    layers_[i].visit_params(
        [&](const std::string& name, Tensor& t) { fn(prefix + name, t); });
  }
  for (std::size_t i = 0; i < head_.skip_projs.size(); ++i) {
    fn("head.skip." + std::to_string(i), head_.skip_projs[i]);
  }
  fn("head.head_in_w", head_.head_in_w);
  fn("head.head_in_b", head_.head_in_b);
  fn("head.head_out_w", head_.head_out_w);
  fn("head.head_out_b", head_.head_out_b);
}

std::size_t Model::param_count() const {
  std::size_t count = 0;
  const_cast<Model*>(this)->visit_params(
      [&](const std::string&, Tensor& t) { count += t.numel(); });
  return count;
}

std::size_t Model::layer_param_count(std::size_t idx) const {
  return layers_.at(idx).param_count();
}

Tensor mae_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mae_loss: shape mismatch " + shape_str(pred.shape()) +
                     " vs " + shape_str(target.shape()));
  }
  return mean_all(abs_val(sub(pred, target)));
}

Metrics metrics(const std::vector<double>& pred, const std::vector<double>& target,
                bool mask_zero) {
  if (pred.size() != target.size()) {
    throw ShapeError("metrics: size mismatch");
  }
  if (pred.empty()) throw ShapeError("metrics: empty input");
  double abs_sum = 0.0, sq_sum = 0.0, pct_sum = 0.0;
  std::size_t pct_count = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double diff = target[i] - pred[i];
    abs_sum += std::abs(diff);
    sq_sum += diff * diff;
    if (!mask_zero || std::abs(target[i]) >= 1.0) {
      pct_sum += std::abs(diff / target[i]);
      ++pct_count;
    }
  }
  Metrics m;
  const double n = double(pred.size());
  m.mae = abs_sum / n;
  m.rmse = std::sqrt(sq_sum / n);
  m.mape_percent = pct_count ? pct_sum / double(pct_count) * 100.0
                             : std::numeric_limits<double>::quiet_NaN();
  return m;
}

Metrics metrics(const Tensor& pred, const Tensor& target, bool mask_zero) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("metrics: shape mismatch " + shape_str(pred.shape()) +
                     " vs " + shape_str(target.shape()));
  }
  return metrics(pred.values(), target.values(), mask_zero);
}

}  // namespace fsts
