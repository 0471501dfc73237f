#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "fsts/checkpoint.hpp"

using namespace fsts;

namespace {

ModelConfig cfg_for(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.num_nodes = 5;
  cfg.input_steps = 3;
  cfg.output_steps = 3;
  cfg.hidden_dim = 4;
  cfg.num_layers = 2;
  cfg.graph_embed_dim = 2;
  cfg.kernel_dim = 2;
  cfg.static_embed_width = 2;
  cfg.head_hidden = 8;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("checkpoint round trip restores parameters, config, and stats") {
  Model model(cfg_for(5));
  NormStats stats{123.25, 7.5};
  const std::string bytes = checkpoint_bytes(model, stats);
  CHECK(bytes.substr(0, 4) == "FSTS");

  std::istringstream in(bytes, std::ios::binary);
  LoadedCheckpoint loaded = load_checkpoint(in);
  CHECK(loaded.stats.mean == 123.25);
  CHECK(loaded.stats.std == 7.5);
  CHECK(loaded.model.config().num_nodes == 5);
  CHECK(loaded.model.config().num_layers == 2);

  std::vector<double> a, b;
  model.visit_params([&](const std::string&, Tensor& t) {
    a.insert(a.end(), t.values().begin(), t.values().end());
  });
  loaded.model.visit_params([&](const std::string&, Tensor& t) {
    b.insert(b.end(), t.values().begin(), t.values().end());
  });
  CHECK(a == b);  // bit-exact through the f64 container

  // serialization is deterministic
  CHECK(checkpoint_bytes(loaded.model, loaded.stats) == bytes);
}

TEST_CASE("checkpoint round trip covers ablated variants") {
  ModelConfig cfg = cfg_for(6);
  cfg.ablations.use_fast_graph = false;
  cfg.ablations.use_ep = false;
  Model model(cfg);
  NormStats stats{0.0, 1.0};
  std::istringstream in(checkpoint_bytes(model, stats), std::ios::binary);
  LoadedCheckpoint loaded = load_checkpoint(in);
  CHECK(loaded.model.config().ablations.use_fast_graph == false);
  CHECK(loaded.model.config().ablations.use_ep == false);
  CHECK(loaded.model.param_count() == model.param_count());
}

TEST_CASE("bad magic and truncation are config errors") {
  std::istringstream bad("NOPE....", std::ios::binary);
  CHECK_THROWS_AS(load_checkpoint(bad), ConfigError);

  Model model(cfg_for(7));
  NormStats stats{1.0, 2.0};
  const std::string bytes = checkpoint_bytes(model, stats);
  std::istringstream trunc(bytes.substr(0, bytes.size() / 2), std::ios::binary);
  CHECK_THROWS_AS(load_checkpoint(trunc), ConfigError);
}
