#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fsts/bench.hpp"
#include "fsts/checkpoint.hpp"
#include "fsts/data.hpp"
#include "fsts/gradcheck.hpp"
#include "fsts/model.hpp"
#include "fsts/train.hpp"

namespace fs = std::filesystem;
using namespace fsts;

namespace {

// 0 success, 1 usage, 2 data/config error, 3 numerical failure.
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct DataPaths {
  std::string csv;
  std::string meta;
};

// A data directory holds exactly one CSV and its same-stem JSON sidecar.
DataPaths find_dataset(const std::string& dir) {
  std::vector<fs::path> csvs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".csv") csvs.push_back(entry.path());
  }
  if (csvs.size() != 1) {
    throw DataError("expected exactly one .csv in " + dir + ", found " +
                    std::to_string(csvs.size()));
  }
  fs::path meta = csvs[0];
  meta.replace_extension(".json");
  if (!fs::exists(meta)) {
    throw DataError("missing sidecar " + meta.string());
  }
  return {csvs[0].string(), meta.string()};
}

ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": invalid JSON: " + e.what());
  }
  return config_from_json(j);
}

TrafficDataset dataset_for(const ModelConfig& cfg, const std::string& data_dir) {
  if (!data_dir.empty()) {
    const auto paths = find_dataset(data_dir);
    return clean(load_csv(paths.csv, paths.meta));
  }
  // No data given: a seeded synthetic week sized to the config.
  SynthConfig sc;
  sc.nodes = cfg.num_nodes;
  return clean(synth_generate(sc, cfg.seed));
}

std::vector<std::size_t> parse_sweep(const std::string& s) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t comma = s.find(',', pos);
    if (comma == std::string::npos) comma = s.size();
    out.push_back(std::stoul(s.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  if (out.empty()) throw ConfigError("empty --sweep");
  return out;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir) {
  const ModelConfig cfg = load_config(config_path);
  TrafficDataset ds = dataset_for(cfg, data_dir);
  if (ds.num_nodes != cfg.num_nodes) {
    throw ConfigError("config expects " + std::to_string(cfg.num_nodes) +
                      " nodes but dataset '" + ds.name + "' has " +
                      std::to_string(ds.num_nodes));
  }
  const SplitResult splits =
      split_and_window(ds, cfg.input_steps, cfg.output_steps);

  Model model(cfg);
  TrainOptions opts;
  opts.verbose = true;
  opts.interval_minutes = ds.interval_minutes;
  const TrainReport report = train(model, splits, opts);

  fs::create_directories(out_dir);
  const std::string ckpt_path = (fs::path(out_dir) / "checkpoint.fsts").string();
  save_checkpoint_file(ckpt_path, model, splits.stats);
  const std::string report_path = (fs::path(out_dir) / "report.json").string();
  std::ofstream rf(report_path);
  rf << report.to_json(true, ds.interval_minutes).dump(2) << '\n';
  if (!rf) throw DataError("cannot write " + report_path);

  std::cout << "best epoch " << report.best_epoch << ", val MAE "
            << report.best_val_mae << ", test avg MAE " << report.test_average.mae
            << "\ncheckpoint: " << ckpt_path << "\nreport: " << report_path
            << std::endl;
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir) {
  LoadedCheckpoint loaded = load_checkpoint_file(ckpt_path);
  const ModelConfig& cfg = loaded.model.config();
  const auto paths = find_dataset(data_dir);
  TrafficDataset ds = clean(load_csv(paths.csv, paths.meta));
  if (ds.num_nodes != cfg.num_nodes) {
    throw ConfigError("checkpoint expects " + std::to_string(cfg.num_nodes) +
                      " nodes but dataset has " + std::to_string(ds.num_nodes));
  }
  // Normalization must match training, so the checkpoint stats override the
  // ones this file would produce.
  SplitResult splits = split_and_window(ds, cfg.input_steps, cfg.output_steps,
                                        &loaded.stats);
  const EvalResult r = evaluate(loaded.model, splits.test, loaded.stats,
                                report_horizons(cfg.output_steps));

  nlohmann::json j;
  j["dataset"] = ds.name;
  j["split"] = "test";
  j["horizons"] = nlohmann::json::array();
  for (const auto& h : r.horizons) {
    j["horizons"].push_back({{"steps", h.steps},
                             {"minutes", h.steps * std::size_t(ds.interval_minutes)},
                             {"mae", h.m.mae},
                             {"rmse", h.m.rmse},
                             {"mape_percent", h.m.mape_percent}});
  }
  j["average"] = {{"mae", r.average.mae},
                  {"rmse", r.average.rmse},
                  {"mape_percent", r.average.mape_percent}};
  std::cout << j.dump(2) << std::endl;
  return 0;
}

void emit_bench(const BenchResult& fast, const BenchResult& dense,
                const std::string& csv_path, const std::string& summary_path,
                const nlohmann::json& extra) {
  const std::string csv = bench_csv({fast, dense});
  if (csv_path.empty()) {
    std::cout << csv;
  } else {
    std::ofstream out(csv_path);
    out << csv;
    if (!out) throw DataError("cannot write " + csv_path);
  }
  nlohmann::json summary = extra;
  summary["fast_slope"] = fast.loglog_slope;
  summary["dense_slope"] = dense.loglog_slope;
  if (!summary_path.empty()) {
    std::ofstream out(summary_path);
    out << summary.dump(2) << '\n';
    if (!out) throw DataError("cannot write " + summary_path);
  }
  std::cerr << summary.dump() << std::endl;
}

int cmd_bench_graph(const std::string& sweep, std::size_t d_e, std::size_t t,
                    std::size_t h, int reps, int threads,
                    const std::string& csv_path, const std::string& summary_path) {
  GraphBenchConfig cfg;
  cfg.sweep = parse_sweep(sweep);
  cfg.d_e = d_e;
  cfg.t = t;
  cfg.h = h;
  cfg.reps = reps;
  cfg.threads = threads;
  const auto [fast, dense] = bench_graph_ops(cfg);
  nlohmann::json extra;
  extra["threads"] = threads;
  extra["flop_ratio_at_max_n"] =
      double(dense.points.back().flops) / double(fast.points.back().flops);
  emit_bench(fast, dense, csv_path, summary_path, extra);
  return 0;
}

int cmd_bench_kernel(const std::string& sweep, std::size_t t, std::size_t h,
                     std::size_t d, int reps, const std::string& csv_path,
                     const std::string& summary_path) {
  KernelBenchConfig cfg;
  cfg.sweep = parse_sweep(sweep);
  cfg.t = t;
  cfg.h = h;
  cfg.d = d;
  cfg.reps = reps;
  const auto [fast, dense] = bench_kernel(cfg);
  nlohmann::json extra;
  extra["flop_ratio"] =
      double(dense.points.back().flops) / double(fast.points.back().flops);
  extra["speedup_at_max_n"] =
      dense.points.back().median_ns / fast.points.back().median_ns;
  // Sanity row: at d = T*H/2 the factorization has no advantage.
  extra["ratio_when_d_is_half_th"] =
      double(kernel_flop_count(GraphMode::Dense, 1, t, h, 1)) /
      double(kernel_flop_count(GraphMode::Fast, 1, t, h, t * h / 2));
  emit_bench(fast, dense, csv_path, summary_path, extra);
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  const GradCheckReport report = run_gradcheck(seed);
  for (const auto& c : report.cases) {
    std::cout << (c.pass ? "[PASS] " : "[FAIL] ") << c.name << " max_rel_err "
              << c.max_rel_err << " (tol " << c.tolerance << ")\n";
  }
  if (!report.all_pass) {
    std::cerr << "gradcheck failed\n";
    return kExitNumeric;
  }
  return 0;
}

int cmd_synth(std::size_t nodes, std::size_t steps, std::uint64_t seed,
              int interval, const std::string& out_path) {
  SynthConfig cfg;
  cfg.nodes = nodes;
  cfg.steps = steps;
  cfg.interval_minutes = interval;
  const TrafficDataset ds = synth_generate(cfg, seed);
  fs::path meta = fs::path(out_path);
  meta.replace_extension(".json");
  write_csv(ds, out_path, meta.string());
  std::cout << "wrote " << out_path << " and " << meta.string() << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FasterSTS: spatio-temporal synchronous traffic forecasting"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir = ".";
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--config", config_path, "Model config JSON")->required();
  train_cmd->add_option("--data", data_dir, "Directory with CSV + JSON sidecar");
  train_cmd->add_option("--out", out_dir, "Output directory");

  std::string ckpt_path, eval_data_dir;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data_dir, "Directory with CSV + JSON sidecar")
      ->required();

  auto* bench_cmd = app.add_subcommand("bench", "Complexity benchmarks");
  bench_cmd->require_subcommand(1);
  std::string graph_sweep = "256,512,1024,2048,4096";
  std::size_t g_de = 8, g_t = 12, g_h = 32;
  int g_reps = 5, g_threads = 1;
  std::string g_csv, g_summary;
  auto* bench_graph = bench_cmd->add_subcommand("graph", "Fast vs dense node mixing");
  bench_graph->add_option("--sweep", graph_sweep, "Comma-separated node counts");
  bench_graph->add_option("--embed-dim", g_de, "Graph embedding width d_e");
  bench_graph->add_option("--steps", g_t, "Time steps T");
  bench_graph->add_option("--hidden", g_h, "Hidden channels H");
  bench_graph->add_option("--reps", g_reps, "Timed repetitions per size");
  bench_graph->add_option("--threads", g_threads,
                          "Thread-partitioned kernels (throughput curiosity; "
                          "slope claims are single-threaded)");
  bench_graph->add_option("--csv", g_csv, "Write CSV here instead of stdout");
  bench_graph->add_option("--summary", g_summary, "Write JSON summary here");

  std::string kernel_sweep = "2048";
  std::size_t k_t = 12, k_h = 32, k_d = 8;
  int k_reps = 5;
  std::string k_csv, k_summary;
  auto* bench_kernel_cmd =
      bench_cmd->add_subcommand("kernel", "Factorized vs dense kernel contraction");
  bench_kernel_cmd->add_option("--sweep", kernel_sweep, "Comma-separated node counts");
  bench_kernel_cmd->add_option("--steps", k_t, "Time steps T");
  bench_kernel_cmd->add_option("--hidden", k_h, "Hidden channels H");
  bench_kernel_cmd->add_option("--kernel-dim", k_d, "Kernel width d");
  bench_kernel_cmd->add_option("--reps", k_reps, "Timed repetitions per size");
  bench_kernel_cmd->add_option("--csv", k_csv, "Write CSV here instead of stdout");
  bench_kernel_cmd->add_option("--summary", k_summary, "Write JSON summary here");

  std::uint64_t gc_seed = 1;
  auto* gradcheck_cmd =
      app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  gradcheck_cmd->add_option("--seed", gc_seed, "RNG seed");

  std::size_t s_nodes = 8, s_steps = 2016;
  std::uint64_t s_seed = 1;
  int s_interval = 5;
  std::string s_out;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth_cmd->add_option("--nodes", s_nodes, "Node count")->required();
  synth_cmd->add_option("--steps", s_steps, "Time steps")->required();
  synth_cmd->add_option("--seed", s_seed, "RNG seed")->required();
  synth_cmd->add_option("--interval", s_interval, "Minutes per step");
  synth_cmd->add_option("--out", s_out, "Output CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (app.got_subcommand(train_cmd)) return cmd_train(config_path, data_dir, out_dir);
    if (app.got_subcommand(eval_cmd)) return cmd_eval(ckpt_path, eval_data_dir);
    if (app.got_subcommand(bench_cmd)) {
      if (bench_cmd->got_subcommand(bench_graph)) {
        return cmd_bench_graph(graph_sweep, g_de, g_t, g_h, g_reps, g_threads,
                               g_csv, g_summary);
      }
      return cmd_bench_kernel(kernel_sweep, k_t, k_h, k_d, k_reps, k_csv, k_summary);
    }
    if (app.got_subcommand(gradcheck_cmd)) return cmd_gradcheck(gc_seed);
    if (app.got_subcommand(synth_cmd)) {
      return cmd_synth(s_nodes, s_steps, s_seed, s_interval, s_out);
    }
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << std::endl;
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitData;
  }
  return kExitUsage;
}
