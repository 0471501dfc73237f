#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fsts/graph.hpp"

namespace fsts {

struct BenchPoint {
  std::size_t n = 0;
  double median_ns = 0.0;
  double min_ns = 0.0;
  double max_ns = 0.0;
  std::uint64_t flops = 0;
};

struct BenchResult {
  std::string op;
  std::vector<BenchPoint> points;
  double loglog_slope = 0.0;  // least squares over (log n, log median)
};

struct GraphBenchConfig {
  std::vector<std::size_t> sweep{256, 512, 1024, 2048, 4096};
  std::size_t d_e = 8;
  std::size_t t = 12;
  std::size_t h = 32;
  int reps = 5;     // timed repetitions per size, after 2 warmups
  int threads = 1;  // >1 times thread-partitioned kernels (throughput only;
                    // slope claims are validated single-threaded)
  std::uint64_t seed = 42;
};

// Times the factorized aggregate+project pipeline against the full N x N
// node mixing on the same random signal.
std::pair<BenchResult, BenchResult> bench_graph_ops(const GraphBenchConfig& cfg);

struct KernelBenchConfig {
  std::vector<std::size_t> sweep{2048};
  std::size_t t = 12;
  std::size_t h = 32;
  std::size_t d = 8;
  int reps = 5;
  std::uint64_t seed = 42;
};

// Times the factorized kernel contraction ([N,TH]x[TH,d] then [N,d]x[d,TH])
// against one dense [N,TH]x[TH,TH] kernel application.
std::pair<BenchResult, BenchResult> bench_kernel(const KernelBenchConfig& cfg);

double fit_loglog_slope(const std::vector<BenchPoint>& points);

// CSV rows "op,N,median_ns,min_ns,max_ns,flops" with a header line.
std::string bench_csv(const std::vector<BenchResult>& results);

}  // namespace fsts
