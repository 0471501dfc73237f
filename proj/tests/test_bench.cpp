#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "fsts/bench.hpp"

using namespace fsts;

TEST_CASE("theoretical flop ratios are exact") {
  // graph path at the headline sizes: 2N^2 / 4Nd_e = N / (2 d_e)
  const double ratio = double(flop_count(GraphMode::Dense, 1000, 8, 12, 32)) /
                       double(flop_count(GraphMode::Fast, 1000, 8, 12, 32));
  CHECK(ratio == 62.5);

  // kernel path: (T*H) / (2d) = 384/16 = 24
  const double kratio = double(kernel_flop_count(GraphMode::Dense, 1, 12, 32, 8)) /
                        double(kernel_flop_count(GraphMode::Fast, 1, 12, 32, 8));
  CHECK(kratio == 24.0);

  // sanity: d = T*H/2 leaves no advantage
  const double none = double(kernel_flop_count(GraphMode::Dense, 1, 12, 32, 1)) /
                      double(kernel_flop_count(GraphMode::Fast, 1, 12, 32, 192));
  CHECK(none == 1.0);
}

TEST_CASE("slope fit recovers known exponents") {
  std::vector<BenchPoint> quad, lin;
  for (std::size_t n : {128u, 256u, 512u, 1024u}) {
    quad.push_back({n, 3.0 * double(n) * double(n), 0, 0, 0});
    lin.push_back({n, 7.0 * double(n), 0, 0, 0});
  }
  CHECK(fit_loglog_slope(quad) == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(fit_loglog_slope(lin) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(fit_loglog_slope({}) == 0.0);
}

TEST_CASE("graph bench produces positive ordered timings and CSV schema") {
  GraphBenchConfig cfg;
  cfg.sweep = {16, 32, 64};
  cfg.t = 3;
  cfg.h = 4;
  cfg.d_e = 2;
  cfg.reps = 3;
  const auto [fast, dense] = bench_graph_ops(cfg);
  REQUIRE(fast.points.size() == 3);
  REQUIRE(dense.points.size() == 3);
  for (const auto& p : fast.points) {
    CHECK(p.median_ns > 0.0);
    CHECK(p.min_ns <= p.median_ns);
    CHECK(p.median_ns <= p.max_ns);
  }
  CHECK(fast.points[0].flops == flop_count(GraphMode::Fast, 16, 2, 3, 4));
  CHECK(dense.points[2].flops == flop_count(GraphMode::Dense, 64, 2, 3, 4));

  const std::string csv = bench_csv({fast, dense});
  std::istringstream is(csv);
  std::string header;
  std::getline(is, header);
  CHECK(header == "op,N,median_ns,flops,min_ns,max_ns");
  std::size_t rows = 0;
  for (std::string line; std::getline(is, line);) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == 6);
  CHECK(csv.find("graph_fast,16,") != std::string::npos);
  CHECK(csv.find("graph_dense,64,") != std::string::npos);
}

TEST_CASE("threaded throughput mode runs the same sweep") {
  GraphBenchConfig cfg;
  cfg.sweep = {32, 64};
  cfg.t = 2;
  cfg.h = 4;
  cfg.d_e = 2;
  cfg.reps = 2;
  cfg.threads = 2;
  const auto [fast, dense] = bench_graph_ops(cfg);
  REQUIRE(fast.points.size() == 2);
  REQUIRE(dense.points.size() == 2);
  for (const auto& p : fast.points) CHECK(p.median_ns > 0.0);
  for (const auto& p : dense.points) CHECK(p.median_ns > 0.0);
}

TEST_CASE("kernel bench reports both paths at one size") {
  KernelBenchConfig cfg;
  cfg.sweep = {64};
  cfg.t = 3;
  cfg.h = 4;
  cfg.d = 2;
  cfg.reps = 2;
  const auto [fast, dense] = bench_kernel(cfg);
  REQUIRE(fast.points.size() == 1);
  CHECK(fast.points[0].flops == kernel_flop_count(GraphMode::Fast, 64, 3, 4, 2));
  CHECK(dense.points[0].flops == kernel_flop_count(GraphMode::Dense, 64, 3, 4, 2));
  CHECK(fast.points[0].median_ns > 0.0);
  CHECK(dense.points[0].median_ns > 0.0);
}
