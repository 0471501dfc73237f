#include "fsts/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <new>
#include <sstream>
#include <thread>

namespace fsts {

namespace {

volatile double g_sink = 0.0;  // keeps timed results observable

void consume(double v) { g_sink = g_sink + v; }

template <typename F>
BenchPoint time_point(std::size_t n, std::uint64_t flops, int reps, F&& op) {
  op();  // warmup
  op();
  std::vector<double> ns(std::size_t(std::max(reps, 1)));
  for (auto& sample : ns) {
    const auto t0 = std::chrono::steady_clock::now();
    op();
    const auto t1 = std::chrono::steady_clock::now();
    sample = double(
        std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count());
  }
  std::sort(ns.begin(), ns.end());
  BenchPoint p;
  p.n = n;
  p.flops = flops;
  p.median_ns = ns[ns.size() / 2];
  p.min_ns = ns.front();
  p.max_ns = ns.back();
  return p;
}

// Splits [0, count) across worker threads; used only by the multi-threaded
// throughput mode, never by the single-threaded slope measurements.
template <typename F>
void parallel_chunks(std::size_t count, int threads, F&& body) {
  const std::size_t workers = std::size_t(std::max(threads, 1));
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (count + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = w * chunk;
    const std::size_t hi = std::min(count, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi]() { body(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

// Raw thread-partitioned kernels over the same buffers as the library ops.
void dense_apply_mt(const double* adj, const double* x, double* out,
                    std::size_t n, std::size_t f, int threads) {
  parallel_chunks(n, threads, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t j = lo; j < hi; ++j) {
      double* orow = out + j * f;
      std::fill(orow, orow + f, 0.0);
      const double* arow = adj + j * n;
      for (std::size_t i = 0; i < n; ++i) {
        const double av = arow[i];
        const double* xrow = x + i * f;
        for (std::size_t k = 0; k < f; ++k) orow[k] += av * xrow[k];
      }
    }
  });
}

void fast_apply_mt(const double* graphs, const double* proj_w,
                   const double* proj_b, const double* x, double* agg,
                   double* out, std::size_t n, std::size_t de, std::size_t t,
                   std::size_t h, int threads) {
  const std::size_t f = t * h;
  // aggregation: each worker owns a block of the d_e output slots
  parallel_chunks(de, threads, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t k = lo; k < hi; ++k) {
      double* arow = agg + k * f;
      std::fill(arow, arow + f, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double* xrow = x + i * f;
        const double* gph = graphs + i * de + k;  // [H,N,de] walked per h
        for (std::size_t tt = 0; tt < t; ++tt)
          for (std::size_t hh = 0; hh < h; ++hh)
            arow[tt * h + hh] += gph[hh * n * de] * xrow[tt * h + hh];
      }
    }
  });
  // projection: each worker owns a block of output nodes
  parallel_chunks(n, threads, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t j = lo; j < hi; ++j) {
      double* orow = out + j * f;
      std::fill(orow, orow + f, proj_b[j]);
      for (std::size_t k = 0; k < de; ++k) {
        const double coeff = proj_w[k * n + j];
        const double* arow = agg + k * f;
        for (std::size_t q = 0; q < f; ++q) orow[q] += coeff * arow[q];
      }
    }
  });
}

}  // namespace

double fit_loglog_slope(const std::vector<BenchPoint>& points) {
  if (points.size() < 2) return 0.0;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = double(points.size());
  for (const auto& p : points) {
    const double x = std::log(double(p.n));
    const double y = std::log(p.median_ns);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

std::pair<BenchResult, BenchResult> bench_graph_ops(const GraphBenchConfig& cfg) {
  if (cfg.sweep.empty()) throw ConfigError("bench: empty size sweep");
  BenchResult fast{"graph_fast", {}, 0.0};
  BenchResult dense{"graph_dense", {}, 0.0};
  std::mt19937_64 rng(cfg.seed);

  for (std::size_t n : cfg.sweep) {
    try {
      const Tensor x = Tensor::uniform({1, n, cfg.t, cfg.h}, -1.0, 1.0, rng);
      // Pre-built column-stochastic graphs: what a trained bank would apply.
      const Tensor graphs = softmax_columns(
          Tensor::uniform({cfg.h, n, cfg.d_e}, -1.0, 1.0, rng));
      const Tensor proj_w = Tensor::uniform({cfg.d_e, n}, -1.0, 1.0, rng);
      const Tensor proj_b = Tensor::uniform({n}, -1.0, 1.0, rng);
      const Tensor adj = Tensor::uniform({n, n}, -1.0, 1.0, rng);

      if (cfg.threads > 1) {
        const std::size_t f = cfg.t * cfg.h;
        std::vector<double> agg(cfg.d_e * f), out(n * f);
        fast.points.push_back(time_point(
            n, flop_count(GraphMode::Fast, n, cfg.d_e, cfg.t, cfg.h), cfg.reps,
            [&]() {
              fast_apply_mt(graphs.values().data(), proj_w.values().data(),
                            proj_b.values().data(), x.values().data(), agg.data(),
                            out.data(), n, cfg.d_e, cfg.t, cfg.h, cfg.threads);
              consume(out[0]);
            }));
        dense.points.push_back(time_point(
            n, flop_count(GraphMode::Dense, n, cfg.d_e, cfg.t, cfg.h), cfg.reps,
            [&]() {
              dense_apply_mt(adj.values().data(), x.values().data(), out.data(), n,
                             f, cfg.threads);
              consume(out[0]);
            }));
      } else {
        fast.points.push_back(time_point(
            n, flop_count(GraphMode::Fast, n, cfg.d_e, cfg.t, cfg.h), cfg.reps,
            [&]() {
              Tensor out = project_nodes(proj_w, proj_b, contract_nodes(graphs, x));
              consume(out.values()[0]);
            }));
        dense.points.push_back(time_point(
            n, flop_count(GraphMode::Dense, n, cfg.d_e, cfg.t, cfg.h), cfg.reps,
            [&]() {
              Tensor out = dense_graph_apply(adj, x);
              consume(out.values()[0]);
            }));
      }
    } catch (const std::bad_alloc&) {
      throw Error("bench: allocation failed at N=" + std::to_string(n) +
                  "; rerun with a smaller --sweep");
    }
  }
  fast.loglog_slope = fit_loglog_slope(fast.points);
  dense.loglog_slope = fit_loglog_slope(dense.points);
  return {fast, dense};
}

std::pair<BenchResult, BenchResult> bench_kernel(const KernelBenchConfig& cfg) {
  if (cfg.sweep.empty()) throw ConfigError("bench: empty size sweep");
  BenchResult fast{"kernel_fast", {}, 0.0};
  BenchResult dense{"kernel_dense", {}, 0.0};
  std::mt19937_64 rng(cfg.seed);
  const std::size_t th = cfg.t * cfg.h;

  for (std::size_t n : cfg.sweep) {
    try {
      const Tensor flat = Tensor::uniform({n, th}, -1.0, 1.0, rng);
      const Tensor psi = softmax_columns(Tensor::uniform({th, cfg.d}, -1.0, 1.0, rng));
      const Tensor out_w = Tensor::uniform({cfg.d, th}, -1.0, 1.0, rng);
      const Tensor out_b = Tensor::uniform({th}, -1.0, 1.0, rng);
      const Tensor kernel_dense =
          softmax_columns(Tensor::uniform({th, th}, -1.0, 1.0, rng));

      fast.points.push_back(time_point(
          n, kernel_flop_count(GraphMode::Fast, n, cfg.t, cfg.h, cfg.d), cfg.reps,
          [&]() {
            Tensor out = add(matmul(matmul(flat, psi), out_w), out_b);
            consume(out.values()[0]);
          }));
      dense.points.push_back(time_point(
          n, kernel_flop_count(GraphMode::Dense, n, cfg.t, cfg.h, cfg.d), cfg.reps,
          [&]() {
            Tensor out = matmul(flat, kernel_dense);
            consume(out.values()[0]);
          }));
    } catch (const std::bad_alloc&) {
      throw Error("bench: allocation failed at N=" + std::to_string(n) +
                  "; rerun with a smaller --sweep");
    }
  }
  fast.loglog_slope = fit_loglog_slope(fast.points);
  dense.loglog_slope = fit_loglog_slope(dense.points);
  return {fast, dense};
}

std::string bench_csv(const std::vector<BenchResult>& results) {
  std::ostringstream os;
  os << "op,N,median_ns,flops,min_ns,max_ns\n";
  for (const auto& r : results) {
    for (const auto& p : r.points) {
      os << r.op << ',' << p.n << ',' << std::llround(p.median_ns) << ','
         << p.flops << ',' << std::llround(p.min_ns) << ','
         << std::llround(p.max_ns) << '\n';
    }
  }
  return os.str();
}

}  // namespace fsts
