#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "fsts/data.hpp"

using namespace fsts;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name, const std::string& content)
      : path("/tmp/fsts_test_" + name) {
    std::ofstream out(path);
    out << content;
  }
  ~TempFile() { std::remove(path.c_str()); }
};

const char* kMeta =
    R"({"name":"unit","interval_minutes":5,"start":"2018-01-01T00:00:00"})";

}  // namespace

TEST_CASE("load_csv parses rows, header, and sidecar") {
  TempFile meta("m1.json", kMeta);
  SUBCASE("plain 3x2") {
    TempFile csv("d1.csv", "1,2\n3,4\n5,6\n");
    TrafficDataset ds = load_csv(csv.path, meta.path);
    CHECK(ds.num_steps == 3);
    CHECK(ds.num_nodes == 2);
    CHECK(ds.values == std::vector<double>{1, 2, 3, 4, 5, 6});
    CHECK(ds.name == "unit");
    CHECK(ds.start_day_of_week == 1);  // 2018-01-01 was a Monday
  }
  SUBCASE("non-numeric header row is skipped") {
    TempFile csv("d2.csv", "n0,n1\n1,2\n3,4\n");
    TrafficDataset ds = load_csv(csv.path, meta.path);
    CHECK(ds.num_steps == 2);
    CHECK(ds.values[0] == 1.0);
  }
  SUBCASE("ragged rows name the row number") {
    TempFile csv("d3.csv", "1,2\n3\n");
    try {
      load_csv(csv.path, meta.path);
      FAIL("expected throw");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("row 2") != std::string::npos);
    }
  }
  SUBCASE("missing sidecar field is a config error") {
    TempFile bad("m2.json", R"({"name":"x","interval_minutes":5})");
    TempFile csv("d4.csv", "1\n");
    try {
      load_csv(csv.path, bad.path);
      FAIL("expected throw");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("start") != std::string::npos);
    }
  }
  SUBCASE("empty cells read as missing") {
    TempFile csv("d5.csv", "1,\n2,3\n");
    TrafficDataset ds = load_csv(csv.path, meta.path);
    CHECK(std::isnan(ds.values[1]));
  }
}

TEST_CASE("time slots wrap across days and weeks") {
  TempFile meta("m3.json", kMeta);
  TempFile csv("d6.csv", "1\n2\n");
  TrafficDataset ds = load_csv(csv.path, meta.path);
  CHECK(ds.tod_slot(0) == 0);
  CHECK(ds.tod_slot(1) == 5);
  CHECK(ds.tod_slot(287) == 1435);
  CHECK(ds.tod_slot(288) == 0);  // 288 * 5 = 1440 wraps to the next day
  CHECK(ds.dow_slot(0) == 1);
  CHECK(ds.dow_slot(287) == 1);
  CHECK(ds.dow_slot(288) == 2);
  CHECK(ds.dow_slot(288 * 7) == 1);
}

TEST_CASE("clean interpolates gaps and fills edges") {
  TrafficDataset ds;
  ds.num_nodes = 1;
  ds.interval_minutes = 5;
  SUBCASE("midpoint") {
    ds.values = {1, std::nan(""), 3};
    ds.num_steps = 3;
    TrafficDataset c = clean(ds);
    CHECK(c.values == std::vector<double>{1, 2, 3});
  }
  SUBCASE("leading fill") {
    ds.values = {std::nan(""), 5, 5};
    ds.num_steps = 3;
    CHECK(clean(ds).values == std::vector<double>{5, 5, 5});
  }
  SUBCASE("trailing fill and negatives treated as missing") {
    ds.values = {4, -1, 6, std::nan("")};
    ds.num_steps = 4;
    CHECK(clean(ds).values == std::vector<double>{4, 5, 6, 6});
  }
  SUBCASE("node with no valid entries names itself") {
    ds.values = {std::nan(""), std::nan("")};
    ds.num_steps = 2;
    try {
      clean(ds);
      FAIL("expected throw");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("node 0") != std::string::npos);
    }
  }
}

TEST_CASE("clean touches exactly the corrupted fraction") {
  SynthConfig sc;
  sc.nodes = 4;
  sc.steps = 500;
  sc.diffusion = 0.0;
  sc.noise = 1.0;
  TrafficDataset ds = synth_generate(sc, 99);
  TrafficDataset corrupted = ds;
  std::mt19937_64 rng(100);
  std::uniform_real_distribution<double> u(0, 1);
  std::size_t corrupt_count = 0;
  for (auto& v : corrupted.values) {
    if (u(rng) < 0.05) {
      v = std::nan("");
      ++corrupt_count;
    }
  }
  TrafficDataset repaired = clean(corrupted);
  std::size_t altered = 0;
  for (std::size_t i = 0; i < ds.values.size(); ++i) {
    if (repaired.values[i] != corrupted.values[i] ||
        std::isnan(corrupted.values[i])) {
      ++altered;
    }
  }
  CHECK(altered == corrupt_count);
  for (double v : repaired.values) CHECK(std::isfinite(v));
}

TEST_CASE("split_and_window counts, stats, and invariants") {
  SynthConfig sc;
  sc.nodes = 3;
  sc.steps = 300;
  TrafficDataset ds = synth_generate(sc, 7);
  const std::size_t T = 12, tau = 12;
  SplitResult r = split_and_window(ds, T, tau);

  const std::size_t W = 300 - 24 + 1;
  CHECK(r.window_count == W);
  CHECK(r.train.size() == W * 6 / 10);
  CHECK(r.val.size() == W * 2 / 10);
  CHECK(r.test.size() == W - W * 6 / 10 - W * 2 / 10);

  // chronological, disjoint, exhaustive
  CHECK(r.train.window_start(r.train.size() - 1) < r.val.window_start(0));
  CHECK(r.val.window_start(r.val.size() - 1) < r.test.window_start(0));
  std::vector<bool> seen(W, false);
  auto mark = [&](const WindowedSplit& s) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      CHECK_FALSE(seen[s.window_start(i)]);
      seen[s.window_start(i)] = true;
    }
  };
  mark(r.train);
  mark(r.val);
  mark(r.test);
  for (bool b : seen) CHECK(b);

  // window adjacency: y starts right after x ends
  auto batch = r.val.make_batch_range(0, 2);
  const std::size_t w0 = r.val.window_start(0);
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(batch.y_raw.values()[j * tau] == ds.values[(w0 + T) * 3 + j]);
    CHECK(r.val.target_value(0, j, 0) == ds.values[(w0 + T) * 3 + j]);
    CHECK(r.val.last_input_value(0, j) == ds.values[(w0 + T - 1) * 3 + j]);
  }

  // inputs are normalized with train stats; denormalizing recovers the raw data
  for (std::size_t b = 0; b < 2; ++b) {
    const std::size_t wb = r.val.window_start(b);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < 3; ++j) {
        const double got =
            r.stats.denormalize(batch.x.values()[((b * T + t) * 3 + j)]);
        CHECK(std::abs(got - ds.values[(wb + t) * 3 + j]) < 1e-9);
      }
  }
  const double v = 123.456;
  CHECK(std::abs(r.stats.denormalize(r.stats.normalize(v)) - v) < 1e-12);

  // slot indices follow the dataset calendar
  CHECK(batch.tod.values[0] == ds.tod_slot(w0));
  CHECK(batch.dow.values[0] == ds.dow_slot(w0));
}

TEST_CASE("degenerate splits surface as errors downstream") {
  SynthConfig sc;
  sc.nodes = 2;
  sc.steps = 24;  // exactly one window -> zero train samples
  TrafficDataset ds = synth_generate(sc, 8);
  CHECK_THROWS_AS(split_and_window(ds, 12, 12), DataError);
  sc.steps = 23;
  CHECK_THROWS_AS(split_and_window(synth_generate(sc, 8), 12, 12), DataError);
}

TEST_CASE("floor-split arithmetic agrees with enumeration") {
  for (std::size_t W : {1u, 2u, 5u, 9u, 10u, 11u, 16969u}) {
    const std::size_t n_train = W * 6 / 10, n_val = W * 2 / 10;
    CHECK(n_train == std::size_t(std::floor(0.6 * double(W))));
    CHECK(n_val == std::size_t(std::floor(0.2 * double(W))));
    CHECK(n_train + n_val <= W);
  }
}

TEST_CASE("synthetic generator is deterministic and periodic without noise") {
  SynthConfig sc;
  sc.nodes = 8;
  sc.steps = 2016;
  const auto t0 = std::chrono::steady_clock::now();
  TrafficDataset a = synth_generate(sc, 42);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(secs < 1.0);
  TrafficDataset b = synth_generate(sc, 42);
  CHECK(a.values == b.values);
  TrafficDataset c = synth_generate(sc, 43);
  CHECK(a.values != c.values);

  SynthConfig quiet = sc;
  quiet.diffusion = 0.0;
  quiet.noise = 0.0;
  TrafficDataset p = synth_generate(quiet, 42);
  const std::size_t day = 1440 / 5;
  for (std::size_t t = 0; t + day < p.num_steps; t += 37) {
    for (std::size_t j = 0; j < p.num_nodes; ++j) {
      CHECK(p.at(t, j) == p.at(t + day, j));
    }
  }
  for (double v : p.values) CHECK(v >= 0.0);
}

TEST_CASE("write_csv and load_csv round trip") {
  SynthConfig sc;
  sc.nodes = 3;
  sc.steps = 50;
  TrafficDataset ds = synth_generate(sc, 5);
  write_csv(ds, "/tmp/fsts_test_rt.csv", "/tmp/fsts_test_rt.json");
  TrafficDataset back = load_csv("/tmp/fsts_test_rt.csv", "/tmp/fsts_test_rt.json");
  CHECK(back.num_steps == 50);
  CHECK(back.num_nodes == 3);
  CHECK(back.interval_minutes == 5);
  double max_diff = 0.0;
  for (std::size_t i = 0; i < ds.values.size(); ++i) {
    max_diff = std::max(max_diff, std::abs(ds.values[i] - back.values[i]));
  }
  CHECK(max_diff == 0.0);  // %.17g round-trips doubles exactly
  std::remove("/tmp/fsts_test_rt.csv");
  std::remove("/tmp/fsts_test_rt.json");
}
