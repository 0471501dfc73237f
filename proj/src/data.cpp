#include "fsts/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string_view>

#include <json.hpp>

namespace fsts {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Days since 1970-01-01 for a proleptic Gregorian date.
std::int64_t days_from_civil(int y, unsigned m, unsigned d) {
  y -= m <= 2;
  const int era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097LL + static_cast<std::int64_t>(doe) - 719468;
}

void parse_start_timestamp(const std::string& s, int& minute_of_day,
                           int& day_of_week) {
  int y = 0, mo = 0, d = 0, hh = 0, mi = 0, ss = 0;
  const int n = std::sscanf(s.c_str(), "%d-%d-%d%*1[T ]%d:%d:%d", &y, &mo, &d,
                            &hh, &mi, &ss);
  if (n < 5 || mo < 1 || mo > 12 || d < 1 || d > 31 || hh < 0 || hh > 23 ||
      mi < 0 || mi > 59) {
    throw ConfigError("sidecar: start must look like 2018-01-01T00:00:00, got '" +
                      s + "'");
  }
  minute_of_day = hh * 60 + mi;
  const std::int64_t days = days_from_civil(y, unsigned(mo), unsigned(d));
  day_of_week = int(((days % 7) + 11) % 7);  // 1970-01-01 was a Thursday
}

bool parse_double(std::string_view sv, double& out) {
  const char* begin = sv.data();
  const char* end = begin + sv.size();
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end;
}

std::string_view trim(std::string_view sv) {
  while (!sv.empty() && (sv.front() == ' ' || sv.front() == '\t')) sv.remove_prefix(1);
  while (!sv.empty() &&
         (sv.back() == ' ' || sv.back() == '\t' || sv.back() == '\r'))
    sv.remove_suffix(1);
  return sv;
}

std::vector<std::string_view> split_row(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t pos = 0;
  while (true) {
    const std::size_t comma = line.find(',', pos);
    if (comma == std::string_view::npos) {
      cells.push_back(trim(line.substr(pos)));
      break;
    }
    cells.push_back(trim(line.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  return cells;
}

}  // namespace

int TrafficDataset::tod_slot(std::size_t step) const {
  const std::int64_t total =
      start_minute_of_day + std::int64_t(step) * interval_minutes;
  return int(total % 1440);
}

int TrafficDataset::dow_slot(std::size_t step) const {
  const std::int64_t total =
      start_minute_of_day + std::int64_t(step) * interval_minutes;
  return int((start_day_of_week + total / 1440) % 7);
}

TrafficDataset load_csv(const std::string& csv_path, const std::string& meta_path) {
  std::ifstream meta_in(meta_path);
  if (!meta_in) throw DataError("cannot open sidecar: " + meta_path);
  nlohmann::json meta;
  try {
    meta_in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("sidecar: invalid JSON in " + meta_path + ": " + e.what());
  }
  for (const char* key : {"name", "interval_minutes", "start"}) {
    if (!meta.contains(key)) {
      throw ConfigError("sidecar: missing required field '" + std::string(key) +
                        "' in " + meta_path);
    }
  }

  TrafficDataset ds;
  ds.name = meta.at("name").get<std::string>();
  ds.interval_minutes = meta.at("interval_minutes").get<int>();
  if (ds.interval_minutes <= 0 || 1440 % ds.interval_minutes != 0) {
    throw ConfigError("sidecar: interval_minutes must divide 1440");
  }
  ds.start_rfc3339 = meta.at("start").get<std::string>();
  parse_start_timestamp(ds.start_rfc3339, ds.start_minute_of_day,
                        ds.start_day_of_week);
  if (meta.contains("missing_sentinel")) {
    ds.has_missing_sentinel = true;
    ds.missing_sentinel = meta.at("missing_sentinel").get<double>();
  }

  std::ifstream in(csv_path);
  if (!in) throw DataError("cannot open CSV: " + csv_path);
  std::string line;
  std::size_t row_number = 0;
  bool first_data_row = true;
  while (std::getline(in, line)) {
    ++row_number;
    if (trim(line).empty()) continue;
    const auto cells = split_row(line);
    if (first_data_row) {
      // A row with any non-numeric, non-empty cell is a header; skip it.
      bool header = false;
      for (auto c : cells) {
        double v;
        if (!c.empty() && !parse_double(c, v)) {
          header = true;
          break;
        }
      }
      if (header) continue;
      ds.num_nodes = cells.size();
      first_data_row = false;
    }
    if (cells.size() != ds.num_nodes) {
      throw DataError("CSV row " + std::to_string(row_number) + " has " +
                      std::to_string(cells.size()) + " columns, expected " +
                      std::to_string(ds.num_nodes));
    }
    for (auto c : cells) {
      if (c.empty()) {
        ds.values.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      double v;
      if (!parse_double(c, v)) {
        throw DataError("CSV row " + std::to_string(row_number) +
                        ": cannot parse value '" + std::string(c) + "'");
      }
      ds.values.push_back(v);
    }
    ++ds.num_steps;
  }
  if (ds.num_steps == 0) throw DataError("CSV has no data rows: " + csv_path);
  return ds;
}

TrafficDataset clean(TrafficDataset ds) {
  const std::size_t S = ds.num_steps, N = ds.num_nodes;
  std::vector<std::size_t> valid;
  for (std::size_t j = 0; j < N; ++j) {
    valid.clear();
    for (std::size_t s = 0; s < S; ++s) {
      const double v = ds.values[s * N + j];
      const bool bad = !std::isfinite(v) || v < 0.0 ||
                       (ds.has_missing_sentinel && v == ds.missing_sentinel);
      if (!bad) valid.push_back(s);
    }
    if (valid.empty()) {
      throw DataError("clean: node " + std::to_string(j) +
                      " has no valid samples");
    }
    for (std::size_t s = 0; s < valid.front(); ++s) {
      ds.values[s * N + j] = ds.values[valid.front() * N + j];
    }
    for (std::size_t s = valid.back() + 1; s < S; ++s) {
      ds.values[s * N + j] = ds.values[valid.back() * N + j];
    }
    for (std::size_t k = 0; k + 1 < valid.size(); ++k) {
      const std::size_t a = valid[k], b = valid[k + 1];
      if (b == a + 1) continue;
      const double va = ds.values[a * N + j], vb = ds.values[b * N + j];
      for (std::size_t s = a + 1; s < b; ++s) {
        const double frac = double(s - a) / double(b - a);
        ds.values[s * N + j] = va + (vb - va) * frac;
      }
    }
  }
  return ds;
}

namespace detail {

struct SeriesStore {
  std::size_t S = 0, N = 0, T = 0, tau = 0;
  std::vector<double> raw;
  std::vector<double> norm;
  std::vector<int> tod, dow;
  NormStats stats;
};

}  // namespace detail

WindowedSplit::WindowedSplit(std::shared_ptr<const detail::SeriesStore> store,
                             std::vector<std::size_t> starts, SplitRole role)
    : store_(std::move(store)), starts_(std::move(starts)), role_(role) {}

WindowedSplit::Batch WindowedSplit::make_batch(
    std::span<const std::size_t> sample_ids) const {
  if (!store_) throw DataError("windowed split: not initialized");
  const auto& st = *store_;
  const std::size_t B = sample_ids.size(), T = st.T, N = st.N, tau = st.tau;
  Batch batch;
  std::vector<double> x(B * T * N);
  std::vector<double> y(B * N * tau);
  std::vector<std::int64_t> tod(B * T), dow(B * T);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t w = starts_.at(sample_ids[b]);
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t s = w + t;
      std::copy(st.norm.begin() + s * N, st.norm.begin() + (s + 1) * N,
                x.begin() + (b * T + t) * N);
      tod[b * T + t] = st.tod[s];
      dow[b * T + t] = st.dow[s];
    }
    for (std::size_t h = 0; h < tau; ++h) {
      const std::size_t s = w + T + h;
      for (std::size_t j = 0; j < N; ++j) {
        y[(b * N + j) * tau + h] = st.raw[s * N + j];
      }
    }
  }
  batch.x = Tensor({B, T, N, 1}, std::move(x));
  batch.y_raw = Tensor({B, N, tau}, std::move(y));
  batch.tod = IntTensor({B, T}, std::move(tod));
  batch.dow = IntTensor({B, T}, std::move(dow));
  return batch;
}

WindowedSplit::Batch WindowedSplit::make_batch_range(std::size_t first,
                                                     std::size_t count) const {
  std::vector<std::size_t> ids(count);
  for (std::size_t i = 0; i < count; ++i) ids[i] = first + i;
  return make_batch(ids);
}

double WindowedSplit::last_input_value(std::size_t i, std::size_t node) const {
  const std::size_t w = starts_.at(i);
  return store_->raw[(w + store_->T - 1) * store_->N + node];
}

double WindowedSplit::target_value(std::size_t i, std::size_t node,
                                   std::size_t h) const {
  const std::size_t w = starts_.at(i);
  return store_->raw[(w + store_->T + h) * store_->N + node];
}

SplitResult split_and_window(const TrafficDataset& ds, std::size_t input_steps,
                             std::size_t output_steps,
                             const NormStats* stats_override) {
  const std::size_t S = ds.num_steps, N = ds.num_nodes;
  const std::size_t T = input_steps, tau = output_steps;
  if (T == 0 || tau == 0) throw ConfigError("split: window sizes must be positive");
  if (S < T + tau) {
    throw DataError("split: series has " + std::to_string(S) +
                    " steps, need at least " + std::to_string(T + tau));
  }
  for (double v : ds.values) {
    if (!std::isfinite(v)) {
      throw DataError("split: series contains non-finite values; run clean first");
    }
  }
  const std::size_t W = S - T - tau + 1;
  const std::size_t n_train = W * 6 / 10;
  const std::size_t n_val = W * 2 / 10;
  const std::size_t n_test = W - n_train - n_val;

  NormStats stats;
  if (stats_override) {
    if (!(stats_override->std > 0.0)) {
      throw ConfigError("split: override stats must have std > 0");
    }
    stats = *stats_override;
  } else {
    // Train-window statistics, each window counted (overlaps weigh interior
    // steps more, matching "stats from the train input windows").
    auto window_weight = [&](std::size_t s) -> std::size_t {
      if (n_train == 0) return 0;
      const std::size_t lo = s >= T - 1 ? s - (T - 1) : 0;
      const std::size_t hi = std::min(s, n_train - 1);
      return hi >= lo ? hi - lo + 1 : 0;
    };
    double wsum = 0.0, mean = 0.0;
    for (std::size_t s = 0; s < S; ++s) {
      const std::size_t wgt = window_weight(s);
      if (!wgt) continue;
      wsum += double(wgt) * double(N);
      for (std::size_t j = 0; j < N; ++j) mean += double(wgt) * ds.values[s * N + j];
    }
    if (wsum == 0.0) throw DataError("split: no training windows");
    mean /= wsum;
    double var = 0.0;
    for (std::size_t s = 0; s < S; ++s) {
      const std::size_t wgt = window_weight(s);
      if (!wgt) continue;
      for (std::size_t j = 0; j < N; ++j) {
        const double d = ds.values[s * N + j] - mean;
        var += double(wgt) * d * d;
      }
    }
    var /= wsum;
    if (!(var > 0.0)) throw DataError("split: training data has zero variance");
    stats.mean = mean;
    stats.std = std::sqrt(var);
  }

  auto store = std::make_shared<detail::SeriesStore>();
  store->S = S;
  store->N = N;
  store->T = T;
  store->tau = tau;
  store->stats = stats;
  store->raw = ds.values;
  store->norm.resize(S * N);
  for (std::size_t i = 0; i < S * N; ++i) {
    store->norm[i] = store->stats.normalize(ds.values[i]);
  }
  store->tod.resize(S);
  store->dow.resize(S);
  for (std::size_t s = 0; s < S; ++s) {
    store->tod[s] = ds.tod_slot(s);
    store->dow[s] = ds.dow_slot(s);
  }

  auto make_starts = [](std::size_t first, std::size_t count) {
    std::vector<std::size_t> v(count);
    for (std::size_t i = 0; i < count; ++i) v[i] = first + i;
    return v;
  };
  SplitResult result;
  result.stats = store->stats;
  result.window_count = W;
  result.train = WindowedSplit(store, make_starts(0, n_train), SplitRole::Train);
  result.val = WindowedSplit(store, make_starts(n_train, n_val), SplitRole::Val);
  result.test =
      WindowedSplit(store, make_starts(n_train + n_val, n_test), SplitRole::Test);
  return result;
}

TrafficDataset synth_generate(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.nodes == 0 || cfg.steps == 0) {
    throw ConfigError("synth: nodes and steps must be positive");
  }
  if (cfg.interval_minutes <= 0 || 1440 % cfg.interval_minutes != 0) {
    throw ConfigError("synth: interval_minutes must divide 1440");
  }
  const std::size_t N = cfg.nodes, S = cfg.steps;
  const std::size_t day_steps = std::size_t(1440 / cfg.interval_minutes);
  const std::size_t week_steps = 7 * day_steps;

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * kPi);
  std::uniform_real_distribution<double> amp_dist(0.85, 1.15);
  std::uniform_real_distribution<double> base_dist(0.9, 1.1);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<double> phase(N), amp(N), base(N);
  for (std::size_t i = 0; i < N; ++i) phase[i] = phase_dist(rng);
  for (std::size_t i = 0; i < N; ++i) amp[i] = cfg.daily_amplitude * amp_dist(rng);
  for (std::size_t i = 0; i < N; ++i) base[i] = cfg.base * base_dist(rng);

  TrafficDataset ds;
  ds.name = cfg.name;
  ds.num_nodes = N;
  ds.num_steps = S;
  ds.interval_minutes = cfg.interval_minutes;
  ds.start_rfc3339 = "2018-01-01T00:00:00";
  parse_start_timestamp(ds.start_rfc3339, ds.start_minute_of_day,
                        ds.start_day_of_week);
  ds.values.resize(S * N);

  std::vector<double> diff_state(N, 0.0), mixed(N);
  for (std::size_t t = 0; t < S; ++t) {
    const double weekly =
        1.0 + cfg.weekly_modulation * std::sin(2.0 * kPi * double(t) / double(week_steps));
    if (cfg.diffusion > 0.0) {
      // Ring-coupled AR(1): each node leaks into its two neighbours.
      for (std::size_t i = 0; i < N; ++i) {
        const double left = diff_state[(i + N - 1) % N];
        const double right = diff_state[(i + 1) % N];
        mixed[i] = 0.5 * diff_state[i] + 0.25 * (left + right);
      }
      for (std::size_t i = 0; i < N; ++i) {
        diff_state[i] = 0.95 * mixed[i] + cfg.diffusion * normal(rng);
      }
    }
    const double angle_base = 2.0 * kPi * double(t % day_steps) / double(day_steps);
    for (std::size_t i = 0; i < N; ++i) {
      const double det = base[i] + amp[i] * std::sin(angle_base + phase[i]);
      const double eps = cfg.noise > 0.0 ? cfg.noise * normal(rng) : 0.0;
      ds.values[t * N + i] = std::max(0.0, det + weekly * (diff_state[i] + eps));
    }
  }
  return ds;
}

void write_csv(const TrafficDataset& ds, const std::string& csv_path,
               const std::string& meta_path) {
  std::ofstream out(csv_path);
  if (!out) throw DataError("cannot write CSV: " + csv_path);
  for (std::size_t j = 0; j < ds.num_nodes; ++j) {
    if (j) out << ',';
    out << 'n' << j;
  }
  out << '\n';
  char buf[40];
  for (std::size_t s = 0; s < ds.num_steps; ++s) {
    for (std::size_t j = 0; j < ds.num_nodes; ++j) {
      if (j) out << ',';
      std::snprintf(buf, sizeof buf, "%.17g", ds.values[s * ds.num_nodes + j]);
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw DataError("write failed: " + csv_path);

  nlohmann::json meta{{"name", ds.name},
                      {"interval_minutes", ds.interval_minutes},
                      {"start", ds.start_rfc3339}};
  if (ds.has_missing_sentinel) meta["missing_sentinel"] = ds.missing_sentinel;
  std::ofstream mo(meta_path);
  if (!mo) throw DataError("cannot write sidecar: " + meta_path);
  mo << meta.dump(2) << '\n';
}

}  // namespace fsts
