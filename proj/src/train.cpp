#include "fsts/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <numeric>

namespace fsts {

OptimState OptimState::init(Model& model, double lr) {
  OptimState s;
  s.lr = lr;
  model.visit_params([&](const std::string&, Tensor& t) {
    s.m.emplace_back(t.numel(), 0.0);
    s.v.emplace_back(t.numel(), 0.0);
  });
  return s;
}

void OptimState::apply(Model& model, double clip_norm) {
  ++step;
  double sq = 0.0;
  model.visit_params([&](const std::string&, Tensor& t) {
    if (!t.has_grad()) return;
    for (double g : t.grad()) sq += g * g;
  });
  const double norm = std::sqrt(sq);
  const double scale = norm > clip_norm ? clip_norm / norm : 1.0;

  const double bc1 = 1.0 - std::pow(beta1, double(step));
  const double bc2 = 1.0 - std::pow(beta2, double(step));
  std::size_t i = 0;
  model.visit_params([&](const std::string&, Tensor& t) {
    auto& mi = m[i];
    auto& vi = v[i];
    ++i;
    const double* g = t.has_grad() ? t.grad().data() : nullptr;
    auto& p = t.values();
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g ? g[k] * scale : 0.0;
      mi[k] = beta1 * mi[k] + (1.0 - beta1) * gk;
      vi[k] = beta2 * vi[k] + (1.0 - beta2) * gk * gk;
      const double mhat = mi[k] / bc1;
      const double vhat = vi[k] / bc2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  });
}

void zero_grads(Model& model) {
  model.visit_params([](const std::string&, Tensor& t) { t.clear_grad(); });
}

namespace {

Tensor normalize_targets(const Tensor& y_raw, const NormStats& stats) {
  std::vector<double> v = y_raw.values();
  for (auto& x : v) x = stats.normalize(x);
  return Tensor(y_raw.shape(), std::move(v));
}

struct StepAccum {
  double abs_sum = 0.0, sq_sum = 0.0, pct_sum = 0.0;
  std::size_t pct_count = 0, count = 0;

  void add(double pred, double target) {
    const double diff = target - pred;
    abs_sum += std::abs(diff);
    sq_sum += diff * diff;
    if (std::abs(target) >= 1.0) {
      pct_sum += std::abs(diff / target);
      ++pct_count;
    }
    ++count;
  }
};

Metrics to_metrics(const StepAccum& a) {
  Metrics m;
  m.mae = a.abs_sum / double(a.count);
  m.rmse = std::sqrt(a.sq_sum / double(a.count));
  m.mape_percent = a.pct_count
                       ? a.pct_sum / double(a.pct_count) * 100.0
                       : std::numeric_limits<double>::quiet_NaN();
  return m;
}

StepAccum merge(const std::vector<StepAccum>& per_step) {
  StepAccum total;
  for (const auto& a : per_step) {
    total.abs_sum += a.abs_sum;
    total.sq_sum += a.sq_sum;
    total.pct_sum += a.pct_sum;
    total.pct_count += a.pct_count;
    total.count += a.count;
  }
  return total;
}

}  // namespace

EvalResult evaluate(const Model& model, const WindowedSplit& split,
                    const NormStats& stats,
                    const std::vector<std::size_t>& horizons,
                    std::size_t eval_batch) {
  if (split.empty()) throw DataError("evaluate: empty split");
  const std::size_t tau = model.config().output_steps;
  std::vector<StepAccum> per_step(tau);

  for (std::size_t first = 0; first < split.size(); first += eval_batch) {
    const std::size_t count = std::min(eval_batch, split.size() - first);
    const auto batch = split.make_batch_range(first, count);
    const Tensor pred = model.forward(batch.x, batch.tod, batch.dow);
    const auto& pv = pred.values();
    const auto& yv = batch.y_raw.values();
    const std::size_t n = pv.size();
    for (std::size_t i = 0; i < n; ++i) {
      per_step[i % tau].add(stats.denormalize(pv[i]), yv[i]);
    }
  }

  EvalResult r;
  for (std::size_t h : horizons) {
    if (h == 0 || h > tau) throw ConfigError("evaluate: horizon out of range");
    r.horizons.push_back({h, to_metrics(per_step[h - 1])});
  }
  r.average = to_metrics(merge(per_step));
  return r;
}

EvalResult persistence_baseline(const WindowedSplit& split,
                                const std::vector<std::size_t>& horizons) {
  if (split.empty()) throw DataError("persistence_baseline: empty split");
  // tau and node count are implied by the first sample.
  const auto probe = split.make_batch_range(0, 1);
  const std::size_t N = probe.y_raw.dim(1), tau = probe.y_raw.dim(2);

  std::vector<StepAccum> per_step(tau);
  for (std::size_t i = 0; i < split.size(); ++i) {
    for (std::size_t j = 0; j < N; ++j) {
      const double last = split.last_input_value(i, j);
      for (std::size_t h = 0; h < tau; ++h) {
        per_step[h].add(last, split.target_value(i, j, h));
      }
    }
  }
  EvalResult r;
  for (std::size_t h : horizons) {
    if (h == 0 || h > tau) throw ConfigError("persistence_baseline: bad horizon");
    r.horizons.push_back({h, to_metrics(per_step[h - 1])});
  }
  r.average = to_metrics(merge(per_step));
  return r;
}

Model apply_ablation(const ModelConfig& cfg) { return Model(cfg); }

std::vector<std::size_t> report_horizons(std::size_t output_steps) {
  std::vector<std::size_t> horizons;
  for (std::size_t h : {std::size_t{3}, std::size_t{6}, std::size_t{12}}) {
    if (h <= output_steps) horizons.push_back(h);
  }
  if (horizons.empty()) horizons.push_back(output_steps);
  return horizons;
}

nlohmann::json TrainReport::to_json(bool include_wall_clock,
                                    int interval_minutes) const {
  nlohmann::json j;
  j["epochs"] = nlohmann::json::array();
  for (const auto& e : epochs) {
    nlohmann::json je{{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"val_mae", e.val.mae},
                      {"val_rmse", e.val.rmse},
                      {"val_mape_percent", e.val.mape_percent}};
    if (include_wall_clock) je["wall_seconds"] = e.wall_seconds;
    j["epochs"].push_back(std::move(je));
  }
  j["best_epoch"] = best_epoch;
  j["best_val_mae"] = best_val_mae;
  nlohmann::json horizons = nlohmann::json::array();
  for (const auto& h : test_horizons) {
    horizons.push_back({{"steps", h.steps},
                        {"minutes", h.steps * std::size_t(interval_minutes)},
                        {"mae", h.m.mae},
                        {"rmse", h.m.rmse},
                        {"mape_percent", h.m.mape_percent}});
  }
  j["test"] = {{"horizons", std::move(horizons)},
               {"average",
                {{"mae", test_average.mae},
                 {"rmse", test_average.rmse},
                 {"mape_percent", test_average.mape_percent}}}};
  if (include_wall_clock) j["total_wall_seconds"] = total_wall_seconds;
  return j;
}

TrainReport train(Model& model, const SplitResult& splits,
                  const TrainOptions& opts) {
  const ModelConfig& cfg = model.config();
  if (splits.train.empty()) throw DataError("train: empty training split");
  if (splits.val.empty()) throw DataError("train: empty validation split");

  OptimState opt = OptimState::init(model, cfg.lr);
  std::vector<std::size_t> order(splits.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainReport report;
  std::vector<std::vector<double>> best_params;
  const std::size_t max_epochs =
      opts.max_epochs_override ? opts.max_epochs_override : cfg.epochs;

  const auto run_start = std::chrono::steady_clock::now();
  for (std::size_t epoch = 1; epoch <= max_epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    std::mt19937_64 shuffle_rng(cfg.seed + epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    std::size_t sample_count = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - first);
      const std::span<const std::size_t> ids(order.data() + first, count);
      const auto batch = splits.train.make_batch(ids);
      const Tensor y_norm = normalize_targets(batch.y_raw, splits.stats);
      double batch_loss = 0.0;
      try {
        GradientTape tape;
        const Tensor pred = model.forward(batch.x, batch.tod, batch.dow);
        const Tensor loss = mae_loss(pred, y_norm);
        batch_loss = loss.item();
        tape.backward(loss);
      } catch (const NumericError& e) {
        throw NumericError("train: diverged at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(first / cfg.batch_size) +
                           ": " + e.what());
      }
      opt.apply(model, cfg.clip_norm);
      zero_grads(model);
      loss_sum += batch_loss * double(count);
      sample_count += count;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / double(sample_count);
    rec.val = evaluate(model, splits.val, splits.stats, {}, opts.eval_batch).average;
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start)
            .count();
    report.epochs.push_back(rec);
    if (opts.verbose) {
      std::cerr << "epoch " << epoch << " train_loss " << rec.train_loss
                << " val_mae " << rec.val.mae << " (" << rec.wall_seconds
                << " s)\n";
    }

    if (rec.val.mae < report.best_val_mae) {
      report.best_val_mae = rec.val.mae;
      report.best_epoch = epoch;
      best_params.clear();
      model.visit_params([&](const std::string&, Tensor& t) {
        best_params.push_back(t.values());
      });
    }

    if (opts.stop_callback && opts.stop_callback(rec)) break;
    if (epoch - report.best_epoch >= cfg.patience) break;
  }

  if (!best_params.empty()) {
    std::size_t i = 0;
    model.visit_params(
        [&](const std::string&, Tensor& t) { t.values() = best_params[i++]; });
  }

  if (!splits.test.empty()) {
    const EvalResult test = evaluate(model, splits.test, splits.stats,
                                     report_horizons(cfg.output_steps),
                                     opts.eval_batch);
    report.test_horizons = test.horizons;
    report.test_average = test.average;
  }
  report.total_wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - run_start)
          .count();
  return report;
}

}  // namespace fsts
