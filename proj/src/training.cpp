#include "geomf/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>
#include <random>
#include <thread>

#include <json.hpp>

namespace geomf {

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Runs fn(i) for i in [0, count) on up to `threads` threads. Work is assigned
// round-robin, and the first exception (by index) is rethrown.
void parallel_for(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(std::max(1u, threads), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < count; i += workers) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

double squared_error_sum(std::span<const double> pred, std::span<const double> target) {
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - target[i];
    s += e * e;
  }
  return s;
}

Tensor positions_tensor(const std::vector<const std::vector<Vec3>*>& rows) {
  const std::size_t n = rows.empty() ? 0 : rows.front()->size();
  std::vector<double> v;
  v.reserve(rows.size() * n * 3);
  for (const auto* r : rows) {
    if (r->size() != n) throw ValidationError("batch mixes systems of different sizes");
    for (const Vec3& p : *r) v.insert(v.end(), p.begin(), p.end());
  }
  return Tensor({rows.size(), n, 3}, std::move(v));
}

Batch slice(const Batch& batch, std::size_t begin, std::size_t end) {
  Batch out;
  out.systems.assign(batch.systems.begin() + static_cast<std::ptrdiff_t>(begin),
                     batch.systems.begin() + static_cast<std::ptrdiff_t>(end));
  const std::size_t per = batch.targets.size() / batch.systems.size();
  auto v = batch.targets.values().subspan(begin * per, (end - begin) * per);
  Shape shape = batch.targets.shape();
  shape[0] = end - begin;
  out.targets = Tensor(shape, std::vector<double>(v.begin(), v.end()));
  return out;
}

}  // namespace

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    throw DimensionError("mse_loss: prediction " + to_string(pred.shape()) + " vs target " +
                         to_string(target.shape()));
  if (pred.size() == 0) throw DimensionError("mse_loss: empty tensors");
  const double count = static_cast<double>(pred.size());
  const Tensor result = Tensor::scalar(squared_error_sum(pred.values(), target.values()) / count);
  return record_op(result, {&pred, &target}, [&] {
    return [p = pred.detach(), t = target.detach(), count](std::span<const double> g, GradientSink& in) {
      auto gp = in[0];
      auto gt = in[1];
      const auto pv = p.values(), tv = t.values();
      for (std::size_t i = 0; i < pv.size(); ++i) {
        const double d = 2.0 * (pv[i] - tv[i]) / count * g[0];
        if (!gp.empty()) gp[i] += d;
        if (!gt.empty()) gt[i] -= d;
      }
    };
  });
}

NamedParams named_parameters(ModelParams& params) {
  NamedParams out;
  params.visit([&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

void adam_step(const NamedParams& params, const std::vector<std::vector<double>>& grads, AdamState& state) {
  if (grads.size() != params.size())
    throw DimensionError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].size() != params[k].second->size())
      throw DimensionError("adam_step: gradient of " + params[k].first + " has " + std::to_string(grads[k].size()) +
                           " entries, parameter has " + std::to_string(params[k].second->size()));
    for (double g : grads[k])
      if (!std::isfinite(g)) throw NumericError("non-finite gradient for parameter " + params[k].first);
  }
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t k = 0; k < params.size(); ++k) {
      state.m[k].assign(params[k].second->size(), 0.0);
      state.v[k].assign(params[k].second->size(), 0.0);
    }
  } else if (state.m.size() != params.size()) {
    throw DimensionError("adam_step: optimizer state belongs to a different parameter set");
  }
  const AdamConfig& hp = state.hp;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hp.beta1, t);
  const double c2 = 1.0 - std::pow(hp.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].second->mutable_values();
    auto& m = state.m[k];
    auto& v = state.v[k];
    const auto& g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
      v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
      p[i] -= hp.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + hp.eps);
    }
  }
}

double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g) sq += x * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (double& x : g) x *= s;
  }
  return norm;
}

Batch make_batch(const std::vector<TrajectoryRecord>& records, std::span<const std::size_t> indices) {
  Batch b;
  b.systems.reserve(indices.size());
  std::vector<const std::vector<Vec3>*> rows;
  rows.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= records.size()) throw IndexError("record index " + std::to_string(i) + " out of range");
    b.systems.push_back(to_molecular_system(records[i]));
    rows.push_back(&records[i].pT);
  }
  b.targets = positions_tensor(rows);
  return b;
}

Batch make_batch(const std::vector<TrajectoryRecord>& records) {
  std::vector<std::size_t> all(records.size());
  std::iota(all.begin(), all.end(), 0);
  return make_batch(records, all);
}

GradientResult loss_and_gradients(const ModelConfig& cfg, const ModelParams& params, const Batch& batch,
                                  const ForwardContext& ctx, std::size_t chunk, unsigned threads) {
  if (batch.systems.empty()) throw ValidationError("empty batch");
  if (chunk == 0) throw ConfigError("chunk size must be positive");
  const std::size_t b = batch.systems.size();
  const std::size_t chunks = (b + chunk - 1) / chunk;
  const double total = static_cast<double>(batch.targets.size());

  std::vector<double> losses(chunks);
  std::vector<std::vector<std::vector<double>>> grads(chunks);
  parallel_for(chunks, threads, [&](std::size_t c) {
    const Batch part = slice(batch, c * chunk, std::min(b, (c + 1) * chunk));
    Tape tape;
    const ModelParams bound = params.bind(tape);
    ForwardContext local = ctx;
    local.seed = mix(ctx.seed, c);
    const Tensor pred = predict_positions(cfg, bound, part.systems, local);
    // Chunk share of the batch mean, so chunk losses and gradients add up.
    const Tensor loss = scale(mse_loss(pred, part.targets), static_cast<double>(part.targets.size()) / total);
    tape.backward(loss);
    losses[c] = loss.item();
    auto& out = grads[c];
    bound.visit([&](const std::string&, const Tensor& t) {
      const auto g = tape.grad_values(t);
      if (g.empty())
        out.emplace_back(t.size(), 0.0);
      else
        out.emplace_back(g.begin(), g.end());
    });
  });

  GradientResult r;
  r.grads = std::move(grads[0]);
  r.loss = losses[0];
  for (std::size_t c = 1; c < chunks; ++c) {
    r.loss += losses[c];
    for (std::size_t k = 0; k < r.grads.size(); ++k)
      for (std::size_t i = 0; i < r.grads[k].size(); ++i) r.grads[k][i] += grads[c][k][i];
  }
  return r;
}

double evaluate_mse(const ModelConfig& cfg, const ModelParams& params, const std::vector<TrajectoryRecord>& records,
                    std::size_t batch_size, unsigned threads) {
  if (records.empty()) throw ValidationError("cannot evaluate on an empty split");
  if (batch_size == 0) throw ConfigError("evaluation batch size must be positive");
  const std::size_t batches = (records.size() + batch_size - 1) / batch_size;
  // Squared errors are summed in record order, so the value does not depend
  // on batch_size or threads.
  std::vector<std::vector<double>> errors(batches);
  parallel_for(batches, threads, [&](std::size_t k) {
    std::vector<std::size_t> idx(std::min(records.size(), (k + 1) * batch_size) - k * batch_size);
    std::iota(idx.begin(), idx.end(), k * batch_size);
    const Batch b = make_batch(records, idx);
    const Tensor pred = predict_positions(cfg, params, b.systems);
    const auto p = pred.values(), t = b.targets.values();
    errors[k].resize(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) errors[k][i] = p[i] - t[i];
  });
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& e : errors) {
    for (double x : e) total += x * x;
    n += e.size();
  }
  const double mse = total / static_cast<double>(n);
  if (!std::isfinite(mse)) throw NumericError("non-finite evaluation MSE");
  return mse;
}

double linear_baseline_mse(const std::vector<TrajectoryRecord>& records, double horizon) {
  if (records.empty()) throw ValidationError("cannot evaluate on an empty split");
  double total = 0.0;
  std::size_t n = 0;
  for (const TrajectoryRecord& r : records) {
    for (std::size_t i = 0; i < r.p0.size(); ++i)
      for (int a = 0; a < 3; ++a) {
        const double e = r.p0[i][a] + r.v0[i][a] * horizon - r.pT[i][a];
        total += e * e;
        ++n;
      }
  }
  return total / static_cast<double>(n);
}

void TrainConfig::validate() const {
  model.validate();
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (eval_every == 0) throw ConfigError("eval_every must be positive");
  if (chunk == 0) throw ConfigError("chunk must be positive");
  if (threads == 0) throw ConfigError("threads must be positive");
  if (!(adam.lr >= 0.0) || !std::isfinite(adam.lr)) throw ConfigError("lr must be finite and non-negative");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam.eps > 0.0)) throw ConfigError("Adam eps must be positive");
  if (!std::isfinite(clip_norm)) throw ConfigError("clip_norm must be finite");
}

TrainResult train(const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  return train(cfg, read_dataset(cfg.dataset_path), on_epoch);
}

TrainResult train(const TrainConfig& cfg, const Dataset& data, const EpochCallback& on_epoch) {
  cfg.validate();
  auto take = [](const std::vector<TrajectoryRecord>& all, std::size_t limit) {
    if (limit == 0 || limit >= all.size()) return all;
    return std::vector<TrajectoryRecord>(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(limit));
  };
  const std::vector<TrajectoryRecord> train_set = take(data.train, cfg.train_limit);
  const std::vector<TrajectoryRecord> valid_set = take(data.valid, cfg.valid_limit);
  if (train_set.empty()) throw ConfigError("training split is empty");
  if (valid_set.empty()) throw ConfigError("validation split is empty");
  if (data.test.empty()) throw ConfigError("test split is empty");
  if (cfg.batch_size > train_set.size())
    throw ConfigError("batch_size " + std::to_string(cfg.batch_size) + " exceeds the " +
                      std::to_string(train_set.size()) + " training trajectories");

  std::ofstream metrics;
  if (!cfg.metrics_path.empty()) {
    metrics.open(cfg.metrics_path, std::ios::trunc);
    if (!metrics) throw IoError("cannot write metrics log " + cfg.metrics_path);
  }

  Model model = make_model(cfg.model);
  NamedParams named = named_parameters(model.params);
  AdamState adam;
  adam.hp = cfg.adam;

  TrainResult result;
  ModelParams best = model.params.clone();
  bool have_best = false;
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(train_set.size());
  const std::size_t coords_per_record = train_set.front().pT.size() * 3;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix(cfg.seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      const Batch batch = make_batch(train_set, std::span(order).subspan(begin, end - begin));
      ForwardContext ctx;
      ctx.training = true;
      ctx.seed = mix(mix(cfg.seed, epoch), batch_index + 1);
      GradientResult g = loss_and_gradients(model.config, model.params, batch, ctx, cfg.chunk, cfg.threads);
      if (!std::isfinite(g.loss))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_index));
      if (cfg.clip_norm > 0.0) clip_global_norm(g.grads, cfg.clip_norm);
      adam_step(named, g.grads, adam);
      loss_sum += g.loss * static_cast<double>((end - begin) * coords_per_record);
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(order.size() * coords_per_record);
    const bool evaluate_now = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
    if (evaluate_now) {
      const double v = evaluate_mse(model.config, model.params, valid_set, cfg.batch_size, cfg.threads);
      m.valid_mse = v;
      if (!have_best || v < result.best_valid_mse) {
        have_best = true;
        result.best_valid_mse = v;
        result.best_epoch = epoch;
        best = model.params.clone();
        if (!cfg.checkpoint_path.empty()) save_checkpoint(cfg.checkpoint_path, Model{model.config, best});
      }
    }
    m.wallclock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    if (metrics.is_open()) {
      nlohmann::json line;
      line["epoch"] = m.epoch;
      line["train_loss"] = m.train_loss;
      line["valid_mse"] = m.valid_mse ? nlohmann::json(*m.valid_mse) : nlohmann::json(nullptr);
      line["wallclock_s"] = cfg.record_wallclock ? nlohmann::json(m.wallclock_s) : nlohmann::json(nullptr);
      metrics << line.dump() << '\n';
      metrics.flush();
      if (!metrics) throw IoError("failed writing metrics log " + cfg.metrics_path);
    }
    result.history.push_back(m);
    result.epochs_run = epoch;
    if (on_epoch) on_epoch(m);

    if (epoch - result.best_epoch >= cfg.patience && epoch < cfg.epochs) {
      result.stopped_early = true;
      break;
    }
  }

  result.model = Model{model.config, best};
  result.test_mse = evaluate_mse(result.model.config, result.model.params, data.test, cfg.batch_size, cfg.threads);
  result.baseline_test_mse =
      linear_baseline_mse(data.test, static_cast<double>(data.sim.steps) * data.sim.dt);
  return result;
}

double evaluate_checkpoint(const std::string& checkpoint_path, const std::string& dataset_path, Split split,
                           unsigned threads) {
  const Model model = load_checkpoint(checkpoint_path);
  const Dataset data = read_dataset(dataset_path);
  return evaluate_mse(model.config, model.params, records(data, split), 100, threads);
}

}  // namespace geomf
