#pragma once

// Regression of future particle positions: loss, Adam, the epoch loop with
// early stopping and checkpoints, and evaluation helpers.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "geomf/model.hpp"
#include "geomf/nbody.hpp"

namespace geomf {

/// Mean over every coordinate of (pred − target)². Throws DimensionError on
/// shape mismatch.
Tensor mse_loss(const Tensor& pred, const Tensor& target);

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig hp;
  std::size_t step = 0;
  std::vector<std::vector<double>> m, v;  // per parameter, lazily sized
};

using NamedParams = std::vector<std::pair<std::string, Tensor*>>;
NamedParams named_parameters(ModelParams& params);

/// Bias-corrected Adam update in place. Throws NumericError naming the first
/// parameter whose gradient is non-finite; nothing is updated in that case.
void adam_step(const NamedParams& params, const std::vector<std::vector<double>>& grads, AdamState& state);

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm);

/// Model inputs and regression targets for a set of trajectories.
struct Batch {
  std::vector<MolecularSystem> systems;
  Tensor targets;  // [B×n×3]
};

Batch make_batch(const std::vector<TrajectoryRecord>& records, std::span<const std::size_t> indices);
Batch make_batch(const std::vector<TrajectoryRecord>& records);

struct GradientResult {
  double loss = 0.0;
  std::vector<std::vector<double>> grads;  // in ModelParams::visit order
};

/// MSE of the batch and its parameter gradients. The batch is split into
/// chunks of `chunk` systems with one tape each, optionally processed on
/// `threads` threads; chunk gradients are summed in chunk order, so the
/// result does not depend on `threads`.
GradientResult loss_and_gradients(const ModelConfig& cfg, const ModelParams& params, const Batch& batch,
                                  const ForwardContext& ctx, std::size_t chunk = 25, unsigned threads = 1);

/// Dropout-free MSE of predicted final positions over `records`.
double evaluate_mse(const ModelConfig& cfg, const ModelParams& params, const std::vector<TrajectoryRecord>& records,
                    std::size_t batch_size = 100, unsigned threads = 1);

/// MSE of the constant-velocity extrapolation p0 + v0·horizon.
double linear_baseline_mse(const std::vector<TrajectoryRecord>& records, double horizon);

struct TrainConfig {
  ModelConfig model;
  std::string dataset_path;
  std::size_t batch_size = 100;
  std::size_t epochs = 2000;
  AdamConfig adam;
  /// Global-norm clip, disabled when ≤ 0.
  double clip_norm = 0.0;
  std::size_t patience = 200;
  std::size_t eval_every = 1;
  /// Evaluate on the first `valid_limit` validation records (0 = all).
  std::size_t valid_limit = 0;
  /// Train on the first `train_limit` training records (0 = all).
  std::size_t train_limit = 0;
  std::string checkpoint_path;
  std::string metrics_path;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::size_t chunk = 25;
  bool record_wallclock = true;

  void validate() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> valid_mse;
  double wallclock_s = 0.0;
};

struct TrainResult {
  Model model;  // best-validation parameters
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_valid_mse = 0.0;
  double test_mse = 0.0;
  double baseline_test_mse = 0.0;
  bool stopped_early = false;
  std::vector<EpochMetrics> history;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Reads the dataset at cfg.dataset_path and trains.
TrainResult train(const TrainConfig& cfg, const EpochCallback& on_epoch = {});
TrainResult train(const TrainConfig& cfg, const Dataset& data, const EpochCallback& on_epoch = {});

/// Loads a checkpoint and evaluates it on one split of a dataset file.
double evaluate_checkpoint(const std::string& checkpoint_path, const std::string& dataset_path, Split split,
                           unsigned threads = 1);

}  // namespace geomf
