#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sbat/data.hpp"
#include "sbat/model.hpp"

namespace sbat {

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  std::optional<double> grad_clip;
  std::uint64_t seed = 0;

  /// Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  /// Strict: unknown keys are rejected. `betas` is a two-element array.
  static TrainConfig from_json(const nlohmann::json& j, const std::string& where = "train");
};

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamState for_params(const NamedParams& params);
};

/// Global L2 norm over the gradients; tensors without a gradient count as 0.
double grad_norm(const NamedParams& params);

/// One bias-corrected Adam update, after optional global-norm clipping.
/// A tensor that received no gradient is treated as having a zero gradient.
/// Non-finite gradients raise NumericError naming the tensor before any
/// parameter changes. Returns the pre-clipping gradient norm.
double adam_step(const NamedParams& params, AdamState& state, const TrainConfig& config);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_mae = 0.0;
  double grad_norm = 0.0;  // mean pre-clip norm over the epoch's steps
  std::uint64_t flops = 0;  // forward multiply + add count of the epoch's training batches
  bool improved = false;
  double wall_ms = 0.0;  // kept out of to_json so histories stay byte-stable

  nlohmann::json to_json(const TrainConfig& config) const;
};

struct TrainResult {
  ModelParams best;
  std::size_t best_epoch = 0;
  double best_val_mae = 0.0;
  std::vector<EpochRecord> history;
  bool diverged = false;
  std::string stop_reason;
};

// Everything a training or evaluation pass reads besides the parameters.
struct TrainData {
  const Series* series = nullptr;  // normalized
  const ScaleSeries* scales = nullptr;
  Tensor pe;
  WindowSet train;
  WindowSet val;
};

struct TrainHooks {
  std::function<void(const EpochRecord&, const ModelParams& best)> on_epoch;
};

/// Seeded permutation of window positions for one epoch.
std::vector<std::size_t> epoch_order(std::size_t windows, std::uint64_t seed, std::size_t epoch);

/// Deep copy of the parameter values.
ModelParams clone_params(const ModelParams& params);

/// Mean absolute error on the normalized scale over every window in `windows`.
double mean_abs_error(const ModelConfig& config, const ModelParams& params, const Series& series,
                      const ScaleSeries& scales, const Tensor& pe, const WindowSet& windows,
                      std::size_t batch_size);

/// Epoch loop with seeded shuffling, validation after each epoch, best
/// checkpoint retention and patience-based early stopping. `params` ends at
/// the last state reached; the best state is returned in the result.
TrainResult train(const ModelConfig& config, ModelParams& params, const TrainData& data, const TrainConfig& tc,
                  const TrainHooks& hooks = {});

struct EvalReport {
  std::string split;
  std::size_t windows = 0;
  MetricReport model;
  MetricReport persistence;

  nlohmann::json to_json() const;
  /// Rows for horizons 3, 6, 12 (those within F) and the average.
  std::string table() const;
};

/// Forecasts on `raw` windows: inputs normalized with `norm`, predictions
/// de-normalized before scoring. The persistence row repeats the last
/// observed value across the horizon.
EvalReport evaluate(const ModelConfig& config, const ModelParams& params, const Normalizer& norm, const Series& raw,
                    const ScaleSeries& scales, const Tensor& pe, const WindowSet& windows, const std::string& split,
                    std::size_t batch_size = 64, double null_threshold = 1e-4);

}  // namespace sbat
