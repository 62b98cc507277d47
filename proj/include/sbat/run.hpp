#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sbat/data.hpp"
#include "sbat/model.hpp"
#include "sbat/partition.hpp"
#include "sbat/pe.hpp"
#include "sbat/trainer.hpp"

namespace sbat {

// Subgraph count and look-back length used for each benchmark dataset.
struct DatasetPreset {
  std::string name;
  std::string family;
  std::size_t p0 = 0;
  std::size_t t = 0;
  double freq_minutes = 0.0;
};

const std::vector<DatasetPreset>& dataset_presets();
const DatasetPreset* find_preset(const std::string& name);

struct DataConfig {
  std::string source = "synth";  // "synth" or "files"
  std::string series;            // series file (files source)
  std::string graph;             // edge list (files source)
  std::string coords;            // optional coordinates (files source)
  SynthConfig synth;
  std::vector<double> split{0.6, 0.2, 0.2};
  std::size_t stride = 1;
  double null_threshold = 1e-4;
};

struct GraphConfig {
  std::string kind = "given";  // "given", "epsilon" or "gaussian"
  double epsilon = 1.5;
  double sigma = 1.0;
  double threshold = 0.1;
};

struct PartitionConfig {
  std::size_t p0 = 8;
  double balance_factor = 1.3;
  std::uint64_t seed = 0;
};

struct PeConfig {
  std::size_t k = 8;
  std::size_t block_limit = 2000;
};

struct PathsConfig {
  std::string out_dir = "runs/default";
};

// Everything a train / eval / dump run needs. The model section carries only
// the architecture fields; n and c come from the data, p0 from the partition
// section and k_pe from the pe section.
struct RunConfig {
  std::optional<std::string> preset;
  DataConfig data;
  GraphConfig graph;
  PartitionConfig partition;
  ModelConfig model;
  TrainConfig train;
  PeConfig pe;
  PathsConfig paths;

  /// Throws ConfigError naming the offending key path.
  void validate() const;
  /// Full effective document; from_json(to_json()) reproduces the config.
  nlohmann::json to_json() const;
  /// Strict: unknown keys anywhere raise ConfigError with their path. A
  /// preset fills partition.p0 and model.t before explicit keys apply.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
};

/// Key-by-key description of the config document with defaults and the
/// per-dataset presets.
nlohmann::json run_config_schema();

// Fixed artifact names under paths.out_dir.
struct RunPaths {
  std::filesystem::path dir;
  std::filesystem::path config() const { return dir / "config.json"; }
  std::filesystem::path plans() const { return dir / "plans.json"; }
  std::filesystem::path pe() const { return dir / "pe.bin"; }
  std::filesystem::path checkpoint() const { return dir / "checkpoint.bin"; }
  std::filesystem::path history() const { return dir / "history.jsonl"; }
  std::filesystem::path timing() const { return dir / "history_timing.jsonl"; }
  std::filesystem::path metrics(const std::string& split) const { return dir / ("metrics_" + split + ".json"); }
};

struct RunContext {
  RunConfig config;
  ModelConfig model;  // complete: n, c, p0 and k_pe filled in
  Dataset data;
  SplitRanges splits;
  Normalizer norm;
  Series normalized;
  ScaleSeries scales;
  PositionalEncoding pe;
  Tensor pe_tensor;  // n x k_pe
  RunPaths paths;

  /// "train", "val" or "test"; anything else is an InputError.
  WindowSet windows(const std::string& split) const;
};

/// Loads or synthesises the data, builds the graph, the scale series and
/// the positional encoding. Reads a matching PE cache from the run directory
/// when one exists. Writes nothing.
RunContext prepare_run(const RunConfig& config);

/// Trains from a fresh initialisation and writes the effective config,
/// plans, PE cache, history, timing sidecar and best checkpoint.
TrainResult run_training(const RunContext& ctx, std::ostream* log = nullptr, const TrainHooks& hooks = {});

/// Trains and scores one run per seed under <out_dir>/seed_<s> and writes
/// the per-seed and mean test metrics to <out_dir>/seed_average.json.
nlohmann::json run_seed_average(const RunConfig& config, const std::vector<std::uint64_t>& seeds,
                                std::ostream* log = nullptr);

/// Throws LoadError when the checkpoint was not trained for this run's
/// model shape.
void check_checkpoint(const RunContext& ctx, const Checkpoint& ckpt);

/// Scores the checkpoint on a split and writes metrics_<split>.json (or
/// `out` when given).
EvalReport run_eval(const RunContext& ctx, const Checkpoint& ckpt, const std::string& split,
                    const std::optional<std::filesystem::path>& out = {});

/// Writes every block's intra weights per subgraph at valid size and the
/// inter weights, as f64 files with JSON sidecars plus an index
/// `attention.json`. Rows are checked to sum to 1 within 1e-9 first.
nlohmann::json dump_attention(const RunContext& ctx, const Checkpoint& ckpt, const std::string& split,
                              std::size_t window, const std::filesystem::path& out_dir);

// ---- benchmark ------------------------------------------------------------

struct BenchOptions {
  std::vector<std::size_t> n_list{256, 512, 1024};
  std::size_t m = 32;
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t levels = 1;
  std::string mode = "both";  // "sba", "dense" or "both"
  double balance_factor = 1.0;
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::string mode;
  std::size_t n = 0, p = 0, m = 0, d = 0;
  std::uint64_t flops_measured = 0;
  std::uint64_t flops_closed_form = 0;
  double wall_ms = 0.0;
  std::uint64_t peak_bytes_estimate = 0;
};

/// Grid graphs of each size, p = ceil(n / m) subgraphs; one counted forward
/// pass per row with finite checks off. FLOPs are attention multiplies plus
/// adds.
std::vector<BenchRow> run_bench(const BenchOptions& options);
std::string bench_csv(const std::vector<BenchRow>& rows);

/// Analytic training footprint in bytes: parameters with gradient and Adam
/// moments, plus for each attention sublayer, given as (groups, width), its
/// token activations and its logits and weights.
std::uint64_t peak_bytes_estimate(std::size_t params, std::size_t d, std::size_t heads, std::size_t ffn_mult,
                                  const std::vector<std::pair<std::size_t, std::size_t>>& sublayers);

}  // namespace sbat
