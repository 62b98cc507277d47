#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sbat/graph.hpp"
#include "sbat/tensor.hpp"

namespace sbat {

// JSON sidecar describing a series file.
struct SeriesHeader {
  std::size_t n = 0;
  std::size_t t = 0;
  std::size_t c = 1;
  double freq_minutes = 5.0;
  std::string name;

  nlohmann::json to_json() const;
  static SeriesHeader from_json(const nlohmann::json& j);
};

struct Series {
  SeriesHeader header;
  std::vector<double> values;  // N x T x C row-major

  double at(std::size_t node, std::size_t step, std::size_t ch) const {
    return values[(node * header.t + step) * header.c + ch];
  }
};

enum class SeriesFormat { binary, csv };

/// `.csv` selects the text encoding, anything else the raw f64 encoding.
SeriesFormat series_format_for(const std::filesystem::path& path);

/// Writes the payload at `path` and the header at `<path>.json`.
/// CSV rows are `node,step,c0[,c1...]` after a header line.
void save_series(const std::filesystem::path& path, const Series& series);
/// Throws ShapeMismatchError / NonFiniteError / LoadError.
Series load_series(const std::filesystem::path& path);

struct Dataset {
  Series series;
  SpatialGraph graph;
  std::vector<Coord> coords;  // empty when unknown

  std::size_t n() const { return series.header.n; }
  std::size_t steps() const { return series.header.t; }
  std::size_t c() const { return series.header.c; }
};

/// Loads and cross-checks series, graph and optional coordinates.
/// A node-count disagreement raises NodeMismatchError.
Dataset load_dataset(const std::filesystem::path& series_path, const std::filesystem::path& graph_path,
                     const std::optional<std::filesystem::path>& coords_path = {});

// ---- splits and windows ---------------------------------------------------

struct StepRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  friend bool operator==(const StepRange&, const StepRange&) = default;
};

struct SplitRanges {
  StepRange train, val, test;
};

/// Contiguous train/val/test ranges: floor of each ratio, remainder to test.
/// When `min_len` is non-zero every split must hold at least that many steps.
SplitRanges chrono_split(std::size_t total_steps, const std::vector<double>& ratios = {0.6, 0.2, 0.2},
                         std::size_t min_len = 0);

struct WindowSet {
  StepRange range;
  std::size_t t = 0, f = 0, stride = 1;
  std::vector<std::size_t> starts;  // first input step of each window
  bool too_short = false;

  std::size_t size() const { return starts.size(); }
};

/// Every window whose T inputs and F targets lie inside `range`.
WindowSet make_windows(StepRange range, std::size_t t, std::size_t f, std::size_t stride = 1);

struct Batch {
  Tensor x;  // B x N x T x C
  Tensor y;  // B x N x F x C
};

/// Materialises the windows starting at `starts` from a series.
Batch make_batch(const Series& series, std::span<const std::size_t> starts, std::size_t t, std::size_t f);

// ---- normalisation --------------------------------------------------------

// Per-channel z-score with statistics from the training range only.
struct Normalizer {
  std::vector<double> mean;
  std::vector<double> std;

  /// Channels with zero spread get std 1 so the map stays invertible.
  static Normalizer fit(const Series& series, StepRange train);
  Series apply(const Series& series) const;
  /// Inverts in place on any [..., C] layout.
  void invert_inplace(std::span<double> values) const;
  void apply_inplace(std::span<double> values) const;

  nlohmann::json to_json() const;
  static Normalizer from_json(const nlohmann::json& j);
};

// ---- synthetic data -------------------------------------------------------

struct SynthConfig {
  std::size_t n = 64;
  std::size_t steps = 2048;
  double gamma = 0.3;
  double season_amp = 0.1;
  double tau = 64.0;
  double noise_std = 0.05;
  double epsilon = 1.5;  // grid neighbourhood radius
  double freq_minutes = 5.0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  /// Strict: unknown keys are rejected.
  static SynthConfig from_json(const nlohmann::json& j, const std::string& where = "synth");
};

/// Diffusion on a square grid with seasonal forcing:
/// x_{t+1} = (1-g) x_t + g A x_t + a sin(2 pi t / tau + phi) + s eta_t,
/// A the degree-normalised adjacency, phi increasing along the grid diagonal.
Dataset synth_diffusion(const SynthConfig& config);
/// Same dynamics on a caller-supplied graph (coordinates, when present,
/// drive the phases; otherwise phases are zero).
Dataset synth_diffusion(const SynthConfig& config, const SpatialGraph& graph, std::vector<Coord> coords);

// ---- metrics --------------------------------------------------------------

struct ErrorStats {
  double mae = 0.0;
  double rmse = 0.0;
  std::optional<double> mape_pct;
  std::size_t count = 0;
  std::size_t excluded = 0;  // entries left out of MAPE
};

struct MetricReport {
  ErrorStats overall;
  std::vector<ErrorStats> horizon;  // one per forecast step

  nlohmann::json to_json() const;
};

/// MAE and RMSE over all entries, MAPE (percent) over |target| >= threshold.
/// Values are laid out [..., F, C].
MetricReport compute_metrics(std::span<const double> pred, std::span<const double> target, std::size_t f,
                             std::size_t c, double null_threshold = 1e-4);

}  // namespace sbat
