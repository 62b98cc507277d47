#include "sbat/run.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <set>

#include "sbat/binary_io.hpp"
#include "sbat/error.hpp"
#include "sbat/graph.hpp"

namespace sbat {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<DatasetPreset>& dataset_presets() {
  static const std::vector<DatasetPreset> presets{
      {"CA", "LargeST", 128, 96, 15.0},  {"GLA", "LargeST", 64, 96, 15.0}, {"GBA", "LargeST", 8, 96, 15.0},
      {"SD", "LargeST", 8, 96, 15.0},    {"ALL", "PV-US", 64, 144, 10.0},  {"EAST", "PV-US", 8, 144, 10.0},
      {"WEST", "PV-US", 16, 144, 10.0},
  };
  return presets;
}

const DatasetPreset* find_preset(const std::string& name) {
  for (const auto& p : dataset_presets()) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

// ---- config parsing -------------------------------------------------------

namespace {

const std::set<std::string> kArchKeys{"t", "f", "d_model", "l", "heads", "ffn_mult"};

void need_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
}

std::uint64_t as_count(const json& v, const std::string& path) {
  if (!is_json_count(v)) throw ConfigError(path + ": expected a non-negative integer");
  return v.get<std::uint64_t>();
}

double as_real(const json& v, const std::string& path) {
  if (!v.is_number()) throw ConfigError(path + ": expected a number");
  return v.get<double>();
}

std::string as_string(const json& v, const std::string& path) {
  if (!v.is_string()) throw ConfigError(path + ": expected a string");
  return v.get<std::string>();
}

[[noreturn]] void unknown(const std::string& path) { throw ConfigError(path + ": unknown key"); }

void parse_data(const json& j, DataConfig& d) {
  need_object(j, "data");
  for (const auto& [key, v] : j.items()) {
    const std::string path = "data." + key;
    if (key == "source") {
      d.source = as_string(v, path);
    } else if (key == "series") {
      d.series = as_string(v, path);
    } else if (key == "graph") {
      d.graph = as_string(v, path);
    } else if (key == "coords") {
      d.coords = v.is_null() ? std::string() : as_string(v, path);
    } else if (key == "synth") {
      d.synth = SynthConfig::from_json(v, path);
    } else if (key == "split") {
      if (!v.is_array()) throw ConfigError(path + ": expected an array of three ratios");
      d.split.clear();
      for (std::size_t i = 0; i < v.size(); ++i) d.split.push_back(as_real(v[i], path + "[" + std::to_string(i) + "]"));
    } else if (key == "stride") {
      d.stride = as_count(v, path);
    } else if (key == "null_threshold") {
      d.null_threshold = as_real(v, path);
    } else {
      unknown(path);
    }
  }
}

void parse_graph(const json& j, GraphConfig& g) {
  need_object(j, "graph");
  for (const auto& [key, v] : j.items()) {
    const std::string path = "graph." + key;
    if (key == "kind") {
      g.kind = as_string(v, path);
    } else if (key == "epsilon") {
      g.epsilon = as_real(v, path);
    } else if (key == "sigma") {
      g.sigma = as_real(v, path);
    } else if (key == "threshold") {
      g.threshold = as_real(v, path);
    } else {
      unknown(path);
    }
  }
}

void parse_partition(const json& j, PartitionConfig& p) {
  need_object(j, "partition");
  for (const auto& [key, v] : j.items()) {
    const std::string path = "partition." + key;
    if (key == "p0") {
      p.p0 = as_count(v, path);
    } else if (key == "balance_factor") {
      p.balance_factor = as_real(v, path);
    } else if (key == "seed") {
      p.seed = as_count(v, path);
    } else {
      unknown(path);
    }
  }
}

void parse_pe(const json& j, PeConfig& p) {
  need_object(j, "pe");
  for (const auto& [key, v] : j.items()) {
    const std::string path = "pe." + key;
    if (key == "k") {
      p.k = as_count(v, path);
    } else if (key == "block_limit") {
      p.block_limit = as_count(v, path);
    } else {
      unknown(path);
    }
  }
}

void parse_paths(const json& j, PathsConfig& p) {
  need_object(j, "paths");
  for (const auto& [key, v] : j.items()) {
    const std::string path = "paths." + key;
    if (key == "out_dir") {
      p.out_dir = as_string(v, path);
    } else {
      unknown(path);
    }
  }
}

json arch_json(const ModelConfig& m) {
  return {{"t", m.t}, {"f", m.f}, {"d_model", m.d_model}, {"l", m.l}, {"heads", m.heads}, {"ffn_mult", m.ffn_mult}};
}

void parse_model(const json& j, ModelConfig& m) {
  need_object(j, "model");
  json merged = arch_json(m);
  for (const auto& [key, v] : j.items()) {
    if (key == "p0") throw ConfigError("model.p0: set the subgraph count in partition.p0");
    if (key == "k_pe") throw ConfigError("model.k_pe: set the encoding width in pe.k");
    if (key == "n" || key == "c") throw ConfigError("model." + key + ": taken from the data");
    if (!kArchKeys.count(key)) unknown("model." + key);
    merged[key] = v;
  }
  const ModelConfig parsed = ModelConfig::from_json(merged, "model");
  m.t = parsed.t;
  m.f = parsed.f;
  m.d_model = parsed.d_model;
  m.l = parsed.l;
  m.heads = parsed.heads;
  m.ffn_mult = parsed.ffn_mult;
}

}  // namespace

void RunConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (preset && !find_preset(*preset)) fail("preset: unknown dataset '" + *preset + "'");
  if (data.source != "synth" && data.source != "files") {
    fail("data.source: expected \"synth\" or \"files\", got \"" + data.source + "\"");
  }
  if (data.source == "files") {
    if (data.series.empty()) fail("data.series: required when data.source is \"files\"");
    if (graph.kind == "given" && data.graph.empty()) fail("data.graph: required when graph.kind is \"given\"");
    if (graph.kind != "given" && data.coords.empty()) {
      fail("data.coords: required when graph.kind is \"" + graph.kind + "\"");
    }
  }
  if (data.split.size() != 3) fail("data.split: expected three ratios (train, val, test)");
  double total = 0.0;
  for (double r : data.split) {
    if (!(r > 0.0) || !std::isfinite(r)) fail("data.split: every ratio must be positive");
    total += r;
  }
  if (total > 1.0 + 1e-9) fail("data.split: ratios sum to more than 1");
  if (data.stride < 1) fail("data.stride: must be >= 1");
  if (!(data.null_threshold >= 0.0)) fail("data.null_threshold: must be >= 0");
  if (graph.kind != "given" && graph.kind != "epsilon" && graph.kind != "gaussian") {
    fail("graph.kind: expected \"given\", \"epsilon\" or \"gaussian\", got \"" + graph.kind + "\"");
  }
  if (!(graph.epsilon > 0.0)) fail("graph.epsilon: must be positive");
  if (!(graph.sigma > 0.0)) fail("graph.sigma: must be positive");
  if (!(graph.threshold >= 0.0 && graph.threshold < 1.0)) fail("graph.threshold: must lie in [0, 1)");
  if (partition.p0 < 1) fail("partition.p0: must be >= 1");
  if (!(partition.balance_factor >= 1.0)) fail("partition.balance_factor: must be >= 1");
  if (model.l > max_levels(partition.p0)) {
    fail("partition.p0: p0=" + std::to_string(partition.p0) + " supports at most " +
         std::to_string(max_levels(partition.p0)) + " levels, model.l=" + std::to_string(model.l));
  }
  if (pe.k < 1) fail("pe.k: must be >= 1");
  if (pe.block_limit < pe.k + 1) fail("pe.block_limit: must be at least pe.k + 1");
  ModelConfig probe = model;
  probe.n = partition.p0;
  probe.c = 1;
  probe.p0 = partition.p0;
  probe.k_pe = pe.k;
  probe.validate();
  train.validate();
  if (paths.out_dir.empty()) fail("paths.out_dir: must not be empty");
}

json RunConfig::to_json() const {
  json j;
  j["preset"] = preset ? json(*preset) : json(nullptr);
  j["data"] = {{"source", data.source},
               {"series", data.series},
               {"graph", data.graph},
               {"coords", data.coords},
               {"synth", data.synth.to_json()},
               {"split", data.split},
               {"stride", data.stride},
               {"null_threshold", data.null_threshold}};
  j["graph"] = {{"kind", graph.kind}, {"epsilon", graph.epsilon}, {"sigma", graph.sigma}, {"threshold", graph.threshold}};
  j["partition"] = {
      {"p0", partition.p0}, {"balance_factor", partition.balance_factor}, {"seed", partition.seed}};
  j["model"] = arch_json(model);
  j["train"] = train.to_json();
  j["pe"] = {{"k", pe.k}, {"block_limit", pe.block_limit}};
  j["paths"] = {{"out_dir", paths.out_dir}};
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  need_object(j, "config");
  RunConfig c;
  static const std::set<std::string> sections{"preset", "data", "graph", "partition", "model", "train", "pe", "paths"};
  for (const auto& [key, v] : j.items()) {
    if (!sections.count(key)) unknown(key);
  }
  if (j.contains("preset") && !j["preset"].is_null()) {
    const std::string name = as_string(j["preset"], "preset");
    const DatasetPreset* p = find_preset(name);
    if (!p) {
      std::string known;
      for (const auto& q : dataset_presets()) known += (known.empty() ? "" : ", ") + q.name;
      throw ConfigError("preset: unknown dataset '" + name + "' (known: " + known + ")");
    }
    c.preset = name;
    c.partition.p0 = p->p0;
    c.model.t = p->t;
  }
  if (j.contains("data")) parse_data(j["data"], c.data);
  if (j.contains("graph")) parse_graph(j["graph"], c.graph);
  if (j.contains("partition")) parse_partition(j["partition"], c.partition);
  if (j.contains("model")) parse_model(j["model"], c.model);
  if (j.contains("train")) c.train = TrainConfig::from_json(j["train"], "train");
  if (j.contains("pe")) parse_pe(j["pe"], c.pe);
  if (j.contains("paths")) parse_paths(j["paths"], c.paths);
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  json j;
  try {
    j = read_json_file(path);
  } catch (const LoadError& e) {
    throw ConfigError(e.what());
  }
  return from_json(j);
}

json run_config_schema() {
  json keys = {
      {"preset", "optional dataset name; fills partition.p0 and model.t before explicit keys apply"},
      {"data.source", "\"synth\" (grid diffusion generator) or \"files\""},
      {"data.series", "series file; .csv is text, anything else raw f64, header in <path>.json"},
      {"data.graph", "edge list `src,dst,weight` (graph.kind \"given\")"},
      {"data.coords", "`node_id,x,y` coordinates; required when graph.kind is not \"given\""},
      {"data.synth", "generator settings: n, steps, gamma, season_amp, tau, noise_std, epsilon, freq_minutes, seed"},
      {"data.split", "chronological train/val/test ratios; remainder goes to test"},
      {"data.stride", "step between consecutive window starts"},
      {"data.null_threshold", "targets with |y| below this are left out of MAPE"},
      {"graph.kind", "\"given\" uses the data's graph; \"epsilon\" and \"gaussian\" rebuild it from coordinates"},
      {"graph.epsilon", "distance below which \"epsilon\" links two nodes"},
      {"graph.sigma", "\"gaussian\" kernel width"},
      {"graph.threshold", "\"gaussian\" weights below this are dropped"},
      {"partition.p0", "subgraphs in the first block; halved (rounded up) per later block"},
      {"partition.balance_factor", "largest allowed subgraph relative to ceil(n / p)"},
      {"partition.seed", "partitioner and block-partition seed"},
      {"model.t", "look-back window"},
      {"model.f", "forecast horizon"},
      {"model.d_model", "embedding and hidden width D"},
      {"model.l", "number of SBA blocks"},
      {"model.heads", "attention heads; must divide d_model"},
      {"model.ffn_mult", "FFN hidden width as a multiple of d_model"},
      {"train.lr", "Adam step size"},
      {"train.betas", "Adam moment decays [beta1, beta2]"},
      {"train.eps", "Adam denominator guard"},
      {"train.batch_size", "windows per step"},
      {"train.max_epochs", "epoch budget"},
      {"train.patience", "epochs without a strictly lower validation MAE before stopping"},
      {"train.grad_clip", "global gradient-norm cap, null for none"},
      {"train.seed", "initialisation and shuffling seed"},
      {"pe.k", "Laplacian eigenvectors per node"},
      {"pe.block_limit", "largest graph solved whole; larger graphs are split into blocks"},
      {"paths.out_dir", "directory for config echo, plans, PE cache, checkpoint, history and metrics"},
  };
  json presets = json::array();
  for (const auto& p : dataset_presets()) {
    presets.push_back({{"name", p.name}, {"family", p.family}, {"p0", p.p0}, {"t", p.t}, {"f", 12},
                       {"freq_minutes", p.freq_minutes}});
  }
  return {{"defaults", RunConfig{}.to_json()}, {"keys", keys}, {"presets", presets}};
}

// ---- preparation ----------------------------------------------------------

WindowSet RunContext::windows(const std::string& split) const {
  StepRange range;
  if (split == "train") {
    range = splits.train;
  } else if (split == "val") {
    range = splits.val;
  } else if (split == "test") {
    range = splits.test;
  } else {
    throw InputError("unknown split '" + split + "' (expected train, val or test)");
  }
  return make_windows(range, model.t, model.f, config.data.stride);
}

namespace {

SpatialGraph rebuild_graph(const GraphConfig& g, const std::vector<Coord>& coords) {
  SpatialGraph out = g.kind == "epsilon" ? build_epsilon_graph(coords, g.epsilon)
                                         : build_gaussian_graph(coords, g.sigma, g.threshold);
  out.set_coords(coords);
  return out;
}

Dataset load_data(const RunConfig& config) {
  if (config.data.source == "synth") {
    Dataset d = synth_diffusion(config.data.synth);
    if (config.graph.kind != "given") {
      SpatialGraph g = rebuild_graph(config.graph, d.coords);
      d = synth_diffusion(config.data.synth, g, d.coords);
    }
    return d;
  }
  if (config.graph.kind == "given") {
    std::optional<fs::path> coords;
    if (!config.data.coords.empty()) coords = config.data.coords;
    return load_dataset(config.data.series, config.data.graph, coords);
  }
  Dataset d;
  d.series = load_series(config.data.series);
  d.coords = load_coords(config.data.coords);
  if (d.coords.size() != d.series.header.n) {
    throw NodeMismatchError("coordinates list " + std::to_string(d.coords.size()) + " nodes, the series " +
                            std::to_string(d.series.header.n));
  }
  d.graph = rebuild_graph(config.graph, d.coords);
  return d;
}

}  // namespace

RunContext prepare_run(const RunConfig& config) {
  config.validate();
  RunContext ctx;
  ctx.config = config;
  ctx.paths.dir = config.paths.out_dir;
  ctx.data = load_data(config);
  ctx.model = config.model;
  ctx.model.n = ctx.data.n();
  ctx.model.c = ctx.data.c();
  ctx.model.p0 = config.partition.p0;
  ctx.model.k_pe = config.pe.k;
  ctx.model.validate();
  ctx.splits = chrono_split(ctx.data.steps(), config.data.split, ctx.model.t + ctx.model.f);
  ctx.norm = Normalizer::fit(ctx.data.series, ctx.splits.train);
  ctx.normalized = ctx.norm.apply(ctx.data.series);
  ctx.scales = build_scale_series(ctx.data.graph, config.partition.p0, ctx.model.l, config.partition.balance_factor,
                                  config.partition.seed);
  const std::uint64_t hash = graph_hash(ctx.data.graph);
  bool cached = false;
  if (fs::exists(ctx.paths.pe()) && fs::exists(sidecar_path(ctx.paths.pe()))) {
    try {
      ctx.pe = load_pe_cache(ctx.paths.pe(), config.pe.k, config.pe.block_limit, hash);
      cached = ctx.pe.n == ctx.model.n;
    } catch (const LoadError&) {
      cached = false;
    }
  }
  if (!cached) ctx.pe = laplacian_pe(ctx.data.graph, config.pe.k, config.pe.block_limit, config.partition.seed);
  ctx.pe_tensor = Tensor::from({ctx.pe.n, ctx.pe.k}, ctx.pe.vectors);
  return ctx;
}

// ---- train / eval ---------------------------------------------------------

TrainResult run_training(const RunContext& ctx, std::ostream* log, const TrainHooks& hooks) {
  const RunPaths& paths = ctx.paths;
  fs::create_directories(paths.dir);
  write_json_file(paths.config(), ctx.config.to_json());
  save_scale_series(ctx.scales, paths.plans());
  save_pe_cache(ctx.pe, ctx.config.pe.block_limit, graph_hash(ctx.data.graph), paths.pe());

  TrainData td;
  td.series = &ctx.normalized;
  td.scales = &ctx.scales;
  td.pe = ctx.pe_tensor;
  td.train = ctx.windows("train");
  td.val = ctx.windows("val");
  if (td.train.size() == 0) throw InputError("the train split yields no windows of length t+f");
  if (td.val.size() == 0) throw InputError("the val split yields no windows of length t+f");

  std::ofstream history(paths.history(), std::ios::binary | std::ios::trunc);
  std::ofstream timing(paths.timing(), std::ios::binary | std::ios::trunc);
  if (!history || !timing) throw InputError("cannot write history files under " + paths.dir.string());

  const TrainConfig& tc = ctx.config.train;
  TrainHooks wrapped;
  wrapped.on_epoch = [&](const EpochRecord& rec, const ModelParams& best) {
    history << rec.to_json(tc).dump() << '\n';
    history.flush();
    timing << json{{"epoch", rec.epoch}, {"wall_ms", rec.wall_ms}}.dump() << '\n';
    timing.flush();
    if (log) {
      char buf[200];
      std::snprintf(buf, sizeof buf, "epoch %3zu  train_loss %.6f  val_mae %.6f  grad_norm %.4f  %.0f ms%s\n",
                    rec.epoch, rec.train_loss, rec.val_mae, rec.grad_norm, rec.wall_ms, rec.improved ? "  *" : "");
      *log << buf << std::flush;
    }
    if (hooks.on_epoch) hooks.on_epoch(rec, best);
  };

  ModelParams params = ModelParams::init(ctx.model, tc.seed);
  TrainResult result = train(ctx.model, params, td, tc, wrapped);
  const json extra{{"normalizer", ctx.norm.to_json()},
                   {"best_epoch", result.best_epoch},
                   {"best_val_mae", result.best_val_mae},
                   {"diverged", result.diverged},
                   {"stop_reason", result.stop_reason}};
  save_checkpoint(paths.checkpoint(), ctx.model, result.best, tc.seed, extra);
  if (log) *log << "stopped: " << result.stop_reason << ", best epoch " << result.best_epoch << '\n';
  return result;
}

json run_seed_average(const RunConfig& config, const std::vector<std::uint64_t>& seeds, std::ostream* log) {
  if (seeds.empty()) throw InputError("seed averaging needs at least one seed");
  const fs::path base = config.paths.out_dir;
  json runs = json::array();
  std::vector<EvalReport> reports;
  for (std::uint64_t seed : seeds) {
    RunConfig rc = config;
    rc.train.seed = seed;
    rc.paths.out_dir = (base / ("seed_" + std::to_string(seed))).string();
    const RunContext ctx = prepare_run(rc);
    if (log) *log << "seed " << seed << '\n';
    run_training(ctx, log);
    reports.push_back(run_eval(ctx, load_checkpoint(ctx.paths.checkpoint()), "test"));
    const ErrorStats& o = reports.back().model.overall;
    runs.push_back({{"seed", seed},
                    {"mae", o.mae},
                    {"rmse", o.rmse},
                    {"mape_pct", o.mape_pct ? json(*o.mape_pct) : json(nullptr)}});
  }
  auto mean_of = [&](auto pick) {
    ErrorStats m;
    bool mape = true;
    double mape_sum = 0.0;
    for (const auto& r : reports) {
      const ErrorStats& s = pick(r);
      m.mae += s.mae / static_cast<double>(reports.size());
      m.rmse += s.rmse / static_cast<double>(reports.size());
      mape = mape && s.mape_pct.has_value();
      if (s.mape_pct) mape_sum += *s.mape_pct;
    }
    json j{{"mae", m.mae}, {"rmse", m.rmse}, {"mape_pct", nullptr}};
    if (mape) j["mape_pct"] = mape_sum / static_cast<double>(reports.size());
    return j;
  };
  json horizon = json::array();
  for (std::size_t h = 0; h < reports[0].model.horizon.size(); ++h) {
    horizon.push_back(mean_of([h](const EvalReport& r) -> const ErrorStats& { return r.model.horizon[h]; }));
  }
  json mean = mean_of([](const EvalReport& r) -> const ErrorStats& { return r.model.overall; });
  mean["horizon"] = horizon;
  const json out{{"seeds", seeds}, {"runs", runs}, {"mean", mean}};
  fs::create_directories(base);
  write_json_file(base / "seed_average.json", out);
  return out;
}

void check_checkpoint(const RunContext& ctx, const Checkpoint& ckpt) {
  const json want = ctx.model.to_json(), have = ckpt.config.to_json();
  for (const auto& [key, v] : want.items()) {
    if (have.value(key, json()) != v) {
      throw LoadError("checkpoint model." + key + "=" + have.value(key, json()).dump() +
                      " does not match the run's " + v.dump());
    }
  }
}

namespace {

Normalizer checkpoint_normalizer(const RunContext& ctx, const Checkpoint& ckpt) {
  if (ckpt.extra.is_object() && ckpt.extra.contains("normalizer")) {
    Normalizer norm = Normalizer::from_json(ckpt.extra["normalizer"]);
    if (norm.mean.size() != ctx.model.c || norm.std.size() != ctx.model.c) {
      throw LoadError("checkpoint normalizer has the wrong channel count");
    }
    return norm;
  }
  return ctx.norm;
}

}  // namespace

EvalReport run_eval(const RunContext& ctx, const Checkpoint& ckpt, const std::string& split,
                    const std::optional<fs::path>& out) {
  check_checkpoint(ctx, ckpt);
  const WindowSet windows = ctx.windows(split);
  EvalReport report = evaluate(ctx.model, ckpt.params, checkpoint_normalizer(ctx, ckpt), ctx.data.series, ctx.scales,
                               ctx.pe_tensor, windows, split, 64, ctx.config.data.null_threshold);
  const fs::path target = out ? *out : ctx.paths.metrics(split);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  write_json_file(target, report.to_json());
  return report;
}

// ---- attention dump -------------------------------------------------------

json dump_attention(const RunContext& ctx, const Checkpoint& ckpt, const std::string& split, std::size_t window,
                    const fs::path& out_dir) {
  check_checkpoint(ctx, ckpt);
  const WindowSet windows = ctx.windows(split);
  if (window >= windows.size()) {
    throw InputError("window " + std::to_string(window) + " is out of range: the " + split + " split has " +
                     std::to_string(windows.size()) + " windows");
  }
  const Normalizer norm = checkpoint_normalizer(ctx, ckpt);
  const Series normalized = norm.apply(ctx.data.series);
  const std::size_t start = windows.starts[window];
  const Batch b = make_batch(normalized, std::span<const std::size_t>(&start, 1), ctx.model.t, ctx.model.f);
  AttentionTrace trace;
  ForwardOptions opts;
  opts.trace = &trace;
  {
    NoGradGuard no_grad;
    forward(b.x, ctx.scales, ckpt.params, ctx.model, ctx.pe_tensor, opts);
  }

  auto check_row = [](const double* row, std::size_t len, const std::string& what) {
    double s = 0.0;
    for (std::size_t j = 0; j < len; ++j) s += row[j];
    if (std::abs(s - 1.0) > 1e-9) throw ContractError(what + ": attention row sums to " + std::to_string(s));
  };

  fs::create_directories(out_dir);
  json index{{"split", split}, {"window", window}, {"start_step", start}, {"blocks", json::array()}};
  for (std::size_t bi = 0; bi < trace.blocks.size(); ++bi) {
    const auto& tb = trace.blocks[bi];
    const PartitionPlan& plan = ctx.scales.plans[bi];
    const std::size_t h = tb.heads, m = tb.m, p = tb.p;
    std::vector<double> intra;
    json sizes = json::array(), nodes = json::array(), offsets = json::array();
    for (std::size_t s = 0; s < p; ++s) {
      std::vector<std::size_t> slots;
      json ids = json::array();
      for (std::size_t j = 0; j < m; ++j) {
        if (plan.mask[s * m + j]) {
          slots.push_back(j);
          ids.push_back(plan.gather[s * m + j]);
        }
      }
      sizes.push_back(slots.size());
      nodes.push_back(ids);
      offsets.push_back(intra.size());
      for (std::size_t hh = 0; hh < h; ++hh) {
        const double* mat = tb.intra.data() + (s * h + hh) * m * m;
        for (std::size_t r : slots) {
          const std::size_t row_start = intra.size();
          for (std::size_t c : slots) intra.push_back(mat[r * m + c]);
          check_row(intra.data() + row_start, slots.size(), "block " + std::to_string(bi) + " intra");
        }
      }
    }
    for (std::size_t r = 0; r < h * p; ++r) check_row(tb.inter.data() + r * p, p, "block " + std::to_string(bi) + " inter");

    const std::string stem = "block" + std::to_string(bi);
    const fs::path intra_path = out_dir / (stem + "_intra.bin"), inter_path = out_dir / (stem + "_inter.bin");
    write_f64_file(intra_path, intra);
    write_json_file(sidecar_path(intra_path), {{"block", bi},
                                               {"kind", "intra"},
                                               {"heads", h},
                                               {"p", p},
                                               {"sizes", sizes},
                                               {"nodes", nodes},
                                               {"offsets", offsets},
                                               {"layout", "per subgraph: heads x size x size, row-major"}});
    write_f64_file(inter_path, tb.inter);
    write_json_file(sidecar_path(inter_path),
                    {{"block", bi}, {"kind", "inter"}, {"heads", h}, {"p", p}, {"layout", "heads x p x p, row-major"}});
    index["blocks"].push_back(
        {{"p", p}, {"m", m}, {"intra", intra_path.filename().string()}, {"inter", inter_path.filename().string()}});
  }
  write_json_file(out_dir / "attention.json", index);
  return index;
}

// ---- benchmark ------------------------------------------------------------

std::uint64_t peak_bytes_estimate(std::size_t params, std::size_t d, std::size_t heads, std::size_t ffn_mult,
                                  const std::vector<std::pair<std::size_t, std::size_t>>& sublayers) {
  // Value, gradient and two Adam moments per parameter; per sublayer the
  // tokens feeding LN, Q, K, V, the attention output, residuals and the FFN
  // hidden activations, plus logits and weights per head.
  std::uint64_t doubles = 4 * static_cast<std::uint64_t>(params);
  for (const auto& [groups, width] : sublayers) {
    const std::uint64_t tokens = static_cast<std::uint64_t>(groups) * width;
    doubles += tokens * d * (10 + 2 * ffn_mult);
    doubles += 2 * static_cast<std::uint64_t>(heads) * groups * width * width;
  }
  return 8 * doubles;
}

namespace {

SpatialGraph grid_graph(std::size_t n) {
  const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  std::vector<Coord> coords(n);
  for (std::size_t i = 0; i < n; ++i) coords[i] = {static_cast<double>(i % side), static_cast<double>(i / side)};
  return build_epsilon_graph(coords, 1.5);
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

std::vector<BenchRow> run_bench(const BenchOptions& o) {
  if (o.mode != "sba" && o.mode != "dense" && o.mode != "both") {
    throw InputError("bench mode must be sba, dense or both, got '" + o.mode + "'");
  }
  if (o.n_list.empty()) throw InputError("bench needs at least one n");
  if (o.m < 1 || o.d < 1 || o.heads < 1 || o.d % o.heads != 0) {
    throw InputError("bench needs m, d >= 1 and heads dividing d");
  }
  constexpr std::size_t kFfn = 4;
  struct ChecksOff {
    bool was = finite_checks();
    ChecksOff() { set_finite_checks(false); }
    ~ChecksOff() { set_finite_checks(was); }
  } checks_off;
  std::vector<BenchRow> rows;
  for (std::size_t n : o.n_list) {
    if (n < 1) throw InputError("bench sizes must be positive");
    if (o.mode != "dense") {
      const std::size_t p = (n + o.m - 1) / o.m;
      if (o.levels > max_levels(p)) {
        throw InputError("n=" + std::to_string(n) + " gives p=" + std::to_string(p) + ", which supports at most " +
                         std::to_string(max_levels(p)) + " levels");
      }
      const ScaleSeries series = build_scale_series(grid_graph(n), p, o.levels, o.balance_factor, o.seed);
      ModelConfig config;
      config.n = n;
      config.t = 1;
      config.f = 1;
      config.d_model = o.d;
      config.l = o.levels;
      config.heads = o.heads;
      config.p0 = p;
      config.k_pe = 1;
      config.ffn_mult = kFfn;
      const auto t0 = std::chrono::steady_clock::now();
      const FlopsReport r = flops_estimate(config, series, true);
      BenchRow row{"sba", n, series.plans[0].p, series.plans[0].m, o.d};
      row.wall_ms = elapsed_ms(t0);
      row.flops_measured = r.measured_mults + r.measured_adds;
      row.flops_closed_form = r.closed_form_mults + r.closed_form_adds;
      std::vector<std::pair<std::size_t, std::size_t>> sub;
      for (const auto& plan : series.plans) {
        sub.emplace_back(plan.p, plan.m);
        sub.emplace_back(1, plan.p);
      }
      row.peak_bytes_estimate = peak_bytes_estimate(param_count(config), o.d, o.heads, kFfn, sub);
      rows.push_back(row);
    }
    if (o.mode != "sba") {
      const auto t0 = std::chrono::steady_clock::now();
      const FlopsReport r = dense_flops_estimate(n, o.d, o.heads, true);
      BenchRow row{"dense", n, 1, n, o.d};
      row.wall_ms = elapsed_ms(t0);
      row.flops_measured = r.measured_mults + r.measured_adds;
      row.flops_closed_form = r.closed_form_mults + r.closed_form_adds;
      // One sublayer: three D x D projections, FFN and two layer norms.
      const std::size_t params = 3 * o.d * o.d + 2 * kFfn * o.d * o.d + 4 * o.d;
      row.peak_bytes_estimate = peak_bytes_estimate(params, o.d, o.heads, kFfn, {{1, n}});
      rows.push_back(row);
    }
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = "mode,n,p,m,d,flops_measured,flops_closed_form,wall_ms,peak_bytes_estimate\n";
  for (const auto& r : rows) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%zu,%zu,%llu,%llu,%.3f,%llu\n", r.mode.c_str(), r.n, r.p, r.m, r.d,
                  static_cast<unsigned long long>(r.flops_measured),
                  static_cast<unsigned long long>(r.flops_closed_form), r.wall_ms,
                  static_cast<unsigned long long>(r.peak_bytes_estimate));
    out += buf;
  }
  return out;
}

}  // namespace sbat
