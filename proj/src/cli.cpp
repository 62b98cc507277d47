#include "sbat/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sbat/binary_io.hpp"
#include "sbat/error.hpp"
#include "sbat/graph.hpp"
#include "sbat/partition.hpp"
#include "sbat/pe.hpp"
#include "sbat/run.hpp"

namespace sbat {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct PartitionArgs {
  std::string graph, out;
  std::size_t parts = 0, levels = 1;
  double balance = 1.3;
  std::uint64_t seed = 0;
};

void cmd_partition(const PartitionArgs& a, std::ostream& out) {
  const SpatialGraph g = load_edge_list(a.graph);
  if (a.parts > g.size()) {
    throw InputError("parts=" + std::to_string(a.parts) + " exceeds the graph's " + std::to_string(g.size()) +
                     " nodes");
  }
  if (a.levels > max_levels(a.parts)) {
    throw InputError("levels=" + std::to_string(a.levels) + " is infeasible for parts=" + std::to_string(a.parts) +
                     "; max feasible levels is " + std::to_string(max_levels(a.parts)));
  }
  const ScaleSeries series = build_scale_series(g, a.parts, a.levels, a.balance, a.seed);
  save_scale_series(series, a.out);
  for (std::size_t i = 0; i < series.levels(); ++i) {
    const auto& plan = series.plans[i];
    out << "level " << i << ": p=" << plan.p << " m=" << plan.m << " edge_cut=" << plan.edge_cut
        << " balance=" << fixed(plan.achieved_balance, 3) << (plan.over_balance ? " (over balance)" : "") << '\n';
  }
}

struct PeArgs {
  std::string graph, out;
  std::size_t k = 8, block_limit = 2000;
  std::uint64_t seed = 0;
};

void cmd_pe(const PeArgs& a, std::ostream& out, std::ostream& err) {
  const SpatialGraph g = load_edge_list(a.graph);
  const PositionalEncoding pe = laplacian_pe(g, a.k, a.block_limit, a.seed);
  save_pe_cache(pe, a.block_limit, graph_hash(g), a.out);
  out << "n=" << pe.n << " k=" << pe.k << " source="
      << (pe.source == PositionalEncoding::Source::whole_graph ? "whole_graph" : "per_subgraph") << '\n';
  for (const auto& w : pe.warnings) err << "warning: " << w << '\n';
}

struct SynthArgs {
  std::string out, config, format = "binary";
  std::optional<std::size_t> n, steps;
  std::optional<std::uint64_t> seed;
};

void cmd_synth(const SynthArgs& a, std::ostream& out) {
  SynthConfig sc;
  if (!a.config.empty()) {
    json j;
    try {
      j = read_json_file(a.config);
    } catch (const LoadError& e) {
      throw ConfigError(e.what());
    }
    sc = SynthConfig::from_json(j);
  }
  if (a.n) sc.n = *a.n;
  if (a.steps) sc.steps = *a.steps;
  if (a.seed) sc.seed = *a.seed;
  const Dataset d = synth_diffusion(sc);
  const fs::path dir = a.out;
  fs::create_directories(dir);
  const fs::path series = dir / (a.format == "csv" ? "series.csv" : "series.bin");
  save_series(series, d.series);
  save_edge_list(d.graph, dir / "graph.csv");
  save_coords(d.coords, dir / "coords.csv");
  write_json_file(dir / "synth.json", sc.to_json());
  out << "wrote " << series.string() << " (n=" << d.n() << ", steps=" << d.steps() << "), graph.csv with "
      << d.graph.edge_count() << " edges, coords.csv\n";
}

struct RunArgs {
  std::string config, checkpoint, split = "test", out, run_dir, dump_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_epochs, window;
  std::vector<std::uint64_t> seeds;
};

RunConfig load_run_config(const RunArgs& a) {
  RunConfig rc = RunConfig::load(a.config);
  if (a.seed) rc.train.seed = *a.seed;
  if (a.max_epochs) rc.train.max_epochs = *a.max_epochs;
  if (!a.run_dir.empty()) rc.paths.out_dir = a.run_dir;
  rc.validate();
  return rc;
}

fs::path checkpoint_path(const RunArgs& a, const RunContext& ctx) {
  return a.checkpoint.empty() ? ctx.paths.checkpoint() : fs::path(a.checkpoint);
}

void cmd_train(const RunArgs& a, std::ostream& out) {
  if (!a.seeds.empty()) {
    const json avg = run_seed_average(load_run_config(a), a.seeds, &out);
    for (const auto& r : avg["runs"]) out << "seed " << r["seed"] << ": test MAE " << r["mae"].get<double>() << '\n';
    out << "mean test MAE " << avg["mean"]["mae"].get<double>() << " over " << a.seeds.size() << " seeds\n";
    return;
  }
  const RunContext ctx = prepare_run(load_run_config(a));
  out << "n=" << ctx.model.n << " params=" << param_count(ctx.model) << " levels:";
  for (const auto& plan : ctx.scales.plans) out << " (p=" << plan.p << " m=" << plan.m << ")";
  out << '\n';
  const TrainResult r = run_training(ctx, &out);
  out << "best val MAE " << r.best_val_mae << " at epoch " << r.best_epoch << "; checkpoint "
      << ctx.paths.checkpoint().string() << '\n';
  if (r.diverged) throw NumericError("training diverged: " + r.stop_reason);
}

void cmd_eval(const RunArgs& a, std::ostream& out) {
  const RunContext ctx = prepare_run(load_run_config(a));
  const Checkpoint ckpt = load_checkpoint(checkpoint_path(a, ctx));
  std::optional<fs::path> target;
  if (!a.out.empty()) target = a.out;
  const EvalReport report = run_eval(ctx, ckpt, a.split, target);
  out << report.table();
}

void cmd_dump(const RunArgs& a, std::ostream& out) {
  const RunContext ctx = prepare_run(load_run_config(a));
  const Checkpoint ckpt = load_checkpoint(checkpoint_path(a, ctx));
  const json index = dump_attention(ctx, ckpt, a.split, *a.window, a.dump_dir);
  out << "wrote " << index["blocks"].size() << " blocks to " << a.dump_dir << '\n';
}

struct BenchArgs {
  BenchOptions o;
  std::string out;
};

void cmd_bench(const BenchArgs& a, std::ostream& out) {
  const std::string csv = bench_csv(run_bench(a.o));
  if (a.out.empty()) {
    out << csv;
    return;
  }
  std::ofstream f(a.out, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot write " + a.out);
  f << csv;
  out << "wrote " << a.out << '\n';
}

struct ConfigArgs {
  bool defaults = false, schema = false;
  std::string check;
};

void cmd_config(const ConfigArgs& a, std::ostream& out) {
  if (!a.check.empty()) {
    out << RunConfig::load(a.check).to_json().dump(2) << '\n';
  } else if (a.schema) {
    out << run_config_schema().dump(2) << '\n';
  } else {
    out << RunConfig{}.to_json().dump(2) << '\n';
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spatial balanced attention forecaster", "sbat"};
  app.require_subcommand(1);

  PartitionArgs pa;
  auto* part = app.add_subcommand("partition", "Multiscale partition of a graph into a scale series");
  part->add_option("--graph", pa.graph, "edge list")->required();
  part->add_option("--parts", pa.parts, "subgraphs at the first level")->required()->check(CLI::PositiveNumber);
  part->add_option("--levels", pa.levels, "number of scales")->check(CLI::PositiveNumber);
  part->add_option("--balance", pa.balance, "balance factor")->check(CLI::Range(1.0, 1e9));
  part->add_option("--seed", pa.seed);
  part->add_option("--out", pa.out, "scale series JSON")->required();

  PeArgs pea;
  auto* pe = app.add_subcommand("pe", "Laplacian positional encoding cache");
  pe->add_option("--graph", pea.graph)->required();
  pe->add_option("--k", pea.k)->check(CLI::PositiveNumber);
  pe->add_option("--block-limit", pea.block_limit)->check(CLI::PositiveNumber);
  pe->add_option("--seed", pea.seed);
  pe->add_option("--out", pea.out)->required();

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate the synthetic diffusion dataset");
  synth->add_option("--out", sa.out, "output directory")->required();
  synth->add_option("--config", sa.config, "generator settings JSON");
  synth->add_option("--n", sa.n);
  synth->add_option("--steps", sa.steps);
  synth->add_option("--seed", sa.seed);
  synth->add_option("--format", sa.format)->check(CLI::IsMember({"binary", "csv"}));

  RunArgs ta;
  auto* trn = app.add_subcommand("train", "Train a model from a run config");
  trn->add_option("--config", ta.config)->required();
  trn->add_option("--seed", ta.seed, "overrides train.seed");
  trn->add_option("--seeds", ta.seeds, "train once per seed and average test metrics")->delimiter(',');
  trn->add_option("--max-epochs", ta.max_epochs, "overrides train.max_epochs");
  trn->add_option("--out-dir", ta.run_dir, "overrides paths.out_dir");

  RunArgs ea;
  auto* evl = app.add_subcommand("eval", "Score a checkpoint against the persistence baseline");
  evl->add_option("--config", ea.config)->required();
  evl->add_option("--checkpoint", ea.checkpoint, "defaults to <out_dir>/checkpoint.bin");
  evl->add_option("--split", ea.split)->check(CLI::IsMember({"train", "val", "test"}));
  evl->add_option("--out", ea.out, "metric JSON, defaults to <out_dir>/metrics_<split>.json");
  evl->add_option("--out-dir", ea.run_dir, "overrides paths.out_dir");

  RunArgs da;
  auto* dump = app.add_subcommand("dump-attention", "Write per-block attention maps for one window");
  dump->add_option("--config", da.config)->required();
  dump->add_option("--checkpoint", da.checkpoint, "defaults to <out_dir>/checkpoint.bin");
  dump->add_option("--split", da.split)->check(CLI::IsMember({"train", "val", "test"}));
  dump->add_option("--window", da.window)->required();
  dump->add_option("--out-dir", da.dump_dir)->required();

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Attention FLOPs and footprint, SBA versus dense");
  bench->add_option("--n-list", ba.o.n_list)->delimiter(',');
  bench->add_option("--m", ba.o.m)->check(CLI::PositiveNumber);
  bench->add_option("--d", ba.o.d)->check(CLI::PositiveNumber);
  bench->add_option("--heads", ba.o.heads)->check(CLI::PositiveNumber);
  bench->add_option("--levels", ba.o.levels)->check(CLI::PositiveNumber);
  bench->add_option("--mode", ba.o.mode)->check(CLI::IsMember({"sba", "dense", "both"}));
  bench->add_option("--balance", ba.o.balance_factor)->check(CLI::Range(1.0, 1e9));
  bench->add_option("--seed", ba.o.seed);
  bench->add_option("--out", ba.out, "CSV file, stdout when omitted");

  ConfigArgs ca;
  auto* cfg = app.add_subcommand("config", "Print the default config, its schema, or a checked config");
  cfg->add_flag("--defaults", ca.defaults);
  cfg->add_flag("--schema", ca.schema);
  cfg->add_option("--check", ca.check, "config file to validate and echo");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitInput;
  }

  try {
    if (*part) cmd_partition(pa, out);
    if (*pe) cmd_pe(pea, out, err);
    if (*synth) cmd_synth(sa, out);
    if (*trn) cmd_train(ta, out);
    if (*evl) cmd_eval(ea, out);
    if (*dump) cmd_dump(da, out);
    if (*bench) cmd_bench(ba, out);
    if (*cfg) cmd_config(ca, out);
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const ContractError& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitContract;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitContract;
  }
  return kExitOk;
}

}  // namespace sbat
