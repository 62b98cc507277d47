// One line per acceptance criterion. Exit status is non-zero when any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sbat/binary_io.hpp"
#include "sbat/error.hpp"
#include "sbat/graph.hpp"
#include "sbat/model.hpp"
#include "sbat/partition.hpp"
#include "sbat/run.hpp"
#include "support/dense_oracle.hpp"
#include "support/gradcheck.hpp"
#include "support/graphs.hpp"
#include "support/partition_oracle.hpp"

using namespace sbat;
using namespace sbat::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

ModelConfig tiny_config(std::size_t n, std::size_t p0 = 1, std::size_t l = 1) {
  ModelConfig c;
  c.n = n;
  c.t = 3;
  c.c = 2;
  c.f = 2;
  c.d_model = 8;
  c.l = l;
  c.heads = 2;
  c.p0 = p0;
  c.k_pe = 2;
  c.ffn_mult = 2;
  return c;
}

void randomize(const ModelParams& params, std::mt19937_64& rng, double spread = 0.5) {
  std::uniform_real_distribution<double> dist(-spread, spread);
  for (const auto& [name, t] : params.named()) {
    auto v = Tensor(t).mutable_values();
    const bool gain = name.find("gamma") != std::string::npos;
    for (auto& x : v) x = (gain ? 1.0 : 0.0) + dist(rng);
  }
}

double max_diff(const Mat& a, const Tensor& t) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(a.v[i] - t[i]));
  return m;
}

// ---- criteria --------------------------------------------------------------

Outcome dense_oracle_equivalence() {
  double worst = 0.0;
  for (std::size_t n : {4, 8, 16}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      std::mt19937_64 rng(seed * 31 + n);
      const auto c = tiny_config(n);
      const auto p = ModelParams::init(c, seed);
      randomize(p, rng);
      const auto plan = PartitionPlan::from_assignment(1, std::vector<std::size_t>(n, 0), 1.0, 0, 0.0);
      const auto x = random_tensor({n, 8}, rng);
      Tensor alpha;
      const auto y = intra_attention(apply_plan(x, plan), Mask::from(1, n, plan.mask), p.blocks[0].intra, 2, &alpha);
      const Mat xm = Mat::of(x, n, 8);
      worst = std::max(worst, max_diff(ref_sublayer(xm, p.blocks[0].intra, 2), y));
      const auto ref_alpha =
          ref_attention_weights(ref_layer_norm(xm, p.blocks[0].intra.ln1_gamma, p.blocks[0].intra.ln1_beta),
                                p.blocks[0].intra, 2);
      for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t i = 0; i < n * n; ++i) worst = std::max(worst, std::abs(ref_alpha[h].v[i] - alpha[h * n * n + i]));
    }
  }
  return {worst <= 1e-10, "max |diff| " + num(worst) + " over N in {4,8,16} x 10 seeds (tol 1e-10)"};
}

Outcome singleton_oracle() {
  double worst = 0.0;
  bool pooled_identity = true;
  for (std::size_t n : {4, 8, 16}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      std::mt19937_64 rng(seed + 100 * n);
      const auto p = ModelParams::init(tiny_config(n), seed);
      randomize(p, rng);
      std::vector<std::size_t> a(n);
      std::iota(a.begin(), a.end(), 0);
      const auto plan = PartitionPlan::from_assignment(n, a, 1.0, 0, 0.0);
      const auto mask = Mask::from(plan.p, plan.m, plan.mask);
      const auto y = intra_attention(apply_plan(random_tensor({n, 8}, rng), plan), mask, p.blocks[0].intra, 2);
      const auto pooled = pool_subgraphs(y, mask);
      pooled_identity &= std::equal(y.values().begin(), y.values().end(), pooled.values().begin());
      const auto out = inter_attention(pooled, p.blocks[0].inter, 2);
      worst = std::max(worst, max_diff(ref_sublayer(Mat::of(pooled, n, 8), p.blocks[0].inter, 2), out));
    }
  }
  return {worst <= 1e-10 && pooled_identity,
          "max |diff| " + num(worst) + " (tol 1e-10), pooling identity " + (pooled_identity ? "yes" : "no")};
}

Outcome gradient_check() {
  std::mt19937_64 rng(17);
  const std::size_t n = 12;
  const auto g = random_connected(n, 0.45, rng);
  ModelConfig c;
  c.n = n;
  c.t = 8;
  c.c = 1;
  c.f = 3;
  c.d_model = 8;
  c.heads = 2;
  c.l = 2;
  c.p0 = 4;
  c.k_pe = 3;
  c.ffn_mult = 2;
  const auto series = build_scale_series(g, 4, 2);
  const auto p = ModelParams::init(c, 5);
  randomize(p, rng, 0.4);
  const auto pe = random_tensor({n, 3}, rng);
  const auto x = random_tensor({n, 8, 1}, rng);
  const auto w = random_tensor({n, 3, 1}, rng);
  std::vector<Tensor> params;
  for (const auto& [name, t] : p.named()) params.push_back(t);
  const auto r = grad_check(params, [&] { return sum(mul(forward(x, series, p, c, pe), w)); }, 1e-5);
  return {r.max_rel_error < 1e-4 && r.checked == p.count(),
          "max relative error " + num(r.max_rel_error) + " over " + std::to_string(r.checked) +
              " parameters (tol 1e-4)"};
}

Outcome block_diagonal() {
  std::mt19937_64 rng(18);
  const std::size_t n = 32;
  const auto g = random_connected(n, 0.3, rng);
  const auto c = tiny_config(n, 4, 1);
  const auto series = build_scale_series(g, 4, 1);
  const auto p = ModelParams::init(c, 0);
  randomize(p, rng);
  AttentionTrace trace;
  ForwardOptions opts;
  opts.trace = &trace;
  forward(random_tensor({n, 3, 2}, rng), series, p, c, random_tensor({n, 2}, rng), opts);
  const auto& plan = series.plans[0];
  const auto& blk = trace.blocks.at(0);
  std::size_t cross_nonzero = 0, cross_pairs = 0;
  double worst_row = 0.0;  // every row's mass must sit inside its own block
  for (std::size_t h = 0; h < blk.heads; ++h) {
    // Node-level matrix assembled from the per-subgraph maps; unset pairs stay 0.
    std::vector<double> full(n * n, 0.0);
    for (std::size_t q = 0; q < plan.p; ++q)
      for (std::size_t i = 0; i < plan.m; ++i)
        for (std::size_t j = 0; j < plan.m; ++j) {
          const auto a = plan.gather[q * plan.m + i], b = plan.gather[q * plan.m + j];
          if (a < 0 || b < 0) continue;
          full[static_cast<std::size_t>(a) * n + static_cast<std::size_t>(b)] =
              blk.intra[((q * blk.heads + h) * plan.m + i) * plan.m + j];
        }
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        row += full[i * n + j];
        if (plan.assign[i] != plan.assign[j]) {
          ++cross_pairs;
          if (full[i * n + j] != 0.0) ++cross_nonzero;
        }
      }
      worst_row = std::max(worst_row, std::abs(row - 1.0));
    }
    // Padded columns must carry zero weight too.
    for (std::size_t q = 0; q < plan.p; ++q)
      for (std::size_t i = 0; i < plan.m; ++i)
        for (std::size_t j = 0; j < plan.m; ++j)
          if (plan.gather[q * plan.m + i] >= 0 && plan.gather[q * plan.m + j] < 0 &&
              blk.intra[((q * blk.heads + h) * plan.m + i) * plan.m + j] != 0.0)
            ++cross_nonzero;
  }
  return {cross_nonzero == 0 && cross_pairs > 0 && worst_row <= 1e-12,
          std::to_string(cross_nonzero) + " non-zero weights among " + std::to_string(cross_pairs) +
              " cross-subgraph pairs at N=32, in-block row mass off by " + num(worst_row)};
}

Outcome padding_invariance() {
  std::mt19937_64 rng(14);
  const std::size_t n = 23;
  const auto g = random_connected(n, 0.35, rng);
  const auto c = tiny_config(n, 5, 3);
  const auto series = build_scale_series(g, 5, 3);
  std::size_t padded = 0;
  for (const auto& plan : series.plans) padded += plan.p * plan.m - plan.n;
  const auto p = ModelParams::init(c, 1);
  randomize(p, rng);
  const auto pe = random_tensor({n, 2}, rng);
  const auto x = random_tensor({n, 3, 2}, rng);
  const auto clean = forward(x, series, p, c, pe);
  int identical = 0;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    ForwardOptions opts;
    opts.pad_noise_seed = trial;
    const auto noisy = forward(x, series, p, c, pe, opts);
    identical += std::equal(clean.values().begin(), clean.values().end(), noisy.values().begin());
  }
  return {identical == 20 && padded > 0, std::to_string(identical) + "/20 trials bit-identical (" +
                                             std::to_string(padded) + " padded slots across 3 levels)"};
}

// Independent check of every plan invariant.
bool plan_ok(const SpatialGraph& g, const PartitionPlan& plan, double bf) {
  const std::size_t n = g.size();
  if (plan.n != n || plan.assign.size() != n || plan.gather.size() != plan.p * plan.m) return false;
  std::vector<std::size_t> sizes(plan.p, 0);
  for (auto a : plan.assign) {
    if (a >= plan.p) return false;
    ++sizes[a];
  }
  for (auto s : sizes)
    if (s == 0) return false;
  const auto cap = static_cast<std::size_t>(std::floor(bf * std::ceil(double(n) / double(plan.p)) + 1e-9));
  if (*std::max_element(sizes.begin(), sizes.end()) != plan.m || plan.m > std::max(cap, std::size_t{1})) return false;
  std::vector<int> seen(n, 0);
  for (std::size_t s = 0; s < plan.p * plan.m; ++s) {
    const auto id = plan.gather[s];
    if ((id >= 0) != (plan.mask[s] != 0)) return false;
    if (id < 0) continue;
    if (plan.assign[static_cast<std::size_t>(id)] != s / plan.m) return false;
    if (plan.slot[static_cast<std::size_t>(id)] != static_cast<std::int64_t>(s)) return false;
    ++seen[static_cast<std::size_t>(id)];
  }
  for (int v : seen)
    if (v != 1) return false;
  if (plan.over_balance) return false;
  return std::abs(plan.edge_cut - independent_cut(g, plan.assign)) <= 1e-9 * std::max(1.0, plan.edge_cut);
}

// Writes the plan files of criterion 6 so criterion 10 can compare reruns.
Outcome partition_quality(const fs::path& plan_dir) {
  fs::create_directories(plan_dir);
  std::mt19937_64 rng(123);
  std::uniform_int_distribution<std::size_t> size(8, 300);
  int valid = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = size(rng);
    const auto g = random_geometric(n, std::sqrt(6.0 / static_cast<double>(n)), rng);
    std::uniform_int_distribution<std::size_t> parts(1, std::min<std::size_t>(n, 40));
    const std::size_t p = parts(rng);
    const auto plan = partition_kway(g, p, 1.3, static_cast<std::uint64_t>(trial));
    bool ok = plan_ok(g, plan, 1.3);
    try {
      plan.validate();
    } catch (const ContractError&) {
      ok = false;
    }
    valid += ok;
    write_json_file(plan_dir / ("plan_" + std::to_string(trial) + ".json"), plan_to_json(plan));
  }

  std::mt19937_64 small(777);
  std::uniform_int_distribution<std::size_t> small_size(4, 10);
  double worst_ratio = 0.0;
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = small_size(small);
    const auto g = random_geometric(n, 0.6, small);
    const auto plan = partition_kway(g, 2, 1.3, static_cast<std::uint64_t>(trial));
    const auto best = best_bipartition(g, balance_capacity(n, 2, 1.3));
    const double ratio = best.cut > 0.0 ? plan.edge_cut / best.cut : (plan.edge_cut > 0.0 ? INFINITY : 1.0);
    worst_ratio = std::max(worst_ratio, ratio);
  }

  std::mt19937_64 srng(9);
  bool halving = true;
  for (std::size_t p0 : {8u, 5u, 16u, 7u}) {
    const auto g = random_connected(96, 0.22, srng);
    const std::size_t levels = max_levels(p0);
    const auto s = build_scale_series(g, p0, levels, 1.3, 0);
    write_json_file(plan_dir / ("series_" + std::to_string(p0) + ".json"), series_to_json(s));
    halving &= s.levels() == levels && s.plans[0].p == p0;
    for (std::size_t i = 1; i < s.levels(); ++i) halving &= s.plans[i].p == (s.plans[i - 1].p + 1) / 2;
  }
  return {valid == 50 && worst_ratio <= 1.5 && halving,
          "(a) " + std::to_string(valid) + "/50 plans valid; (b) worst cut / optimum " + num(worst_ratio) +
              " (tol 1.5); (c) halving " + (halving ? "exact" : "broken")};
}

Outcome eigen_residuals() {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> size(2, 64);
  double worst_res = 0.0, worst_orth = 0.0, worst_l0 = 0.0;
  bool ok = true;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = trial == 19 ? 64 : size(rng);
    const auto g = random_connected(n, std::max(0.2, std::sqrt(4.0 / static_cast<double>(n))), rng);
    const DenseMatrix l = laplacian(g);
    const auto e = sym_eigen(l, n);
    const double bound = 1e-8 * std::max(1.0, l.frobenius());
    for (std::size_t j = 0; j < n; ++j) {
      double r = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double lv = 0.0;
        for (std::size_t k = 0; k < n; ++k) lv += l(i, k) * e.vec(k, j);
        r += (lv - e.values[j] * e.vec(i, j)) * (lv - e.values[j] * e.vec(i, j));
      }
      r = std::sqrt(r);
      worst_res = std::max(worst_res, r / std::max(1.0, l.frobenius()));
      ok &= r <= bound;
      for (std::size_t k = 0; k < n; ++k) {
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += e.vec(i, j) * e.vec(i, k);
        const double dev = std::abs(dot - (j == k ? 1.0 : 0.0));
        worst_orth = std::max(worst_orth, dev);
        ok &= dev <= 1e-8;
      }
    }
    if (g.connected()) {
      worst_l0 = std::max(worst_l0, std::abs(e.values[0]));
      ok &= std::abs(e.values[0]) <= 1e-9;
    } else {
      ok = false;
    }
  }
  return {ok, "residual/max(1,|L|_F) " + num(worst_res) + " (tol 1e-8), orthonormality " + num(worst_orth) +
                  " (tol 1e-8), |lambda_1| " + num(worst_l0) + " (tol 1e-9)"};
}

Outcome flop_scaling() {
  BenchOptions o;
  o.n_list = {256, 512, 1024};
  o.m = 32;
  o.d = 64;
  o.heads = 4;
  o.levels = 1;
  o.balance_factor = 1.0;
  const auto rows = run_bench(o);
  std::map<std::string, std::vector<BenchRow>> by;
  double gap = 0.0;
  bool m_fixed = true;
  for (const auto& r : rows) {
    by[r.mode].push_back(r);
    gap = std::max(gap, std::abs(double(r.flops_measured) - double(r.flops_closed_form)) / double(r.flops_closed_form));
    if (r.mode == "sba") m_fixed &= r.m == 32;
  }
  double sba_max = 0.0, dense_min = INFINITY;
  for (std::size_t i = 1; i < 3; ++i) {
    sba_max = std::max(sba_max, double(by["sba"][i].flops_measured) / double(by["sba"][i - 1].flops_measured));
    dense_min = std::min(dense_min, double(by["dense"][i].flops_measured) / double(by["dense"][i - 1].flops_measured));
  }
  return {sba_max < 3.0 && dense_min >= 3.9 && gap <= 0.01 && m_fixed,
          "sba growth per doubling <= " + num(sba_max) + " (tol < 3.0), dense >= " + num(dense_min) +
              " (tol >= 3.9), closed-form gap " + num(gap) + " (tol 0.01), M=32 " + (m_fixed ? "held" : "broken")};
}

Outcome end_to_end(const fs::path& run_dir, double& seconds) {
  RunConfig rc = RunConfig::load(fs::path(SBAT_SOURCE_DIR) / "configs" / "synthetic.json");
  rc.paths.out_dir = run_dir.string();
  const auto t0 = std::chrono::steady_clock::now();
  const RunContext ctx = prepare_run(rc);
  const TrainResult tr = run_training(ctx);
  const Checkpoint ck = load_checkpoint(ctx.paths.checkpoint());
  const EvalReport rep = run_eval(ctx, ck, "test");
  seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double model = rep.model.overall.mae, persist = rep.persistence.overall.mae;
  const bool shape = ctx.model.n == 64 && ctx.data.steps() == 2048 && ctx.model.t == 24 && ctx.model.f == 12 &&
                     ctx.model.d_model == 32 && ctx.model.l == 3 && ctx.model.p0 == 8;
  return {shape && !tr.diverged && model <= 0.8 * persist && seconds < 600.0,
          "test MAE " + num(model) + " vs persistence " + num(persist) + " (ratio " + num(model / persist) +
              ", tol <= 0.8) after " + std::to_string(tr.history.size()) + " epochs in " + num(seconds) +
              " s (tol < 600 s)"};
}

Outcome determinism(const fs::path& plans_a, const fs::path& run_a, const fs::path& root) {
  const fs::path plans_b = root / "plans_rerun", run_b = root / "run_rerun";
  partition_quality(plans_b);
  double secs = 0.0;
  end_to_end(run_b, secs);
  std::size_t files = 0, same = 0;
  for (const auto& entry : fs::directory_iterator(plans_a)) {
    ++files;
    same += slurp(entry.path()) == slurp(plans_b / entry.path().filename());
  }
  for (const char* f : {"plans.json", "history.jsonl", "checkpoint.bin"}) {
    ++files;
    same += slurp(run_a / f) == slurp(run_b / f) && !slurp(run_a / f).empty();
  }
  return {files == same && files > 3,
          std::to_string(same) + "/" + std::to_string(files) + " plan, history and checkpoint files byte-identical"};
}

Outcome schema_conformance() {
  const auto schema = run_config_schema();
  const auto& m = schema["defaults"]["model"];
  const bool defaults = m["d_model"] == 512 && m["l"] == 3 && m["f"] == 12 && m["t"] == 96;
  const std::map<std::string, std::size_t> expected{{"CA", 128}, {"ALL", 64}, {"EAST", 8}, {"GLA", 64},
                                                    {"GBA", 8},   {"WEST", 16}, {"SD", 8}};
  std::map<std::string, std::size_t> documented;
  for (const auto& p : schema["presets"]) documented[p["name"].get<std::string>()] = p["p0"].get<std::size_t>();
  bool presets_apply = true;
  for (const auto& [name, p0] : expected) {
    presets_apply &= RunConfig::from_json({{"preset", name}}).partition.p0 == p0;
  }
  return {defaults && documented == expected && presets_apply,
          std::string("defaults D=512 L=3 F=12 T=96 ") + (defaults ? "echoed" : "missing") + ", " +
              std::to_string(documented.size()) + "/7 dataset P presets documented and applied"};
}

}  // namespace

int main() {
  const fs::path root = fs::temp_directory_path() / "sbat_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);
  int failures = 0;
  auto report = [&](int id, const char* name, double limit_s, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (limit_s > 0.0 && s >= limit_s) {
      o.pass = false;
      o.detail += "; runtime over " + num(limit_s) + " s";
    }
    failures += !o.pass;
    std::printf("%s criterion %2d %-28s %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), s);
    std::fflush(stdout);
  };

  const fs::path plans = root / "plans", run = root / "run";
  double train_seconds = 0.0;
  report(1, "dense-attention oracle", 10.0, dense_oracle_equivalence);
  report(2, "singleton-subgraph oracle", 10.0, singleton_oracle);
  report(3, "gradient check", 120.0, gradient_check);
  report(4, "structured sparsity", 0.0, block_diagonal);
  report(5, "padding invariance", 0.0, padding_invariance);
  report(6, "partition quality", 0.0, [&] { return partition_quality(plans); });
  report(7, "eigen residuals", 0.0, eigen_residuals);
  report(8, "complexity scaling", 60.0, flop_scaling);
  report(9, "end-to-end learning", 0.0, [&] { return end_to_end(run, train_seconds); });
  report(10, "determinism", 0.0, [&] { return determinism(plans, run, root); });
  report(11, "hyperparameter conformance", 0.0, schema_conformance);
  std::printf("%d of 11 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
