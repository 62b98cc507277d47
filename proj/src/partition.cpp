#include "sbat/partition.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <queue>
#include <random>

#include "sbat/error.hpp"
#include "sbat/ops.hpp"

namespace sbat {

namespace {

// Vertex- and edge-weighted graph used across the multilevel hierarchy.
struct WGraph {
  std::size_t n = 0;
  std::vector<std::size_t> xadj{0};
  std::vector<std::size_t> adjncy;
  std::vector<double> adjwgt;
  std::vector<long> vwgt;

  long total_vwgt() const { return std::accumulate(vwgt.begin(), vwgt.end(), 0L); }
};

WGraph from_spatial(const SpatialGraph& g) {
  WGraph w;
  w.n = g.size();
  w.vwgt.assign(w.n, 1);
  w.xadj.assign(w.n + 1, 0);
  for (std::size_t i = 0; i < w.n; ++i) {
    const auto nb = g.neighbors(i);
    const auto ws = g.weights(i);
    w.adjncy.insert(w.adjncy.end(), nb.begin(), nb.end());
    w.adjwgt.insert(w.adjwgt.end(), ws.begin(), ws.end());
    w.xadj[i + 1] = w.adjncy.size();
  }
  return w;
}

struct CoarseLevel {
  WGraph graph;
  std::vector<std::size_t> cmap;  // fine vertex -> coarse vertex
};

// Heavy-edge matching: each unmatched vertex (random visiting order) pairs
// with the unmatched neighbour of largest edge weight whose combined weight
// stays under max_vwgt.
CoarseLevel coarsen(const WGraph& g, std::mt19937_64& rng, long max_vwgt) {
  constexpr auto unmatched = static_cast<std::size_t>(-1);
  std::vector<std::size_t> order(g.n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> match(g.n, unmatched);
  for (auto u : order) {
    if (match[u] != unmatched) continue;
    std::size_t best = u;
    double best_w = -1.0;
    for (std::size_t e = g.xadj[u]; e < g.xadj[u + 1]; ++e) {
      const auto v = g.adjncy[e];
      if (match[v] != unmatched || g.vwgt[u] + g.vwgt[v] > max_vwgt) continue;
      if (g.adjwgt[e] > best_w || (g.adjwgt[e] == best_w && v < best)) {
        best = v;
        best_w = g.adjwgt[e];
      }
    }
    match[u] = best;
    match[best] = u;
  }

  CoarseLevel level;
  level.cmap.assign(g.n, unmatched);
  std::size_t cn = 0;
  for (std::size_t u = 0; u < g.n; ++u) {
    if (level.cmap[u] != unmatched) continue;
    level.cmap[u] = cn;
    level.cmap[match[u]] = cn;
    ++cn;
  }
  auto& c = level.graph;
  c.n = cn;
  c.vwgt.assign(cn, 0);
  for (std::size_t u = 0; u < g.n; ++u) c.vwgt[level.cmap[u]] += g.vwgt[u];

  std::vector<std::vector<std::size_t>> members(cn);
  for (std::size_t u = 0; u < g.n; ++u) members[level.cmap[u]].push_back(u);
  c.xadj.assign(cn + 1, 0);
  std::map<std::size_t, double> acc;
  for (std::size_t cu = 0; cu < cn; ++cu) {
    acc.clear();
    for (auto u : members[cu])
      for (std::size_t e = g.xadj[u]; e < g.xadj[u + 1]; ++e) {
        const auto cv = level.cmap[g.adjncy[e]];
        if (cv != cu) acc[cv] += g.adjwgt[e];
      }
    for (const auto& [cv, w] : acc) {
      c.adjncy.push_back(cv);
      c.adjwgt.push_back(w);
    }
    c.xadj[cu + 1] = c.adjncy.size();
  }
  return level;
}

double wcut(const WGraph& g, const std::vector<std::size_t>& part) {
  double cut = 0.0;
  for (std::size_t u = 0; u < g.n; ++u)
    for (std::size_t e = g.xadj[u]; e < g.xadj[u + 1]; ++e)
      if (g.adjncy[e] > u && part[g.adjncy[e]] != part[u]) cut += g.adjwgt[e];
  return cut;
}

std::vector<long> part_weights(const WGraph& g, const std::vector<std::size_t>& part, std::size_t p) {
  std::vector<long> pw(p, 0);
  for (std::size_t u = 0; u < g.n; ++u) pw[part[u]] += g.vwgt[u];
  return pw;
}

std::vector<long> part_counts(const std::vector<std::size_t>& part, std::size_t p) {
  std::vector<long> pc(p, 0);
  for (auto q : part) ++pc[q];
  return pc;
}

// Connection weight from u to each part, as a sparse list.
void connections(const WGraph& g, const std::vector<std::size_t>& part, std::size_t u,
                 std::vector<std::pair<std::size_t, double>>& out) {
  out.clear();
  for (std::size_t e = g.xadj[u]; e < g.xadj[u + 1]; ++e) {
    const auto q = part[g.adjncy[e]];
    auto it = std::find_if(out.begin(), out.end(), [q](const auto& c) { return c.first == q; });
    if (it == out.end()) {
      out.emplace_back(q, g.adjwgt[e]);
    } else {
      it->second += g.adjwgt[e];
    }
  }
}

// Greedy graph growing: regions are grown one at a time from a random
// unassigned seed, always absorbing the frontier vertex most strongly tied
// to the region, until the region reaches its share of the weight.
std::vector<std::size_t> grow_regions(const WGraph& g, std::size_t p, std::mt19937_64& rng) {
  constexpr auto none = static_cast<std::size_t>(-1);
  std::vector<std::size_t> part(g.n, none);
  long remaining = g.total_vwgt();
  std::size_t unassigned = g.n;
  std::vector<double> tie(g.n, 0.0);
  for (std::size_t q = 0; q + 1 < p; ++q) {
    const long target = remaining / static_cast<long>(p - q);
    std::vector<std::size_t> pool;
    for (std::size_t u = 0; u < g.n; ++u)
      if (part[u] == none) pool.push_back(u);
    std::size_t seed = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    std::fill(tie.begin(), tie.end(), 0.0);
    long weight = 0;
    std::size_t next = seed;
    // Leave at least one vertex per later region.
    while (next != none && unassigned > p - q - 1) {
      part[next] = q;
      weight += g.vwgt[next];
      remaining -= g.vwgt[next];
      --unassigned;
      for (std::size_t e = g.xadj[next]; e < g.xadj[next + 1]; ++e) tie[g.adjncy[e]] += g.adjwgt[e];
      if (weight >= target) break;
      next = none;
      double best = 0.0;
      for (std::size_t u = 0; u < g.n; ++u)
        if (part[u] == none && tie[u] > best) {
          best = tie[u];
          next = u;
        }
      if (next == none && unassigned > p - q - 1) {
        for (std::size_t u = 0; u < g.n; ++u)
          if (part[u] == none) {
            next = u;
            break;
          }
      }
    }
  }
  for (auto& v : part)
    if (v == none) v = p - 1;
  return part;
}

// Moves vertices into empty parts or out of overweight ones, each time
// taking the feasible move with the best cut gain.
void rebalance(const WGraph& g, std::vector<std::size_t>& part, std::size_t p, long cap) {
  auto pw = part_weights(g, part, p);
  auto pc = part_counts(part, p);
  std::vector<std::pair<std::size_t, double>> conn;
  auto tie = [&](std::size_t q) {
    for (const auto& [r, w] : conn)
      if (r == q) return w;
    return 0.0;
  };
  for (std::size_t guard = 0; guard < 4 * g.n + p; ++guard) {
    std::size_t src = p, dst = p;
    for (std::size_t q = 0; q < p && dst == p; ++q)
      if (pc[q] == 0) dst = q;
    if (dst == p) {
      for (std::size_t q = 0; q < p; ++q)
        if (pw[q] > cap && (src == p || pw[q] > pw[src])) src = q;
      if (src == p) return;
    }
    double best_gain = -std::numeric_limits<double>::infinity();
    std::size_t best_u = g.n, best_t = p;
    for (std::size_t u = 0; u < g.n; ++u) {
      const auto from = part[u];
      if (pc[from] <= 1 || (src != p && from != src)) continue;
      connections(g, part, u, conn);
      const double own = tie(from);
      for (std::size_t t = 0; t < p; ++t) {
        if (t == from || (dst != p && t != dst)) continue;
        if (dst == p && pw[t] + g.vwgt[u] > cap) continue;
        const double gain = tie(t) - own;
        if (gain > best_gain) {
          best_gain = gain;
          best_u = u;
          best_t = t;
        }
      }
    }
    if (best_u == g.n) return;  // nothing feasible at this granularity
    pw[part[best_u]] -= g.vwgt[best_u];
    --pc[part[best_u]];
    part[best_u] = best_t;
    pw[best_t] += g.vwgt[best_u];
    ++pc[best_t];
  }
}

// Fiduccia-Mattheyses style k-way boundary refinement. Each pass moves
// vertices one at a time (highest gain first, each at most once), then rolls
// back to the best prefix seen. Moves never exceed `cap` or empty a part.
void refine(const WGraph& g, std::vector<std::size_t>& part, std::size_t p, long cap, int max_passes = 8) {
  if (p < 2) return;
  std::vector<std::pair<std::size_t, double>> conn;
  for (int pass = 0; pass < max_passes; ++pass) {
    auto pw = part_weights(g, part, p);
    auto pc = part_counts(part, p);
    std::vector<std::uint8_t> locked(g.n, 0);
    std::vector<std::uint32_t> version(g.n, 0);
    struct Entry {
      double gain;
      std::size_t u;
      std::size_t target;
      std::uint32_t version;
      bool operator<(const Entry& o) const {
        if (gain != o.gain) return gain < o.gain;
        return u > o.u;  // lower id first on ties
      }
    };
    std::priority_queue<Entry> heap;

    auto best_move = [&](std::size_t u, std::size_t& target) {
      connections(g, part, u, conn);
      const auto from = part[u];
      double own = 0.0;
      for (const auto& [q, w] : conn)
        if (q == from) own = w;
      double best = -std::numeric_limits<double>::infinity();
      target = p;
      if (pc[from] <= 1) return best;
      for (const auto& [q, w] : conn) {
        if (q == from || pw[q] + g.vwgt[u] > cap) continue;
        const double gain = w - own;
        if (gain > best || (gain == best && q < target)) {
          best = gain;
          target = q;
        }
      }
      return best;
    };
    auto push = [&](std::size_t u) {
      std::size_t t;
      const double gain = best_move(u, t);
      if (t != p) heap.push({gain, u, t, version[u]});
    };
    for (std::size_t u = 0; u < g.n; ++u) push(u);

    struct Move {
      std::size_t u, from;
    };
    std::vector<Move> moves;
    double cum = 0.0, best_cum = 0.0;
    std::size_t best_len = 0;
    const std::size_t stall_limit = std::max<std::size_t>(50, g.n / 10);
    while (!heap.empty()) {
      const Entry top = heap.top();
      heap.pop();
      if (locked[top.u] || top.version != version[top.u]) continue;
      std::size_t t;
      const double gain = best_move(top.u, t);
      if (t == p) continue;
      if (t != top.target || gain != top.gain) {
        heap.push({gain, top.u, t, version[top.u]});
        continue;
      }
      const auto from = part[top.u];
      part[top.u] = t;
      pw[from] -= g.vwgt[top.u];
      pw[t] += g.vwgt[top.u];
      --pc[from];
      ++pc[t];
      locked[top.u] = 1;
      moves.push_back({top.u, from});
      cum += gain;
      if (cum > best_cum + 1e-12) {
        best_cum = cum;
        best_len = moves.size();
      }
      if (moves.size() - best_len > stall_limit) break;
      for (std::size_t e = g.xadj[top.u]; e < g.xadj[top.u + 1]; ++e) {
        const auto v = g.adjncy[e];
        if (locked[v]) continue;
        ++version[v];
        push(v);
      }
    }
    for (std::size_t i = moves.size(); i > best_len; --i) part[moves[i - 1].u] = moves[i - 1].from;
    if (best_len == 0) break;
  }
}

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

}  // namespace

// ---- PartitionPlan --------------------------------------------------------

std::size_t balance_capacity(std::size_t n, std::size_t p, double balance_factor) {
  const std::size_t ideal = ceil_div(n, p);
  const auto cap = static_cast<std::size_t>(std::floor(balance_factor * static_cast<double>(ideal) + 1e-9));
  return std::max(cap, ideal);
}

PartitionPlan PartitionPlan::from_assignment(std::size_t p, std::vector<std::size_t> assign, double balance_factor,
                                             std::uint64_t seed, double edge_cut) {
  PartitionPlan plan;
  plan.n = assign.size();
  plan.p = p;
  plan.balance_factor = balance_factor;
  plan.seed = seed;
  plan.edge_cut = edge_cut;
  std::vector<std::vector<std::size_t>> members(p);
  for (std::size_t i = 0; i < assign.size(); ++i) {
    if (assign[i] >= p) throw ContractError("assignment references subgraph " + std::to_string(assign[i]));
    members[assign[i]].push_back(i);
  }
  std::size_t m = 0;
  for (const auto& mem : members) {
    if (mem.empty()) throw ContractError("partition plan has an empty subgraph");
    m = std::max(m, mem.size());
  }
  plan.m = m;
  plan.assign = std::move(assign);
  plan.gather.assign(p * m, -1);
  plan.mask.assign(p * m, 0);
  plan.slot.assign(plan.n, -1);
  for (std::size_t q = 0; q < p; ++q)
    for (std::size_t j = 0; j < members[q].size(); ++j) {
      plan.gather[q * m + j] = static_cast<std::int64_t>(members[q][j]);
      plan.mask[q * m + j] = 1;
      plan.slot[members[q][j]] = static_cast<std::int64_t>(q * m + j);
    }
  plan.achieved_balance = static_cast<double>(m) / static_cast<double>(ceil_div(plan.n, p));
  plan.over_balance = m > plan.capacity();
  return plan;
}

std::size_t PartitionPlan::size_of(std::size_t part) const {
  std::size_t c = 0;
  for (std::size_t j = 0; j < m; ++j) c += mask[part * m + j];
  return c;
}

std::size_t PartitionPlan::capacity() const { return balance_capacity(n, p, balance_factor); }

void PartitionPlan::validate() const {
  if (assign.size() != n || gather.size() != p * m || mask.size() != p * m || slot.size() != n) {
    throw ContractError("plan tables have inconsistent sizes");
  }
  std::vector<int> seen(n, 0);
  for (std::size_t q = 0; q < p; ++q) {
    std::size_t valid = 0;
    for (std::size_t j = 0; j < m; ++j) {
      const auto id = gather[q * m + j];
      if ((mask[q * m + j] != 0) != (id >= 0)) throw ContractError("mask disagrees with gather table");
      if (id < 0) continue;
      if (static_cast<std::size_t>(id) >= n) throw ContractError("gather table references unknown node");
      if (assign[static_cast<std::size_t>(id)] != q) throw ContractError("gather table disagrees with assignment");
      ++seen[static_cast<std::size_t>(id)];
      ++valid;
    }
    if (valid == 0) throw ContractError("subgraph " + std::to_string(q) + " is empty");
  }
  for (std::size_t i = 0; i < n; ++i)
    if (seen[i] != 1) throw ContractError("node " + std::to_string(i) + " appears " + std::to_string(seen[i]) + " times");
  std::size_t largest = 0;
  for (std::size_t q = 0; q < p; ++q) largest = std::max(largest, size_of(q));
  if (largest > capacity() && !over_balance) {
    throw ContractError("balance violated without the over_balance flag");
  }
}

double cut_weight(const SpatialGraph& g, const std::vector<std::size_t>& assign) {
  double cut = 0.0;
  for (const auto& e : g.edges())
    if (assign[e.u] != assign[e.v]) cut += e.weight;
  return cut;
}

std::vector<std::size_t> canonical_labels(const std::vector<std::size_t>& assign) {
  std::map<std::size_t, std::size_t> relabel;
  std::vector<std::size_t> out(assign.size());
  for (std::size_t i = 0; i < assign.size(); ++i) {
    auto [it, inserted] = relabel.try_emplace(assign[i], relabel.size());
    out[i] = it->second;
  }
  return out;
}

PartitionPlan partition_kway(const SpatialGraph& g, std::size_t p, double balance_factor, std::uint64_t seed) {
  const std::size_t n = g.size();
  if (p < 1 || p > n) {
    throw InputError("cannot partition " + std::to_string(n) + " nodes into " + std::to_string(p) + " subgraphs");
  }
  if (!(balance_factor >= 1.0)) throw InputError("balance_factor must be at least 1");
  const long cap = static_cast<long>(balance_capacity(n, p, balance_factor));

  std::vector<std::size_t> assign(n, 0);
  if (p == n) {
    std::iota(assign.begin(), assign.end(), 0);
  } else if (p > 1) {
    std::mt19937_64 rng(seed);
    std::vector<CoarseLevel> hierarchy;
    WGraph current = from_spatial(g);
    const std::size_t coarsen_to = std::max<std::size_t>(4 * p, 64);
    const long max_vwgt = std::max<long>(1, static_cast<long>(1.5 * static_cast<double>(n) / static_cast<double>(coarsen_to)));
    while (current.n > coarsen_to) {
      auto level = coarsen(current, rng, max_vwgt);
      if (level.graph.n * 20 > current.n * 19) break;  // < 5% shrink: stop
      WGraph next = level.graph;
      hierarchy.push_back(std::move(level));
      current = std::move(next);
    }

    // Several seeded initial partitions on the coarsest graph; keep the best.
    std::vector<std::size_t> best;
    double best_cut = std::numeric_limits<double>::infinity();
    for (int trial = 0; trial < 8; ++trial) {
      auto part = grow_regions(current, p, rng);
      rebalance(current, part, p, cap);
      refine(current, part, p, cap);
      const double c = wcut(current, part);
      const auto pw = part_weights(current, part, p);
      const bool feasible = *std::max_element(pw.begin(), pw.end()) <= cap;
      const double score = feasible ? c : c + 1e12;
      if (score < best_cut) {
        best_cut = score;
        best = part;
      }
    }

    std::vector<std::size_t> part = std::move(best);
    const WGraph original = from_spatial(g);
    for (std::size_t i = hierarchy.size(); i-- > 0;) {
      std::vector<std::size_t> projected(hierarchy[i].cmap.size());
      for (std::size_t u = 0; u < projected.size(); ++u) projected[u] = part[hierarchy[i].cmap[u]];
      part = std::move(projected);
      const WGraph& finer = i == 0 ? original : hierarchy[i - 1].graph;
      rebalance(finer, part, p, cap);
      refine(finer, part, p, cap);
    }
    rebalance(original, part, p, cap);
    assign = std::move(part);
  }
  assign = canonical_labels(assign);
  const double cut = cut_weight(g, assign);
  auto plan = PartitionPlan::from_assignment(p, std::move(assign), balance_factor, seed, cut);
  plan.validate();
  return plan;
}

// ---- scale series ---------------------------------------------------------

std::size_t max_levels(std::size_t p0) {
  std::size_t l = 1;
  while ((std::size_t{1} << l) <= p0) ++l;
  return l;
}

std::vector<std::size_t> pair_merge(const SpatialGraph& g, const PartitionPlan& plan) {
  const std::size_t p = plan.p;
  std::vector<double> w(p * p, 0.0);
  for (const auto& e : g.edges()) {
    const auto a = plan.assign[e.u], b = plan.assign[e.v];
    if (a == b) continue;
    w[a * p + b] += e.weight;
    w[b * p + a] += e.weight;
  }
  constexpr auto none = static_cast<std::size_t>(-1);
  std::vector<std::size_t> mate(p, none);
  for (std::size_t round = 0; round < p / 2; ++round) {
    double best = -1.0;
    std::size_t ba = none, bb = none;
    for (std::size_t a = 0; a < p; ++a) {
      if (mate[a] != none) continue;
      for (std::size_t b = a + 1; b < p; ++b) {
        if (mate[b] != none) continue;
        if (w[a * p + b] > best) {
          best = w[a * p + b];
          ba = a;
          bb = b;
        }
      }
    }
    mate[ba] = bb;
    mate[bb] = ba;
  }
  // Coarse subgraphs numbered by their lowest fine index.
  std::vector<std::size_t> merge(p, none);
  std::size_t next = 0;
  for (std::size_t a = 0; a < p; ++a) {
    if (merge[a] != none) continue;
    merge[a] = next;
    if (mate[a] != none) merge[mate[a]] = next;
    ++next;
  }
  return merge;
}

ScaleSeries build_scale_series(const SpatialGraph& g, std::size_t p0, std::size_t levels, double balance_factor,
                               std::uint64_t seed) {
  if (p0 < 1) throw InputError("initial subgraph count must be at least 1");
  if (levels < 1) throw InputError("level count must be at least 1");
  if (levels > max_levels(p0)) {
    throw InputError("p0=" + std::to_string(p0) + " supports at most " + std::to_string(max_levels(p0)) +
                     " levels, requested " + std::to_string(levels));
  }
  ScaleSeries series;
  series.plans.push_back(partition_kway(g, p0, balance_factor, seed));
  for (std::size_t l = 1; l < levels; ++l) {
    const auto& prev = series.plans.back();
    auto merge = pair_merge(g, prev);
    const std::size_t p = (prev.p + 1) / 2;
    std::vector<std::size_t> assign(prev.n);
    for (std::size_t i = 0; i < prev.n; ++i) assign[i] = merge[prev.assign[i]];
    const double cut = cut_weight(g, assign);
    auto plan = PartitionPlan::from_assignment(p, std::move(assign), balance_factor, seed, cut);
    plan.validate();
    series.merges.push_back(std::move(merge));
    series.plans.push_back(std::move(plan));
  }
  return series;
}

Tensor apply_plan(const Tensor& x, const PartitionPlan& plan) {
  if (x.rank() != 2 || x.dim(0) != plan.n) {
    throw DimensionError("apply_plan: input " + shape_string(x.shape()) + " does not match plan with n=" +
                         std::to_string(plan.n));
  }
  return reshape(gather_rows(x, plan.gather), {plan.p, plan.m, x.dim(1)});
}

Tensor revert_plan(const Tensor& y, const PartitionPlan& plan) {
  if (y.rank() != 3 || y.dim(0) != plan.p || y.dim(1) != plan.m) {
    throw DimensionError("revert_plan: input " + shape_string(y.shape()) + " does not match plan " +
                         std::to_string(plan.p) + "x" + std::to_string(plan.m));
  }
  return gather_rows(reshape(y, {plan.p * plan.m, y.dim(2)}), plan.slot);
}

// ---- serialisation --------------------------------------------------------

nlohmann::json plan_to_json(const PartitionPlan& plan) {
  return {{"n", plan.n},
          {"p", plan.p},
          {"m", plan.m},
          {"balance_factor", plan.balance_factor},
          {"seed", plan.seed},
          {"edge_cut", plan.edge_cut},
          {"over_balance", plan.over_balance},
          {"achieved_balance", plan.achieved_balance},
          {"assign", plan.assign}};
}

PartitionPlan plan_from_json(const nlohmann::json& j) {
  try {
    auto assign = j.at("assign").get<std::vector<std::size_t>>();
    const auto n = j.at("n").get<std::size_t>();
    if (assign.size() != n) throw InputError("plan assign has " + std::to_string(assign.size()) + " entries, n=" + std::to_string(n));
    auto plan = PartitionPlan::from_assignment(j.at("p").get<std::size_t>(), std::move(assign),
                                               j.at("balance_factor").get<double>(), j.at("seed").get<std::uint64_t>(),
                                               j.at("edge_cut").get<double>());
    if (plan.m != j.at("m").get<std::size_t>()) throw InputError("plan m disagrees with its assignment");
    plan.validate();
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed plan JSON: ") + e.what());
  } catch (const ContractError& e) {
    throw InputError(std::string("invalid plan: ") + e.what());
  }
}

nlohmann::json series_to_json(const ScaleSeries& series) {
  nlohmann::json plans = nlohmann::json::array();
  for (const auto& p : series.plans) plans.push_back(plan_to_json(p));
  return {{"plans", plans}, {"merges", series.merges}};
}

ScaleSeries series_from_json(const nlohmann::json& j) {
  ScaleSeries s;
  try {
    for (const auto& p : j.at("plans")) s.plans.push_back(plan_from_json(p));
    s.merges = j.at("merges").get<std::vector<std::vector<std::size_t>>>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed scale series JSON: ") + e.what());
  }
  if (s.plans.empty() || s.merges.size() + 1 != s.plans.size()) throw InputError("scale series merge maps do not match levels");
  for (std::size_t l = 0; l + 1 < s.plans.size(); ++l) {
    const auto& fine = s.plans[l];
    const auto& coarse = s.plans[l + 1];
    if (s.merges[l].size() != fine.p) throw InputError("merge map size mismatch at level " + std::to_string(l));
    for (std::size_t i = 0; i < fine.n; ++i)
      if (s.merges[l][fine.assign[i]] != coarse.assign[i]) throw InputError("scale series levels are not nested");
  }
  return s;
}

void save_scale_series(const ScaleSeries& series, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << series_to_json(series).dump(1) << '\n';
}

ScaleSeries load_scale_series(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  return series_from_json(j);
}

}  // namespace sbat
