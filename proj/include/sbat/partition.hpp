#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "sbat/graph.hpp"
#include "sbat/tensor.hpp"

namespace sbat {

// Node-to-subgraph assignment for one scale together with the padded
// P x M layout used by the attention blocks. Subgraphs are numbered in order
// of their smallest node id; inside a subgraph nodes are listed ascending.
struct PartitionPlan {
  std::size_t n = 0;
  std::size_t p = 0;
  std::size_t m = 0;
  double balance_factor = 1.0;
  std::uint64_t seed = 0;
  double edge_cut = 0.0;
  bool over_balance = false;
  double achieved_balance = 1.0;  // largest subgraph / ceil(n / p)

  std::vector<std::size_t> assign;   // n entries
  std::vector<std::int64_t> gather;  // p x m node ids, -1 for padding
  std::vector<std::uint8_t> mask;    // p x m validity
  std::vector<std::int64_t> slot;    // node -> flat index into gather

  /// Builds the layout from an assignment. Subgraph labels must already be
  /// canonical (see canonical_labels) and every subgraph non-empty.
  static PartitionPlan from_assignment(std::size_t p, std::vector<std::size_t> assign, double balance_factor,
                                       std::uint64_t seed, double edge_cut);

  std::size_t size_of(std::size_t part) const;
  /// Largest subgraph size allowed by the balance factor.
  std::size_t capacity() const;

  /// Throws ContractError naming the first broken invariant.
  void validate() const;
};

/// Total weight of edges whose endpoints lie in different subgraphs.
double cut_weight(const SpatialGraph& g, const std::vector<std::size_t>& assign);

/// Relabels parts in order of first appearance (smallest node id first).
std::vector<std::size_t> canonical_labels(const std::vector<std::size_t>& assign);

/// Largest part allowed for n nodes in p parts under `balance_factor`.
std::size_t balance_capacity(std::size_t n, std::size_t p, double balance_factor);

/// Multilevel k-way partition: heavy-edge matching coarsening, greedy
/// region growing on the coarsest graph, boundary FM refinement with
/// rebalancing while projecting back.
PartitionPlan partition_kway(const SpatialGraph& g, std::size_t p, double balance_factor = 1.3,
                             std::uint64_t seed = 0);

// L nested plans with subgraph counts p0, ceil(p0/2), ... Level i+1 is
// formed by pairing the subgraphs of level i.
struct ScaleSeries {
  std::vector<PartitionPlan> plans;
  std::vector<std::vector<std::size_t>> merges;  // merges[i][s]: level-i subgraph s -> level-(i+1) subgraph

  std::size_t levels() const { return plans.size(); }
};

/// Largest level count admitted by p0 (p0 >= 2^(l-1)).
std::size_t max_levels(std::size_t p0);

/// Pairs subgraphs greedily by largest shared cut weight (ties: lowest
/// indices); an odd one out is carried up alone. Returns the merge map.
std::vector<std::size_t> pair_merge(const SpatialGraph& g, const PartitionPlan& plan);

ScaleSeries build_scale_series(const SpatialGraph& g, std::size_t p0, std::size_t levels,
                               double balance_factor = 1.3, std::uint64_t seed = 0);

/// [n x D] -> [p x m x D], padded slots zero.
Tensor apply_plan(const Tensor& x, const PartitionPlan& plan);
/// [p x m x D] -> [n x D], padded slots dropped.
Tensor revert_plan(const Tensor& y, const PartitionPlan& plan);

nlohmann::json plan_to_json(const PartitionPlan& plan);
PartitionPlan plan_from_json(const nlohmann::json& j);
nlohmann::json series_to_json(const ScaleSeries& series);
ScaleSeries series_from_json(const nlohmann::json& j);
void save_scale_series(const ScaleSeries& series, const std::filesystem::path& path);
ScaleSeries load_scale_series(const std::filesystem::path& path);

}  // namespace sbat
