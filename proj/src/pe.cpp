#include "sbat/pe.hpp"

#include <algorithm>
#include <bit>
#include <fstream>

#include <json.hpp>

#include "sbat/binary_io.hpp"
#include "sbat/error.hpp"
#include "sbat/partition.hpp"

namespace sbat {

namespace {

void solve_block(const SpatialGraph& g, std::span<const std::size_t> nodes, std::size_t block_id, std::size_t k,
                 PositionalEncoding& pe) {
  const SpatialGraph sub = g.induced(nodes);
  const std::size_t k_eff = std::min(k, nodes.size());
  if (k_eff < k) {
    pe.warnings.push_back("block " + std::to_string(block_id) + " has " + std::to_string(nodes.size()) +
                          " nodes; positional encoding truncated to " + std::to_string(k_eff) +
                          " eigenvectors and zero-padded");
  }
  const auto eig = sym_eigen(laplacian(sub), k_eff);
  for (std::size_t j = 0; j < k_eff; ++j) pe.eigenvalues[block_id * k + j] = eig.values[j];
  for (std::size_t r = 0; r < nodes.size(); ++r) {
    pe.block[nodes[r]] = block_id;
    for (std::size_t j = 0; j < k_eff; ++j) pe.vectors[nodes[r] * k + j] = eig.vec(r, j);
  }
}

}  // namespace

PositionalEncoding laplacian_pe(const SpatialGraph& g, std::size_t k, std::size_t block_limit, std::uint64_t seed) {
  if (k < 1) throw InputError("positional encoding needs k >= 1");
  if (block_limit < k + 1) {
    throw InputError("block_limit " + std::to_string(block_limit) + " must be at least k+1=" + std::to_string(k + 1));
  }
  const std::size_t n = g.size();
  if (n == 0) throw InputError("positional encoding of an empty graph");
  PositionalEncoding pe;
  pe.n = n;
  pe.k = k;
  pe.vectors.assign(n * k, 0.0);
  pe.block.assign(n, 0);
  if (n <= block_limit) {
    pe.source = PositionalEncoding::Source::whole_graph;
    pe.eigenvalues.assign(k, 0.0);
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    solve_block(g, all, 0, k, pe);
    return pe;
  }
  pe.source = PositionalEncoding::Source::per_subgraph;
  const std::size_t blocks = (n + block_limit - 1) / block_limit;
  const std::size_t ideal = (n + blocks - 1) / blocks;
  const double factor = static_cast<double>(block_limit) / static_cast<double>(ideal);
  const auto plan = partition_kway(g, blocks, factor, seed);
  if (plan.m > block_limit) throw ContractError("block partition exceeded block_limit");
  pe.eigenvalues.assign(blocks * k, 0.0);
  for (std::size_t b = 0; b < blocks; ++b) {
    std::vector<std::size_t> nodes;
    for (std::size_t j = 0; j < plan.m; ++j)
      if (plan.mask[b * plan.m + j]) nodes.push_back(static_cast<std::size_t>(plan.gather[b * plan.m + j]));
    solve_block(g, nodes, b, k, pe);
  }
  return pe;
}

void save_pe_cache(const PositionalEncoding& pe, std::size_t block_limit, std::uint64_t hash,
                   const std::filesystem::path& path) {
  write_f64_file(path, pe.vectors);
  nlohmann::json side = {{"n", pe.n}, {"k", pe.k}, {"block_limit", block_limit}, {"graph_hash", hash}};
  std::ofstream out(sidecar_path(path));
  if (!out) throw InputError("cannot write " + sidecar_path(path).string());
  out << side.dump(1) << '\n';
}

PositionalEncoding load_pe_cache(const std::filesystem::path& path, std::size_t k, std::size_t block_limit,
                                 std::uint64_t hash) {
  const auto side = read_json_file(sidecar_path(path));
  PositionalEncoding pe;
  try {
    pe.n = side.at("n").get<std::size_t>();
    pe.k = side.at("k").get<std::size_t>();
    if (pe.k != k || side.at("block_limit").get<std::size_t>() != block_limit ||
        side.at("graph_hash").get<std::uint64_t>() != hash) {
      throw LoadError("positional encoding cache " + path.string() + " was built for a different graph or settings");
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed PE sidecar: " + std::string(e.what()));
  }
  pe.vectors = read_f64_file(path, pe.n * pe.k);
  pe.block.assign(pe.n, 0);
  return pe;
}

}  // namespace sbat
