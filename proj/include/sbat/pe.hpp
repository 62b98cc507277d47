#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sbat/graph.hpp"

namespace sbat {

// Laplacian eigenvector positional encoding: one k-vector per node.
struct PositionalEncoding {
  enum class Source { whole_graph, per_subgraph };

  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<double> vectors;      // n x k row-major
  std::vector<double> eigenvalues;  // per block, k entries each (zero where truncated)
  std::vector<std::size_t> block;   // node -> eigensolve block
  Source source = Source::whole_graph;
  std::vector<std::string> warnings;

  double at(std::size_t node, std::size_t j) const { return vectors[node * k + j]; }
};

/// Whole-graph eigenvectors of the k smallest eigenvalues when n fits in
/// `block_limit`, otherwise per-block eigenvectors of induced subgraphs from a
/// balanced partition into blocks of at most `block_limit` nodes.
PositionalEncoding laplacian_pe(const SpatialGraph& g, std::size_t k, std::size_t block_limit = 2000,
                                std::uint64_t seed = 0);

/// Binary little-endian f64 payload plus `<path>.json` sidecar
/// {n, k, block_limit, graph_hash}.
void save_pe_cache(const PositionalEncoding& pe, std::size_t block_limit, std::uint64_t hash,
                   const std::filesystem::path& path);
/// Loads a cache and checks the sidecar against the expected graph and limits.
PositionalEncoding load_pe_cache(const std::filesystem::path& path, std::size_t k, std::size_t block_limit,
                                 std::uint64_t hash);

}  // namespace sbat
