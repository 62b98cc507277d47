#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace sbat {

struct Coord {
  double x = 0.0;
  double y = 0.0;
};

struct Edge {
  std::size_t u = 0;
  std::size_t v = 0;
  double weight = 1.0;
};

// Undirected weighted graph over the series' sensors, stored as symmetric
// CSR with sorted neighbour lists. Weights are finite and positive; absent
// entries are zero; there are no self-loops.
class SpatialGraph {
 public:
  SpatialGraph() = default;
  explicit SpatialGraph(std::size_t n);

  /// Each undirected edge once (either orientation). Validates the invariants.
  static SpatialGraph from_edges(std::size_t n, std::span<const Edge> edges);

  std::size_t size() const { return n_; }
  std::size_t edge_count() const { return adj_.size() / 2; }

  std::span<const std::size_t> neighbors(std::size_t i) const;
  std::span<const double> weights(std::size_t i) const;
  double weight(std::size_t i, std::size_t j) const;
  double weighted_degree(std::size_t i) const;
  double total_weight() const;

  /// Undirected edges with u < v, ordered by (u, v).
  std::vector<Edge> edges() const;

  /// Subgraph on `nodes`; node i of the result is nodes[i].
  SpatialGraph induced(std::span<const std::size_t> nodes) const;

  /// Component label per node, labels numbered in order of first node.
  std::vector<std::size_t> components() const;
  bool connected() const;

  const std::optional<std::vector<Coord>>& coords() const { return coords_; }
  void set_coords(std::vector<Coord> coords);
  double epsilon() const { return epsilon_; }
  void set_epsilon(double eps) { epsilon_ = eps; }

 private:
  std::size_t n_ = 0;
  std::vector<std::size_t> offsets_{0};
  std::vector<std::size_t> adj_;
  std::vector<double> w_;
  std::optional<std::vector<Coord>> coords_;
  double epsilon_ = 0.0;
};

/// Unit-weight edge between every pair closer than epsilon.
SpatialGraph build_epsilon_graph(std::span<const Coord> coords, double epsilon);

/// exp(-d^2 / sigma^2) kernel weights, dropped below `threshold`.
SpatialGraph build_gaussian_graph(std::span<const Coord> coords, double sigma, double threshold);

/// Edge list text: `src,dst,weight` per line, zero-based, each undirected
/// edge once. Lines starting with '#' are comments, except `# n=<count>`
/// which declares the node count (otherwise max id + 1, or `n_hint`).
SpatialGraph load_edge_list(const std::filesystem::path& path, std::optional<std::size_t> n_hint = {});
void save_edge_list(const SpatialGraph& g, const std::filesystem::path& path);

/// `node_id,x,y` per line; ids must cover 0..n-1 exactly once.
std::vector<Coord> load_coords(const std::filesystem::path& path);
void save_coords(std::span<const Coord> coords, const std::filesystem::path& path);

/// Stable 64-bit FNV-1a digest of the node count and edge list.
std::uint64_t graph_hash(const SpatialGraph& g);

// ---- spectral -------------------------------------------------------------

// Dense row-major square matrix.
struct DenseMatrix {
  std::size_t n = 0;
  std::vector<double> a;

  DenseMatrix() = default;
  explicit DenseMatrix(std::size_t size) : n(size), a(size * size, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return a[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a[i * n + j]; }
  double frobenius() const;
};

/// L = D - A.
DenseMatrix laplacian(const SpatialGraph& g);

struct EigenResult {
  std::vector<double> values;   // k ascending eigenvalues
  std::vector<double> vectors;  // n x k row-major, column j pairs with values[j]
  std::size_t n = 0;
  std::size_t k = 0;
  int sweeps = 0;

  double vec(std::size_t row, std::size_t col) const { return vectors[row * k + col]; }
};

struct JacobiOptions {
  int max_sweeps = 100;
  double symmetry_tol = 1e-10;
};

/// Smallest k eigenpairs of a symmetric matrix by cyclic Jacobi rotations.
/// Each eigenvector's first component with |v| > 1e-12 is made positive.
EigenResult sym_eigen(const DenseMatrix& mat, std::size_t k, const JacobiOptions& opts = {});

}  // namespace sbat
