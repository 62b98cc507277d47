#include "sbat/graph.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>

#include "sbat/error.hpp"

namespace sbat {

namespace {

void check_coords(std::span<const Coord> coords) {
  if (coords.empty()) throw InputError("graph construction needs at least one node");
  for (std::size_t i = 0; i < coords.size(); ++i) {
    if (!std::isfinite(coords[i].x) || !std::isfinite(coords[i].y)) {
      throw InputError("non-finite coordinate for node " + std::to_string(i));
    }
  }
}

double distance(const Coord& a, const Coord& b) { return std::hypot(a.x - b.x, a.y - b.y); }

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_index(const std::string& cell, const std::filesystem::path& path, std::size_t line_no) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(cell, &pos);
    if (pos != cell.size() || v < 0) throw std::invalid_argument("bad");
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw LoadError(path.string() + ":" + std::to_string(line_no) + ": bad node id '" + cell + "'");
  }
}

double parse_real(const std::string& cell, const std::filesystem::path& path, std::size_t line_no) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(cell, &pos);
    if (pos != cell.size()) throw std::invalid_argument("bad");
    return v;
  } catch (const std::exception&) {
    throw LoadError(path.string() + ":" + std::to_string(line_no) + ": bad number '" + cell + "'");
  }
}

}  // namespace

SpatialGraph::SpatialGraph(std::size_t n) : n_(n), offsets_(n + 1, 0) {}

SpatialGraph SpatialGraph::from_edges(std::size_t n, std::span<const Edge> edges) {
  std::vector<std::vector<std::pair<std::size_t, double>>> rows(n);
  for (const auto& e : edges) {
    if (e.u >= n || e.v >= n) {
      throw InputError("edge (" + std::to_string(e.u) + "," + std::to_string(e.v) + ") outside " +
                       std::to_string(n) + " nodes");
    }
    if (e.u == e.v) throw InputError("self-loop on node " + std::to_string(e.u));
    if (!std::isfinite(e.weight) || e.weight < 0.0) {
      throw InputError("edge (" + std::to_string(e.u) + "," + std::to_string(e.v) + ") has invalid weight");
    }
    if (e.weight == 0.0) continue;
    rows[e.u].emplace_back(e.v, e.weight);
    rows[e.v].emplace_back(e.u, e.weight);
  }
  SpatialGraph g(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& r = rows[i];
    std::sort(r.begin(), r.end());
    for (std::size_t j = 1; j < r.size(); ++j) {
      if (r[j].first == r[j - 1].first) {
        throw InputError("duplicate edge (" + std::to_string(i) + "," + std::to_string(r[j].first) + ")");
      }
    }
    for (const auto& [v, w] : r) {
      g.adj_.push_back(v);
      g.w_.push_back(w);
    }
    g.offsets_[i + 1] = g.adj_.size();
  }
  return g;
}

std::span<const std::size_t> SpatialGraph::neighbors(std::size_t i) const {
  return {adj_.data() + offsets_[i], offsets_[i + 1] - offsets_[i]};
}

std::span<const double> SpatialGraph::weights(std::size_t i) const {
  return {w_.data() + offsets_[i], offsets_[i + 1] - offsets_[i]};
}

double SpatialGraph::weight(std::size_t i, std::size_t j) const {
  const auto nb = neighbors(i);
  const auto it = std::lower_bound(nb.begin(), nb.end(), j);
  if (it == nb.end() || *it != j) return 0.0;
  return weights(i)[static_cast<std::size_t>(it - nb.begin())];
}

double SpatialGraph::weighted_degree(std::size_t i) const {
  double d = 0.0;
  for (double w : weights(i)) d += w;
  return d;
}

double SpatialGraph::total_weight() const {
  double t = 0.0;
  for (const auto& e : edges()) t += e.weight;
  return t;
}

std::vector<Edge> SpatialGraph::edges() const {
  std::vector<Edge> out;
  for (std::size_t i = 0; i < n_; ++i) {
    const auto nb = neighbors(i);
    const auto ws = weights(i);
    for (std::size_t j = 0; j < nb.size(); ++j)
      if (nb[j] > i) out.push_back({i, nb[j], ws[j]});
  }
  return out;
}

SpatialGraph SpatialGraph::induced(std::span<const std::size_t> nodes) const {
  std::vector<std::int64_t> local(n_, -1);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i] >= n_ || local[nodes[i]] >= 0) throw ContractError("induced: invalid or repeated node");
    local[nodes[i]] = static_cast<std::int64_t>(i);
  }
  std::vector<Edge> es;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto nb = neighbors(nodes[i]);
    const auto ws = weights(nodes[i]);
    for (std::size_t j = 0; j < nb.size(); ++j) {
      const auto l = local[nb[j]];
      if (l > static_cast<std::int64_t>(i)) es.push_back({i, static_cast<std::size_t>(l), ws[j]});
    }
  }
  SpatialGraph g = from_edges(nodes.size(), es);
  if (coords_) {
    std::vector<Coord> c;
    for (auto v : nodes) c.push_back((*coords_)[v]);
    g.coords_ = std::move(c);
  }
  g.epsilon_ = epsilon_;
  return g;
}

std::vector<std::size_t> SpatialGraph::components() const {
  constexpr auto unset = static_cast<std::size_t>(-1);
  std::vector<std::size_t> label(n_, unset);
  std::size_t next = 0;
  std::vector<std::size_t> stack;
  for (std::size_t s = 0; s < n_; ++s) {
    if (label[s] != unset) continue;
    label[s] = next;
    stack.push_back(s);
    while (!stack.empty()) {
      const auto u = stack.back();
      stack.pop_back();
      for (auto v : neighbors(u)) {
        if (label[v] == unset) {
          label[v] = next;
          stack.push_back(v);
        }
      }
    }
    ++next;
  }
  return label;
}

bool SpatialGraph::connected() const {
  if (n_ == 0) return true;
  const auto label = components();
  return std::all_of(label.begin(), label.end(), [](std::size_t l) { return l == 0; });
}

void SpatialGraph::set_coords(std::vector<Coord> coords) {
  if (coords.size() != n_) {
    throw InputError("coordinate count " + std::to_string(coords.size()) + " does not match " +
                     std::to_string(n_) + " nodes");
  }
  coords_ = std::move(coords);
}

SpatialGraph build_epsilon_graph(std::span<const Coord> coords, double epsilon) {
  check_coords(coords);
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw InputError("epsilon must be positive and finite");
  std::vector<Edge> es;
  for (std::size_t i = 0; i < coords.size(); ++i)
    for (std::size_t j = i + 1; j < coords.size(); ++j)
      if (distance(coords[i], coords[j]) < epsilon) es.push_back({i, j, 1.0});
  auto g = SpatialGraph::from_edges(coords.size(), es);
  g.set_coords({coords.begin(), coords.end()});
  g.set_epsilon(epsilon);
  return g;
}

SpatialGraph build_gaussian_graph(std::span<const Coord> coords, double sigma, double threshold) {
  check_coords(coords);
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InputError("sigma must be positive and finite");
  if (!(threshold >= 0.0 && threshold < 1.0)) throw InputError("threshold must lie in [0, 1)");
  std::vector<Edge> es;
  for (std::size_t i = 0; i < coords.size(); ++i)
    for (std::size_t j = i + 1; j < coords.size(); ++j) {
      const double d = distance(coords[i], coords[j]);
      const double w = std::exp(-(d * d) / (sigma * sigma));
      if (w >= threshold && w > 0.0) es.push_back({i, j, w});
    }
  auto g = SpatialGraph::from_edges(coords.size(), es);
  g.set_coords({coords.begin(), coords.end()});
  return g;
}

SpatialGraph load_edge_list(const std::filesystem::path& path, std::optional<std::size_t> n_hint) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open graph file " + path.string());
  std::vector<Edge> es;
  std::optional<std::size_t> declared;
  std::size_t max_id = 0;
  bool any = false;
  std::string line;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    line = trim(line);
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto body = trim(line.substr(1));
      if (body.rfind("n=", 0) == 0) declared = parse_index(trim(body.substr(2)), path, line_no);
      continue;
    }
    const auto cells = split_csv(line);
    if (cells.size() != 3) {
      throw LoadError(path.string() + ":" + std::to_string(line_no) + ": expected src,dst,weight");
    }
    Edge e{parse_index(trim(cells[0]), path, line_no), parse_index(trim(cells[1]), path, line_no),
           parse_real(trim(cells[2]), path, line_no)};
    max_id = std::max({max_id, e.u, e.v});
    any = true;
    es.push_back(e);
  }
  std::size_t n = declared ? *declared : (n_hint ? *n_hint : (any ? max_id + 1 : 0));
  if (declared && n_hint && *declared != *n_hint) {
    throw LoadError("graph declares " + std::to_string(*declared) + " nodes, expected " + std::to_string(*n_hint));
  }
  if (any && max_id >= n) throw LoadError("graph references node " + std::to_string(max_id) + " beyond n=" + std::to_string(n));
  try {
    return SpatialGraph::from_edges(n, es);
  } catch (const InputError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

void save_edge_list(const SpatialGraph& g, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write graph file " + path.string());
  out.precision(17);
  out << "# n=" << g.size() << '\n';
  for (const auto& e : g.edges()) out << e.u << ',' << e.v << ',' << e.weight << '\n';
}

std::vector<Coord> load_coords(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open coordinates file " + path.string());
  std::vector<std::pair<std::size_t, Coord>> rows;
  std::string line;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto cells = split_csv(line);
    if (cells.size() != 3) throw LoadError(path.string() + ":" + std::to_string(line_no) + ": expected node_id,x,y");
    rows.emplace_back(parse_index(trim(cells[0]), path, line_no),
                      Coord{parse_real(trim(cells[1]), path, line_no), parse_real(trim(cells[2]), path, line_no)});
  }
  std::vector<Coord> out(rows.size());
  std::vector<bool> seen(rows.size(), false);
  for (const auto& [id, c] : rows) {
    if (id >= rows.size() || seen[id]) throw LoadError(path.string() + ": node ids must cover 0..n-1 exactly once");
    if (!std::isfinite(c.x) || !std::isfinite(c.y)) throw LoadError(path.string() + ": non-finite coordinate");
    seen[id] = true;
    out[id] = c;
  }
  return out;
}

void save_coords(std::span<const Coord> coords, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write coordinates file " + path.string());
  out.precision(17);
  for (std::size_t i = 0; i < coords.size(); ++i) out << i << ',' << coords[i].x << ',' << coords[i].y << '\n';
}

std::uint64_t graph_hash(const SpatialGraph& g) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xffu;
      h *= 1099511628211ull;
    }
  };
  mix(g.size());
  for (const auto& e : g.edges()) {
    mix(e.u);
    mix(e.v);
    mix(std::bit_cast<std::uint64_t>(e.weight));
  }
  return h;
}

// ---- spectral -------------------------------------------------------------

double DenseMatrix::frobenius() const {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

DenseMatrix laplacian(const SpatialGraph& g) {
  DenseMatrix l(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto nb = g.neighbors(i);
    const auto ws = g.weights(i);
    double deg = 0.0;
    for (std::size_t j = 0; j < nb.size(); ++j) {
      l(i, nb[j]) = -ws[j];
      deg += ws[j];
    }
    l(i, i) = deg;
  }
  return l;
}

EigenResult sym_eigen(const DenseMatrix& mat, std::size_t k, const JacobiOptions& opts) {
  const std::size_t n = mat.n;
  if (mat.a.size() != n * n) throw DimensionError("sym_eigen: matrix storage does not match n");
  if (k < 1 || k > n) {
    throw ContractError("sym_eigen: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(mat(i, j) - mat(j, i)) > opts.symmetry_tol) {
        throw ContractError("sym_eigen: matrix is not symmetric at (" + std::to_string(i) + "," +
                            std::to_string(j) + ")");
      }

  DenseMatrix a = mat;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(j, i) = a(i, j);
  DenseMatrix v(n);
  for (std::size_t i = 0; i < n; ++i) v(i, i) = 1.0;

  const double norm = mat.frobenius();
  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) s += a(i, j) * a(i, j);
    return std::sqrt(2.0 * s);
  };

  int sweep = 0;
  for (; sweep < opts.max_sweeps; ++sweep) {
    const double off = off_norm();
    if (off <= 1e-15 * norm || off == 0.0) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p), aqq = a(q, q);
        // Off-diagonal entries below the diagonals' resolution are dropped.
        if (sweep > 3 && std::abs(app) + 100.0 * std::abs(apq) == std::abs(app) &&
            std::abs(aqq) + 100.0 * std::abs(apq) == std::abs(aqq)) {
          a(p, q) = a(q, p) = 0.0;
          continue;
        }
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t r = 0; r < n; ++r) {
          if (r == p || r == q) continue;
          const double arp = a(r, p), arq = a(r, q);
          const double np = c * arp - s * arq;
          const double nq = s * arp + c * arq;
          a(r, p) = a(p, r) = np;
          a(r, q) = a(q, r) = nq;
        }
        a(p, p) = app - t * apq;
        a(q, q) = aqq + t * apq;
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
          const double vrp = v(r, p), vrq = v(r, q);
          v(r, p) = c * vrp - s * vrq;
          v(r, q) = s * vrp + c * vrq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) < a(y, y); });

  EigenResult res;
  res.n = n;
  res.k = k;
  res.sweeps = sweep;
  res.values.resize(k);
  res.vectors.assign(n * k, 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t src = order[j];
    res.values[j] = a(src, src);
    double sign = 1.0;
    for (std::size_t r = 0; r < n; ++r) {
      if (std::abs(v(r, src)) > 1e-12) {
        sign = v(r, src) < 0.0 ? -1.0 : 1.0;
        break;
      }
    }
    for (std::size_t r = 0; r < n; ++r) res.vectors[r * k + j] = sign * v(r, src);
  }

  // Residual audit: ||mat v - lambda v|| against the documented bound.
  const double bound = 1e-8 * std::max(1.0, norm);
  double worst = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    double s = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      double mv = 0.0;
      for (std::size_t c = 0; c < n; ++c) mv += mat(r, c) * res.vectors[c * k + j];
      const double d = mv - res.values[j] * res.vectors[r * k + j];
      s += d * d;
    }
    worst = std::max(worst, std::sqrt(s));
  }
  if (worst > bound) {
    std::ostringstream os;
    os << "sym_eigen: no convergence after " << sweep << " sweeps, residual " << worst << " exceeds " << bound;
    throw NumericError(os.str());
  }
  return res;
}

}  // namespace sbat
