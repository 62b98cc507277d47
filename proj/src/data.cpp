#include "sbat/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "sbat/binary_io.hpp"
#include "sbat/error.hpp"

namespace sbat {

namespace {

std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    auto cell = line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
    while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
    while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r')) cell.remove_suffix(1);
    cells.push_back(cell);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return cells;
}

template <typename T>
T parse_cell(std::string_view cell, const std::filesystem::path& path, std::size_t line_no) {
  T v{};
  const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (res.ec != std::errc() || res.ptr != cell.data() + cell.size()) {
    throw LoadError(path.string() + ":" + std::to_string(line_no) + ": cannot parse '" + std::string(cell) + "'");
  }
  return v;
}

void check_finite(const std::vector<double>& values, const SeriesHeader& h, const std::filesystem::path& path) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      const std::size_t ch = i % h.c, step = (i / h.c) % h.t, node = i / (h.c * h.t);
      throw NonFiniteError(path.string() + ": non-finite value at node " + std::to_string(node) + ", step " +
                           std::to_string(step) + ", channel " + std::to_string(ch));
    }
  }
}

Series load_csv(const std::filesystem::path& path, const SeriesHeader& h) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open series file " + path.string());
  const std::size_t total = h.n * h.t;
  Series s{h, std::vector<double>(total * h.c, 0.0)};
  std::vector<bool> seen(total, false);
  std::size_t rows = 0;
  std::string line;
  bool header_seen = false;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    if (line.empty() || line[0] == '#') continue;
    const auto cells = split_commas(line);
    if (!header_seen) {
      header_seen = true;
      if (cells.size() >= 2 && cells[0] == "node") {
        if (cells.size() != 2 + h.c) {
          throw ShapeMismatchError(path.string() + ": header lists " + std::to_string(cells.size() - 2) +
                                   " channels, sidecar declares c=" + std::to_string(h.c));
        }
        continue;
      }
    }
    if (cells.size() != 2 + h.c) {
      throw ShapeMismatchError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                               std::to_string(2 + h.c) + " columns, found " + std::to_string(cells.size()));
    }
    const auto node = parse_cell<std::size_t>(cells[0], path, line_no);
    const auto step = parse_cell<std::size_t>(cells[1], path, line_no);
    if (node >= h.n || step >= h.t) {
      throw ShapeMismatchError(path.string() + ":" + std::to_string(line_no) + ": (node " + std::to_string(node) +
                               ", step " + std::to_string(step) + ") outside the declared " + std::to_string(h.n) +
                               " x " + std::to_string(h.t));
    }
    const std::size_t cell = node * h.t + step;
    if (seen[cell]) throw LoadError(path.string() + ":" + std::to_string(line_no) + ": duplicate row");
    seen[cell] = true;
    ++rows;
    for (std::size_t ch = 0; ch < h.c; ++ch) {
      const std::string_view text = cells[2 + ch];
      double v = 0.0;
      if (text == "nan" || text == "NaN" || text == "NAN") {
        v = std::numeric_limits<double>::quiet_NaN();
      } else {
        v = parse_cell<double>(text, path, line_no);
      }
      s.values[cell * h.c + ch] = v;
    }
  }
  if (rows != total) {
    throw ShapeMismatchError(path.string() + ": " + std::to_string(rows) + " rows, sidecar declares " +
                             std::to_string(h.n) + " x " + std::to_string(h.t) + " = " + std::to_string(total));
  }
  return s;
}

ErrorStats finish(double abs_sum, double sq_sum, double pct_sum, std::size_t count, std::size_t pct_count) {
  ErrorStats s;
  s.count = count;
  s.excluded = count - pct_count;
  if (count > 0) {
    s.mae = abs_sum / static_cast<double>(count);
    s.rmse = std::sqrt(sq_sum / static_cast<double>(count));
  }
  if (pct_count > 0) s.mape_pct = 100.0 * pct_sum / static_cast<double>(pct_count);
  if (s.rmse + 1e-12 * std::max(1.0, s.rmse) < s.mae) {
    throw ContractError("metrics: rmse " + std::to_string(s.rmse) + " below mae " + std::to_string(s.mae));
  }
  return s;
}

nlohmann::json stats_json(const ErrorStats& s) {
  nlohmann::json j = {{"mae", s.mae}, {"rmse", s.rmse}, {"count", s.count}, {"excluded", s.excluded}};
  j["mape_pct"] = s.mape_pct ? nlohmann::json(*s.mape_pct) : nlohmann::json(nullptr);
  return j;
}

}  // namespace

// ---- series files ---------------------------------------------------------

nlohmann::json SeriesHeader::to_json() const {
  return {{"n", n}, {"t", t}, {"c", c}, {"freq_minutes", freq_minutes}, {"name", name}};
}

SeriesHeader SeriesHeader::from_json(const nlohmann::json& j) {
  SeriesHeader h;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "n") {
        h.n = value.get<std::size_t>();
      } else if (key == "t") {
        h.t = value.get<std::size_t>();
      } else if (key == "c") {
        h.c = value.get<std::size_t>();
      } else if (key == "freq_minutes") {
        h.freq_minutes = value.get<double>();
      } else if (key == "name") {
        h.name = value.get<std::string>();
      } else {
        throw LoadError("series header: unknown key '" + key + "'");
      }
    }
    if (!j.contains("n") || !j.contains("t") || !j.contains("c")) throw LoadError("series header: n, t and c are required");
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("series header: ") + e.what());
  }
  if (h.n == 0 || h.t == 0 || h.c == 0) throw LoadError("series header: n, t and c must be positive");
  return h;
}

SeriesFormat series_format_for(const std::filesystem::path& path) {
  return path.extension() == ".csv" ? SeriesFormat::csv : SeriesFormat::binary;
}

void save_series(const std::filesystem::path& path, const Series& series) {
  const auto& h = series.header;
  if (series.values.size() != h.n * h.t * h.c) {
    throw DimensionError("save_series: payload of " + std::to_string(series.values.size()) + " values for header " +
                         std::to_string(h.n) + "x" + std::to_string(h.t) + "x" + std::to_string(h.c));
  }
  if (series_format_for(path) == SeriesFormat::csv) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw InputError("cannot write " + path.string());
    out << "node,step";
    for (std::size_t ch = 0; ch < h.c; ++ch) out << ",c" << ch;
    out << '\n';
    for (std::size_t i = 0; i < h.n; ++i) {
      for (std::size_t s = 0; s < h.t; ++s) {
        out << i << ',' << s;
        for (std::size_t ch = 0; ch < h.c; ++ch) out << ',' << format_double(series.at(i, s, ch));
        out << '\n';
      }
    }
    if (!out) throw InputError("write failed for " + path.string());
  } else {
    write_f64_file(path, series.values);
  }
  write_json_file(sidecar_path(path), h.to_json());
}

Series load_series(const std::filesystem::path& path) {
  const SeriesHeader h = SeriesHeader::from_json(read_json_file(sidecar_path(path)));
  Series s;
  if (series_format_for(path) == SeriesFormat::csv) {
    s = load_csv(path, h);
  } else {
    std::error_code ec;
    const auto bytes = std::filesystem::file_size(path, ec);
    if (ec) throw LoadError("cannot open series file " + path.string());
    const std::size_t expected = h.n * h.t * h.c;
    if (bytes != expected * sizeof(double)) {
      throw ShapeMismatchError(path.string() + ": payload holds " + std::to_string(bytes / sizeof(double)) +
                               " values, header declares " + std::to_string(h.n) + " x " + std::to_string(h.t) +
                               " x " + std::to_string(h.c));
    }
    s.header = h;
    s.values = read_f64_file(path, expected);
  }
  check_finite(s.values, h, path);
  return s;
}

Dataset load_dataset(const std::filesystem::path& series_path, const std::filesystem::path& graph_path,
                     const std::optional<std::filesystem::path>& coords_path) {
  Dataset d;
  d.series = load_series(series_path);
  d.graph = load_edge_list(graph_path);
  if (d.graph.size() != d.series.header.n) {
    throw NodeMismatchError("series " + series_path.string() + " has " + std::to_string(d.series.header.n) +
                            " nodes but graph " + graph_path.string() + " has " + std::to_string(d.graph.size()));
  }
  if (coords_path) {
    d.coords = load_coords(*coords_path);
    if (d.coords.size() != d.series.header.n) {
      throw NodeMismatchError("coordinates " + coords_path->string() + " list " + std::to_string(d.coords.size()) +
                              " nodes, series has " + std::to_string(d.series.header.n));
    }
    d.graph.set_coords(d.coords);
  }
  return d;
}

// ---- splits and windows ---------------------------------------------------

SplitRanges chrono_split(std::size_t total_steps, const std::vector<double>& ratios, std::size_t min_len) {
  if (ratios.size() != 3) throw ConfigError("split ratios: expected three values");
  double sum = 0.0;
  for (double r : ratios) {
    if (!(r > 0.0)) throw ConfigError("split ratios must be positive");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1, got " + std::to_string(sum));
  const auto part = [&](double r) {
    // Guard against 0.6 * 10 landing at 5.999...
    return static_cast<std::size_t>(std::floor(r * static_cast<double>(total_steps) + 1e-9));
  };
  const std::size_t n_train = part(ratios[0]);
  const std::size_t n_val = part(ratios[1]);
  SplitRanges s;
  s.train = {0, n_train};
  s.val = {n_train, n_train + n_val};
  s.test = {n_train + n_val, total_steps};
  if (min_len > 0) {
    const char* names[] = {"train", "val", "test"};
    const StepRange* ranges[] = {&s.train, &s.val, &s.test};
    for (int i = 0; i < 3; ++i) {
      if (ranges[i]->size() < min_len) {
        throw ConfigError(std::string(names[i]) + " split has " + std::to_string(ranges[i]->size()) +
                          " steps, fewer than T+F=" + std::to_string(min_len));
      }
    }
  }
  return s;
}

WindowSet make_windows(StepRange range, std::size_t t, std::size_t f, std::size_t stride) {
  if (t == 0 || f == 0 || stride == 0) throw InputError("make_windows: t, f and stride must be positive");
  WindowSet w;
  w.range = range;
  w.t = t;
  w.f = f;
  w.stride = stride;
  if (range.size() < t + f) {
    w.too_short = true;
    return w;
  }
  for (std::size_t s = range.begin; s + t + f <= range.end; s += stride) w.starts.push_back(s);
  return w;
}

Batch make_batch(const Series& series, std::span<const std::size_t> starts, std::size_t t, std::size_t f) {
  const auto& h = series.header;
  const std::size_t b = starts.size();
  std::vector<double> xv(b * h.n * t * h.c), yv(b * h.n * f * h.c);
  for (std::size_t k = 0; k < b; ++k) {
    const std::size_t s = starts[k];
    if (s + t + f > h.t) throw DimensionError("make_batch: window at " + std::to_string(s) + " exceeds the series");
    for (std::size_t i = 0; i < h.n; ++i) {
      const double* src = series.values.data() + (i * h.t + s) * h.c;
      std::copy_n(src, t * h.c, xv.data() + ((k * h.n + i) * t) * h.c);
      std::copy_n(src + t * h.c, f * h.c, yv.data() + ((k * h.n + i) * f) * h.c);
    }
  }
  return {Tensor::from({b, h.n, t, h.c}, std::move(xv)), Tensor::from({b, h.n, f, h.c}, std::move(yv))};
}

// ---- normalisation --------------------------------------------------------

Normalizer Normalizer::fit(const Series& series, StepRange train) {
  const auto& h = series.header;
  if (train.size() == 0 || train.end > h.t) throw InputError("normalizer: empty or out-of-range training range");
  Normalizer z;
  z.mean.assign(h.c, 0.0);
  z.std.assign(h.c, 0.0);
  const double count = static_cast<double>(h.n * train.size());
  for (std::size_t ch = 0; ch < h.c; ++ch) {
    double sum = 0.0;
    for (std::size_t i = 0; i < h.n; ++i)
      for (std::size_t s = train.begin; s < train.end; ++s) sum += series.at(i, s, ch);
    const double mu = sum / count;
    double sq = 0.0;
    for (std::size_t i = 0; i < h.n; ++i)
      for (std::size_t s = train.begin; s < train.end; ++s) sq += (series.at(i, s, ch) - mu) * (series.at(i, s, ch) - mu);
    const double sd = std::sqrt(sq / count);
    z.mean[ch] = mu;
    z.std[ch] = sd > 0.0 ? sd : 1.0;
  }
  return z;
}

void Normalizer::apply_inplace(std::span<double> values) const {
  const std::size_t c = mean.size();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = (values[i] - mean[i % c]) / std[i % c];
}

void Normalizer::invert_inplace(std::span<double> values) const {
  const std::size_t c = mean.size();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = values[i] * std[i % c] + mean[i % c];
}

Series Normalizer::apply(const Series& series) const {
  if (series.header.c != mean.size()) throw DimensionError("normalizer: channel count mismatch");
  Series out = series;
  apply_inplace(out.values);
  return out;
}

nlohmann::json Normalizer::to_json() const { return {{"mean", mean}, {"std", std}}; }

Normalizer Normalizer::from_json(const nlohmann::json& j) {
  Normalizer z;
  try {
    z.mean = j.at("mean").get<std::vector<double>>();
    z.std = j.at("std").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("normalizer: ") + e.what());
  }
  if (z.mean.size() != z.std.size() || z.mean.empty()) throw LoadError("normalizer: mean/std sizes disagree");
  for (double s : z.std) {
    if (!(s > 0.0)) throw LoadError("normalizer: std must be positive");
  }
  return z;
}

// ---- synthetic data -------------------------------------------------------

nlohmann::json SynthConfig::to_json() const {
  return {{"n", n},
          {"steps", steps},
          {"gamma", gamma},
          {"season_amp", season_amp},
          {"tau", tau},
          {"noise_std", noise_std},
          {"epsilon", epsilon},
          {"freq_minutes", freq_minutes},
          {"seed", seed}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  SynthConfig c;
  for (const auto& [key, value] : j.items()) {
    const std::string path = where + "." + key;
    auto need_uint = [&]() {
      if (!is_json_count(value)) throw ConfigError(path + ": expected a non-negative integer");
      return value.get<std::uint64_t>();
    };
    auto need_real = [&]() {
      if (!value.is_number()) throw ConfigError(path + ": expected a number");
      return value.get<double>();
    };
    if (key == "n") {
      c.n = need_uint();
    } else if (key == "steps") {
      c.steps = need_uint();
    } else if (key == "gamma") {
      c.gamma = need_real();
    } else if (key == "season_amp") {
      c.season_amp = need_real();
    } else if (key == "tau") {
      c.tau = need_real();
    } else if (key == "noise_std") {
      c.noise_std = need_real();
    } else if (key == "epsilon") {
      c.epsilon = need_real();
    } else if (key == "freq_minutes") {
      c.freq_minutes = need_real();
    } else if (key == "seed") {
      c.seed = need_uint();
    } else {
      throw ConfigError(path + ": unknown key");
    }
  }
  return c;
}

Dataset synth_diffusion(const SynthConfig& config) {
  if (config.n == 0) throw ConfigError("synth: n must be positive");
  const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(config.n))));
  std::vector<Coord> coords(config.n);
  for (std::size_t i = 0; i < config.n; ++i) {
    coords[i] = {static_cast<double>(i % side), static_cast<double>(i / side)};
  }
  SpatialGraph g = build_epsilon_graph(coords, config.epsilon);
  return synth_diffusion(config, g, std::move(coords));
}

Dataset synth_diffusion(const SynthConfig& config, const SpatialGraph& graph, std::vector<Coord> coords) {
  const std::size_t n = graph.size();
  if (!(config.gamma >= 0.0 && config.gamma < 1.0)) throw ConfigError("synth: gamma must lie in [0, 1)");
  if (!(config.tau > 0.0)) throw ConfigError("synth: tau must be positive");
  if (!(config.noise_std >= 0.0)) throw ConfigError("synth: noise_std must be non-negative");
  if (config.steps == 0 || n == 0) throw ConfigError("synth: n and steps must be positive");
  if (!graph.connected()) {
    throw ConfigError("synth: graph with " + std::to_string(graph.components().size()) +
                      " components; the diffusion graph must be connected");
  }
  if (!coords.empty() && coords.size() != n) throw ConfigError("synth: coordinate count differs from node count");

  std::vector<double> phase(n, 0.0);
  if (!coords.empty()) {
    double lo = coords[0].x + coords[0].y, hi = lo;
    for (const auto& c : coords) {
      lo = std::min(lo, c.x + c.y);
      hi = std::max(hi, c.x + c.y);
    }
    // Half a period of phase shift from one corner of the layout to the other.
    for (std::size_t i = 0; i < n; ++i) {
      phase[i] = hi > lo ? std::numbers::pi * (coords[i].x + coords[i].y - lo) / (hi - lo) : 0.0;
    }
  }

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> x(n), next(n);
  for (auto& v : x) v = normal(rng);

  Dataset d;
  d.series.header = {n, config.steps, 1, config.freq_minutes, "synth-diffusion"};
  d.series.values.assign(n * config.steps, 0.0);
  d.graph = graph;
  d.coords = std::move(coords);
  if (!d.coords.empty()) d.graph.set_coords(d.coords);
  const double g = config.gamma;
  for (std::size_t s = 0; s < config.steps; ++s) {
    for (std::size_t i = 0; i < n; ++i) d.series.values[i * config.steps + s] = x[i];
    if (s + 1 == config.steps) break;
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(s) / config.tau;
    for (std::size_t i = 0; i < n; ++i) {
      const auto nb = graph.neighbors(i);
      const auto wt = graph.weights(i);
      const double deg = graph.weighted_degree(i);
      double avg = 0.0;
      for (std::size_t e = 0; e < nb.size(); ++e) avg += wt[e] * x[nb[e]];
      avg = deg > 0.0 ? avg / deg : x[i];
      next[i] = (1.0 - g) * x[i] + g * avg + config.season_amp * std::sin(angle + phase[i]);
    }
    // Noise drawn in node order after the deterministic update.
    if (config.noise_std > 0.0) {
      for (std::size_t i = 0; i < n; ++i) next[i] += config.noise_std * normal(rng);
    }
    x.swap(next);
  }
  return d;
}

// ---- metrics --------------------------------------------------------------

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j = stats_json(overall);
  nlohmann::json h = nlohmann::json::array();
  for (std::size_t k = 0; k < horizon.size(); ++k) {
    auto s = stats_json(horizon[k]);
    s["step"] = k + 1;
    h.push_back(s);
  }
  j["horizon_breakdown"] = h;
  return j;
}

MetricReport compute_metrics(std::span<const double> pred, std::span<const double> target, std::size_t f,
                             std::size_t c, double null_threshold) {
  if (pred.size() != target.size()) {
    throw DimensionError("metrics: prediction has " + std::to_string(pred.size()) + " values, target " +
                         std::to_string(target.size()));
  }
  if (f == 0 || c == 0 || pred.size() % (f * c) != 0) throw DimensionError("metrics: layout is not [..., F, C]");
  std::vector<double> abs_sum(f, 0.0), sq_sum(f, 0.0), pct_sum(f, 0.0);
  std::vector<std::size_t> count(f, 0), pct_count(f, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::size_t k = (i / c) % f;
    const double e = pred[i] - target[i];
    abs_sum[k] += std::abs(e);
    sq_sum[k] += e * e;
    ++count[k];
    if (std::abs(target[i]) >= null_threshold) {
      pct_sum[k] += std::abs(e) / std::abs(target[i]);
      ++pct_count[k];
    }
  }
  MetricReport r;
  double a = 0.0, q = 0.0, p = 0.0;
  std::size_t n = 0, np = 0;
  for (std::size_t k = 0; k < f; ++k) {
    r.horizon.push_back(finish(abs_sum[k], sq_sum[k], pct_sum[k], count[k], pct_count[k]));
    a += abs_sum[k];
    q += sq_sum[k];
    p += pct_sum[k];
    n += count[k];
    np += pct_count[k];
  }
  r.overall = finish(a, q, p, n, np);
  return r;
}

}  // namespace sbat
