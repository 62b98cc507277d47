#include "sbat/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>

#include "sbat/binary_io.hpp"
#include "sbat/error.hpp"
#include "sbat/flops.hpp"

namespace sbat {

namespace {

Tensor clone_tensor(const Tensor& t) {
  Tensor c = t.detach();
  c.set_requires_grad(true);
  c.set_name(t.name());
  return c;
}

SublayerParams clone_sublayer(const SublayerParams& s) {
  return {clone_tensor(s.ln1_gamma), clone_tensor(s.ln1_beta), clone_tensor(s.wq),
          clone_tensor(s.wk),        clone_tensor(s.wv),       clone_tensor(s.ln2_gamma),
          clone_tensor(s.ln2_beta),  clone_tensor(s.ffn_in),   clone_tensor(s.ffn_out)};
}

void check_shapes(const ModelConfig& config, const Series& series, const char* what) {
  if (series.header.n != config.n || series.header.c != config.c) {
    throw DimensionError(std::string(what) + ": model expects " + std::to_string(config.n) + " nodes x " +
                         std::to_string(config.c) + " channels, data has " + std::to_string(series.header.n) + " x " +
                         std::to_string(series.header.c));
  }
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

// ---- config ---------------------------------------------------------------

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
  if (!(lr >= 0.0) || !std::isfinite(lr)) fail("lr must be a finite non-negative number");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) fail("betas must lie in (0, 1)");
  if (!(eps > 0.0)) fail("eps must be positive");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (max_epochs < 1) fail("max_epochs must be >= 1");
  if (grad_clip && !(*grad_clip > 0.0)) fail("grad_clip must be positive when set");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"betas", {beta1, beta2}},
          {"eps", eps},
          {"batch_size", batch_size},
          {"max_epochs", max_epochs},
          {"patience", patience},
          {"grad_clip", grad_clip ? nlohmann::json(*grad_clip) : nlohmann::json(nullptr)},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    const std::string path = where + "." + key;
    auto real = [&]() {
      if (!value.is_number()) throw ConfigError(path + ": expected a number");
      return value.get<double>();
    };
    auto count = [&]() {
      if (!is_json_count(value)) throw ConfigError(path + ": expected a non-negative integer");
      return value.get<std::uint64_t>();
    };
    if (key == "lr") {
      c.lr = real();
    } else if (key == "betas") {
      if (!value.is_array() || value.size() != 2 || !value[0].is_number() || !value[1].is_number()) {
        throw ConfigError(path + ": expected [beta1, beta2]");
      }
      c.beta1 = value[0].get<double>();
      c.beta2 = value[1].get<double>();
    } else if (key == "eps") {
      c.eps = real();
    } else if (key == "batch_size") {
      c.batch_size = count();
    } else if (key == "max_epochs") {
      c.max_epochs = count();
    } else if (key == "patience") {
      c.patience = count();
    } else if (key == "grad_clip") {
      if (value.is_null()) {
        c.grad_clip.reset();
      } else {
        c.grad_clip = real();
      }
    } else if (key == "seed") {
      c.seed = count();
    } else {
      throw ConfigError(path + ": unknown key");
    }
  }
  return c;
}

// ---- optimizer ------------------------------------------------------------

AdamState AdamState::for_params(const NamedParams& params) {
  AdamState s;
  for (const auto& [name, t] : params) {
    s.m.emplace_back(t.numel(), 0.0);
    s.v.emplace_back(t.numel(), 0.0);
  }
  return s;
}

double grad_norm(const NamedParams& params) {
  double sq = 0.0;
  for (const auto& [name, t] : params) {
    for (double g : t.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double adam_step(const NamedParams& params, AdamState& state, const TrainConfig& config) {
  if (state.m.size() != params.size()) throw ContractError("adam_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = params[i];
    if (state.m[i].size() != t.numel()) throw ContractError("adam_step: moment shape mismatch for " + name);
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + name);
    }
  }
  const double norm = grad_norm(params);
  double factor = 1.0;
  if (config.grad_clip && norm > *config.grad_clip) factor = *config.grad_clip / norm;

  ++state.step;
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].second;
    const auto grad = t.grad();
    auto value = t.mutable_values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double g = grad.empty() ? 0.0 : grad[k] * factor;
      m[k] = b1 * m[k] + (1.0 - b1) * g;
      v[k] = b2 * v[k] + (1.0 - b2) * g * g;
      value[k] -= config.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config.eps);
    }
  }
  return norm;
}

// ---- training -------------------------------------------------------------

nlohmann::json EpochRecord::to_json(const TrainConfig& config) const {
  nlohmann::json optimizer = config.to_json();
  optimizer["name"] = "adam";
  return {{"epoch", epoch},           {"train_loss", train_loss}, {"val_mae", val_mae},
          {"grad_norm", grad_norm},   {"flops", flops},           {"improved", improved},
          {"optimizer", optimizer}};
}

std::vector<std::size_t> epoch_order(std::size_t windows, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(windows);
  for (std::size_t i = 0; i < windows; ++i) order[i] = i;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

ModelParams clone_params(const ModelParams& params) {
  ModelParams c;
  c.embed = clone_tensor(params.embed);
  c.pe_proj = clone_tensor(params.pe_proj);
  for (const auto& b : params.blocks) c.blocks.push_back({clone_sublayer(b.intra), clone_sublayer(b.inter), clone_tensor(b.fuse)});
  c.head = clone_tensor(params.head);
  return c;
}

double mean_abs_error(const ModelConfig& config, const ModelParams& params, const Series& series,
                      const ScaleSeries& scales, const Tensor& pe, const WindowSet& windows,
                      std::size_t batch_size) {
  check_shapes(config, series, "mean_abs_error");
  if (windows.size() == 0) throw InputError("mean_abs_error: no windows");
  NoGradGuard no_grad;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < windows.size(); i += batch_size) {
    const std::size_t end = std::min(windows.size(), i + batch_size);
    const std::span<const std::size_t> starts(windows.starts.data() + i, end - i);
    const Batch b = make_batch(series, starts, config.t, config.f);
    const Tensor pred = forward(b.x, scales, params, config, pe);
    for (std::size_t k = 0; k < pred.numel(); ++k) total += std::abs(pred[k] - b.y[k]);
    count += pred.numel();
  }
  return total / static_cast<double>(count);
}

TrainResult train(const ModelConfig& config, ModelParams& params, const TrainData& data, const TrainConfig& tc,
                  const TrainHooks& hooks) {
  config.validate();
  tc.validate();
  if (data.series == nullptr || data.scales == nullptr) throw ContractError("train: missing series or scales");
  check_shapes(config, *data.series, "train");
  if (data.train.size() == 0) throw ConfigError("train: the training split yields no windows");
  if (data.val.size() == 0) throw ConfigError("train: the validation split yields no windows");

  const NamedParams named = params.named();
  AdamState state = AdamState::for_params(named);
  TrainResult result;
  result.best = clone_params(params);
  result.best_val_mae = std::numeric_limits<double>::infinity();
  std::size_t since_improve = 0;

  for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = epoch_order(data.train.size(), tc.seed, epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0.0, norm_sum = 0.0;
    std::size_t seen = 0, steps = 0;
    {
      FlopScope scope;
      try {
        std::vector<std::size_t> starts;
        for (std::size_t i = 0; i < order.size(); i += tc.batch_size) {
          starts.clear();
          for (std::size_t k = i; k < std::min(order.size(), i + tc.batch_size); ++k) {
            starts.push_back(data.train.starts[order[k]]);
          }
          const Batch b = make_batch(*data.series, starts, config.t, config.f);
          for (const auto& [name, t] : named) Tensor(t).zero_grad();
          const Tensor loss = mae_loss(forward(b.x, *data.scales, params, config, data.pe), b.y);
          const double value = loss.item();
          if (!std::isfinite(value)) throw NumericError("training loss became non-finite");
          backward(loss);
          norm_sum += adam_step(named, state, tc);
          loss_sum += value * static_cast<double>(starts.size());
          seen += starts.size();
          ++steps;
        }
      } catch (const NumericError& e) {
        result.diverged = true;
        result.stop_reason = std::string("diverged in epoch ") + std::to_string(epoch) + ": " + e.what();
      }
      const FlopCounts counts = flop_counter().total();
      rec.flops = counts.mults + counts.adds;
    }
    if (result.diverged) break;

    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.grad_norm = norm_sum / static_cast<double>(steps);
    rec.val_mae = mean_abs_error(config, params, *data.series, *data.scales, data.pe, data.val, 64);
    if (!std::isfinite(rec.val_mae)) {
      result.diverged = true;
      result.stop_reason = "validation error became non-finite in epoch " + std::to_string(epoch);
      break;
    }
    rec.improved = rec.val_mae < result.best_val_mae;
    if (rec.improved) {
      result.best = clone_params(params);
      result.best_val_mae = rec.val_mae;
      result.best_epoch = epoch;
      since_improve = 0;
    } else {
      ++since_improve;
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec, result.best);
    if (since_improve >= tc.patience) {
      result.stop_reason = "no improvement for " + std::to_string(tc.patience) + " epochs";
      break;
    }
  }
  if (result.stop_reason.empty()) result.stop_reason = "reached max_epochs";
  return result;
}

// ---- evaluation -----------------------------------------------------------

nlohmann::json EvalReport::to_json() const {
  return {{"split", split}, {"windows", windows}, {"model", model.to_json()}, {"persistence", persistence.to_json()}};
}

std::string EvalReport::table() const {
  std::string out = "split " + split + ", " + std::to_string(windows) + " windows\n";
  out += "model        horizon           MAE       RMSE    MAPE(%)\n";
  auto row = [&](const char* label, const std::string& h, const ErrorStats& s) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-12s %-12s %10.4f %10.4f %10s\n", label, h.c_str(), s.mae, s.rmse,
                  s.mape_pct ? fmt("%.2f", *s.mape_pct).c_str() : "n/a");
    out += buf;
  };
  for (const auto& [label, rep] : {std::pair{"sba", &model}, std::pair{"persistence", &persistence}}) {
    for (std::size_t h : {3u, 6u, 12u}) {
      if (h <= rep->horizon.size()) row(label, "Horizon " + std::to_string(h), rep->horizon[h - 1]);
    }
    row(label, "Average", rep->overall);
  }
  return out;
}

EvalReport evaluate(const ModelConfig& config, const ModelParams& params, const Normalizer& norm, const Series& raw,
                    const ScaleSeries& scales, const Tensor& pe, const WindowSet& windows, const std::string& split,
                    std::size_t batch_size, double null_threshold) {
  check_shapes(config, raw, "evaluate");
  if (norm.mean.size() != config.c) throw DimensionError("evaluate: normalizer channel count differs from the model");
  if (windows.size() == 0) throw InputError("evaluate: the " + split + " split yields no windows");
  if (batch_size == 0) batch_size = 1;
  const Series normalized = norm.apply(raw);
  const std::size_t per_window = config.n * config.f * config.c;
  std::vector<double> pred, target, persist;
  pred.reserve(windows.size() * per_window);
  target.reserve(pred.capacity());
  persist.reserve(pred.capacity());
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < windows.size(); i += batch_size) {
    const std::size_t end = std::min(windows.size(), i + batch_size);
    const std::span<const std::size_t> starts(windows.starts.data() + i, end - i);
    const Batch nb = make_batch(normalized, starts, config.t, config.f);
    const Batch rb = make_batch(raw, starts, config.t, config.f);
    const Tensor out = forward(nb.x, scales, params, config, pe);
    std::vector<double> p(out.values().begin(), out.values().end());
    norm.invert_inplace(p);
    pred.insert(pred.end(), p.begin(), p.end());
    target.insert(target.end(), rb.y.values().begin(), rb.y.values().end());
    const std::size_t rows = starts.size() * config.n;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* last = rb.x.values().data() + (r * config.t + config.t - 1) * config.c;
      for (std::size_t k = 0; k < config.f; ++k) persist.insert(persist.end(), last, last + config.c);
    }
  }
  EvalReport report;
  report.split = split;
  report.windows = windows.size();
  report.model = compute_metrics(pred, target, config.f, config.c, null_threshold);
  report.persistence = compute_metrics(persist, target, config.f, config.c, null_threshold);
  return report;
}

}  // namespace sbat
