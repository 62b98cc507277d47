#include "sbat/model.hpp"

#include <cmath>
#include <random>

#include "sbat/binary_io.hpp"
#include "sbat/error.hpp"
#include "sbat/flops.hpp"

namespace sbat {

namespace {

std::size_t* config_field(ModelConfig& c, const std::string& key) {
  if (key == "n") return &c.n;
  if (key == "t") return &c.t;
  if (key == "c") return &c.c;
  if (key == "f") return &c.f;
  if (key == "d_model") return &c.d_model;
  if (key == "l") return &c.l;
  if (key == "heads") return &c.heads;
  if (key == "p0") return &c.p0;
  if (key == "k_pe") return &c.k_pe;
  if (key == "ffn_mult") return &c.ffn_mult;
  return nullptr;
}

void require_shape(const Tensor& t, const Shape& shape, const char* what) {
  if (!t.defined() || t.shape() != shape) {
    throw DimensionError(std::string(what) + ": expected " + shape_string(shape) + ", got " +
                         (t.defined() ? shape_string(t.shape()) : std::string("undefined")));
  }
}

Tensor uniform_map(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(fan_in * fan_out);
  for (auto& x : v) x = dist(rng);
  return Tensor::from({fan_in, fan_out}, std::move(v), true);
}

SublayerParams init_sublayer(std::size_t d, std::size_t hidden, std::mt19937_64& rng) {
  SublayerParams s;
  s.ln1_gamma = Tensor::full({d}, 1.0, true);
  s.ln1_beta = Tensor::zeros({d}, true);
  s.wq = uniform_map(d, d, rng);
  s.wk = uniform_map(d, d, rng);
  s.wv = uniform_map(d, d, rng);
  s.ln2_gamma = Tensor::full({d}, 1.0, true);
  s.ln2_beta = Tensor::zeros({d}, true);
  s.ffn_in = uniform_map(d, hidden, rng);
  s.ffn_out = uniform_map(hidden, d, rng);
  return s;
}

void append_sublayer(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                     const SublayerParams& s) {
  out.emplace_back(prefix + ".ln1.gamma", s.ln1_gamma);
  out.emplace_back(prefix + ".ln1.beta", s.ln1_beta);
  out.emplace_back(prefix + ".wq", s.wq);
  out.emplace_back(prefix + ".wk", s.wk);
  out.emplace_back(prefix + ".wv", s.wv);
  out.emplace_back(prefix + ".ln2.gamma", s.ln2_gamma);
  out.emplace_back(prefix + ".ln2.beta", s.ln2_beta);
  out.emplace_back(prefix + ".ffn.in", s.ffn_in);
  out.emplace_back(prefix + ".ffn.out", s.ffn_out);
}

Tensor to_heads(const Tensor& t, std::size_t heads) {
  const std::size_t g = t.dim(0), m = t.dim(1), d = t.dim(2);
  return reshape(split_heads(t, heads), {g * heads, m, d / heads});
}

void attention_flops(std::size_t groups, std::size_t m, std::size_t d, std::size_t heads, std::uint64_t& mults,
                     std::uint64_t& adds) {
  const std::uint64_t dh = d / heads;
  const std::uint64_t gh = static_cast<std::uint64_t>(groups) * heads;
  const std::uint64_t mm = static_cast<std::uint64_t>(m) * m;
  mults = 2 * gh * mm * dh;
  adds = gh * (mm * (dh - 1) + m * dh * (m - 1));
}

}  // namespace

// ---- config ---------------------------------------------------------------

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (n < 1) fail("n must be >= 1");
  if (t < 1) fail("t must be >= 1");
  if (c < 1) fail("c must be >= 1");
  if (f < 1) fail("f must be >= 1");
  if (l < 1) fail("l must be >= 1");
  if (d_model < 1) fail("d_model must be >= 1");
  if (heads < 1) fail("heads must be >= 1");
  if (d_model % heads != 0) {
    fail("d_model=" + std::to_string(d_model) + " is not divisible by heads=" + std::to_string(heads));
  }
  if (k_pe < 1) fail("k_pe must be >= 1");
  if (ffn_mult < 1) fail("ffn_mult must be >= 1");
  if (p0 < 1 || p0 > n) fail("p0 must lie in [1, n]");
  if (l > max_levels(p0)) {
    fail("p0=" + std::to_string(p0) + " supports at most " + std::to_string(max_levels(p0)) + " levels, l=" +
         std::to_string(l));
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n", n},           {"t", t},   {"c", c},         {"f", f},       {"d_model", d_model},
          {"l", l},           {"heads", heads}, {"p0", p0}, {"k_pe", k_pe}, {"ffn_mult", ffn_mult}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  ModelConfig c;
  for (const auto& [key, value] : j.items()) {
    std::size_t* field = config_field(c, key);
    if (field == nullptr) throw ConfigError(where + "." + key + ": unknown key");
    if (!is_json_count(value)) throw ConfigError(where + "." + key + ": expected a non-negative integer");
    *field = value.get<std::size_t>();
  }
  return c;
}

// ---- parameters -----------------------------------------------------------

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config.d_model;
  ModelParams p;
  p.embed = uniform_map(config.t * config.c, d, rng);
  p.pe_proj = uniform_map(config.k_pe, d, rng);
  for (std::size_t i = 0; i < config.l; ++i) {
    SbaBlockParams b;
    b.intra = init_sublayer(d, config.ffn_mult * d, rng);
    b.inter = init_sublayer(d, config.ffn_mult * d, rng);
    b.fuse = uniform_map(2 * d, d, rng);
    p.blocks.push_back(std::move(b));
  }
  p.head = uniform_map(d, config.f * config.c, rng);
  for (auto& [name, t] : p.named()) t.set_name(name);
  return p;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embed", embed);
  out.emplace_back("pe_proj", pe_proj);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string prefix = "blocks." + std::to_string(i);
    append_sublayer(out, prefix + ".intra", blocks[i].intra);
    append_sublayer(out, prefix + ".inter", blocks[i].inter);
    out.emplace_back(prefix + ".fuse", blocks[i].fuse);
  }
  out.emplace_back("head", head);
  return out;
}

std::size_t ModelParams::count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : named()) total += t.numel();
  return total;
}

std::size_t param_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t sublayer = 3 * d * d + 2 * c.ffn_mult * d * d + 4 * d;
  return c.t * c.c * d + c.k_pe * d + c.l * (2 * sublayer + 2 * d * d) + d * c.f * c.c;
}

// ---- forward pieces -------------------------------------------------------

Tensor embed(const Tensor& x, const ModelParams& params, const Tensor& pe) {
  if (x.rank() != 3 && x.rank() != 4) {
    throw DimensionError("embed: expected [N x T x C] or [B x N x T x C], got " + shape_string(x.shape()));
  }
  const std::size_t batch = x.rank() == 4 ? x.dim(0) : 1;
  const std::size_t n = x.dim(x.rank() - 3);
  const std::size_t tc = x.dim(x.rank() - 2) * x.dim(x.rank() - 1);
  if (params.embed.dim(0) != tc) {
    throw DimensionError("embed: window " + shape_string(x.shape()) + " does not match embedding map " +
                         shape_string(params.embed.shape()));
  }
  require_shape(pe, {n, params.pe_proj.dim(0)}, "embed: positional encoding");
  Tensor e = matmul(reshape(x, {batch * n, tc}), params.embed);
  Tensor pe_emb = matmul(pe, params.pe_proj);
  if (batch > 1) {
    std::vector<std::int64_t> index(batch * n);
    for (std::size_t i = 0; i < index.size(); ++i) index[i] = static_cast<std::int64_t>(i % n);
    pe_emb = gather_rows(pe_emb, index);
  }
  return add(e, pe_emb);
}

Tensor attention_sublayer(const Tensor& x, const Mask& mask, const SublayerParams& params, std::size_t heads,
                          Tensor* alpha) {
  if (x.rank() != 3) throw DimensionError("attention: expected [G x M x D], got " + shape_string(x.shape()));
  const std::size_t g = x.dim(0), m = x.dim(1), d = x.dim(2);
  if (mask.groups != g || mask.width != m) {
    throw DimensionError("attention: mask " + std::to_string(mask.groups) + "x" + std::to_string(mask.width) +
                         " does not match " + shape_string(x.shape()));
  }
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                         " heads");
  }
  require_shape(params.wq, {d, d}, "attention: wq");
  const std::size_t dh = d / heads;

  Tensor h = layer_norm(x, params.ln1_gamma, params.ln1_beta);
  Tensor q = to_heads(matmul(h, params.wq), heads);
  Tensor k = to_heads(matmul(h, params.wk), heads);
  Tensor v = to_heads(matmul(h, params.wv), heads);
  Tensor logits;
  {
    FlopCategory cat("attention");
    logits = bmm(q, k, true);
  }
  Tensor a = masked_softmax(scale(logits, 1.0 / std::sqrt(static_cast<double>(dh))), mask);
  if (alpha != nullptr) *alpha = a;
  Tensor ctx;
  {
    FlopCategory cat("attention");
    ctx = bmm(a, v);
  }
  ctx = merge_heads(reshape(ctx, {g, heads, m, dh}));
  Tensor u = zero_rows(add(x, ctx), mask.valid);
  Tensor ff = matmul(gelu(matmul(layer_norm(u, params.ln2_gamma, params.ln2_beta), params.ffn_in)),
                     params.ffn_out);
  return zero_rows(add(u, ff), mask.valid);
}

Tensor intra_attention(const Tensor& xp, const Mask& mask, const SublayerParams& params, std::size_t heads,
                       Tensor* alpha) {
  return attention_sublayer(xp, mask, params, heads, alpha);
}

Tensor pool_subgraphs(const Tensor& y, const Mask& mask) {
  if (y.rank() != 3) throw DimensionError("pool_subgraphs: expected [G x M x D], got " + shape_string(y.shape()));
  return masked_mean(y, mask);
}

Tensor inter_attention(const Tensor& s, const SublayerParams& params, std::size_t heads, Tensor* alpha) {
  if (s.rank() == 2) {
    Tensor out = attention_sublayer(reshape(s, {1, s.dim(0), s.dim(1)}), Mask::all(s.dim(0)), params, heads, alpha);
    return reshape(out, s.shape());
  }
  if (s.rank() != 3) throw DimensionError("inter_attention: expected [P x D], got " + shape_string(s.shape()));
  return attention_sublayer(s, Mask::all(s.dim(1), s.dim(0)), params, heads, alpha);
}

Tensor fuse(const Tensor& y, const Tensor& s_prime, const Tensor& w, const Mask& mask) {
  if (y.rank() != 3 || s_prime.rank() != 2 || s_prime.dim(0) != y.dim(0) || s_prime.dim(1) != y.dim(2)) {
    throw DimensionError("fuse: incompatible shapes " + shape_string(y.shape()) + " and " +
                         shape_string(s_prime.shape()));
  }
  require_shape(w, {2 * y.dim(2), y.dim(2)}, "fuse: weight");
  if (mask.groups != y.dim(0) || mask.width != y.dim(1)) throw DimensionError("fuse: mask does not match");
  Tensor cat = concat_last(y, repeat_rows(s_prime, y.dim(1)));
  return zero_rows(matmul(cat, w), mask.valid);
}

Tensor sba_block(const Tensor& x, const PartitionPlan& plan, const SbaBlockParams& params, std::size_t heads,
                 std::size_t batch, const ForwardOptions& options) {
  if (x.rank() != 2 || x.dim(0) != batch * plan.n) {
    throw DimensionError("sba_block: expected [" + std::to_string(batch * plan.n) + " x D], got " +
                         shape_string(x.shape()));
  }
  const std::size_t n = plan.n, p = plan.p, m = plan.m, d = x.dim(1);
  const std::size_t slots = p * m;

  std::vector<std::int64_t> index(batch * slots);
  std::vector<std::uint8_t> valid(batch * slots);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t s = 0; s < slots; ++s) {
      const std::int64_t id = plan.gather[s];
      index[b * slots + s] = id < 0 ? -1 : static_cast<std::int64_t>(b * n) + id;
      valid[b * slots + s] = plan.mask[s];
    }
  }
  const Mask mask = Mask::from(batch * p, m, valid);

  Tensor xp = reshape(gather_rows(x, index), {batch * p, m, d});
  if (options.pad_noise_seed) {
    std::mt19937_64 rng(*options.pad_noise_seed);
    std::normal_distribution<double> dist(0.0, 3.0);
    std::vector<double> noise(xp.numel(), 0.0);
    for (std::size_t s = 0; s < valid.size(); ++s) {
      if (valid[s]) continue;
      for (std::size_t j = 0; j < d; ++j) noise[s * d + j] = dist(rng);
    }
    xp = add(xp, Tensor::from(xp.shape(), std::move(noise)));
  }

  const bool tracing = options.trace != nullptr;
  Tensor a_intra, a_inter;
  Tensor y = intra_attention(xp, mask, params.intra, heads, tracing ? &a_intra : nullptr);
  Tensor s = pool_subgraphs(y, mask);
  Tensor s2 = reshape(inter_attention(reshape(s, {batch, p, d}), params.inter, heads, tracing ? &a_inter : nullptr),
                      {batch * p, d});
  Tensor z = fuse(y, s2, params.fuse, mask);

  std::vector<std::int64_t> back(batch * n);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < n; ++i) back[b * n + i] = static_cast<std::int64_t>(b * slots) + plan.slot[i];
  }
  Tensor out = add(gather_rows(z, back), x);

  if (tracing) {
    AttentionTrace::Block rec;
    rec.batch = batch;
    rec.p = p;
    rec.m = m;
    rec.heads = heads;
    rec.intra.assign(a_intra.values().begin(), a_intra.values().end());
    rec.inter.assign(a_inter.values().begin(), a_inter.values().end());
    options.trace->blocks.push_back(std::move(rec));
  }
  return out;
}

Tensor forward(const Tensor& x, const ScaleSeries& series, const ModelParams& params, const ModelConfig& config,
               const Tensor& pe, const ForwardOptions& options) {
  const bool batched = x.rank() == 4;
  const std::size_t batch = batched ? x.dim(0) : 1;
  if (batched) {
    require_shape(x, {batch, config.n, config.t, config.c}, "forward: input");
  } else {
    require_shape(x, {config.n, config.t, config.c}, "forward: input");
  }
  if (series.levels() != config.l || params.blocks.size() != config.l) {
    throw DimensionError("forward: model has " + std::to_string(config.l) + " blocks but the scale series has " +
                         std::to_string(series.levels()) + " levels");
  }
  for (const auto& plan : series.plans) {
    if (plan.n != config.n) {
      throw DimensionError("forward: plan covers " + std::to_string(plan.n) + " nodes, model expects " +
                           std::to_string(config.n));
    }
  }
  Tensor h = embed(x, params, pe);
  for (std::size_t i = 0; i < config.l; ++i) {
    ForwardOptions block_options = options;
    if (options.pad_noise_seed) block_options.pad_noise_seed = *options.pad_noise_seed + 7919 * (i + 1);
    h = sba_block(h, series.plans[i], params.blocks[i], config.heads, batch, block_options);
  }
  Tensor out = matmul(h, params.head);
  if (batched) return reshape(out, {batch, config.n, config.f, config.c});
  return reshape(out, {config.n, config.f, config.c});
}

// ---- FLOPs ----------------------------------------------------------------

double FlopsReport::relative_gap() const {
  if (!measured) return 0.0;
  const double closed = static_cast<double>(closed_form_mults + closed_form_adds);
  const double meas = static_cast<double>(measured_mults + measured_adds);
  if (closed == 0.0) return meas == 0.0 ? 0.0 : 1.0;
  return std::abs(meas - closed) / closed;
}

nlohmann::json FlopsReport::to_json() const {
  nlohmann::json b = nlohmann::json::array();
  for (const auto& blk : blocks) {
    b.push_back({{"p", blk.p},
                 {"m", blk.m},
                 {"intra_mults", blk.intra_mults},
                 {"intra_adds", blk.intra_adds},
                 {"inter_mults", blk.inter_mults},
                 {"inter_adds", blk.inter_adds}});
  }
  nlohmann::json j = {{"blocks", b},
                      {"closed_form_mults", closed_form_mults},
                      {"closed_form_adds", closed_form_adds},
                      {"measured", measured}};
  if (measured) {
    j["measured_mults"] = measured_mults;
    j["measured_adds"] = measured_adds;
    j["relative_gap"] = relative_gap();
  }
  return j;
}

FlopsReport flops_estimate(const ModelConfig& config, const ScaleSeries& series, bool measure) {
  config.validate();
  if (series.levels() != config.l) throw DimensionError("flops_estimate: series levels do not match l");
  FlopsReport r;
  for (const auto& plan : series.plans) {
    BlockFlops b;
    b.p = plan.p;
    b.m = plan.m;
    attention_flops(plan.p, plan.m, config.d_model, config.heads, b.intra_mults, b.intra_adds);
    attention_flops(1, plan.p, config.d_model, config.heads, b.inter_mults, b.inter_adds);
    r.closed_form_mults += b.intra_mults + b.inter_mults;
    r.closed_form_adds += b.intra_adds + b.inter_adds;
    r.blocks.push_back(b);
  }
  if (measure) {
    const ModelParams params = ModelParams::init(config, 0);
    std::mt19937_64 rng(1);
    std::normal_distribution<double> dist;
    std::vector<double> xv(config.n * config.t * config.c);
    for (auto& v : xv) v = dist(rng);
    const Tensor x = Tensor::from({config.n, config.t, config.c}, std::move(xv));
    const Tensor pe = Tensor::zeros({config.n, config.k_pe});
    NoGradGuard no_grad;
    FlopScope scope;
    forward(x, series, params, config, pe);
    const FlopCounts counts = flop_counter().category("attention");
    r.measured = true;
    r.measured_mults = counts.mults;
    r.measured_adds = counts.adds;
  }
  return r;
}

std::uint64_t dense_attention_mults(std::size_t n, std::size_t d) {
  return 2 * static_cast<std::uint64_t>(n) * n * d;
}

FlopsReport dense_flops_estimate(std::size_t n, std::size_t d, std::size_t heads, bool measure) {
  if (n == 0 || d == 0 || heads == 0 || d % heads != 0)
    throw ConfigError("dense_flops_estimate: need n, d >= 1 and heads dividing d");
  FlopsReport r;
  BlockFlops b;
  b.p = 1;
  b.m = n;
  attention_flops(1, n, d, heads, b.intra_mults, b.intra_adds);
  r.closed_form_mults = b.intra_mults;
  r.closed_form_adds = b.intra_adds;
  r.blocks.push_back(b);
  if (measure) {
    ModelConfig config;
    config.n = n;
    config.t = 1;
    config.f = 1;
    config.d_model = d;
    config.l = 1;
    config.heads = heads;
    config.p0 = 1;
    config.k_pe = 1;
    const ModelParams params = ModelParams::init(config, 0);
    std::mt19937_64 rng(1);
    std::normal_distribution<double> dist;
    std::vector<double> xv(n * d);
    for (auto& v : xv) v = dist(rng);
    const Tensor x = Tensor::from({1, n, d}, std::move(xv));
    NoGradGuard no_grad;
    FlopScope scope;
    attention_sublayer(x, Mask::all(n), params.blocks[0].intra, heads);
    const FlopCounts counts = flop_counter().category("attention");
    r.measured = true;
    r.measured_mults = counts.mults;
    r.measured_adds = counts.adds;
  }
  return r;
}

// ---- checkpoints ----------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelParams& params,
                     std::uint64_t seed, const nlohmann::json& extra) {
  std::vector<double> blob;
  nlohmann::json names = nlohmann::json::array(), shapes = nlohmann::json::array(),
                 offsets = nlohmann::json::array();
  for (const auto& [name, t] : params.named()) {
    names.push_back(name);
    shapes.push_back(t.shape());
    offsets.push_back(blob.size());
    blob.insert(blob.end(), t.values().begin(), t.values().end());
  }
  write_f64_file(path, blob);
  write_json_file(sidecar_path(path), {{"config", config.to_json()},
                                       {"names", names},
                                       {"shapes", shapes},
                                       {"offsets", offsets},
                                       {"total", blob.size()},
                                       {"seed", seed},
                                       {"extra", extra}});
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const nlohmann::json manifest = read_json_file(sidecar_path(path));
  Checkpoint ck;
  try {
    ck.config = ModelConfig::from_json(manifest.at("config"), "checkpoint.config");
    ck.config.validate();
    ck.seed = manifest.at("seed").get<std::uint64_t>();
    ck.extra = manifest.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("checkpoint manifest " + sidecar_path(path).string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint manifest: ") + e.what());
  }
  ck.params = ModelParams::init(ck.config, 0);
  const auto named = ck.params.named();
  const auto& names = manifest.at("names");
  const auto& shapes = manifest.at("shapes");
  const auto& offsets = manifest.at("offsets");
  if (names.size() != named.size() || shapes.size() != named.size() || offsets.size() != named.size()) {
    throw LoadError("checkpoint manifest lists " + std::to_string(names.size()) + " tensors, config implies " +
                    std::to_string(named.size()));
  }
  const std::vector<double> blob = read_f64_file(path, param_count(ck.config));
  std::size_t offset = 0;
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto [name, t] = named[i];
    if (names[i].get<std::string>() != name || shapes[i].get<Shape>() != t.shape() ||
        offsets[i].get<std::size_t>() != offset) {
      throw LoadError("checkpoint tensor " + std::to_string(i) + " (" + names[i].dump() +
                      ") does not match the manifest entry for " + name + " " + shape_string(t.shape()));
    }
    auto dst = t.mutable_values();
    std::copy(blob.begin() + static_cast<std::ptrdiff_t>(offset),
              blob.begin() + static_cast<std::ptrdiff_t>(offset + dst.size()), dst.begin());
    offset += dst.size();
  }
  return ck;
}

}  // namespace sbat
