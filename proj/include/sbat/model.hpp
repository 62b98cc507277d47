#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sbat/ops.hpp"
#include "sbat/partition.hpp"
#include "sbat/tensor.hpp"

namespace sbat {

struct ModelConfig {
  std::size_t n = 0;
  std::size_t t = 96;
  std::size_t c = 1;
  std::size_t f = 12;
  std::size_t d_model = 512;
  std::size_t l = 3;
  std::size_t heads = 4;
  std::size_t p0 = 8;
  std::size_t k_pe = 8;
  std::size_t ffn_mult = 4;

  std::size_t d_head() const { return d_model / heads; }
  /// Throws ConfigError on the first violated field constraint.
  void validate() const;

  nlohmann::json to_json() const;
  /// Strict: unknown keys are rejected. Missing keys keep their defaults.
  static ModelConfig from_json(const nlohmann::json& j, const std::string& where = "model");
};

// Pre-norm attention sublayer followed by a pre-norm FFN, both residual.
struct SublayerParams {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, wk, wv;
  Tensor ln2_gamma, ln2_beta;
  Tensor ffn_in, ffn_out;
};

struct SbaBlockParams {
  SublayerParams intra;
  SublayerParams inter;
  Tensor fuse;  // 2D x D
};

struct ModelParams {
  Tensor embed;    // (T*C) x D
  Tensor pe_proj;  // k_pe x D
  std::vector<SbaBlockParams> blocks;
  Tensor head;  // D x (F*C)

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every linear map; layer
  /// norm gains 1 and shifts 0.
  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  /// Parameters in manifest order with their dotted names. Handles share
  /// storage with the model.
  std::vector<std::pair<std::string, Tensor>> named() const;
  std::size_t count() const;
};

/// Closed-form parameter total for a config.
std::size_t param_count(const ModelConfig& config);

// Attention weights captured during a forward pass. Intra weights are laid
// out [B*P*heads x M x M] (padded), inter weights [B*heads x P x P].
struct AttentionTrace {
  struct Block {
    std::size_t batch = 1, p = 0, m = 0, heads = 1;
    std::vector<double> intra;
    std::vector<double> inter;
  };
  std::vector<Block> blocks;
};

struct ForwardOptions {
  /// Fills padded slots with seeded noise right after the gather, to
  /// demonstrate that padding never leaks into real nodes.
  std::optional<std::uint64_t> pad_noise_seed;
  AttentionTrace* trace = nullptr;
};

/// x [N x T x C] (or [B x N x T x C]) with pe [N x k_pe] -> [N x D] (or [B*N x D]).
Tensor embed(const Tensor& x, const ModelParams& params, const Tensor& pe);

/// One attention + FFN sublayer over groups of tokens. x [G x M x D]; the
/// mask has G groups of width M. Invalid rows of the result are zero.
/// When `alpha` is given it receives the [G*heads x M x M] weights.
Tensor attention_sublayer(const Tensor& x, const Mask& mask, const SublayerParams& params, std::size_t heads,
                          Tensor* alpha = nullptr);

/// Intra-subgraph sublayer: attention restricted to each subgraph.
Tensor intra_attention(const Tensor& xp, const Mask& mask, const SublayerParams& params, std::size_t heads,
                       Tensor* alpha = nullptr);
/// Mean of the valid rows of every subgraph: [G x M x D] -> [G x D].
Tensor pool_subgraphs(const Tensor& y, const Mask& mask);
/// Full attention across subgraph summaries: s [P x D] or [B x P x D].
Tensor inter_attention(const Tensor& s, const SublayerParams& params, std::size_t heads, Tensor* alpha = nullptr);
/// concat(y, s' replicated over M) * w, invalid rows re-zeroed.
/// y [G x M x D], s_prime [G x D], w [2D x D].
Tensor fuse(const Tensor& y, const Tensor& s_prime, const Tensor& w, const Mask& mask);

/// x [B*N x D] -> [B*N x D]: gather by plan, intra, pool, inter, fuse,
/// revert, plus the node-order residual.
Tensor sba_block(const Tensor& x, const PartitionPlan& plan, const SbaBlockParams& params, std::size_t heads,
                 std::size_t batch = 1, const ForwardOptions& options = {});

/// x [N x T x C] -> [N x F x C], or [B x N x T x C] -> [B x N x F x C].
Tensor forward(const Tensor& x, const ScaleSeries& series, const ModelParams& params, const ModelConfig& config,
               const Tensor& pe, const ForwardOptions& options = {});

// ---- attention FLOPs ------------------------------------------------------

struct BlockFlops {
  std::size_t p = 0, m = 0;
  std::uint64_t intra_mults = 0, intra_adds = 0;
  std::uint64_t inter_mults = 0, inter_adds = 0;
};

struct FlopsReport {
  std::vector<BlockFlops> blocks;
  std::uint64_t closed_form_mults = 0;
  std::uint64_t closed_form_adds = 0;
  std::uint64_t measured_mults = 0;
  std::uint64_t measured_adds = 0;
  bool measured = false;

  /// |measured - closed| / closed over mults + adds; 0 when not measured.
  double relative_gap() const;
  nlohmann::json to_json() const;
};

/// Closed-form attention FLOPs (the QK^T and alpha V products) of one
/// forward pass for a single sample. With `measure`, also runs that forward
/// pass on seeded random data and reads the attention counter.
FlopsReport flops_estimate(const ModelConfig& config, const ScaleSeries& series, bool measure = true);

/// 2 * N^2 * D multiplications: one dense attention layer over all nodes.
std::uint64_t dense_attention_mults(std::size_t n, std::size_t d);

/// One attention sublayer over all n nodes as a single group: the dense
/// reference for the SBA block. Closed form, plus a counted run when
/// `measure` is set.
FlopsReport dense_flops_estimate(std::size_t n, std::size_t d, std::size_t heads, bool measure = true);

// ---- checkpoints ----------------------------------------------------------

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  std::uint64_t seed = 0;
  nlohmann::json extra = nlohmann::json::object();
};

/// Raw little-endian f64 blob in manifest order at `path`, manifest JSON
/// {config, names, shapes, offsets, seed, extra} at `<path>.json`.
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelParams& params,
                     std::uint64_t seed, const nlohmann::json& extra = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace sbat
