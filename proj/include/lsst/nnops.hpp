#pragma once

// Transformer primitive layers, each with a hand-written backward. All
// functions are pure over their tensor arguments and operate on one sequence
// (a rows x channels matrix) at a time.

#include <cstdint>
#include <span>
#include <vector>

#include "lsst/shard.hpp"
#include "lsst/tensor.hpp"

namespace lsst {

struct LinearParams {
  Tensor weight;  // in x out
  Tensor bias;    // out
};

struct LinearGrad {
  Tensor grad_x;
  LinearParams grad;
};

Tensor linear_fwd(const Tensor& x, const LinearParams& p);
LinearGrad linear_bwd(const Tensor& x, const LinearParams& p, const Tensor& grad_out);

struct LayerNormParams {
  Tensor gain;  // d
  Tensor bias;  // d
};

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
  Tensor normalized;  // (x - mean) * inv_std, before the affine
  Tensor inv_std;     // one entry per row
};

struct LayerNormOutput {
  Tensor y;
  LayerNormCache cache;
};

struct LayerNormGrad {
  Tensor grad_x;
  LayerNormParams grad;
};

LayerNormOutput layernorm_fwd(const Tensor& x, const LayerNormParams& p);
LayerNormGrad layernorm_bwd(const LayerNormCache& cache, const LayerNormParams& p,
                            const Tensor& grad_out);

// tanh approximation.
Tensor gelu_fwd(const Tensor& x);
Tensor gelu_bwd(const Tensor& x, const Tensor& grad_out);

struct DropoutPolicy {
  double rate = 0.0;
  std::uint64_t master_seed = 0;
  bool enabled = false;

  bool active() const { return enabled && rate > 0.0; }
  // Throws ConfigError for rates outside [0, 1).
  void validate() const;
};

enum class DropoutTag : std::uint8_t {
  kEmbedding = 0,
  kAttentionProbs,
  kAttentionResidual,
  kFfnHidden,
  kFfnResidual,
};

inline constexpr std::uint32_t kNoLayer = 0xffffffffu;

// Coordinates of the first element of a matrix passed to dropout_fwd. Row i
// sits at global token position row_offset + i and column j at channel
// channel_offset + j.
struct DropoutSite {
  std::uint64_t step = 0;
  std::uint32_t layer = kNoLayer;
  DropoutTag tag = DropoutTag::kEmbedding;
  std::uint64_t sequence = 0;
  std::uint64_t row_offset = 0;
  std::uint64_t channel_offset = 0;
};

// Pure function of (seed, step, layer, tag, sequence, position, channel).
bool dropout_keeps(const DropoutPolicy& policy, const DropoutSite& site, std::uint64_t position,
                   std::uint64_t channel);

struct DropoutOutput {
  Tensor y;
  // 0 or 1/(1-rate) per element; empty when dropout is inactive.
  Tensor scale;
};

DropoutOutput dropout_fwd(const Tensor& x, const DropoutPolicy& policy, const DropoutSite& site);
Tensor dropout_bwd(const Tensor& scale, const Tensor& grad_out);

// Row gather from a V x E table.
Tensor embed_tokens(std::span<const std::int32_t> ids, const Tensor& table);
// Scatter-add of grad_out rows into table_grad, ids ascending by row.
void embed_tokens_bwd(std::span<const std::int32_t> ids, const Tensor& grad_out,
                      Tensor& table_grad);

// Rows [shard.offset(), shard.end()) of the positional table.
Tensor embed_positions(const ShardSpec& shard, const Tensor& pe);

struct CrossEntropyResult {
  double loss = 0.0;   // mean over rows
  Tensor grad_logits;  // (softmax - onehot) / rows
};

CrossEntropyResult cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets);

}  // namespace lsst
