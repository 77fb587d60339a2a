#pragma once

// Decoder-only transformer with hand-written backward.
//
// Layer layout (pre-norm):
//   x = tok(ids) + pe(pos);  x = dropout(x)
//   per layer:  x += dropout(attention(ln1(x)))
//               x += dropout(ffn(ln2(x)))       ffn = lin -> gelu -> dropout -> lin
//   logits = head(ln_f(x)),  loss = mean token cross-entropy
//
// The stack runs over a contiguous segment of each sequence. Attention pulls
// the full-sequence keys/values through a KeyValueExchange; with the local
// exchange and the whole sequence as segment this is the plain sequential
// model.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lsst/batch.hpp"
#include "lsst/nnops.hpp"
#include "lsst/shard.hpp"
#include "lsst/tensor.hpp"

namespace lsst {

struct ModelConfig {
  std::size_t embed = 16;        // E_m
  std::size_t layers = 2;        // L
  std::size_t heads = 2;         // H
  std::size_t ffn_hidden = 32;   // D_inner
  std::size_t vocab = 256;       // V
  std::size_t seq_len = 24;      // l_x
  std::size_t batch = 2;         // B
  double dropout = 0.0;
  bool causal = true;
  Precision precision = Precision::kDouble;

  std::size_t head_dim() const { return embed / heads; }
  // Throws ConfigError on embed % heads != 0, seq_len == 0, vocab < 2, ...
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerParams {
  LayerNormParams ln1;
  LinearParams query;
  LinearParams key;
  LinearParams value;
  LinearParams output;
  LayerNormParams ln2;
  LinearParams ffn_in;
  LinearParams ffn_out;
};

// All trainable weights. Also used, shape for shape, to hold gradients.
struct Parameters {
  Tensor token_table;  // V x E
  Tensor pos_table;    // l_x x E, or only a worker's rows when sharded
  std::vector<LayerParams> layers;
  LayerNormParams final_norm;
  LinearParams head;  // E x V

  // Visits every tensor in a fixed order. `positional` is true only for
  // pos_table.
  void for_each(const std::function<void(const std::string& name, Tensor& t, bool positional)>& fn);
  void for_each(const std::function<void(const std::string& name, const Tensor& t,
                                         bool positional)>& fn) const;

  std::size_t element_count(bool include_positional = true) const;
  static Parameters zeros_like(const Parameters& p);
};
using Gradients = Parameters;

// Every tensor except (optionally) pos_table, concatenated in visit order.
Tensor flatten(const Parameters& p, bool include_positional);
void unflatten(const Tensor& flat, Parameters& p, bool include_positional);
// Largest |a - b| / max(max|b|, floor) over tensors, tensor by tensor.
double max_relative_diff(const Parameters& a, const Parameters& b, double floor = 1e-300);
double max_abs_diff(const Parameters& a, const Parameters& b);
double global_norm(const Parameters& p);

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every linear weight and bias
// and for both embedding tables (fan_in = E). Layer norms start at gain 1,
// bias 0.
Parameters init_params(const ModelConfig& config, std::uint64_t seed);

// w <- w - lr * g.
void sgd_step(Parameters& params, const Gradients& grads, double lr);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamOptimizer {
 public:
  AdamOptimizer(const Parameters& like, AdamConfig config);
  void step(Parameters& params, const Gradients& grads);

 private:
  AdamConfig config_;
  Parameters m_;
  Parameters v_;
  std::uint64_t t_ = 0;
};

// Which dropout draws a step uses.
struct StepContext {
  std::uint64_t step = 0;
  DropoutPolicy dropout;
};

// ---- attention -----------------------------------------------------------

// Where a block of query rows sits and how to mask/drop its scores.
struct AttentionSite {
  std::size_t heads = 1;
  bool causal = true;
  std::size_t row_offset = 0;  // global position of query row 0
  std::uint32_t layer = 0;
  std::uint64_t sequence = 0;
  StepContext context;
};

struct AttentionCoreCache {
  std::vector<Tensor> probs;          // per head, rows x keys, after softmax
  std::vector<Tensor> dropout_scale;  // per head; empty when dropout is off
  std::vector<Tensor> dropped;        // per head, probs after dropout
};

// Multi-head softmax(mask(Q K^T / sqrt(d_k))) V over pre-projected Q
// (rows x E), K and V (keys x E).
Tensor attention_core_fwd(const Tensor& q, const Tensor& k, const Tensor& v,
                          const AttentionSite& site, AttentionCoreCache& cache);

struct AttentionCoreGrad {
  Tensor dq;
  Tensor dk;
  Tensor dv;
};

AttentionCoreGrad attention_core_bwd(const Tensor& q, const Tensor& k, const Tensor& v,
                                     const AttentionCoreCache& cache, const AttentionSite& site,
                                     const Tensor& grad_out);

struct AttentionCache {
  Tensor q_input;   // normalized rows owned by this worker
  Tensor kv_input;  // normalized full sequence (fused path only)
  Tensor q;
  Tensor k;  // full sequence
  Tensor v;  // full sequence
  Tensor core_out;
  AttentionCoreCache core;
};

// Projections + core + output projection. Q comes from q_input, K and V from
// kv_input.
Tensor attention_fwd(const LayerParams& p, const Tensor& q_input, const Tensor& kv_input,
                     const AttentionSite& site, AttentionCache& cache);

struct AttentionInputGrad {
  Tensor grad_q_input;
  Tensor grad_kv_input;
};

// Accumulates parameter gradients into `grads`.
AttentionInputGrad attention_bwd(const LayerParams& p, const AttentionCache& cache,
                                 const AttentionSite& site, const Tensor& grad_out,
                                 LayerParams& grads);

// ---- feed-forward --------------------------------------------------------

struct FfnCache {
  Tensor input;
  Tensor hidden_pre;
  Tensor hidden_act;
  Tensor hidden_scale;
  Tensor hidden_dropped;
};

Tensor ffn_fwd(const LayerParams& p, const Tensor& x, const DropoutSite& hidden_site,
               const DropoutPolicy& policy, FfnCache& cache);
Tensor ffn_bwd(const LayerParams& p, const FfnCache& cache, const Tensor& grad_out,
               LayerParams& grads);

// ---- stack ----------------------------------------------------------------

// Supplies the full-sequence attention inputs for a worker's segment.
// `local` holds one matrix per sequence of the batch (segment rows x E); the
// result holds the full-sequence matrices. reduce() is the adjoint: it maps
// full-sequence gradients back to this worker's rows, summed over workers.
class KeyValueExchange {
 public:
  virtual ~KeyValueExchange() = default;
  // true: one exchange of the attention input per layer; false: separate
  // exchanges of K and V.
  virtual bool fused() const = 0;
  virtual std::vector<Tensor> gather(const std::vector<Tensor>& local, std::uint32_t layer) = 0;
  virtual std::vector<Tensor> reduce(const std::vector<Tensor>& full, std::uint32_t layer) = 0;
};

// Identity exchange for a worker that holds whole sequences.
class LocalExchange final : public KeyValueExchange {
 public:
  explicit LocalExchange(bool fused = true) : fused_(fused) {}
  bool fused() const override { return fused_; }
  std::vector<Tensor> gather(const std::vector<Tensor>& local, std::uint32_t) override {
    return local;
  }
  std::vector<Tensor> reduce(const std::vector<Tensor>& full, std::uint32_t) override {
    return full;
  }

 private:
  bool fused_;
};

struct LayerCache {
  LayerNormCache ln1;
  Tensor xn1;
  Tensor k_local;  // unfused path: this worker's K rows
  Tensor v_local;
  AttentionCache attention;
  Tensor attention_scale;
  LayerNormCache ln2;
  FfnCache ffn;
  Tensor ffn_scale;
};

struct SequenceCache {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;
  std::uint64_t sequence = 0;
  Tensor embed_scale;
  std::vector<LayerCache> layers;
  LayerNormCache final_norm;
  Tensor final_normed;
  Tensor logits;
  Tensor grad_logits;  // (softmax - onehot) / rows
};

struct ForwardCaches {
  ModelConfig config;
  ShardSpec shard;
  StepContext context;
  std::vector<SequenceCache> sequences;
};

struct ForwardResult {
  double loss = 0.0;  // mean token loss over the segment
  ForwardCaches caches;
};

// Forward over `segment` (columns shard.offset()..shard.end() of each
// sequence). params.pos_table holds either all seq_len rows or exactly this
// shard's rows.
ForwardResult forward_segment(const ModelConfig& config, const Parameters& params,
                              const Batch& segment, const ShardSpec& shard,
                              const StepContext& context, KeyValueExchange& exchange);

// Reverse mode through the segment's loss (times loss_scale). The returned
// pos_table gradient has the shape of params.pos_table.
Gradients backward_segment(const Parameters& params, const ForwardCaches& caches,
                           KeyValueExchange& exchange, double loss_scale = 1.0);

// Whole-sequence convenience wrappers: the sequential reference model.
ForwardResult forward(const ModelConfig& config, const Parameters& params, const Batch& batch,
                      const StepContext& context = {});
Gradients backward(const Parameters& params, const ForwardCaches& caches,
                   double loss_scale = 1.0);

// Logits for every position of one sequence (no dropout), for probing.
Tensor forward_logits(const ModelConfig& config, const Parameters& params,
                      std::span<const std::int32_t> tokens);

}  // namespace lsst
