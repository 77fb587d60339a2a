#include "lsst/cost_model.hpp"

#include "lsst/errors.hpp"

namespace lsst {

std::string to_string(EngineKind kind) {
  switch (kind) {
    case EngineKind::kSequential: return "sequential";
    case EngineKind::kLss: return "lss";
    case EngineKind::kBaseline: return "baseline";
    case EngineKind::kHybrid: return "hybrid";
  }
  return "unknown";
}

EngineKind parse_engine(const std::string& s) {
  for (auto k : {EngineKind::kSequential, EngineKind::kLss, EngineKind::kBaseline,
                 EngineKind::kHybrid}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown engine '" + s + "'");
}

CostEstimate estimate_cost(const ModelConfig& config, EngineKind engine, std::size_t sequence,
                           std::size_t data, bool fuse) {
  config.validate();
  if (engine == EngineKind::kSequential) sequence = 1;
  if (engine != EngineKind::kHybrid) data = 1;
  if (sequence == 0 || data == 0) throw ConfigError("cost: group sizes must be positive");
  if (config.seq_len % sequence != 0) {
    throw ConfigError("cost: sequence length not divisible by N");
  }
  const std::uint64_t b = config.batch;
  const std::uint64_t h = config.heads;
  const std::uint64_t l = config.seq_len;
  const std::uint64_t e = config.embed;
  const std::uint64_t dk = config.head_dim();
  const std::uint64_t f = config.ffn_hidden;
  const std::uint64_t v = config.vocab;
  const std::uint64_t layers = config.layers;
  const std::uint64_t n = sequence;
  const bool baseline = engine == EngineKind::kBaseline;
  const std::uint64_t seg = l / n;
  // The baseline root computes attention, feed-forward and head over whole
  // sequences; the sequence-parallel engines work on their own rows.
  const std::uint64_t rows = baseline ? l : seg;
  // Rows whose K and V a worker projects.
  const std::uint64_t kv_rows = (baseline || fuse) ? l : seg;

  CostEstimate c;
  c.score_flops_per_layer = 2 * b * h * rows * l * dk * 2;
  c.score_flops = layers * c.score_flops_per_layer;
  const std::uint64_t per_layer_proj =
      2 * b * rows * e * e * 2 + 2 * b * kv_rows * e * e * 2 + 2 * b * rows * e * f * 2;
  c.projection_flops = layers * per_layer_proj + 2 * b * rows * e * v;
  c.score_elements = b * h * rows * l;

  // Per layer: q, output, core_out, two residual streams, two norms (rows x E),
  // k, v, collected input (kv_rows x E or l x E), ffn hidden (3 x rows x F),
  // probabilities and their dropped copy (2 x score elements).
  const std::uint64_t gathered = (baseline || fuse) ? l : 0;
  const std::uint64_t per_layer_act = b * (7 * rows * e + 2 * kv_rows * e + gathered * e) +
                                      b * 3 * rows * f + 2 * c.score_elements;
  c.activation_elements = layers * per_layer_act + b * rows * (2 * e + 2 * v);

  const std::uint64_t params = [&] {
    const std::uint64_t per_layer = 4 * (e * e + e) + 4 * e + (e * f + f) + (f * e + e);
    return v * e + l * e + layers * per_layer + 2 * e + e * v + v;
  }();
  // Sequence-parallel replicas hold only their positional rows.
  c.parameter_elements = baseline ? params : params - l * e + seg * e;
  c.memory_bytes = (c.activation_elements + c.parameter_elements) * precision_bytes(config.precision);

  switch (engine) {
    case EngineKind::kSequential:
      c.layer_collectives = 0;
      c.collectives = 0;
      break;
    case EngineKind::kLss:
    case EngineKind::kHybrid:
      c.layer_collectives = layers * (fuse ? 2 : 4);
      c.collectives = c.layer_collectives + 1 + (engine == EngineKind::kHybrid ? 1 : 0);
      break;
    case EngineKind::kBaseline:
      c.layer_collectives = 8 * layers;
      c.collectives = c.layer_collectives + 4 + 1;
      break;
  }
  c.compute_label = baseline ? "O(l_x^2) per layer on one worker" : "O(l_x^2 / N) per layer";
  c.memory_label = baseline ? "O(l_x^2)" : "O(l_x^2 / N)";
  return c;
}

}  // namespace lsst
