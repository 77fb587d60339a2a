#pragma once

// Closed-form per-worker work, memory and communication counts for one
// training step. Nothing is executed.

#include <cstdint>
#include <string>

#include "lsst/model.hpp"

namespace lsst {

enum class EngineKind : std::uint8_t { kSequential, kLss, kBaseline, kHybrid };

std::string to_string(EngineKind kind);
EngineKind parse_engine(const std::string& s);

struct CostEstimate {
  // Forward Q*K^T plus A_w*V of one attention layer:
  //   2 * B * H * rows * l_x * d_k * 2, rows = l_x / N (l_x for the baseline root).
  std::uint64_t score_flops_per_layer = 0;
  std::uint64_t score_flops = 0;  // all layers
  // Forward linear layers, including K/V recomputed over the whole sequence.
  std::uint64_t projection_flops = 0;
  // Score elements of one attention layer: B * H * rows * l_x.
  std::uint64_t score_elements = 0;
  // Activations kept for the backward pass, all layers.
  std::uint64_t activation_elements = 0;
  std::uint64_t parameter_elements = 0;
  std::uint64_t memory_bytes = 0;
  std::uint64_t layer_collectives = 0;  // per step
  std::uint64_t collectives = 0;        // per step, boundary and sync included
  std::string compute_label;
  std::string memory_label;
};

// `sequence` is N, `data` is D (hybrid only). `fuse` = false counts separate
// K and V exchanges.
CostEstimate estimate_cost(const ModelConfig& config, EngineKind engine, std::size_t sequence,
                           std::size_t data = 1, bool fuse = true);

}  // namespace lsst
