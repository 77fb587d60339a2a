#pragma once

// Reference sequence parallelism in the style of tensor-parallel frameworks:
// layer norms, dropouts and residual adds run on each worker's segment, while
// self-attention, the feed-forward block, the embeddings and the output head
// run on group rank 0 over whole sequences. Each sublayer is bracketed by a
// gather to rank 0 and a scatter back; the backward pass swaps the two for
// reduce-scatter and gather.

#include "lsst/collectives.hpp"
#include "lsst/model.hpp"
#include "lsst/training.hpp"

namespace lsst {

inline constexpr std::size_t kBaselineRoot = 0;

// Forward, backward and gradient sum over the group. Every worker holds the
// full parameters and the full batch; the returned gradients and loss are the
// same on every worker.
StepGradients baseline_step(const Group& group, const ModelConfig& config,
                            const Parameters& params, const Batch& batch,
                            const StepContext& context);

TrainResult train_baseline(const ModelConfig& config, const Parameters& init,
                           std::size_t group_size, const BatchSource& source,
                           const TrainOptions& options);

}  // namespace lsst
