#pragma once

// Sequence-parallel engine. Each worker of a sequence group owns one
// contiguous segment of every sequence and the matching rows of the
// positional table. Per layer the forward pass all-gathers the normalized
// attention input once and the backward pass reduce-scatters its gradient;
// gradients are averaged once per step, positional rows excluded.

#include <span>
#include <vector>

#include "lsst/collectives.hpp"
#include "lsst/model.hpp"
#include "lsst/training.hpp"

namespace lsst {

// A worker's replica: every parameter, except that params.pos_table holds
// only rows [shard.offset(), shard.end()).
struct DistParameters {
  Parameters params;
  ShardSpec shard;
};

DistParameters distribute(const Parameters& full, const ShardSpec& shard);
// Full parameters from one replica per rank (in rank order): non-positional
// tensors from rank 0, positional rows concatenated.
Parameters reassemble(std::span<const DistParameters> parts);

struct LssOptions {
  bool fuse = true;
};

// Exchanges attention inputs over a sequence group. Per-sequence matrices are
// stacked to B x rows x E and gathered / reduce-scattered along the row axis.
class GroupExchange final : public KeyValueExchange {
 public:
  GroupExchange(const Group& group, bool fused, std::uint64_t step)
      : group_(group), fused_(fused), step_(step) {}
  bool fused() const override { return fused_; }
  std::vector<Tensor> gather(const std::vector<Tensor>& local, std::uint32_t layer) override;
  std::vector<Tensor> reduce(const std::vector<Tensor>& full, std::uint32_t layer) override;

 private:
  Group group_;
  bool fused_;
  std::uint64_t step_;
};

// `segment` holds this worker's columns of the batch. Returns the partial
// loss (token mean over the segment).
ForwardResult lss_forward(const Group& group, const ModelConfig& config, const DistParameters& dist,
                          const Batch& segment, const StepContext& context,
                          const LssOptions& options = {});

// Gradients of this worker's partial loss, including the owned positional rows.
Gradients lss_backward(const Group& group, const DistParameters& dist, const ForwardCaches& caches,
                       const LssOptions& options = {});

struct SyncResult {
  Gradients grads;
  double loss = 0.0;  // group mean of partial losses
};

// One all-reduce-mean of every non-positional gradient with the partial loss
// appended. Positional gradients stay local and are divided by the group size.
SyncResult lss_sync(const Group& group, const Gradients& partial, double partial_loss,
                    std::uint64_t step);

// Forward, backward and sync without the parameter update.
StepGradients lss_step(const Group& group, const ModelConfig& config, const DistParameters& dist,
                       const Batch& batch, const StepContext& context,
                       const LssOptions& options = {});

// Runs `options.steps` steps over a sequence group of `group_size` workers.
TrainResult train_lss(const ModelConfig& config, const Parameters& init, std::size_t group_size,
                      const BatchSource& source, const TrainOptions& options);

}  // namespace lsst
