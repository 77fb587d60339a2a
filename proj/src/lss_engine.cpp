#include "lsst/lss_engine.hpp"

#include <mutex>

#include "lsst/errors.hpp"
#include "lsst/instrumentation.hpp"

namespace lsst {

DistParameters distribute(const Parameters& full, const ShardSpec& shard) {
  if (full.pos_table.rows() != shard.seq_len) {
    throw ShapeError("distribute: positional table has " + std::to_string(full.pos_table.rows()) +
                     " rows, shard expects " + std::to_string(shard.seq_len));
  }
  DistParameters d;
  d.shard = shard;
  d.params = full;
  d.params.pos_table = embed_positions(shard, full.pos_table);
  return d;
}

Parameters reassemble(std::span<const DistParameters> parts) {
  if (parts.empty()) throw ShapeError("reassemble: no parts");
  std::vector<Tensor> rows;
  rows.reserve(parts.size());
  for (std::size_t r = 0; r < parts.size(); ++r) {
    if (parts[r].shard.rank != r || parts[r].shard.group_size != parts.size()) {
      throw ShapeError("reassemble: parts out of rank order");
    }
    rows.push_back(parts[r].params.pos_table);
  }
  Parameters full = parts.front().params;
  full.pos_table = concat(rows, 0);
  return full;
}

std::vector<Tensor> GroupExchange::gather(const std::vector<Tensor>& local, std::uint32_t layer) {
  const Tensor full = all_gather(group_, stack(local), 1, CommTag{Phase::kForward, layer, step_});
  std::vector<Tensor> out;
  out.reserve(local.size());
  for (std::size_t b = 0; b < local.size(); ++b) out.push_back(unstack_at(full, b));
  return out;
}

std::vector<Tensor> GroupExchange::reduce(const std::vector<Tensor>& full, std::uint32_t layer) {
  const Tensor mine =
      reduce_scatter(group_, stack(full), 1, CommTag{Phase::kBackward, layer, step_});
  std::vector<Tensor> out;
  out.reserve(full.size());
  for (std::size_t b = 0; b < full.size(); ++b) out.push_back(unstack_at(mine, b));
  return out;
}

namespace {

void check_shard(const Group& group, const DistParameters& dist) {
  if (dist.shard.rank != group.rank() || dist.shard.group_size != group.size()) {
    throw ShapeError("lss: shard " + std::to_string(dist.shard.rank) + "/" +
                     std::to_string(dist.shard.group_size) + " does not match group rank " +
                     std::to_string(group.rank()) + "/" + std::to_string(group.size()));
  }
}

}  // namespace

ForwardResult lss_forward(const Group& group, const ModelConfig& config, const DistParameters& dist,
                          const Batch& segment, const StepContext& context,
                          const LssOptions& options) {
  check_shard(group, dist);
  if (dist.params.pos_table.rows() != dist.shard.len()) {
    throw ShapeError("lss: replica must hold only its positional rows");
  }
  GroupExchange exchange(group, options.fuse, context.step);
  return forward_segment(config, dist.params, segment, dist.shard, context, exchange);
}

Gradients lss_backward(const Group& group, const DistParameters& dist, const ForwardCaches& caches,
                       const LssOptions& options) {
  check_shard(group, dist);
  GroupExchange exchange(group, options.fuse, caches.context.step);
  return backward_segment(dist.params, caches, exchange);
}

SyncResult lss_sync(const Group& group, const Gradients& partial, double partial_loss,
                    std::uint64_t step) {
  const std::size_t n = partial.element_count(false);
  Tensor payload({n + 1}, partial.pos_table.precision());
  {
    const Tensor flat = flatten(partial, false);
    std::copy(flat.data(), flat.data() + n, payload.data());
  }
  payload[n] = partial_loss;
  const Tensor mean = all_reduce_mean(group, payload, CommTag{Phase::kSync, std::nullopt, step});

  SyncResult out;
  out.grads = partial;
  unflatten(mean, out.grads, false);
  out.grads.pos_table =
      finalize(scale(partial.pos_table, 1.0 / static_cast<double>(group.size())));
  out.loss = mean[n];
  return out;
}

StepGradients lss_step(const Group& group, const ModelConfig& config, const DistParameters& dist,
                       const Batch& batch, const StepContext& context, const LssOptions& options) {
  StepGradients out;
  CounterScope scope(out.counters);
  const Batch segment = batch.segment(dist.shard);
  ForwardResult fwd = lss_forward(group, config, dist, segment, context, options);
  const Gradients partial = lss_backward(group, dist, fwd.caches, options);
  SyncResult synced = lss_sync(group, partial, fwd.loss, context.step);
  out.loss = synced.loss;
  out.grads = std::move(synced.grads);
  return out;
}

TrainResult train_lss(const ModelConfig& config, const Parameters& init, std::size_t group_size,
                      const BatchSource& source, const TrainOptions& options) {
  config.validate();
  std::vector<Batch> batches;
  batches.reserve(options.steps);
  for (std::size_t i = 0; i < options.steps; ++i) batches.push_back(source(options.first_step + i, 0));

  Communicator comm(group_size);
  std::vector<DistParameters> replicas;
  for (std::size_t r = 0; r < group_size; ++r) {
    replicas.push_back(distribute(init, ShardSpec::make(r, group_size, config.seq_len)));
  }
  std::vector<std::vector<WorkCounters>> counters(options.steps,
                                                  std::vector<WorkCounters>(group_size));
  std::vector<double> losses(options.steps, 0.0);
  const LssOptions lss{options.fuse};

  run_workers(comm, [&](std::size_t rank) {
    const Group group = comm.world(rank);
    DistParameters& dist = replicas[rank];
    Optimizer opt(dist.params, options);
    for (std::size_t i = 0; i < options.steps; ++i) {
      const StepContext context{options.first_step + i, options.dropout};
      StepGradients g = lss_step(group, config, dist, batches[i], context, lss);
      opt.step(dist.params, g.grads);
      counters[i][rank] = g.counters;
      if (rank == 0) losses[i] = g.loss;
    }
  });

  TrainResult result;
  result.params = reassemble(replicas);
  result.ledger = comm.ledger().records();
  for (std::size_t i = 0; i < options.steps; ++i) {
    StepReport rep{"lss", options.first_step + i, losses[i], {}, {}};
    for (const auto& c : counters[i]) rep.counters.merge_max(c);
    rep.collectives = comm.ledger().records_for_step(rep.step);
    result.reports.push_back(std::move(rep));
  }
  return result;
}

}  // namespace lsst
