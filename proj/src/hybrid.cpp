#include "lsst/hybrid.hpp"

#include "lsst/errors.hpp"
#include "lsst/instrumentation.hpp"

namespace lsst {

void GridLayout::validate(std::size_t seq_len) const {
  if (data == 0 || sequence == 0) throw ConfigError("grid: D and N must be positive");
  if (seq_len % sequence != 0) {
    throw ConfigError("grid: sequence length " + std::to_string(seq_len) +
                      " not divisible by N = " + std::to_string(sequence));
  }
}

GridGroups register_groups(Communicator& comm, const GridLayout& layout) {
  if (comm.world_size() != layout.world_size()) {
    throw ConfigError("grid: " + std::to_string(layout.data) + " x " +
                      std::to_string(layout.sequence) + " does not match world size " +
                      std::to_string(comm.world_size()));
  }
  GridGroups g;
  for (std::size_t d = 0; d < layout.data; ++d) {
    std::vector<std::size_t> members;
    for (std::size_t s = 0; s < layout.sequence; ++s) members.push_back(layout.rank_at(d, s));
    g.rows.push_back(comm.add_group(GroupKind::kSequence, std::move(members)));
  }
  for (std::size_t s = 0; s < layout.sequence; ++s) {
    std::vector<std::size_t> members;
    for (std::size_t d = 0; d < layout.data; ++d) members.push_back(layout.rank_at(d, s));
    g.columns.push_back(comm.add_group(GroupKind::kData, std::move(members)));
  }
  return g;
}

StepGradients hybrid_step(const Group& row, const Group& column, const ModelConfig& config,
                          const DistParameters& dist, const Batch& batch,
                          const StepContext& context, const LssOptions& options) {
  StepGradients out = lss_step(row, config, dist, batch, context, options);
  CounterScope scope(out.counters);

  const std::size_t n = out.grads.element_count(true);
  Tensor payload({n + 1}, config.precision);
  {
    const Tensor flat = flatten(out.grads, true);
    std::copy(flat.data(), flat.data() + n, payload.data());
  }
  payload[n] = out.loss;
  const Tensor mean =
      all_reduce_mean(column, payload, CommTag{Phase::kSync, std::nullopt, context.step});
  unflatten(mean, out.grads, true);
  out.loss = mean[n];
  return out;
}

TrainResult train_hybrid(const ModelConfig& config, const Parameters& init,
                         const GridLayout& layout, const BatchSource& source,
                         const TrainOptions& options) {
  config.validate();
  layout.validate(config.seq_len);
  std::vector<std::vector<Batch>> batches(options.steps);
  for (std::size_t i = 0; i < options.steps; ++i) {
    for (std::size_t d = 0; d < layout.data; ++d) {
      Batch b = source(options.first_step + i, d);
      b.first_sequence = d * b.batch;
      batches[i].push_back(std::move(b));
    }
  }

  const std::size_t world = layout.world_size();
  Communicator comm(world);
  const GridGroups groups = register_groups(comm, layout);
  std::vector<DistParameters> replicas;
  for (std::size_t r = 0; r < world; ++r) {
    replicas.push_back(
        distribute(init, ShardSpec::make(layout.column_of(r), layout.sequence, config.seq_len)));
  }
  std::vector<std::vector<WorkCounters>> counters(options.steps, std::vector<WorkCounters>(world));
  std::vector<double> losses(options.steps, 0.0);
  const LssOptions lss{options.fuse};

  run_workers(comm, [&](std::size_t rank) {
    const Group row = comm.group(groups.rows[layout.row_of(rank)], rank);
    const Group column = comm.group(groups.columns[layout.column_of(rank)], rank);
    DistParameters& dist = replicas[rank];
    Optimizer opt(dist.params, options);
    for (std::size_t i = 0; i < options.steps; ++i) {
      const StepContext context{options.first_step + i, options.dropout};
      StepGradients g = hybrid_step(row, column, config, dist,
                                    batches[i][layout.row_of(rank)], context, lss);
      opt.step(dist.params, g.grads);
      counters[i][rank] = g.counters;
      if (rank == 0) losses[i] = g.loss;
    }
  });

  TrainResult result;
  result.params = reassemble(std::span(replicas).first(layout.sequence));
  result.ledger = comm.ledger().records();
  for (std::size_t i = 0; i < options.steps; ++i) {
    StepReport rep{"hybrid", options.first_step + i, losses[i], {}, {}};
    for (const auto& c : counters[i]) rep.counters.merge_max(c);
    rep.collectives = comm.ledger().records_for_step(rep.step);
    result.reports.push_back(std::move(rep));
  }
  return result;
}

}  // namespace lsst
