#pragma once

// Sequence x data parallelism on a D x N grid. Row d is a sequence group of N
// workers that trains on its own batch; column s is a data group of the D
// workers that own the same sequence segment and hence the same positional
// rows. Gradients are averaged along rows (positional rows excluded), then
// along columns (everything).

#include <vector>

#include "lsst/collectives.hpp"
#include "lsst/lss_engine.hpp"
#include "lsst/training.hpp"

namespace lsst {

struct GridLayout {
  std::size_t data = 1;      // D: number of sequence groups (grid rows)
  std::size_t sequence = 1;  // N: workers per sequence group (grid columns)

  std::size_t world_size() const { return data * sequence; }
  std::size_t row_of(std::size_t rank) const { return rank / sequence; }
  std::size_t column_of(std::size_t rank) const { return rank % sequence; }
  std::size_t rank_at(std::size_t row, std::size_t column) const {
    return row * sequence + column;
  }
  // Throws ConfigError for an empty grid or a sequence length the rows
  // cannot split evenly.
  void validate(std::size_t seq_len) const;
};

// Group ids assigned by register_groups: world is 0, then one sequence group
// per row, then one data group per column.
struct GridGroups {
  std::vector<std::uint32_t> rows;
  std::vector<std::uint32_t> columns;
};

GridGroups register_groups(Communicator& comm, const GridLayout& layout);

// lss_step within the row, then the column average. `batch` is the row's
// batch; its first_sequence places it in the combined batch.
StepGradients hybrid_step(const Group& row, const Group& column, const ModelConfig& config,
                          const DistParameters& dist, const Batch& batch,
                          const StepContext& context, const LssOptions& options = {});

// source(step, d) supplies row d's batch; first_sequence is set to d * B.
TrainResult train_hybrid(const ModelConfig& config, const Parameters& init,
                         const GridLayout& layout, const BatchSource& source,
                         const TrainOptions& options);

}  // namespace lsst
