#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lsst/shard.hpp"

namespace lsst {

// Token ids and next-token targets for `batch` sequences of `seq_len`
// positions, row-major. `first_sequence` is the global index of row 0, which
// keys dropout masks when several data-parallel groups share a step.
struct Batch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;
  std::uint64_t first_sequence = 0;

  std::span<const std::int32_t> tokens_of(std::size_t b) const {
    return std::span(tokens).subspan(b * seq_len, seq_len);
  }
  std::span<const std::int32_t> targets_of(std::size_t b) const {
    return std::span(targets).subspan(b * seq_len, seq_len);
  }

  // Throws ShapeError if the vectors disagree with batch * seq_len.
  void validate() const;
  // Columns [shard.offset(), shard.end()) of every sequence.
  Batch segment(const ShardSpec& shard) const;
  // Sequences of `parts` stacked in order; first_sequence of the first part.
  static Batch concat(std::span<const Batch> parts);
};

}  // namespace lsst
