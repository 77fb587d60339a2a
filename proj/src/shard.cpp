#include "lsst/shard.hpp"

#include <string>

#include "lsst/errors.hpp"

namespace lsst {

ShardSpec ShardSpec::make(std::size_t rank, std::size_t group_size, std::size_t seq_len) {
  if (group_size == 0) throw ShapeError("shard: group size must be positive");
  if (rank >= group_size) {
    throw IndexError("shard: rank " + std::to_string(rank) + " outside group of " +
                     std::to_string(group_size));
  }
  if (seq_len % group_size != 0) {
    throw ShapeError("shard: sequence length " + std::to_string(seq_len) +
                     " not divisible by group size " + std::to_string(group_size));
  }
  return ShardSpec{rank, group_size, seq_len};
}

}  // namespace lsst
