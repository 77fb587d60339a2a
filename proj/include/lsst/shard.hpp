#pragma once

#include <cstddef>

namespace lsst {

// One worker's contiguous slice [offset, offset + len) of a sequence of
// length seq_len, split evenly over group_size workers in rank order.
struct ShardSpec {
  std::size_t rank = 0;
  std::size_t group_size = 1;
  std::size_t seq_len = 0;

  // Throws ShapeError unless seq_len % group_size == 0, IndexError unless
  // rank < group_size.
  static ShardSpec make(std::size_t rank, std::size_t group_size, std::size_t seq_len);
  static ShardSpec whole(std::size_t seq_len) { return make(0, 1, seq_len); }

  std::size_t len() const { return seq_len / group_size; }
  std::size_t offset() const { return rank * len(); }
  std::size_t end() const { return offset() + len(); }
};

}  // namespace lsst
