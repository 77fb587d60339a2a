#include "lsst/batch.hpp"

#include <string>

#include "lsst/errors.hpp"

namespace lsst {

void Batch::validate() const {
  if (tokens.size() != batch * seq_len || targets.size() != batch * seq_len) {
    throw ShapeError("batch: expected " + std::to_string(batch) + "x" + std::to_string(seq_len) +
                     " tokens and targets");
  }
}

Batch Batch::segment(const ShardSpec& shard) const {
  validate();
  if (shard.seq_len != seq_len) {
    throw ShapeError("batch: shard covers " + std::to_string(shard.seq_len) +
                     " positions, batch has " + std::to_string(seq_len));
  }
  Batch out;
  out.batch = batch;
  out.seq_len = shard.len();
  out.first_sequence = first_sequence;
  out.tokens.reserve(batch * out.seq_len);
  out.targets.reserve(batch * out.seq_len);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * seq_len + shard.offset();
    out.tokens.insert(out.tokens.end(), tokens.begin() + base, tokens.begin() + base + out.seq_len);
    out.targets.insert(out.targets.end(), targets.begin() + base,
                       targets.begin() + base + out.seq_len);
  }
  return out;
}

Batch Batch::concat(std::span<const Batch> parts) {
  if (parts.empty()) throw ShapeError("batch: nothing to concatenate");
  Batch out;
  out.seq_len = parts.front().seq_len;
  out.first_sequence = parts.front().first_sequence;
  for (const Batch& p : parts) {
    p.validate();
    if (p.seq_len != out.seq_len) throw ShapeError("batch: sequence lengths differ");
    out.batch += p.batch;
    out.tokens.insert(out.tokens.end(), p.tokens.begin(), p.tokens.end());
    out.targets.insert(out.targets.end(), p.targets.begin(), p.targets.end());
  }
  return out;
}

}  // namespace lsst
