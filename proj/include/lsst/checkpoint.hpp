#pragma once

// Binary checkpoint, little-endian throughout:
//   magic "LSSTCKPT" (8 bytes), u32 version = 1
//   config: u64 embed, layers, heads, ffn_hidden, vocab, seq_len, batch;
//           f64 dropout; u8 causal; u8 precision (0 double, 1 single)
//   u64 seed, u64 tensor count
//   per tensor, in Parameters::for_each order:
//     u32 name length, name bytes, u32 rank, u64 dims[rank], f64 values[size]

#include <cstdint>
#include <filesystem>

#include "lsst/model.hpp"

namespace lsst {

struct Checkpoint {
  ModelConfig config;
  std::uint64_t seed = 0;
  Parameters params;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace lsst
