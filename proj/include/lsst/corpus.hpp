#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lsst/batch.hpp"

namespace lsst {

// Raw bytes used as tokens (vocabulary 256).
class ByteCorpus {
 public:
  static ByteCorpus load(const std::filesystem::path& path);
  explicit ByteCorpus(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}

  std::size_t size() const { return bytes_.size(); }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

  // Sequence b of step s starts at ((s * batch + b) * seq_len) mod
  // (size - seq_len); targets are the following bytes. Throws IoError when
  // the corpus holds fewer than batch * (seq_len + 1) bytes.
  Batch batch(std::size_t seq_len, std::size_t batch, std::uint64_t step) const;

 private:
  std::vector<std::uint8_t> bytes_;
};

Batch load_byte_corpus(const std::filesystem::path& path, std::size_t seq_len, std::size_t batch,
                       std::uint64_t step);

// Text-like bytes: words drawn from a fixed lexicon by a seeded first-order
// chain, separated by spaces and punctuation, wrapped into lines.
std::vector<std::uint8_t> synthetic_corpus(std::size_t bytes, std::uint64_t seed);
void write_synthetic_corpus(const std::filesystem::path& path, std::size_t bytes,
                            std::uint64_t seed);

}  // namespace lsst
