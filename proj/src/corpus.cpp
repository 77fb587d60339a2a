#include "lsst/corpus.hpp"

#include <array>
#include <fstream>
#include <iterator>
#include <random>

#include "lsst/errors.hpp"

namespace lsst {

ByteCorpus ByteCorpus::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return ByteCorpus(std::move(bytes));
}

Batch ByteCorpus::batch(std::size_t seq_len, std::size_t batch, std::uint64_t step) const {
  if (seq_len == 0 || batch == 0) throw ConfigError("corpus: empty batch requested");
  if (bytes_.size() < batch * (seq_len + 1)) {
    throw IoError("corpus of " + std::to_string(bytes_.size()) + " bytes is smaller than " +
                  std::to_string(batch * (seq_len + 1)));
  }
  const std::uint64_t span = bytes_.size() - seq_len;
  Batch out;
  out.batch = batch;
  out.seq_len = seq_len;
  out.tokens.reserve(batch * seq_len);
  out.targets.reserve(batch * seq_len);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::uint64_t start = ((step * batch + b) * seq_len) % span;
    for (std::size_t t = 0; t < seq_len; ++t) {
      out.tokens.push_back(bytes_[start + t]);
      out.targets.push_back(bytes_[start + t + 1]);
    }
  }
  return out;
}

Batch load_byte_corpus(const std::filesystem::path& path, std::size_t seq_len, std::size_t batch,
                       std::uint64_t step) {
  return ByteCorpus::load(path).batch(seq_len, batch, step);
}

namespace {

constexpr std::array<const char*, 48> kLexicon = {
    "the",    "of",     "and",    "to",      "in",     "a",       "is",     "that",
    "for",    "it",     "as",     "was",     "with",   "be",      "by",     "on",
    "not",    "he",     "this",   "are",     "or",     "his",     "from",   "at",
    "which",  "but",    "have",   "an",      "had",    "they",    "you",    "were",
    "their",  "one",    "all",    "we",      "can",    "her",     "has",    "there",
    "been",   "if",     "more",   "when",    "will",   "would",   "who",    "so"};

}  // namespace

std::vector<std::uint8_t> synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  const std::size_t words = kLexicon.size();
  // Each word prefers a handful of successors.
  std::vector<std::array<std::size_t, 4>> successors(words);
  for (auto& s : successors) {
    for (auto& w : s) w = gen() % words;
  }
  std::vector<std::uint8_t> out;
  out.reserve(bytes + 16);
  std::size_t word = 0;
  std::size_t line = 0;
  bool capital = true;
  while (out.size() < bytes) {
    const std::string w = kLexicon[word];
    for (std::size_t i = 0; i < w.size(); ++i) {
      char c = w[i];
      if (i == 0 && capital) c = static_cast<char>(c - 'a' + 'A');
      out.push_back(static_cast<std::uint8_t>(c));
    }
    line += w.size();
    capital = false;
    const std::uint64_t r = gen() % 16;
    if (r == 0) {
      out.push_back('.');
      capital = true;
    } else if (r == 1) {
      out.push_back(',');
    }
    if (line > 72) {
      out.push_back('\n');
      line = 0;
    } else {
      out.push_back(' ');
      ++line;
    }
    word = (gen() % 8 == 0) ? gen() % words : successors[word][gen() % 4];
  }
  out.resize(bytes);
  return out;
}

void write_synthetic_corpus(const std::filesystem::path& path, std::size_t bytes,
                            std::uint64_t seed) {
  const std::vector<std::uint8_t> data = synthetic_corpus(bytes, seed);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write corpus " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace lsst
