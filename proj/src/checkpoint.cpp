#include "lsst/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "lsst/errors.hpp"

namespace lsst {
namespace {

constexpr std::array<char, 8> kMagic = {'L', 'S', 'S', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

class Writer {
 public:
  explicit Writer(std::ofstream& out) : out_(out) {}
  template <typename T>
  void put(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }

 private:
  std::ofstream& out_;
};

class Reader {
 public:
  explicit Reader(std::ifstream& in) : in_(in) {}
  template <typename T>
  T get() {
    T v{};
    bytes(&v, sizeof v);
    return v;
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw IoError("checkpoint truncated");
  }

 private:
  std::ifstream& in_;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  Writer w(out);
  w.bytes(kMagic.data(), kMagic.size());
  w.put<std::uint32_t>(kVersion);
  const ModelConfig& c = ck.config;
  for (std::uint64_t v : {c.embed, c.layers, c.heads, c.ffn_hidden, c.vocab, c.seq_len, c.batch}) {
    w.put<std::uint64_t>(v);
  }
  w.put<double>(c.dropout);
  w.put<std::uint8_t>(c.causal ? 1 : 0);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.precision));
  w.put<std::uint64_t>(ck.seed);
  std::uint64_t count = 0;
  ck.params.for_each([&](const std::string&, const Tensor&, bool) { ++count; });
  w.put<std::uint64_t>(count);
  ck.params.for_each([&](const std::string& name, const Tensor& t, bool) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put<std::uint64_t>(d);
    w.bytes(t.data(), t.size() * sizeof(double));
  });
  if (!out) throw IoError("short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  Reader r(in);
  std::array<char, 8> magic{};
  r.bytes(magic.data(), magic.size());
  if (magic != kMagic) throw IoError(path.string() + " is not a checkpoint");
  if (const auto version = r.get<std::uint32_t>(); version != kVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  ModelConfig& c = ck.config;
  for (std::size_t* field : {&c.embed, &c.layers, &c.heads, &c.ffn_hidden, &c.vocab, &c.seq_len,
                             &c.batch}) {
    *field = r.get<std::uint64_t>();
  }
  c.dropout = r.get<double>();
  c.causal = r.get<std::uint8_t>() != 0;
  const auto precision = r.get<std::uint8_t>();
  if (precision > 1) throw IoError("checkpoint: bad precision tag");
  c.precision = static_cast<Precision>(precision);
  c.validate();
  ck.seed = r.get<std::uint64_t>();

  ck.params = init_params(c, 0);
  std::uint64_t expected = 0;
  ck.params.for_each([&](const std::string&, const Tensor&, bool) { ++expected; });
  if (r.get<std::uint64_t>() != expected) throw IoError("checkpoint: tensor count mismatch");
  ck.params.for_each([&](const std::string& name, Tensor& t, bool) {
    const auto len = r.get<std::uint32_t>();
    std::string stored(len, '\0');
    r.bytes(stored.data(), len);
    if (stored != name) throw IoError("checkpoint: expected " + name + ", found " + stored);
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    if (shape != t.shape()) {
      throw IoError("checkpoint: " + name + " has shape " + shape_string(shape) + ", expected " +
                    shape_string(t.shape()));
    }
    r.bytes(t.data(), t.size() * sizeof(double));
  });
  return ck;
}

}  // namespace lsst
