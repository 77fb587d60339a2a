#pragma once

#include <cstdint>
#include <iosfwd>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace lsst {

enum class CollectiveKind : std::uint8_t {
  kScatter,
  kGather,
  kAllGather,
  kReduceScatter,
  kAllReduce,
};

enum class Phase : std::uint8_t { kForward, kBackward, kSync };

std::string to_string(CollectiveKind kind);
std::string to_string(Phase phase);
CollectiveKind parse_collective_kind(const std::string& s);
Phase parse_phase(const std::string& s);

// One collective call by a whole group. `elements` is the size of the
// logical payload: the full tensor for scatter/reduce-scatter/all-reduce and
// the concatenated result for gather/all-gather.
struct LedgerRecord {
  std::uint64_t step = 0;
  std::uint32_t group = 0;
  CollectiveKind kind = CollectiveKind::kAllReduce;
  std::uint64_t elements = 0;
  Phase phase = Phase::kForward;
  std::optional<std::uint32_t> layer;

  friend bool operator==(const LedgerRecord&, const LedgerRecord&) = default;
};

// Filter for CommLedger::count; unset fields match anything.
struct LedgerQuery {
  std::optional<std::uint64_t> step;
  std::optional<std::uint32_t> group;
  std::optional<CollectiveKind> kind;
  std::optional<Phase> phase;
  std::optional<std::uint32_t> layer;
  // true: only layer-tagged records; false: only untagged ones.
  std::optional<bool> layer_tagged;

  bool matches(const LedgerRecord& r) const;
};

// Append-only record of every collective, shared by all workers.
class CommLedger {
 public:
  void append(const LedgerRecord& record);
  std::vector<LedgerRecord> records() const;
  std::vector<LedgerRecord> records_for_step(std::uint64_t step) const;
  std::size_t count(const LedgerQuery& query = {}) const;
  std::size_t size() const;
  void clear();

 private:
  mutable std::mutex mutex_;
  std::vector<LedgerRecord> records_;
};

// Line-delimited JSON, one object per record:
//   {"step":3,"group":1,"kind":"all-gather","elements":768,"phase":"forward","layer":0}
// `layer` is null for records outside an attention layer.
std::string ledger_record_to_json(const LedgerRecord& record);
LedgerRecord ledger_record_from_json(const std::string& line);
void write_ledger(std::ostream& out, const std::vector<LedgerRecord>& records);
std::vector<LedgerRecord> read_ledger(std::istream& in);

}  // namespace lsst
