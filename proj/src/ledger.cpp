#include "lsst/ledger.hpp"

#include <istream>
#include <ostream>

#include <json.hpp>

#include "lsst/errors.hpp"

namespace lsst {

std::string to_string(CollectiveKind kind) {
  switch (kind) {
    case CollectiveKind::kScatter: return "scatter";
    case CollectiveKind::kGather: return "gather";
    case CollectiveKind::kAllGather: return "all-gather";
    case CollectiveKind::kReduceScatter: return "reduce-scatter";
    case CollectiveKind::kAllReduce: return "all-reduce";
  }
  return "unknown";
}

std::string to_string(Phase phase) {
  switch (phase) {
    case Phase::kForward: return "forward";
    case Phase::kBackward: return "backward";
    case Phase::kSync: return "sync";
  }
  return "unknown";
}

CollectiveKind parse_collective_kind(const std::string& s) {
  for (auto k : {CollectiveKind::kScatter, CollectiveKind::kGather, CollectiveKind::kAllGather,
                 CollectiveKind::kReduceScatter, CollectiveKind::kAllReduce}) {
    if (to_string(k) == s) return k;
  }
  throw IoError("unknown collective kind '" + s + "'");
}

Phase parse_phase(const std::string& s) {
  for (auto p : {Phase::kForward, Phase::kBackward, Phase::kSync}) {
    if (to_string(p) == s) return p;
  }
  throw IoError("unknown phase '" + s + "'");
}

bool LedgerQuery::matches(const LedgerRecord& r) const {
  if (step && *step != r.step) return false;
  if (group && *group != r.group) return false;
  if (kind && *kind != r.kind) return false;
  if (phase && *phase != r.phase) return false;
  if (layer && r.layer != layer) return false;
  if (layer_tagged && *layer_tagged != r.layer.has_value()) return false;
  return true;
}

void CommLedger::append(const LedgerRecord& record) {
  std::lock_guard lock(mutex_);
  records_.push_back(record);
}

std::vector<LedgerRecord> CommLedger::records() const {
  std::lock_guard lock(mutex_);
  return records_;
}

std::vector<LedgerRecord> CommLedger::records_for_step(std::uint64_t step) const {
  std::lock_guard lock(mutex_);
  std::vector<LedgerRecord> out;
  for (const auto& r : records_)
    if (r.step == step) out.push_back(r);
  return out;
}

std::size_t CommLedger::count(const LedgerQuery& query) const {
  std::lock_guard lock(mutex_);
  std::size_t n = 0;
  for (const auto& r : records_)
    if (query.matches(r)) ++n;
  return n;
}

std::size_t CommLedger::size() const {
  std::lock_guard lock(mutex_);
  return records_.size();
}

void CommLedger::clear() {
  std::lock_guard lock(mutex_);
  records_.clear();
}

namespace {

nlohmann::ordered_json to_json(const LedgerRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["group"] = r.group;
  j["kind"] = to_string(r.kind);
  j["elements"] = r.elements;
  j["phase"] = to_string(r.phase);
  if (r.layer) {
    j["layer"] = *r.layer;
  } else {
    j["layer"] = nullptr;
  }
  return j;
}

}  // namespace

std::string ledger_record_to_json(const LedgerRecord& record) { return to_json(record).dump(); }

LedgerRecord ledger_record_from_json(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    LedgerRecord r;
    r.step = j.at("step").get<std::uint64_t>();
    r.group = j.at("group").get<std::uint32_t>();
    r.kind = parse_collective_kind(j.at("kind").get<std::string>());
    r.elements = j.at("elements").get<std::uint64_t>();
    r.phase = parse_phase(j.at("phase").get<std::string>());
    if (!j.at("layer").is_null()) r.layer = j.at("layer").get<std::uint32_t>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad ledger record: ") + e.what());
  }
}

void write_ledger(std::ostream& out, const std::vector<LedgerRecord>& records) {
  for (const auto& r : records) out << ledger_record_to_json(r) << '\n';
}

std::vector<LedgerRecord> read_ledger(std::istream& in) {
  std::vector<LedgerRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(ledger_record_from_json(line));
  }
  return out;
}

}  // namespace lsst
