#include "lsst/report.hpp"

#include <istream>
#include <ostream>

#include <json.hpp>

#include "lsst/errors.hpp"

namespace lsst {
namespace {

constexpr const char* kCategoryNames[kFlopCategoryCount] = {"other", "score", "projection",
                                                            "backward"};

}  // namespace

std::string step_report_to_json(const StepReport& report) {
  nlohmann::ordered_json j;
  j["engine"] = report.engine;
  j["step"] = report.step;
  j["loss"] = report.loss;
  nlohmann::ordered_json flops = nlohmann::ordered_json::object();
  for (std::size_t c = 0; c < kFlopCategoryCount; ++c) flops[kCategoryNames[c]] = report.counters.flops[c];
  j["flops"] = std::move(flops);
  j["score_elements_peak"] = report.counters.score_elements_peak;
  nlohmann::ordered_json records = nlohmann::ordered_json::array();
  for (const auto& r : report.collectives) {
    records.push_back(nlohmann::ordered_json::parse(ledger_record_to_json(r)));
  }
  j["collectives"] = std::move(records);
  return j.dump();
}

StepReport step_report_from_json(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    StepReport r;
    r.engine = j.at("engine").get<std::string>();
    r.step = j.at("step").get<std::uint64_t>();
    r.loss = j.at("loss").get<double>();
    const auto& flops = j.at("flops");
    for (std::size_t c = 0; c < kFlopCategoryCount; ++c) {
      r.counters.flops[c] = flops.at(kCategoryNames[c]).get<std::uint64_t>();
    }
    r.counters.score_elements_peak = j.at("score_elements_peak").get<std::uint64_t>();
    for (const auto& rec : j.at("collectives")) {
      r.collectives.push_back(ledger_record_from_json(rec.dump()));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad step report: ") + e.what());
  }
}

void write_step_reports(std::ostream& out, const std::vector<StepReport>& reports) {
  for (const auto& r : reports) out << step_report_to_json(r) << '\n';
}

std::vector<StepReport> read_step_reports(std::istream& in) {
  std::vector<StepReport> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(step_report_from_json(line));
  }
  return out;
}

}  // namespace lsst
