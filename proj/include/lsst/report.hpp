#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "lsst/instrumentation.hpp"
#include "lsst/ledger.hpp"

namespace lsst {

// Outcome of one training step of any engine. `counters` is the per-worker
// maximum over the workers that ran the step.
struct StepReport {
  std::string engine;
  std::uint64_t step = 0;
  double loss = 0.0;
  WorkCounters counters;
  std::vector<LedgerRecord> collectives;
};

// One JSON object per line:
//   {"engine":"lss","step":0,"loss":5.54,"flops":{...},"score_elements_peak":576,
//    "collectives":[<ledger records>]}
std::string step_report_to_json(const StepReport& report);
StepReport step_report_from_json(const std::string& line);
void write_step_reports(std::ostream& out, const std::vector<StepReport>& reports);
std::vector<StepReport> read_step_reports(std::istream& in);

}  // namespace lsst
