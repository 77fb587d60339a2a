#include "lsst/instrumentation.hpp"

#include <algorithm>

namespace lsst {
namespace {

thread_local WorkCounters* t_counters = nullptr;
thread_local FlopCategory t_category = FlopCategory::kOther;

}  // namespace

std::uint64_t WorkCounters::total_flops() const {
  std::uint64_t total = 0;
  for (auto f : flops) total += f;
  return total;
}

void WorkCounters::merge_max(const WorkCounters& other) {
  for (std::size_t i = 0; i < flops.size(); ++i) flops[i] = std::max(flops[i], other.flops[i]);
  score_elements_peak = std::max(score_elements_peak, other.score_elements_peak);
}

CounterScope::CounterScope(WorkCounters& counters) : previous_(t_counters) {
  t_counters = &counters;
}

CounterScope::~CounterScope() { t_counters = previous_; }

CategoryScope::CategoryScope(FlopCategory category) : previous_(t_category) {
  t_category = category;
}

CategoryScope::~CategoryScope() { t_category = previous_; }

void count_flops(std::uint64_t flops) {
  if (t_counters != nullptr) t_counters->flops[static_cast<std::size_t>(t_category)] += flops;
}

void note_score_elements(std::uint64_t elements) {
  if (t_counters != nullptr) t_counters->score_elements_live += elements;
}

void end_attention_layer() {
  if (t_counters == nullptr) return;
  t_counters->score_elements_peak =
      std::max(t_counters->score_elements_peak, t_counters->score_elements_live);
  t_counters->score_elements_live = 0;
}

}  // namespace lsst
