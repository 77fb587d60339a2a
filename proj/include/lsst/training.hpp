#pragma once

// Pieces shared by every engine's multi-step driver.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lsst/batch.hpp"
#include "lsst/model.hpp"
#include "lsst/report.hpp"

namespace lsst {

enum class OptimizerKind : std::uint8_t { kSgd, kAdam };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& s);

struct TrainOptions {
  std::size_t steps = 1;
  std::uint64_t first_step = 0;
  double lr = 0.1;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  AdamConfig adam;
  DropoutPolicy dropout;
  // Separate K and V exchanges instead of one exchange of the attention input.
  bool fuse = true;
};

// Applies one update rule to one worker's parameters.
class Optimizer {
 public:
  Optimizer(const Parameters& like, const TrainOptions& options);
  void step(Parameters& params, const Gradients& grads);

 private:
  OptimizerKind kind_;
  double lr_;
  std::optional<AdamOptimizer> adam_;
};

// The batch for `step` and data-parallel group `data_group`.
using BatchSource = std::function<Batch(std::uint64_t step, std::size_t data_group)>;

struct TrainResult {
  Parameters params;  // full parameters, positional table reassembled
  std::vector<StepReport> reports;
  std::vector<LedgerRecord> ledger;
};

// Gradients of one step of the sequential model.
struct StepGradients {
  double loss = 0.0;
  Gradients grads;
  WorkCounters counters;
};

StepGradients sequential_step(const ModelConfig& config, const Parameters& params,
                              const Batch& batch, const StepContext& context);

// Single worker, whole sequences: the reference trainer.
TrainResult train_sequential(const ModelConfig& config, Parameters params,
                             const BatchSource& source, const TrainOptions& options);

}  // namespace lsst
