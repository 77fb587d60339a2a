#include "lsst/training.hpp"

#include "lsst/errors.hpp"
#include "lsst/instrumentation.hpp"

namespace lsst {

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::kAdam ? "adam" : "sgd";
}

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer '" + s + "'");
}

Optimizer::Optimizer(const Parameters& like, const TrainOptions& options)
    : kind_(options.optimizer), lr_(options.lr) {
  if (kind_ == OptimizerKind::kAdam) {
    AdamConfig cfg = options.adam;
    cfg.lr = options.lr;
    adam_.emplace(like, cfg);
  }
}

void Optimizer::step(Parameters& params, const Gradients& grads) {
  if (adam_) {
    adam_->step(params, grads);
  } else {
    sgd_step(params, grads, lr_);
  }
}

StepGradients sequential_step(const ModelConfig& config, const Parameters& params,
                              const Batch& batch, const StepContext& context) {
  StepGradients out;
  CounterScope scope(out.counters);
  ForwardResult fwd = forward(config, params, batch, context);
  out.loss = fwd.loss;
  out.grads = backward(params, fwd.caches);
  return out;
}

TrainResult train_sequential(const ModelConfig& config, Parameters params,
                             const BatchSource& source, const TrainOptions& options) {
  TrainResult result;
  Optimizer opt(params, options);
  for (std::size_t i = 0; i < options.steps; ++i) {
    const std::uint64_t step = options.first_step + i;
    const Batch batch = source(step, 0);
    StepGradients g = sequential_step(config, params, batch, StepContext{step, options.dropout});
    opt.step(params, g.grads);
    result.reports.push_back(StepReport{"sequential", step, g.loss, g.counters, {}});
  }
  result.params = std::move(params);
  return result;
}

}  // namespace lsst
