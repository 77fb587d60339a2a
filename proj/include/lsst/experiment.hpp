#pragma once

// Runs an engine end to end and writes its reports. Output directory layout:
//   config.txt      resolved run config (key = value)
//   steps.jsonl     one StepReport per line
//   ledger.jsonl    every collective, one record per line
//   checkpoint.bin  final parameters
//   summary.txt     human-readable summary table
//   summary.json    the same numbers, machine-readable

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "lsst/corpus.hpp"
#include "lsst/cost_model.hpp"
#include "lsst/run_config.hpp"
#include "lsst/training.hpp"

namespace lsst {

// The corpus named by config.dataset, or a synthetic one of
// config.synthetic_bytes bytes seeded by config.seed.
std::shared_ptr<const ByteCorpus> open_corpus(const RunConfig& config);

// source(step, d) = corpus window batch for index step * data_groups + d.
BatchSource corpus_source(std::shared_ptr<const ByteCorpus> corpus, std::size_t seq_len,
                          std::size_t batch, std::size_t data_groups);

// Runs config.engine from `init`.
TrainResult run_engine(const RunConfig& config, const Parameters& init, const BatchSource& source);

struct LedgerSummary {
  std::size_t steps = 0;
  std::size_t records = 0;
  // Per-step counts; equal across steps for every engine, so one number each.
  std::size_t per_step = 0;
  std::size_t layer_tagged_per_step = 0;
  std::size_t forward_per_step = 0;
  std::size_t backward_per_step = 0;
  std::size_t sync_per_step = 0;
  std::size_t world_group_records = 0;
  bool uniform = true;  // every step has the same count
};

LedgerSummary summarize_ledger(const std::vector<LedgerRecord>& records);
std::string format_ledger_summary(const LedgerSummary& s);

struct ExperimentSummary {
  std::string engine;
  std::size_t steps = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> losses;
  LedgerSummary ledger;
  std::uint64_t measured_score_flops = 0;
  std::uint64_t estimated_score_flops = 0;
  std::uint64_t measured_score_elements = 0;
  std::uint64_t estimated_score_elements = 0;
  std::uint64_t estimated_memory_bytes = 0;
  double seconds = 0.0;
};

std::string summary_to_json(const ExperimentSummary& s);
ExperimentSummary summary_from_json(const std::string& text);
std::string format_summary(const ExperimentSummary& s);

struct ExperimentResult {
  TrainResult train;
  ExperimentSummary summary;
  std::filesystem::path output_dir;
};

// Trains and writes every report file. Errors propagate.
ExperimentResult run_experiment(const RunConfig& config);

// Trains config.engine and the sequential model from the same seed on the
// same data and compares parameters after config.steps steps.
struct EquivalenceResult {
  double max_param_diff = 0.0;
  double max_loss_diff = 0.0;
  bool passed = false;
};

EquivalenceResult run_equivalence(const RunConfig& config, double tolerance = 1e-8);

struct VerifyRow {
  EngineKind engine = EngineKind::kLss;
  std::size_t sequence = 1;
  std::size_t data = 1;
  EquivalenceResult result;
};

// Equivalence over every listed N (lss, baseline) and every D x N grid
// (hybrid). Sizes that do not divide seq_len are skipped.
std::vector<VerifyRow> verify_matrix(const RunConfig& base, const std::vector<std::size_t>& ns,
                                     const std::vector<std::size_t>& ds, double tolerance = 1e-8);

}  // namespace lsst
