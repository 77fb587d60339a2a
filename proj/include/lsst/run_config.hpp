#pragma once

// Run configuration. Config files hold one `key = value` per line; blank
// lines and text after '#' are ignored. Keys:
//   engine            sequential | lss | baseline | hybrid
//   embed layers heads ffn_hidden vocab seq_len batch     model shape
//   causal            true | false
//   precision         double | single
//   dropout           rate in [0, 1); 0 disables dropout
//   sequence_parallel N, workers per sequence group
//   data_parallel     D, number of sequence groups (hybrid)
//   fuse              true | false (one attention-input exchange per layer)
//   seed steps lr
//   optimizer         sgd | adam
//   dataset           path of a raw byte corpus; empty = synthetic
//   synthetic_bytes   size of the generated corpus
//   output_dir        where reports go; LSST_OUTPUT_DIR overrides it

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "lsst/cost_model.hpp"
#include "lsst/model.hpp"
#include "lsst/training.hpp"

namespace lsst {

inline constexpr const char* kOutputDirEnv = "LSST_OUTPUT_DIR";

struct RunConfig {
  EngineKind engine = EngineKind::kLss;
  ModelConfig model;
  std::size_t sequence_parallel = 2;
  std::size_t data_parallel = 1;
  bool fuse = true;
  std::uint64_t seed = 1;
  std::size_t steps = 20;
  double lr = 0.1;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  std::filesystem::path dataset;
  std::size_t synthetic_bytes = 1 << 20;
  std::filesystem::path output_dir = "lsst_out";

  // Throws ConfigError on inconsistent settings.
  void validate() const;
  TrainOptions train_options() const;
};

// Sets one key; throws ConfigError for unknown keys or bad values.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);
void apply_config_stream(RunConfig& config, std::istream& in);
void apply_config_file(RunConfig& config, const std::filesystem::path& path);
// Replaces output_dir with $LSST_OUTPUT_DIR when it is set and non-empty.
void apply_environment(RunConfig& config);
// Every key in the order listed above; parses back to the same config.
void write_run_config(std::ostream& out, const RunConfig& config);

}  // namespace lsst
