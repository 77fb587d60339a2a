#include "lsst/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <json.hpp>

#include "lsst/baseline_engine.hpp"
#include "lsst/checkpoint.hpp"
#include "lsst/errors.hpp"
#include "lsst/hybrid.hpp"
#include "lsst/lss_engine.hpp"

namespace lsst {

std::shared_ptr<const ByteCorpus> open_corpus(const RunConfig& config) {
  if (!config.dataset.empty()) return std::make_shared<const ByteCorpus>(ByteCorpus::load(config.dataset));
  return std::make_shared<const ByteCorpus>(synthetic_corpus(config.synthetic_bytes, config.seed));
}

BatchSource corpus_source(std::shared_ptr<const ByteCorpus> corpus, std::size_t seq_len,
                          std::size_t batch, std::size_t data_groups) {
  return [corpus = std::move(corpus), seq_len, batch, data_groups](std::uint64_t step,
                                                                   std::size_t d) {
    return corpus->batch(seq_len, batch, step * data_groups + d);
  };
}

TrainResult run_engine(const RunConfig& config, const Parameters& init, const BatchSource& source) {
  config.validate();
  const TrainOptions options = config.train_options();
  switch (config.engine) {
    case EngineKind::kSequential:
      return train_sequential(config.model, init, source, options);
    case EngineKind::kLss:
      return train_lss(config.model, init, config.sequence_parallel, source, options);
    case EngineKind::kBaseline:
      return train_baseline(config.model, init, config.sequence_parallel, source, options);
    case EngineKind::kHybrid:
      return train_hybrid(config.model, init,
                          GridLayout{config.data_parallel, config.sequence_parallel}, source,
                          options);
  }
  throw ConfigError("unknown engine");
}

LedgerSummary summarize_ledger(const std::vector<LedgerRecord>& records) {
  LedgerSummary s;
  s.records = records.size();
  std::map<std::uint64_t, std::array<std::size_t, 5>> by_step;
  for (const auto& r : records) {
    auto& c = by_step[r.step];
    ++c[0];
    if (r.layer) ++c[1];
    ++c[2 + static_cast<std::size_t>(r.phase)];
    if (r.group == 0) ++s.world_group_records;
  }
  s.steps = by_step.size();
  bool first = true;
  for (const auto& [step, c] : by_step) {
    if (first) {
      s.per_step = c[0];
      s.layer_tagged_per_step = c[1];
      s.forward_per_step = c[2];
      s.backward_per_step = c[3];
      s.sync_per_step = c[4];
      first = false;
    } else if (c[0] != s.per_step || c[1] != s.layer_tagged_per_step) {
      s.uniform = false;
    }
  }
  return s;
}

std::string format_ledger_summary(const LedgerSummary& s) {
  std::ostringstream os;
  os << "steps                 " << s.steps << '\n'
     << "records               " << s.records << '\n'
     << "collectives/step      " << s.per_step << '\n'
     << "  layer-tagged        " << s.layer_tagged_per_step << '\n'
     << "  forward             " << s.forward_per_step << '\n'
     << "  backward            " << s.backward_per_step << '\n'
     << "  sync                " << s.sync_per_step << '\n'
     << "world-group records   " << s.world_group_records << '\n'
     << "uniform across steps  " << (s.uniform ? "yes" : "no") << '\n';
  return os.str();
}

namespace {

nlohmann::ordered_json ledger_summary_json(const LedgerSummary& s) {
  nlohmann::ordered_json j;
  j["steps"] = s.steps;
  j["records"] = s.records;
  j["per_step"] = s.per_step;
  j["layer_tagged_per_step"] = s.layer_tagged_per_step;
  j["forward_per_step"] = s.forward_per_step;
  j["backward_per_step"] = s.backward_per_step;
  j["sync_per_step"] = s.sync_per_step;
  j["world_group_records"] = s.world_group_records;
  j["uniform"] = s.uniform;
  return j;
}

}  // namespace

std::string summary_to_json(const ExperimentSummary& s) {
  nlohmann::ordered_json j;
  j["engine"] = s.engine;
  j["steps"] = s.steps;
  j["initial_loss"] = s.initial_loss;
  j["final_loss"] = s.final_loss;
  j["losses"] = s.losses;
  j["ledger"] = ledger_summary_json(s.ledger);
  j["measured_score_flops"] = s.measured_score_flops;
  j["estimated_score_flops"] = s.estimated_score_flops;
  j["measured_score_elements"] = s.measured_score_elements;
  j["estimated_score_elements"] = s.estimated_score_elements;
  j["estimated_memory_bytes"] = s.estimated_memory_bytes;
  j["seconds"] = s.seconds;
  return j.dump(2) + "\n";
}

ExperimentSummary summary_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ExperimentSummary s;
    s.engine = j.at("engine").get<std::string>();
    s.steps = j.at("steps").get<std::size_t>();
    s.initial_loss = j.at("initial_loss").get<double>();
    s.final_loss = j.at("final_loss").get<double>();
    s.losses = j.at("losses").get<std::vector<double>>();
    const auto& l = j.at("ledger");
    s.ledger.steps = l.at("steps").get<std::size_t>();
    s.ledger.records = l.at("records").get<std::size_t>();
    s.ledger.per_step = l.at("per_step").get<std::size_t>();
    s.ledger.layer_tagged_per_step = l.at("layer_tagged_per_step").get<std::size_t>();
    s.ledger.forward_per_step = l.at("forward_per_step").get<std::size_t>();
    s.ledger.backward_per_step = l.at("backward_per_step").get<std::size_t>();
    s.ledger.sync_per_step = l.at("sync_per_step").get<std::size_t>();
    s.ledger.world_group_records = l.at("world_group_records").get<std::size_t>();
    s.ledger.uniform = l.at("uniform").get<bool>();
    s.measured_score_flops = j.at("measured_score_flops").get<std::uint64_t>();
    s.estimated_score_flops = j.at("estimated_score_flops").get<std::uint64_t>();
    s.measured_score_elements = j.at("measured_score_elements").get<std::uint64_t>();
    s.estimated_score_elements = j.at("estimated_score_elements").get<std::uint64_t>();
    s.estimated_memory_bytes = j.at("estimated_memory_bytes").get<std::uint64_t>();
    s.seconds = j.at("seconds").get<double>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad summary: ") + e.what());
  }
}

std::string format_summary(const ExperimentSummary& s) {
  std::ostringstream os;
  os << "engine                    " << s.engine << '\n'
     << "steps                     " << s.steps << '\n'
     << std::setprecision(6) << std::fixed
     << "initial loss              " << s.initial_loss << '\n'
     << "final loss                " << s.final_loss << '\n'
     << "wall seconds              " << std::setprecision(2) << s.seconds << '\n'
     << "collectives/step          " << s.ledger.per_step << " (" << s.ledger.layer_tagged_per_step
     << " layer-tagged, " << s.ledger.sync_per_step << " sync)\n"
     << "score flops/worker/step   measured " << s.measured_score_flops << ", estimated "
     << s.estimated_score_flops << ", delta "
     << static_cast<std::int64_t>(s.measured_score_flops - s.estimated_score_flops) << '\n'
     << "score elements/worker     measured " << s.measured_score_elements << ", estimated "
     << s.estimated_score_elements << ", delta "
     << static_cast<std::int64_t>(s.measured_score_elements - s.estimated_score_elements) << '\n'
     << "estimated memory bytes    " << s.estimated_memory_bytes << '\n'
     << "loss curve\n";
  const std::size_t stride = std::max<std::size_t>(1, s.losses.size() / 20);
  os << std::setprecision(6);
  for (std::size_t i = 0; i < s.losses.size(); i += stride) {
    os << "  step " << std::setw(6) << i << "  " << s.losses[i] << '\n';
  }
  return os.str();
}

ExperimentResult run_experiment(const RunConfig& config) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const auto corpus = open_corpus(config);
  const BatchSource source =
      corpus_source(corpus, config.model.seq_len, config.model.batch, config.data_parallel);
  const Parameters init = init_params(config.model, config.seed);

  ExperimentResult out;
  out.train = run_engine(config, init, source);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  const CostEstimate est = estimate_cost(config.model, config.engine, config.sequence_parallel,
                                         config.data_parallel, config.fuse);
  ExperimentSummary& s = out.summary;
  s.engine = to_string(config.engine);
  s.steps = out.train.reports.size();
  for (const auto& r : out.train.reports) s.losses.push_back(r.loss);
  if (!s.losses.empty()) {
    s.initial_loss = s.losses.front();
    s.final_loss = s.losses.back();
  }
  s.ledger = summarize_ledger(out.train.ledger);
  if (!out.train.reports.empty()) {
    const WorkCounters& c = out.train.reports.front().counters;
    s.measured_score_flops = c.flops_in(FlopCategory::kScore);
    s.measured_score_elements = c.score_elements_peak;
  }
  s.estimated_score_flops = est.score_flops;
  s.estimated_score_elements = est.score_elements;
  s.estimated_memory_bytes = est.memory_bytes;
  s.seconds = seconds;

  out.output_dir = config.output_dir;
  std::filesystem::create_directories(out.output_dir);
  auto open = [&](const char* name) {
    std::ofstream f(out.output_dir / name, std::ios::binary);
    if (!f) throw IoError("cannot write " + (out.output_dir / name).string());
    return f;
  };
  {
    auto f = open("config.txt");
    write_run_config(f, config);
  }
  {
    auto f = open("steps.jsonl");
    write_step_reports(f, out.train.reports);
  }
  {
    auto f = open("ledger.jsonl");
    write_ledger(f, out.train.ledger);
  }
  {
    auto f = open("summary.txt");
    f << format_summary(s);
  }
  {
    auto f = open("summary.json");
    f << summary_to_json(s);
  }
  save_checkpoint(out.output_dir / "checkpoint.bin", Checkpoint{config.model, config.seed, out.train.params});
  return out;
}

EquivalenceResult run_equivalence(const RunConfig& config, double tolerance) {
  config.validate();
  const auto corpus = open_corpus(config);
  const Parameters init = init_params(config.model, config.seed);
  const std::size_t d = config.engine == EngineKind::kHybrid ? config.data_parallel : 1;
  const BatchSource source = corpus_source(corpus, config.model.seq_len, config.model.batch, d);
  const TrainResult engine = run_engine(config, init, source);

  RunConfig oracle_config = config;
  oracle_config.engine = EngineKind::kSequential;
  oracle_config.sequence_parallel = 1;
  oracle_config.data_parallel = 1;
  oracle_config.fuse = true;
  oracle_config.model.batch = config.model.batch * d;
  const BatchSource combined = [&source, d](std::uint64_t step, std::size_t) {
    std::vector<Batch> parts;
    for (std::size_t g = 0; g < d; ++g) {
      Batch b = source(step, g);
      b.first_sequence = g * b.batch;
      parts.push_back(std::move(b));
    }
    return Batch::concat(parts);
  };
  const TrainResult oracle = run_engine(oracle_config, init, combined);

  EquivalenceResult r;
  r.max_param_diff = max_abs_diff(engine.params, oracle.params);
  for (std::size_t i = 0; i < engine.reports.size(); ++i) {
    r.max_loss_diff =
        std::max(r.max_loss_diff, std::abs(engine.reports[i].loss - oracle.reports[i].loss));
  }
  r.passed = r.max_param_diff < tolerance && r.max_loss_diff < tolerance;
  return r;
}

std::vector<VerifyRow> verify_matrix(const RunConfig& base, const std::vector<std::size_t>& ns,
                                     const std::vector<std::size_t>& ds, double tolerance) {
  std::vector<VerifyRow> rows;
  for (EngineKind engine : {EngineKind::kLss, EngineKind::kBaseline, EngineKind::kHybrid}) {
    const std::vector<std::size_t> data = engine == EngineKind::kHybrid ? ds : std::vector<std::size_t>{1};
    for (std::size_t dg : data) {
      for (std::size_t n : ns) {
        if (n == 0 || base.model.seq_len % n != 0) continue;
        RunConfig c = base;
        c.engine = engine;
        c.sequence_parallel = n;
        c.data_parallel = dg;
        if (engine == EngineKind::kBaseline) c.fuse = true;
        rows.push_back(VerifyRow{engine, n, dg, run_equivalence(c, tolerance)});
      }
    }
  }
  return rows;
}

}  // namespace lsst
