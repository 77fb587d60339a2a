// Command-line front end: train, verify, cost, ledger.

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "lsst/cost_model.hpp"
#include "lsst/errors.hpp"
#include "lsst/experiment.hpp"
#include "lsst/ledger.hpp"
#include "lsst/run_config.hpp"

namespace {

struct Flags {
  std::string engine = "lss";
  std::string precision = "double";
  std::string optimizer = "sgd";
  std::string config_file;
  std::string dataset;
  std::string output_dir;
  bool no_fuse = false;
  bool no_causal = false;
};

void add_run_flags(CLI::App& app, lsst::RunConfig& rc, Flags& f) {
  app.add_option("--engine", f.engine, "sequential | lss | baseline | hybrid");
  app.add_option("--embed", rc.model.embed, "embedding size");
  app.add_option("--layers", rc.model.layers, "attention layers");
  app.add_option("--heads", rc.model.heads, "attention heads");
  app.add_option("--ffn-hidden", rc.model.ffn_hidden, "feed-forward hidden size");
  app.add_option("--seq-len", rc.model.seq_len, "sequence length");
  app.add_option("--batch", rc.model.batch, "sequences per batch");
  app.add_option("--dropout", rc.model.dropout, "dropout rate, 0 disables");
  app.add_option("--precision", f.precision, "double | single");
  app.add_option("-N,--sequence-parallel", rc.sequence_parallel, "workers per sequence group");
  app.add_option("-D,--data-parallel", rc.data_parallel, "sequence groups (hybrid)");
  app.add_flag("--no-fuse", f.no_fuse, "exchange K and V separately");
  app.add_flag("--no-causal", f.no_causal, "bidirectional attention");
  app.add_option("--seed", rc.seed, "initialization, data and dropout seed");
  app.add_option("--steps", rc.steps, "training steps");
  app.add_option("--lr", rc.lr, "learning rate");
  app.add_option("--optimizer", f.optimizer, "sgd | adam");
  app.add_option("--dataset", f.dataset, "raw byte corpus; synthetic when omitted");
  app.add_option("--synthetic-bytes", rc.synthetic_bytes, "size of the synthetic corpus");
  app.add_option("--output-dir", f.output_dir, "report directory");
  app.add_option("--config", f.config_file, "key = value file; overrides flags");
}

void resolve(lsst::RunConfig& rc, const Flags& f) {
  rc.engine = lsst::parse_engine(f.engine);
  rc.model.precision = lsst::parse_precision(f.precision);
  rc.optimizer = lsst::parse_optimizer(f.optimizer);
  rc.fuse = !f.no_fuse;
  rc.model.causal = !f.no_causal;
  if (!f.dataset.empty()) rc.dataset = f.dataset;
  if (!f.output_dir.empty()) rc.output_dir = f.output_dir;
  if (rc.engine == lsst::EngineKind::kSequential) rc.sequence_parallel = 1;
  if (!f.config_file.empty()) lsst::apply_config_file(rc, f.config_file);
  lsst::apply_environment(rc);
  rc.validate();
}

std::vector<std::size_t> default_ns(std::size_t seq_len) {
  std::vector<std::size_t> ns;
  for (std::size_t n : {1, 2, 3, 4, 6}) {
    if (seq_len % n == 0) ns.push_back(n);
  }
  return ns;
}

int cmd_train(lsst::RunConfig& rc, const Flags& f, bool equivalence, double tolerance) {
  resolve(rc, f);
  if (equivalence) {
    const lsst::EquivalenceResult r = lsst::run_equivalence(rc, tolerance);
    std::cout << "engine " << lsst::to_string(rc.engine) << " vs sequential after " << rc.steps
              << " steps\n"
              << std::scientific << std::setprecision(3) << "max |dparam| " << r.max_param_diff
              << "\nmax |dloss|  " << r.max_loss_diff << '\n'
              << (r.passed ? "PASS" : "FAIL") << '\n';
    return r.passed ? 0 : 1;
  }
  const lsst::ExperimentResult r = lsst::run_experiment(rc);
  std::cout << lsst::format_summary(r.summary) << "reports written to " << r.output_dir.string()
            << '\n';
  return 0;
}

int cmd_verify(lsst::RunConfig& rc, const Flags& f, std::vector<std::size_t> ns,
               const std::vector<std::size_t>& ds, double tolerance) {
  resolve(rc, f);
  if (ns.empty()) ns = default_ns(rc.model.seq_len);
  const auto rows = lsst::verify_matrix(rc, ns, ds, tolerance);
  bool ok = true;
  std::cout << std::left << std::setw(10) << "engine" << std::setw(4) << "D" << std::setw(4)
            << "N" << std::setw(14) << "max|dparam|" << std::setw(14) << "max|dloss|"
            << "result\n";
  for (const auto& row : rows) {
    ok = ok && row.result.passed;
    std::cout << std::left << std::setw(10) << lsst::to_string(row.engine) << std::setw(4)
              << row.data << std::setw(4) << row.sequence << std::scientific
              << std::setprecision(3) << std::setw(14) << row.result.max_param_diff
              << std::setw(14) << row.result.max_loss_diff
              << (row.result.passed ? "pass" : "FAIL") << '\n';
  }
  return ok ? 0 : 1;
}

int cmd_cost(lsst::RunConfig& rc, const Flags& f, std::vector<std::size_t> ns, bool weak) {
  resolve(rc, f);
  if (weak) {
    // Per-worker score work when N and l_x grow together.
    const std::pair<std::size_t, std::size_t> pairs[] = {
        {6, 348}, {36, 2088}, {108, 6264}, {324, 18792}, {864, 50112}};
    std::uint64_t first = 0;
    std::cout << std::left << std::setw(8) << "N" << std::setw(10) << "l_x" << std::setw(22)
              << "score flops/layer" << "ratio\n";
    for (const auto& [n, l] : pairs) {
      lsst::ModelConfig m = rc.model;
      m.seq_len = l;
      const auto est = lsst::estimate_cost(m, lsst::EngineKind::kLss, n);
      if (first == 0) first = est.score_flops_per_layer;
      std::cout << std::left << std::setw(8) << n << std::setw(10) << l << std::setw(22)
                << est.score_flops_per_layer;
      if (est.score_flops_per_layer % first == 0) {
        std::cout << est.score_flops_per_layer / first << '\n';
      } else {
        std::cout << static_cast<double>(est.score_flops_per_layer) / static_cast<double>(first)
                  << '\n';
      }
    }
    return 0;
  }
  if (ns.empty()) ns = default_ns(rc.model.seq_len);
  std::cout << std::left << std::setw(10) << "engine" << std::setw(4) << "N" << std::setw(16)
            << "score flops" << std::setw(16) << "proj flops" << std::setw(14) << "score elems"
            << std::setw(14) << "mem bytes" << std::setw(8) << "colls" << "memory\n";
  for (lsst::EngineKind e : {lsst::EngineKind::kLss, lsst::EngineKind::kBaseline}) {
    for (std::size_t n : ns) {
      if (rc.model.seq_len % n != 0) continue;
      const auto c = lsst::estimate_cost(rc.model, e, n, 1, rc.fuse);
      std::cout << std::left << std::setw(10) << lsst::to_string(e) << std::setw(4) << n
                << std::setw(16) << c.score_flops << std::setw(16) << c.projection_flops
                << std::setw(14) << c.score_elements << std::setw(14) << c.memory_bytes
                << std::setw(8) << c.collectives << c.memory_label << '\n';
    }
  }
  return 0;
}

int cmd_ledger(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw lsst::IoError("cannot open " + path);
  std::cout << lsst::format_ledger_summary(lsst::summarize_ledger(lsst::read_ledger(in)));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequence-parallel transformer training simulator"};
  app.require_subcommand(1);

  lsst::RunConfig rc;
  Flags flags;
  bool equivalence = false;
  double tolerance = 1e-8;
  std::vector<std::size_t> ns;
  std::vector<std::size_t> ds{1, 2};
  bool weak = false;
  std::string ledger_path;

  CLI::App* train = app.add_subcommand("train", "train one engine and write reports");
  add_run_flags(*train, rc, flags);
  train->add_flag("--equivalence", equivalence, "compare against the sequential model");
  train->add_option("--tolerance", tolerance, "equivalence threshold on |dparam|");

  CLI::App* verify = app.add_subcommand("verify", "equivalence matrix over N and D");
  add_run_flags(*verify, rc, flags);
  verify->add_option("--ns", ns, "sequence group sizes")->delimiter(',');
  verify->add_option("--ds", ds, "data group counts for the hybrid engine")->delimiter(',');
  verify->add_option("--tolerance", tolerance, "threshold on |dparam| and |dloss|");

  CLI::App* cost = app.add_subcommand("cost", "closed-form cost estimates");
  add_run_flags(*cost, rc, flags);
  cost->add_option("--ns", ns, "sequence group sizes")->delimiter(',');
  cost->add_flag("--weak-scaling", weak, "per-worker score work as N and l_x grow together");

  CLI::App* ledger = app.add_subcommand("ledger", "summarize a ledger export");
  ledger->add_option("path", ledger_path, "ledger.jsonl")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(rc, flags, equivalence, tolerance);
    if (*verify) return cmd_verify(rc, flags, ns, ds, tolerance);
    if (*cost) return cmd_cost(rc, flags, ns, weak);
    if (*ledger) return cmd_ledger(ledger_path);
  } catch (const lsst::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
