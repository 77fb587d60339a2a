// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails or overruns its time budget.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>

#include "lsst/cost_model.hpp"
#include "lsst/experiment.hpp"
#include "test_support.hpp"

namespace {

using namespace lsst;
using namespace lsst::testing;

struct Outcome {
  bool ok = true;
  std::ostringstream detail;

  void check(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<void(Outcome&)> run;
};

const std::size_t kGroupSizes[] = {1, 2, 3, 4, 6};

// Loss and gradient gaps for one engine over every group size, plus the
// parameter gap after 10 SGD steps.
void exactness(Outcome& o, bool baseline) {
  const ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 101);
  const Batch b = random_batch(c, 102);
  const StepGradients oracle = oracle_step(c, p, b);
  double loss_gap = 0, grad_gap = 0, param_gap = 0;
  TrainOptions opt;
  opt.steps = 10;
  opt.lr = 0.1;
  const BatchSource src = random_source(c, 103);
  const TrainResult seq = train_sequential(c, p, src, opt);
  for (std::size_t n : kGroupSizes) {
    const DistOutcome d = baseline ? baseline_outcome(c, p, b, n) : lss_outcome(c, p, b, n);
    loss_gap = std::max(loss_gap, rel_diff(d.loss, oracle.loss));
    grad_gap = std::max(grad_gap, rel_diff(d.grads, oracle.grads));
    const TrainResult t =
        baseline ? train_baseline(c, p, n, src, opt) : train_lss(c, p, n, src, opt);
    param_gap = std::max(param_gap, max_abs_diff(t.params, seq.params));
  }
  o.check(loss_gap < 1e-12, "loss");
  o.check(grad_gap < 1e-10, "gradients");
  o.check(param_gap < 1e-8, "parameters after 10 steps");
  o.detail << "loss rel " << loss_gap << ", grad rel " << grad_gap << ", param abs " << param_gap;
}

void dropout_exactness(Outcome& o) {
  const ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 201);
  const Batch b = random_batch(c, 202);
  const StepContext ctx{5, dropout_on(0.1, 203)};
  const DistOutcome one = lss_outcome(c, p, b, 1, ctx);
  const DistOutcome two = lss_outcome(c, p, b, 2, ctx);
  const double loss_gap = rel_diff(two.loss, one.loss);
  const double grad_gap = rel_diff(two.grads, one.grads);
  const DistOutcome off = lss_outcome(c, p, b, 1);
  o.check(loss_gap < 1e-10 && grad_gap < 1e-10, "N=2 vs N=1");
  o.check(off.loss != one.loss, "dropout had an effect");
  o.detail << "loss rel " << loss_gap << ", grad rel " << grad_gap;
}

void schedule(Outcome& o) {
  ModelConfig c = tiny_config();
  c.layers = 6;
  const Parameters p = init_params(c, 301);
  const Batch b = random_batch(c, 302);
  auto tagged = [](const std::vector<LedgerRecord>& l) {
    std::size_t n = 0;
    for (const auto& r : l) n += r.layer ? 1 : 0;
    return n;
  };
  auto sync = [](const std::vector<LedgerRecord>& l) {
    std::size_t n = 0;
    for (const auto& r : l) n += r.phase == Phase::kSync ? 1 : 0;
    return n;
  };
  const DistOutcome base = baseline_outcome(c, p, b, 2);
  const DistOutcome lss = lss_outcome(c, p, b, 2);
  const std::size_t bt = tagged(base.ledger), lt = tagged(lss.ledger);
  o.check(bt == 48, "baseline 48 layer-tagged");
  o.check(lt == 12 && sync(lss.ledger) == 1 && lss.ledger.size() == 13, "lss 12 + 1");
  o.check(bt * 2 == lt * 8, "8:2 per layer");
  o.detail << "baseline " << bt << " layer-tagged (" << bt / c.layers << "/layer), lss " << lt
           << " + " << sync(lss.ledger) << " sync (" << lt / c.layers << "/layer)";
}

void fusion(Outcome& o) {
  const ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 401);
  const Batch b = random_batch(c, 402);
  const DistOutcome fused = lss_outcome(c, p, b, 2);
  const DistOutcome split = lss_outcome(c, p, b, 2, {}, false);
  auto forward_per_layer = [&](const std::vector<LedgerRecord>& l) {
    std::size_t n = 0;
    for (const auto& r : l) n += (r.layer && r.phase == Phase::kForward) ? 1 : 0;
    return n / c.layers;
  };
  const std::size_t f = forward_per_layer(fused.ledger), s = forward_per_layer(split.ledger);
  const double loss_gap = rel_diff(split.loss, fused.loss);
  const double grad_gap = rel_diff(split.grads, fused.grads);
  o.check(f == 1 && s == 2, "forward collectives per layer 1 -> 2");
  o.check(loss_gap < 1e-12 && grad_gap < 1e-12, "unfused matches fused");
  o.detail << "forward/layer " << f << " -> " << s << ", loss rel " << loss_gap << ", grad rel "
           << grad_gap;
}

void weak_scaling(Outcome& o) {
  const std::pair<std::size_t, std::size_t> pairs[] = {
      {6, 348}, {36, 2088}, {108, 6264}, {324, 18792}, {864, 50112}};
  const std::uint64_t expected[] = {1, 6, 18, 54, 144};
  ModelConfig c = tiny_config();
  std::uint64_t first = 0;
  o.detail << "estimated";
  for (std::size_t i = 0; i < 5; ++i) {
    c.seq_len = pairs[i].second;
    const std::uint64_t w = estimate_cost(c, EngineKind::kLss, pairs[i].first).score_flops_per_layer;
    if (i == 0) first = w;
    o.check(w % first == 0 && w / first == expected[i], "ratio row");
    o.detail << ' ' << static_cast<double>(w) / static_cast<double>(first);
  }
  const std::pair<std::size_t, std::size_t> micro[] = {{1, 48}, {2, 96}, {4, 192}};
  std::uint64_t base = 0;
  o.detail << "; measured";
  for (std::size_t i = 0; i < 3; ++i) {
    ModelConfig m = tiny_config();
    m.seq_len = micro[i].second;
    m.batch = 1;
    const DistOutcome d =
        lss_outcome(m, init_params(m, 501), random_batch(m, 502), micro[i].first);
    const std::uint64_t w = max_counters(d.counters).flops_in(FlopCategory::kScore);
    if (i == 0) base = w;
    o.check(w == base << i, "measured 1:2:4");
    o.detail << ' ' << static_cast<double>(w) / static_cast<double>(base);
  }
}

void memory_scaling(Outcome& o) {
  ModelConfig c = tiny_config();
  c.seq_len = 48;
  const Parameters p = init_params(c, 601);
  const Batch b = random_batch(c, 602);
  const std::uint64_t lss1 = max_counters(lss_outcome(c, p, b, 1).counters).score_elements_peak;
  const std::uint64_t lss4 = max_counters(lss_outcome(c, p, b, 4).counters).score_elements_peak;
  o.check(lss1 == 4 * lss4, "LSS N=4 is 1/4 of N=1");
  o.detail << "lss N=1 " << lss1 << ", N=4 " << lss4 << "; baseline";
  for (std::size_t n : {1u, 2u, 4u}) {
    const std::uint64_t base = max_counters(baseline_outcome(c, p, b, n).counters).score_elements_peak;
    const std::uint64_t lss = max_counters(lss_outcome(c, p, b, n).counters).score_elements_peak;
    o.check(base == lss1, "baseline independent of N");
    o.check(base == n * lss, "baseline = N x LSS");
    o.detail << " N=" << n << ' ' << base;
  }
}

void hybrid(Outcome& o) {
  const ModelConfig c = tiny_config();
  const Parameters init = init_params(c, 701);
  const BatchSource src = random_source(c, 702);
  TrainOptions opt;
  opt.steps = 5;
  const GridLayout grid{2, 2};
  const TrainResult h = train_hybrid(c, init, grid, src, opt);
  ModelConfig big = c;
  big.batch = 2 * c.batch;
  const TrainResult seq = train_sequential(big, init, combined_source(src, 2), opt);
  const double gap = max_abs_diff(h.params, seq.params);
  std::size_t world = 0, row = 0, column = 0;
  for (const auto& r : h.ledger) {
    if (r.group == 0) ++world;
    else if (r.group <= grid.data) ++row;
    else ++column;
  }
  o.check(gap < 1e-10, "parameters vs oracle on combined batch");
  o.check(world == 0, "no world-group traffic");
  o.check(column == opt.steps * grid.sequence, "one column average per step");
  o.detail << "param abs " << gap << ", records row " << row << " column " << column << " world "
           << world;
}

void gradient_check(Outcome& o) {
  const ModelConfig c = tiny_config();
  const double err = finite_difference_error(c, init_params(c, 801), random_batch(c, 802));
  o.check(err < 1e-5, "finite differences");
  o.detail << "worst tensor rel err " << err;
}

void training_demo(Outcome& o) {
  auto config = [](const char* dir) {
    RunConfig rc;
    rc.engine = EngineKind::kLss;
    rc.sequence_parallel = 2;
    rc.model.embed = 64;
    rc.model.layers = 2;
    rc.model.heads = 4;
    rc.model.ffn_hidden = 256;
    rc.model.seq_len = 128;
    rc.model.batch = 4;
    rc.optimizer = OptimizerKind::kAdam;
    rc.lr = 0.003;
    rc.steps = 500;
    rc.seed = 1;
    rc.synthetic_bytes = 1 << 20;
    rc.output_dir = std::filesystem::temp_directory_path() / dir;
    return rc;
  };
  const ExperimentResult a = run_experiment(config("lsst_demo_a"));
  const ExperimentResult b = run_experiment(config("lsst_demo_b"));
  const auto& losses = a.summary.losses;
  const std::size_t window = 50;
  double smoothed = 0;
  for (std::size_t i = losses.size() - window; i < losses.size(); ++i) smoothed += losses[i];
  smoothed /= static_cast<double>(window);
  const double limit = 0.8 * std::log(256.0);
  o.check(smoothed < limit, "smoothed loss below 0.8 ln 256");
  o.check(a.summary.final_loss == b.summary.final_loss, "identical final loss");
  o.detail << "initial " << losses.front() << ", smoothed final " << smoothed << " (limit "
           << limit << "), rerun final " << b.summary.final_loss << " vs " << a.summary.final_loss;
}

}  // namespace

int main() {
  const Criterion criteria[] = {
      {1, "lss exactness vs sequential", 30, [](Outcome& o) { exactness(o, false); }},
      {2, "dropout exactness", 30, dropout_exactness},
      {3, "baseline exactness vs sequential", 30, [](Outcome& o) { exactness(o, true); }},
      {4, "communication schedule", 10, schedule},
      {5, "fusion ablation", 30, fusion},
      {6, "weak-scaling work ratio", 60, weak_scaling},
      {7, "score memory scaling", 10, memory_scaling},
      {8, "hybrid double averaging", 60, hybrid},
      {9, "gradient integrity", 120, gradient_check},
      {10, "training demo", 600, training_demo},
  };
  int failures = 0;
  for (const Criterion& c : criteria) {
    Outcome o;
    o.detail.precision(3);
    const auto start = std::chrono::steady_clock::now();
    try {
      c.run(o);
    } catch (const std::exception& e) {
      o.ok = false;
      o.detail << "exception: " << e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs < c.budget_seconds;
    const bool pass = o.ok && in_time;
    failures += pass ? 0 : 1;
    std::printf("%s %2d %-34s %.2fs/%.0fs%s  %s\n", pass ? "PASS" : "FAIL", c.id, c.name, secs,
                c.budget_seconds, in_time ? "" : " (over budget)", o.detail.str().c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
