#include <random>

#include <gtest/gtest.h>

#include "lsst/errors.hpp"
#include "lsst/lss_engine.hpp"
#include "test_support.hpp"

namespace lsst {
namespace {

using namespace lsst::testing;

bool bitwise_equal(const Parameters& a, const Parameters& b) {
  return flatten(a, true) == flatten(b, true);
}

TEST(ShardSpec, PartitionsSequence) {
  std::size_t next = 0;
  for (std::size_t r = 0; r < 4; ++r) {
    const ShardSpec s = ShardSpec::make(r, 4, 24);
    EXPECT_EQ(s.offset(), next);
    EXPECT_EQ(s.len(), 6u);
    next = s.end();
  }
  EXPECT_EQ(next, 24u);
  EXPECT_THROW(ShardSpec::make(0, 5, 24), ShapeError);
  EXPECT_THROW(ShardSpec::make(4, 4, 24), IndexError);
}

TEST(Distribute, KeepsOnlyOwnedPositionalRows) {
  const ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 1);
  std::vector<DistParameters> parts;
  for (std::size_t r = 0; r < 3; ++r) parts.push_back(distribute(p, ShardSpec::make(r, 3, 24)));
  EXPECT_EQ(parts[1].params.pos_table, slice_rows(p.pos_table, 8, 16));
  EXPECT_TRUE(bitwise_equal(reassemble(parts), p));
}

TEST(LssForward, SingleWorkerIsBitwiseTheSequentialModel) {
  const ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 2);
  const Batch b = random_batch(c, 3);
  const StepGradients oracle = oracle_step(c, p, b);
  const DistOutcome d = lss_outcome(c, p, b, 1);
  EXPECT_EQ(d.loss, oracle.loss);
  EXPECT_TRUE(bitwise_equal(d.grads, oracle.grads));
}

TEST(LssForward, PartialLossesAverageToSequentialLoss) {
  const ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 2);
  const Batch b = random_batch(c, 3);
  const double oracle = forward(c, p, b).loss;
  Communicator comm(2);
  std::vector<double> partial(2);
  run_workers(comm, [&](std::size_t r) {
    const DistParameters dist = distribute(p, ShardSpec::make(r, 2, c.seq_len));
    partial[r] = lss_forward(comm.world(r), c, dist, b.segment(dist.shard), {}).loss;
  });
  EXPECT_LT(rel_diff(0.5 * (partial[0] + partial[1]), oracle), 1e-12);
  EXPECT_EQ(comm.ledger().count({.kind = CollectiveKind::kAllGather, .phase = Phase::kForward,
                                 .layer_tagged = true}),
            c.layers);
  EXPECT_EQ(comm.ledger().size(), c.layers);
}

TEST(LssBackward, OneReduceScatterPerLayer) {
  const ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 2);
  const Batch b = random_batch(c, 3);
  Communicator comm(3);
  run_workers(comm, [&](std::size_t r) {
    const DistParameters dist = distribute(p, ShardSpec::make(r, 3, c.seq_len));
    const ForwardResult f = lss_forward(comm.world(r), c, dist, b.segment(dist.shard), {});
    const Gradients g = lss_backward(comm.world(r), dist, f.caches);
    EXPECT_EQ(g.pos_table.shape(), (Shape{8, c.embed}));
  });
  EXPECT_EQ(comm.ledger().count({.kind = CollectiveKind::kReduceScatter, .phase = Phase::kBackward}),
            c.layers);
  EXPECT_EQ(comm.ledger().size(), 2 * c.layers);
}

TEST(LssSync, MatchesSequentialGradients) {
  const ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 4);
  const Batch b = random_batch(c, 5);
  const StepGradients oracle = oracle_step(c, p, b);
  for (std::size_t n : {2u, 3u, 4u, 6u}) {
    const DistOutcome d = lss_outcome(c, p, b, n);
    EXPECT_LT(rel_diff(d.loss, oracle.loss), 1e-12) << "N=" << n;
    EXPECT_LT(rel_diff(d.grads, oracle.grads), 1e-10) << "N=" << n;
    EXPECT_LT(max_abs_diff(d.grads.pos_table, oracle.grads.pos_table) /
                  max_abs(oracle.grads.pos_table),
              1e-10);
    // Non-positional gradients are identical on every worker.
    for (std::size_t r = 1; r < n; ++r) {
      EXPECT_EQ(flatten(d.rank_grads[r], false), flatten(d.rank_grads[0], false));
    }
  }
}

TEST(LssSync, SingleWorkerIsIdentity) {
  const ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 4);
  Gradients g = Parameters::zeros_like(p);
  g.head.bias[2] = 0.25;
  g.pos_table[5] = -1.5;
  Communicator comm(1);
  SyncResult s;
  run_workers(comm, [&](std::size_t r) { s = lss_sync(comm.world(r), g, 3.5, 0); });
  EXPECT_TRUE(bitwise_equal(s.grads, g));
  EXPECT_EQ(s.loss, 3.5);
  EXPECT_EQ(comm.ledger().count({.kind = CollectiveKind::kAllReduce, .phase = Phase::kSync}), 1u);
}

TEST(LssStep, ScheduleIsTwoPerLayerPlusOne) {
  ModelConfig c = tiny_config();
  c.layers = 3;
  const Parameters p = init_params(c, 4);
  const DistOutcome d = lss_outcome(c, p, random_batch(c, 5), 4);
  EXPECT_EQ(d.ledger.size(), 2 * c.layers + 1);
  std::size_t tagged = 0;
  for (const auto& r : d.ledger) {
    if (r.layer) {
      ++tagged;
      EXPECT_NE(r.phase, Phase::kSync);
    } else {
      EXPECT_EQ(r.kind, CollectiveKind::kAllReduce);
      EXPECT_EQ(r.phase, Phase::kSync);
    }
  }
  EXPECT_EQ(tagged, 2 * c.layers);
}

TEST(LssStep, UnfusedExchangesKeysAndValuesSeparately) {
  const ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 4);
  const Batch b = random_batch(c, 5);
  const DistOutcome fused = lss_outcome(c, p, b, 2);
  const DistOutcome split = lss_outcome(c, p, b, 2, {}, false);
  EXPECT_EQ(split.ledger.size(), 4 * c.layers + 1);
  LedgerQuery fwd{.phase = Phase::kForward};
  std::size_t n = 0;
  for (const auto& r : split.ledger) n += fwd.matches(r) ? 1 : 0;
  EXPECT_EQ(n, 2 * c.layers);
  EXPECT_LT(rel_diff(split.loss, fused.loss), 1e-12);
  EXPECT_LT(rel_diff(split.grads, fused.grads), 1e-12);
}

TEST(LssStep, GatheredInputAdjointPairing) {
  // GroupExchange::reduce is the adjoint of gather: sum_r <gather(x_r), y_r>
  // equals sum_r <x_r, reduce(y)_r>.
  const std::size_t n = 4;
  Communicator comm(n);
  std::vector<double> lhs(n), rhs(n);
  run_workers(comm, [&](std::size_t r) {
    std::mt19937_64 gen(r + 10);
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<Tensor> x(2, Tensor({3, 5})), y(2, Tensor({12, 5}));
    for (auto* v : {&x, &y})
      for (auto& t : *v)
        for (double& e : t.values()) e = u(gen);
    GroupExchange ex(comm.world(r), true, 0);
    const auto gx = ex.gather(x, 0);
    const auto ry = ex.reduce(y, 0);
    for (std::size_t b = 0; b < 2; ++b) {
      lhs[r] += dot(gx[b], y[b]);
      rhs[r] += dot(x[b], ry[b]);
    }
  });
  double l = 0, rr = 0;
  for (std::size_t r = 0; r < n; ++r) {
    l += lhs[r];
    rr += rhs[r];
  }
  EXPECT_NEAR(l, rr, 1e-12);
}

TEST(LssStep, ScoreFootprintDividesByN) {
  const ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 4);
  const Batch b = random_batch(c, 5);
  for (std::size_t n : {1u, 2u, 3u, 4u, 6u}) {
    const DistOutcome d = lss_outcome(c, p, b, n);
    for (const auto& w : d.counters) {
      EXPECT_EQ(w.score_elements_peak, c.batch * c.heads * (c.seq_len / n) * c.seq_len);
    }
  }
}

TEST(LssStep, DropoutMasksAreShardInvariant) {
  const ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 4);
  const Batch b = random_batch(c, 5);
  const StepContext ctx{3, dropout_on(0.1)};
  const StepGradients oracle = oracle_step(c, p, b, ctx);
  for (std::size_t n : {2u, 4u}) {
    const DistOutcome d = lss_outcome(c, p, b, n, ctx);
    EXPECT_LT(rel_diff(d.loss, oracle.loss), 1e-12);
    EXPECT_LT(rel_diff(d.grads, oracle.grads), 1e-10);
  }
}

TEST(LssStep, RejectsIndivisibleLength) {
  const ModelConfig c = tiny_config();
  EXPECT_THROW(lss_outcome(c, init_params(c, 1), random_batch(c, 1), 5), ShapeError);
}

TEST(LssStep, RejectsFullPositionalTableOnAShard) {
  const ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 1);
  Communicator comm(2);
  EXPECT_THROW(run_workers(comm,
                           [&](std::size_t r) {
                             DistParameters dist{p, ShardSpec::make(r, 2, c.seq_len)};
                             lss_forward(comm.world(r), c, dist, random_batch(c, 1).segment(dist.shard), {});
                           }),
               ShapeError);
}

TEST(TrainLss, TracksSequentialTrajectory) {
  const ModelConfig c = tiny_config();
  const Parameters init = init_params(c, 6);
  TrainOptions opt;
  opt.steps = 10;
  opt.lr = 0.1;
  const BatchSource src = random_source(c, 7);
  const TrainResult oracle = train_sequential(c, init, src, opt);
  for (std::size_t n : {1u, 2u, 3u}) {
    const TrainResult r = train_lss(c, init, n, src, opt);
    EXPECT_LT(max_abs_diff(r.params, oracle.params), 1e-8) << "N=" << n;
    for (std::size_t i = 0; i < opt.steps; ++i) {
      EXPECT_LT(rel_diff(r.reports[i].loss, oracle.reports[i].loss), 1e-10);
      EXPECT_EQ(r.reports[i].collectives.size(), 2 * c.layers + 1);
      EXPECT_EQ(r.reports[i].step, i);
    }
    if (n == 1) EXPECT_TRUE(bitwise_equal(r.params, oracle.params));
  }
}

TEST(TrainLss, AdamTrajectoryMatches) {
  const ModelConfig c = tiny_config();
  const Parameters init = init_params(c, 6);
  TrainOptions opt;
  opt.steps = 5;
  opt.lr = 0.01;
  opt.optimizer = OptimizerKind::kAdam;
  const BatchSource src = random_source(c, 8);
  const TrainResult oracle = train_sequential(c, init, src, opt);
  const TrainResult r = train_lss(c, init, 4, src, opt);
  EXPECT_LT(max_abs_diff(r.params, oracle.params), 1e-8);
}

TEST(TrainLss, SinglePrecisionStaysClose) {
  ModelConfig c = tiny_config();
  c.precision = Precision::kSingle;
  const Parameters init = init_params(c, 6);
  TrainOptions opt;
  opt.steps = 3;
  const BatchSource src = random_source(c, 9);
  const TrainResult oracle = train_sequential(c, init, src, opt);
  const TrainResult r = train_lss(c, init, 2, src, opt);
  EXPECT_LT(max_abs_diff(r.params, oracle.params), 1e-5);
  r.params.for_each([](const std::string&, const Tensor& t, bool) {
    for (double v : t.values()) ASSERT_EQ(v, static_cast<double>(static_cast<float>(v)));
  });
}

}  // namespace
}  // namespace lsst
