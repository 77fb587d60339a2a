#include <gtest/gtest.h>

#include "lsst/errors.hpp"
#include "lsst/hybrid.hpp"
#include "test_support.hpp"

namespace lsst {
namespace {

using namespace lsst::testing;

TEST(GridLayout, RowsAreSequenceGroupsColumnsAreDataGroups) {
  const GridLayout g{2, 3};
  EXPECT_EQ(g.world_size(), 6u);
  EXPECT_EQ(g.row_of(4), 1u);
  EXPECT_EQ(g.column_of(4), 1u);
  EXPECT_EQ(g.rank_at(1, 2), 5u);
  EXPECT_THROW(g.validate(10), ConfigError);
  EXPECT_THROW((GridLayout{0, 2}.validate(4)), ConfigError);
}

TEST(GridLayout, RegistersDisjointGroups) {
  const GridLayout g{2, 3};
  Communicator comm(6);
  const GridGroups ids = register_groups(comm, g);
  ASSERT_EQ(ids.rows.size(), 2u);
  ASSERT_EQ(ids.columns.size(), 3u);
  EXPECT_EQ(comm.group_info(ids.rows[1]).members, (std::vector<std::size_t>{3, 4, 5}));
  EXPECT_EQ(comm.group_info(ids.columns[2]).members, (std::vector<std::size_t>{2, 5}));
  Communicator wrong(5);
  EXPECT_THROW(register_groups(wrong, g), ConfigError);
}

TrainResult oracle_for(const ModelConfig& c, const Parameters& init, const BatchSource& src,
                       std::size_t d, const TrainOptions& opt) {
  ModelConfig big = c;
  big.batch = c.batch * d;
  return train_sequential(big, init, combined_source(src, d), opt);
}

TEST(Hybrid, MatchesSequentialOnCombinedBatch) {
  const ModelConfig c = tiny_config();
  const Parameters init = init_params(c, 3);
  TrainOptions opt;
  opt.steps = 4;
  const BatchSource src = random_source(c, 4);
  for (const GridLayout g : {GridLayout{1, 2}, GridLayout{2, 1}, GridLayout{2, 2}, GridLayout{3, 2},
                             GridLayout{2, 3}}) {
    const TrainResult oracle = oracle_for(c, init, src, g.data, opt);
    const TrainResult r = train_hybrid(c, init, g, src, opt);
    EXPECT_LT(max_abs_diff(r.params, oracle.params), 1e-10) << g.data << "x" << g.sequence;
    for (std::size_t i = 0; i < opt.steps; ++i) {
      EXPECT_LT(rel_diff(r.reports[i].loss, oracle.reports[i].loss), 1e-12);
    }
  }
}

TEST(Hybrid, SingleRowEqualsLss) {
  const ModelConfig c = tiny_config();
  const Parameters init = init_params(c, 3);
  TrainOptions opt;
  opt.steps = 3;
  const BatchSource src = random_source(c, 4);
  const TrainResult lss = train_lss(c, init, 2, src, opt);
  const TrainResult hyb = train_hybrid(c, init, GridLayout{1, 2}, src, opt);
  EXPECT_EQ(flatten(hyb.params, true), flatten(lss.params, true));
}

TEST(Hybrid, DropoutUsesGlobalSequenceIndex) {
  const ModelConfig c = tiny_config();
  const Parameters init = init_params(c, 3);
  TrainOptions opt;
  opt.steps = 2;
  opt.dropout = dropout_on(0.1);
  const BatchSource src = random_source(c, 5);
  const TrainResult oracle = oracle_for(c, init, src, 2, opt);
  const TrainResult r = train_hybrid(c, init, GridLayout{2, 2}, src, opt);
  EXPECT_LT(max_abs_diff(r.params, oracle.params), 1e-10);
}

TEST(Hybrid, CommunicationIsGroupLocal) {
  const ModelConfig c = tiny_config();
  TrainOptions opt;
  opt.steps = 2;
  const GridLayout g{2, 2};
  const TrainResult r = train_hybrid(c, init_params(c, 3), g, random_source(c, 4), opt);
  // Groups 1..D are rows, D+1..D+N columns; the world group (0) is unused.
  for (const auto& rec : r.ledger) {
    EXPECT_NE(rec.group, 0u);
    if (rec.group <= g.data) {
      EXPECT_TRUE(rec.layer.has_value() || rec.phase == Phase::kSync);
    } else {
      EXPECT_EQ(rec.phase, Phase::kSync);
      EXPECT_EQ(rec.kind, CollectiveKind::kAllReduce);
    }
  }
  // Per step: each row 2L + 1, each column 1.
  EXPECT_EQ(r.reports[1].collectives.size(), g.data * (2 * c.layers + 1) + g.sequence);
}

TEST(Hybrid, PositionalShardsAgreeWithinEachColumn) {
  const ModelConfig c = tiny_config();
  const Parameters init = init_params(c, 3);
  const GridLayout g{3, 2};
  Communicator comm(g.world_size());
  const GridGroups ids = register_groups(comm, g);
  const BatchSource src = random_source(c, 9);
  std::vector<DistParameters> reps;
  for (std::size_t r = 0; r < g.world_size(); ++r) {
    reps.push_back(distribute(init, ShardSpec::make(g.column_of(r), g.sequence, c.seq_len)));
  }
  run_workers(comm, [&](std::size_t r) {
    Batch b = src(0, g.row_of(r));
    b.first_sequence = g.row_of(r) * b.batch;
    StepGradients s = hybrid_step(comm.group(ids.rows[g.row_of(r)], r),
                                  comm.group(ids.columns[g.column_of(r)], r), c, reps[r], b, {});
    sgd_step(reps[r].params, s.grads, 0.1);
  });
  for (std::size_t r = 0; r < g.world_size(); ++r) {
    const std::size_t same_column = g.rank_at(0, g.column_of(r));
    EXPECT_EQ(reps[r].params.pos_table, reps[same_column].params.pos_table);
    EXPECT_EQ(flatten(reps[r].params, false), flatten(reps[0].params, false));
  }
  EXPECT_NE(reps[0].params.pos_table, reps[1].params.pos_table);
}

}  // namespace
}  // namespace lsst
