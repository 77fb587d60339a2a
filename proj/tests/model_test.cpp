#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "lsst/checkpoint.hpp"
#include "lsst/corpus.hpp"
#include "lsst/errors.hpp"
#include "lsst/model.hpp"
#include "test_support.hpp"

namespace lsst {
namespace {

using testing::finite_difference_error;
using testing::random_batch;
using testing::tiny_config;

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(gen);
  return t;
}

ModelConfig fd_config() {
  ModelConfig c;
  c.embed = 8;
  c.layers = 1;
  c.heads = 2;
  c.ffn_hidden = 16;
  c.vocab = 11;
  c.seq_len = 4;
  c.batch = 2;
  return c;
}

bool bitwise_equal(const Parameters& a, const Parameters& b) {
  return flatten(a, true) == flatten(b, true);
}

TEST(ModelConfig, Validation) {
  ModelConfig c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.seq_len = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.vocab = 1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(InitParams, DeterministicPerSeed) {
  const ModelConfig c = tiny_config();
  EXPECT_TRUE(bitwise_equal(init_params(c, 5), init_params(c, 5)));
  EXPECT_FALSE(bitwise_equal(init_params(c, 5), init_params(c, 6)));
}

TEST(InitParams, WithinFanInBound) {
  const ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 3);
  const double be = 1.0 / std::sqrt(static_cast<double>(c.embed));
  const double bf = 1.0 / std::sqrt(static_cast<double>(c.ffn_hidden));
  p.for_each([&](const std::string& name, const Tensor& t, bool) {
    if (name.find("ln") != std::string::npos || name.find("final_norm") != std::string::npos) return;
    const double bound = name.find("ffn_out") != std::string::npos ? bf : be;
    EXPECT_LE(max_abs(t), bound) << name;
  });
  EXPECT_EQ(p.pos_table.shape(), (Shape{c.seq_len, c.embed}));
}

TEST(Attention, SingleTokenPassesValueThroughOutputLinear) {
  ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 1);
  const LayerParams& lp = p.layers[0];
  const Tensor x = random_tensor({1, c.embed}, 2);
  AttentionCache cache;
  const Tensor e = attention_fwd(lp, x, x, AttentionSite{c.heads, true}, cache);
  for (const Tensor& probs : cache.core.probs) EXPECT_EQ(probs, Tensor::matrix({{1.0}}));
  EXPECT_LT(max_abs_diff(e, linear_fwd(linear_fwd(x, lp.value), lp.output)), 1e-15);
}

TEST(Attention, ZeroQueriesAndKeysGiveUniformCausalRows) {
  const std::size_t l = 5;
  const Tensor zero({l, 4});
  AttentionCoreCache cache;
  attention_core_fwd(zero, zero, random_tensor({l, 4}, 3), AttentionSite{1, true}, cache);
  const Tensor& a = cache.probs[0];
  for (std::size_t i = 0; i < l; ++i) {
    for (std::size_t j = 0; j < l; ++j) {
      EXPECT_NEAR(a(i, j), j <= i ? 1.0 / static_cast<double>(i + 1) : 0.0, 1e-15);
    }
  }
}

// Scalar loops over heads, rows and keys.
Tensor naive_attention(const LayerParams& p, const Tensor& x, std::size_t heads) {
  const std::size_t l = x.rows(), e = x.cols(), dk = e / heads;
  auto proj = [&](const LinearParams& lin) {
    Tensor out({l, e});
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t j = 0; j < e; ++j) {
        double s = lin.bias[j];
        for (std::size_t k = 0; k < e; ++k) s += x(i, k) * lin.weight(k, j);
        out(i, j) = s;
      }
    return out;
  };
  const Tensor q = proj(p.query), k = proj(p.key), v = proj(p.value);
  Tensor concat({l, e});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < l; ++i) {
      std::vector<double> s(i + 1);
      double mx = -1e300;
      for (std::size_t j = 0; j <= i; ++j) {
        double d = 0;
        for (std::size_t t = 0; t < dk; ++t) d += q(i, h * dk + t) * k(j, h * dk + t);
        s[j] = d / std::sqrt(static_cast<double>(dk));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (double& w : s) z += (w = std::exp(w - mx));
      for (std::size_t t = 0; t < dk; ++t) {
        double acc = 0;
        for (std::size_t j = 0; j <= i; ++j) acc += s[j] / z * v(j, h * dk + t);
        concat(i, h * dk + t) = acc;
      }
    }
  }
  Tensor out({l, e});
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j < e; ++j) {
      double acc = p.output.bias[j];
      for (std::size_t t = 0; t < e; ++t) acc += concat(i, t) * p.output.weight(t, j);
      out(i, j) = acc;
    }
  return out;
}

TEST(Attention, MatchesNaiveScalarOracle) {
  ModelConfig c;
  c.embed = 4;
  c.heads = 2;
  c.seq_len = 4;
  const Parameters p = init_params(c, 9);
  const Tensor x = random_tensor({4, 4}, 10);
  AttentionCache cache;
  const Tensor e = attention_fwd(p.layers[0], x, x, AttentionSite{2, true}, cache);
  EXPECT_LT(max_abs_diff(e, naive_attention(p.layers[0], x, 2)), 1e-12);
}

TEST(Attention, ProbabilityRowsSumToOne) {
  const ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 2);
  const ForwardResult r = forward(c, p, random_batch(c, 3));
  for (const auto& seq : r.caches.sequences) {
    for (const auto& layer : seq.layers) {
      for (const Tensor& a : layer.attention.core.probs) {
        for (std::size_t i = 0; i < a.rows(); ++i) {
          double s = 0;
          for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j);
          EXPECT_NEAR(s, 1.0, 1e-12);
        }
      }
    }
  }
}

TEST(Forward, NoLayersReducesToEmbedNormHead) {
  ModelConfig c = tiny_config();
  c.layers = 0;
  const Parameters p = init_params(c, 4);
  const Batch b = random_batch(c, 5);
  double expect = 0;
  for (std::size_t s = 0; s < b.batch; ++s) {
    const Tensor x = add(embed_tokens(b.tokens_of(s), p.token_table), p.pos_table);
    const Tensor logits = linear_fwd(layernorm_fwd(x, p.final_norm).y, p.head);
    expect += cross_entropy(logits, b.targets_of(s)).loss / static_cast<double>(b.batch);
  }
  EXPECT_NEAR(forward(c, p, b).loss, expect, 1e-14);
}

TEST(Forward, ZeroHeadGivesLogVocab) {
  const ModelConfig c = tiny_config();
  Parameters p = init_params(c, 4);
  p.head.weight = Tensor(p.head.weight.shape());
  p.head.bias = Tensor(p.head.bias.shape());
  EXPECT_NEAR(forward(c, p, random_batch(c, 6)).loss, std::log(256.0), 1e-12);
}

TEST(Forward, RejectsOutOfVocabularyTokens) {
  const ModelConfig c = tiny_config();
  Batch b = random_batch(c, 1);
  b.tokens[3] = 256;
  EXPECT_THROW(forward(c, init_params(c, 1), b), IndexError);
}

TEST(Forward, CausalityProbe) {
  const ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 8);
  const Batch b = random_batch(c, 9, 0, 1);
  std::vector<std::int32_t> tokens(b.tokens.begin(), b.tokens.end());
  const Tensor base = forward_logits(c, p, tokens);
  for (std::size_t t : {0u, 7u, 23u}) {
    std::vector<std::int32_t> probe = tokens;
    probe[t] = (probe[t] + 1) % 256;
    const Tensor changed = forward_logits(c, p, probe);
    for (std::size_t i = 0; i < c.seq_len; ++i) {
      const Tensor a = slice_rows(base, i, i + 1), z = slice_rows(changed, i, i + 1);
      if (i < t) {
        EXPECT_EQ(a, z) << "position " << i << " saw token " << t;
      } else if (i == t) {
        EXPECT_GT(max_abs_diff(a, z), 0.0);
      }
    }
  }
}

TEST(Backward, ZeroLossGradientGivesZeroGradients) {
  const ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 3);
  const ForwardResult r = forward(c, p, random_batch(c, 4));
  const Gradients g = backward(p, r.caches, 0.0);
  EXPECT_EQ(global_norm(g), 0.0);
}

TEST(Backward, LinearInLossScale) {
  const ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 3);
  const ForwardResult r = forward(c, p, random_batch(c, 4));
  const Gradients g1 = backward(p, r.caches, 1.0);
  const Gradients g2 = backward(p, r.caches, 2.0);
  Gradients doubled = g1;
  doubled.for_each([](const std::string&, Tensor& t, bool) { t = scale(t, 2.0); });
  EXPECT_LT(testing::rel_diff(g2, doubled), 1e-15);
}

TEST(Backward, MatchesFiniteDifferencesOnTinyModel) {
  const ModelConfig c = fd_config();
  EXPECT_LT(finite_difference_error(c, init_params(c, 11), random_batch(c, 12)), 1e-5);
}

TEST(Backward, MatchesFiniteDifferencesWithDropout) {
  const ModelConfig c = fd_config();
  EXPECT_LT(finite_difference_error(c, init_params(c, 13), random_batch(c, 14),
                                    testing::dropout_on(0.2)),
            1e-5);
}

TEST(Backward, MatchesFiniteDifferencesBidirectional) {
  ModelConfig c = fd_config();
  c.causal = false;
  EXPECT_LT(finite_difference_error(c, init_params(c, 15), random_batch(c, 16)), 1e-5);
}

TEST(Backward, Deterministic) {
  const ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 3);
  const Batch b = random_batch(c, 4);
  const StepContext ctx{2, testing::dropout_on(0.1)};
  const Gradients a = backward(p, forward(c, p, b, ctx).caches);
  const Gradients z = backward(p, forward(c, p, b, ctx).caches);
  EXPECT_TRUE(bitwise_equal(a, z));
}

TEST(Sgd, Examples) {
  const ModelConfig c = tiny_config();
  const Parameters p = init_params(c, 1);
  Parameters q = p;
  sgd_step(q, p, 0.0);
  EXPECT_TRUE(bitwise_equal(p, q));
  sgd_step(q, Parameters::zeros_like(p), 0.3);
  EXPECT_TRUE(bitwise_equal(p, q));

  Parameters w = Parameters::zeros_like(p);
  Gradients g = Parameters::zeros_like(p);
  w.head.bias[0] = 1.0;
  g.head.bias[0] = 2.0;
  sgd_step(w, g, 0.5);
  EXPECT_EQ(w.head.bias[0], 0.0);
}

TEST(Training, OverfitsFixedSample) {
  ModelConfig c = tiny_config();
  c.seq_len = 32;
  c.batch = 4;
  const ByteCorpus corpus(synthetic_corpus(512, 3));
  const Parameters init = init_params(c, 21);
  TrainOptions opt;
  opt.steps = 50;
  opt.lr = 0.5;
  const TrainResult r = train_sequential(
      c, init, [&](std::uint64_t step, std::size_t) { return corpus.batch(c.seq_len, c.batch, step % 3); },
      opt);
  double head = 0, tail = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    head += r.reports[i].loss;
    tail += r.reports[40 + i].loss;
  }
  EXPECT_LT(tail, 0.8 * head);
}

TEST(Training, AdamReducesLoss) {
  const ModelConfig c = tiny_config();
  TrainOptions opt;
  opt.steps = 30;
  opt.lr = 0.01;
  opt.optimizer = OptimizerKind::kAdam;
  const Batch fixed = random_batch(c, 2);
  const TrainResult r = train_sequential(
      c, init_params(c, 1), [&](std::uint64_t, std::size_t) { return fixed; }, opt);
  EXPECT_LT(r.reports.back().loss, r.reports.front().loss - 1.0);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  const ModelConfig c = tiny_config();
  const Checkpoint ck{c, 77, init_params(c, 77)};
  const auto path = std::filesystem::temp_directory_path() / "lsst_model_test.ckpt";
  save_checkpoint(path, ck);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(back.config, c);
  EXPECT_EQ(back.seed, 77u);
  EXPECT_TRUE(bitwise_equal(back.params, ck.params));
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsForeignFiles) {
  const auto path = std::filesystem::temp_directory_path() / "lsst_model_test.bad";
  std::ofstream(path) << "not a checkpoint at all";
  EXPECT_THROW(load_checkpoint(path), IoError);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace lsst
