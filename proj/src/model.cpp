#include "lsst/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "lsst/errors.hpp"
#include "lsst/instrumentation.hpp"

namespace lsst {
namespace {

void accumulate(LinearParams& into, const LinearParams& g) {
  add_inplace(into.weight, g.weight);
  add_inplace(into.bias, g.bias);
}

void accumulate(LayerNormParams& into, const LayerNormParams& g) {
  add_inplace(into.gain, g.gain);
  add_inplace(into.bias, g.bias);
}

std::uint64_t seed_mix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

Tensor uniform_tensor(Shape shape, double bound, std::uint64_t seed, std::uint64_t index,
                      Precision precision) {
  std::mt19937_64 gen(seed_mix(seed ^ seed_mix(index + 1)));
  Tensor t(std::move(shape), precision);
  for (double& v : t.values()) {
    const double u = static_cast<double>(gen() >> 11) * 0x1.0p-53;
    v = (2.0 * u - 1.0) * bound;
  }
  return finalize(std::move(t));
}

}  // namespace

void ModelConfig::validate() const {
  if (embed < 2) throw ConfigError("config: embed must be at least 2");
  if (heads == 0 || embed % heads != 0) {
    throw ConfigError("config: embed " + std::to_string(embed) + " not divisible by heads " +
                      std::to_string(heads));
  }
  if (ffn_hidden == 0) throw ConfigError("config: ffn_hidden must be positive");
  if (vocab < 2) throw ConfigError("config: vocab must be at least 2");
  if (seq_len == 0) throw ConfigError("config: seq_len must be positive");
  if (batch == 0) throw ConfigError("config: batch must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("config: dropout must lie in [0, 1)");
}

void Parameters::for_each(
    const std::function<void(const std::string&, Tensor&, bool)>& fn) {
  fn("token_table", token_table, false);
  fn("pos_table", pos_table, true);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    LayerParams& lp = layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    fn(p + "ln1.gain", lp.ln1.gain, false);
    fn(p + "ln1.bias", lp.ln1.bias, false);
    fn(p + "query.weight", lp.query.weight, false);
    fn(p + "query.bias", lp.query.bias, false);
    fn(p + "key.weight", lp.key.weight, false);
    fn(p + "key.bias", lp.key.bias, false);
    fn(p + "value.weight", lp.value.weight, false);
    fn(p + "value.bias", lp.value.bias, false);
    fn(p + "output.weight", lp.output.weight, false);
    fn(p + "output.bias", lp.output.bias, false);
    fn(p + "ln2.gain", lp.ln2.gain, false);
    fn(p + "ln2.bias", lp.ln2.bias, false);
    fn(p + "ffn_in.weight", lp.ffn_in.weight, false);
    fn(p + "ffn_in.bias", lp.ffn_in.bias, false);
    fn(p + "ffn_out.weight", lp.ffn_out.weight, false);
    fn(p + "ffn_out.bias", lp.ffn_out.bias, false);
  }
  fn("final_norm.gain", final_norm.gain, false);
  fn("final_norm.bias", final_norm.bias, false);
  fn("head.weight", head.weight, false);
  fn("head.bias", head.bias, false);
}

void Parameters::for_each(
    const std::function<void(const std::string&, const Tensor&, bool)>& fn) const {
  const_cast<Parameters*>(this)->for_each(
      [&fn](const std::string& name, Tensor& t, bool positional) { fn(name, t, positional); });
}

std::size_t Parameters::element_count(bool include_positional) const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor& t, bool positional) {
    if (include_positional || !positional) n += t.size();
  });
  return n;
}

Parameters Parameters::zeros_like(const Parameters& p) {
  Parameters z = p;
  z.for_each([](const std::string&, Tensor& t, bool) {
    std::fill(t.values().begin(), t.values().end(), 0.0);
  });
  return z;
}

Tensor flatten(const Parameters& p, bool include_positional) {
  std::vector<double> values;
  values.reserve(p.element_count(include_positional));
  Precision precision = Precision::kDouble;
  p.for_each([&](const std::string&, const Tensor& t, bool positional) {
    if (!include_positional && positional) return;
    precision = t.precision();
    values.insert(values.end(), t.values().begin(), t.values().end());
  });
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values), precision);
}

void unflatten(const Tensor& flat, Parameters& p, bool include_positional) {
  if (flat.size() < p.element_count(include_positional)) {
    throw ShapeError("unflatten: buffer too short");
  }
  std::size_t offset = 0;
  p.for_each([&](const std::string&, Tensor& t, bool positional) {
    if (!include_positional && positional) return;
    std::copy(flat.data() + offset, flat.data() + offset + t.size(), t.data());
    offset += t.size();
  });
}

namespace {

template <typename Fn>
void for_each_pair(const Parameters& a, const Parameters& b, Fn&& fn) {
  std::vector<const Tensor*> bs;
  b.for_each([&](const std::string&, const Tensor& t, bool) { bs.push_back(&t); });
  std::size_t i = 0;
  a.for_each([&](const std::string& name, const Tensor& t, bool) {
    if (i >= bs.size()) throw ShapeError("parameter sets differ in structure");
    fn(name, t, *bs[i++]);
  });
  if (i != bs.size()) throw ShapeError("parameter sets differ in structure");
}

}  // namespace

double max_relative_diff(const Parameters& a, const Parameters& b, double floor) {
  double worst = 0.0;
  for_each_pair(a, b, [&](const std::string&, const Tensor& x, const Tensor& y) {
    worst = std::max(worst, max_abs_diff(x, y) / std::max(max_abs(y), floor));
  });
  return worst;
}

double max_abs_diff(const Parameters& a, const Parameters& b) {
  double worst = 0.0;
  for_each_pair(a, b, [&](const std::string&, const Tensor& x, const Tensor& y) {
    worst = std::max(worst, max_abs_diff(x, y));
  });
  return worst;
}

double global_norm(const Parameters& p) {
  double acc = 0.0;
  p.for_each([&](const std::string&, const Tensor& t, bool) { acc += dot(t, t); });
  return std::sqrt(acc);
}

Parameters init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t e = config.embed;
  const Precision prec = config.precision;
  std::uint64_t index = 0;
  auto uniform = [&](Shape shape, std::size_t fan_in) {
    return uniform_tensor(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), seed,
                          index++, prec);
  };
  auto linear = [&](std::size_t in, std::size_t out) {
    LinearParams p;
    p.weight = uniform({in, out}, in);
    p.bias = uniform({out}, in);
    return p;
  };
  auto norm = [&](std::size_t d) {
    return LayerNormParams{Tensor::filled({d}, 1.0, prec), Tensor({d}, prec)};
  };

  Parameters p;
  p.token_table = uniform({config.vocab, e}, e);
  p.pos_table = uniform({config.seq_len, e}, e);
  p.layers.reserve(config.layers);
  for (std::size_t l = 0; l < config.layers; ++l) {
    LayerParams lp;
    lp.ln1 = norm(e);
    lp.query = linear(e, e);
    lp.key = linear(e, e);
    lp.value = linear(e, e);
    lp.output = linear(e, e);
    lp.ln2 = norm(e);
    lp.ffn_in = linear(e, config.ffn_hidden);
    lp.ffn_out = linear(config.ffn_hidden, e);
    p.layers.push_back(std::move(lp));
  }
  p.final_norm = norm(e);
  p.head = linear(e, config.vocab);
  return p;
}

void sgd_step(Parameters& params, const Gradients& grads, double lr) {
  std::vector<const Tensor*> gs;
  grads.for_each([&](const std::string&, const Tensor& t, bool) { gs.push_back(&t); });
  std::size_t i = 0;
  params.for_each([&](const std::string& name, Tensor& w, bool) {
    if (i >= gs.size() || gs[i]->shape() != w.shape()) {
      throw ShapeError("sgd_step: gradient for " + name + " has the wrong shape");
    }
    axpy_inplace(w, -lr, *gs[i++]);
  });
}

AdamOptimizer::AdamOptimizer(const Parameters& like, AdamConfig config)
    : config_(config), m_(Parameters::zeros_like(like)), v_(Parameters::zeros_like(like)) {}

void AdamOptimizer::step(Parameters& params, const Gradients& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  std::vector<const Tensor*> gs;
  grads.for_each([&](const std::string&, const Tensor& t, bool) { gs.push_back(&t); });
  std::vector<Tensor*> ms, vs;
  m_.for_each([&](const std::string&, Tensor& t, bool) { ms.push_back(&t); });
  v_.for_each([&](const std::string&, Tensor& t, bool) { vs.push_back(&t); });
  std::size_t i = 0;
  params.for_each([&](const std::string& name, Tensor& w, bool) {
    const Tensor& g = *gs.at(i);
    Tensor& m = *ms.at(i);
    Tensor& v = *vs.at(i);
    ++i;
    if (g.shape() != w.shape()) throw ShapeError("adam: gradient for " + name + " has the wrong shape");
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g[k];
      v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g[k] * g[k];
      w[k] -= config_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
    }
    w = finalize(std::move(w));
  });
}

// ---- attention -------------------------------------------------------------

Tensor attention_core_fwd(const Tensor& q, const Tensor& k, const Tensor& v,
                          const AttentionSite& site, AttentionCoreCache& cache) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || k.shape() != v.shape() ||
      q.cols() != k.cols() || site.heads == 0 || q.cols() % site.heads != 0) {
    throw ShapeError("attention: q " + shape_string(q.shape()) + " k " + shape_string(k.shape()) +
                     " v " + shape_string(v.shape()));
  }
  const std::size_t rows = q.rows(), keys = k.rows(), width = q.cols();
  const std::size_t dk = width / site.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  std::optional<Mask> mask;
  if (site.causal) mask = Mask::causal(rows, keys, site.row_offset);

  cache.probs.assign(site.heads, Tensor{});
  cache.dropout_scale.assign(site.heads, Tensor{});
  cache.dropped.assign(site.heads, Tensor{});
  Tensor out({rows, width}, q.precision());
  for (std::size_t h = 0; h < site.heads; ++h) {
    const Tensor qh = slice_cols(q, h * dk, (h + 1) * dk);
    const Tensor kh = slice_cols(k, h * dk, (h + 1) * dk);
    const Tensor vh = slice_cols(v, h * dk, (h + 1) * dk);
    Tensor scores;
    {
      CategoryScope scope(FlopCategory::kScore);
      scores = matmul_transposed(qh, kh);
    }
    cache.probs[h] = softmax_rows(scale(scores, inv_sqrt), mask);
    note_score_elements(rows * keys);
    const DropoutSite dsite{site.context.step, site.layer, DropoutTag::kAttentionProbs,
                            site.sequence, site.row_offset, h * keys};
    DropoutOutput dropped = dropout_fwd(cache.probs[h], site.context.dropout, dsite);
    cache.dropped[h] = std::move(dropped.y);
    cache.dropout_scale[h] = std::move(dropped.scale);
    Tensor oh;
    {
      CategoryScope scope(FlopCategory::kScore);
      oh = matmul(cache.dropped[h], vh);
    }
    set_cols(out, h * dk, oh);
  }
  return out;
}

AttentionCoreGrad attention_core_bwd(const Tensor& q, const Tensor& k, const Tensor& v,
                                     const AttentionCoreCache& cache, const AttentionSite& site,
                                     const Tensor& grad_out) {
  if (grad_out.shape() != q.shape()) throw ShapeError("attention_core_bwd: grad shape");
  const std::size_t rows = q.rows(), keys = k.rows(), width = q.cols();
  const std::size_t dk = width / site.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  CategoryScope scope(FlopCategory::kBackward);

  AttentionCoreGrad g{Tensor({rows, width}, q.precision()), Tensor({keys, width}, q.precision()),
                      Tensor({keys, width}, q.precision())};
  for (std::size_t h = 0; h < site.heads; ++h) {
    const Tensor qh = slice_cols(q, h * dk, (h + 1) * dk);
    const Tensor kh = slice_cols(k, h * dk, (h + 1) * dk);
    const Tensor vh = slice_cols(v, h * dk, (h + 1) * dk);
    const Tensor d_oh = slice_cols(grad_out, h * dk, (h + 1) * dk);
    const Tensor d_dropped = matmul_transposed(d_oh, vh);
    const Tensor dvh = transposed_matmul(cache.dropped[h], d_oh);
    const Tensor d_probs = dropout_bwd(cache.dropout_scale[h], d_dropped);
    const Tensor& p = cache.probs[h];
    Tensor d_scores({rows, keys}, q.precision());
    for (std::size_t i = 0; i < rows; ++i) {
      double inner = 0.0;
      for (std::size_t j = 0; j < keys; ++j) inner += p(i, j) * d_probs(i, j);
      for (std::size_t j = 0; j < keys; ++j) {
        d_scores(i, j) = p(i, j) * (d_probs(i, j) - inner) * inv_sqrt;
      }
    }
    d_scores = finalize(std::move(d_scores));
    set_cols(g.dq, h * dk, matmul(d_scores, kh));
    set_cols(g.dk, h * dk, transposed_matmul(d_scores, qh));
    set_cols(g.dv, h * dk, dvh);
  }
  return g;
}

Tensor attention_fwd(const LayerParams& p, const Tensor& q_input, const Tensor& kv_input,
                     const AttentionSite& site, AttentionCache& cache) {
  cache.q_input = q_input;
  cache.kv_input = kv_input;
  cache.q = linear_fwd(q_input, p.query);
  cache.k = linear_fwd(kv_input, p.key);
  cache.v = linear_fwd(kv_input, p.value);
  cache.core_out = attention_core_fwd(cache.q, cache.k, cache.v, site, cache.core);
  return linear_fwd(cache.core_out, p.output);
}

AttentionInputGrad attention_bwd(const LayerParams& p, const AttentionCache& cache,
                                 const AttentionSite& site, const Tensor& grad_out,
                                 LayerParams& grads) {
  const LinearGrad og = linear_bwd(cache.core_out, p.output, grad_out);
  accumulate(grads.output, og.grad);
  const AttentionCoreGrad cg =
      attention_core_bwd(cache.q, cache.k, cache.v, cache.core, site, og.grad_x);
  const LinearGrad qg = linear_bwd(cache.q_input, p.query, cg.dq);
  accumulate(grads.query, qg.grad);
  const LinearGrad kg = linear_bwd(cache.kv_input, p.key, cg.dk);
  accumulate(grads.key, kg.grad);
  const LinearGrad vg = linear_bwd(cache.kv_input, p.value, cg.dv);
  accumulate(grads.value, vg.grad);
  return AttentionInputGrad{qg.grad_x, add(kg.grad_x, vg.grad_x)};
}

// ---- feed-forward ------------------------------------------------------------

Tensor ffn_fwd(const LayerParams& p, const Tensor& x, const DropoutSite& hidden_site,
               const DropoutPolicy& policy, FfnCache& cache) {
  cache.input = x;
  cache.hidden_pre = linear_fwd(x, p.ffn_in);
  cache.hidden_act = gelu_fwd(cache.hidden_pre);
  DropoutOutput d = dropout_fwd(cache.hidden_act, policy, hidden_site);
  cache.hidden_dropped = std::move(d.y);
  cache.hidden_scale = std::move(d.scale);
  return linear_fwd(cache.hidden_dropped, p.ffn_out);
}

Tensor ffn_bwd(const LayerParams& p, const FfnCache& cache, const Tensor& grad_out,
               LayerParams& grads) {
  const LinearGrad og = linear_bwd(cache.hidden_dropped, p.ffn_out, grad_out);
  accumulate(grads.ffn_out, og.grad);
  const Tensor d_act = dropout_bwd(cache.hidden_scale, og.grad_x);
  const Tensor d_pre = gelu_bwd(cache.hidden_pre, d_act);
  const LinearGrad ig = linear_bwd(cache.input, p.ffn_in, d_pre);
  accumulate(grads.ffn_in, ig.grad);
  return ig.grad_x;
}

// ---- stack ---------------------------------------------------------------------

namespace {

// Row offset into params.pos_table for this shard: the table holds either the
// whole sequence or exactly the shard's rows.
std::size_t positional_base(const Tensor& pos_table, const ShardSpec& shard) {
  if (pos_table.rank() != 2) throw ShapeError("pos_table must be a matrix");
  if (pos_table.rows() == shard.seq_len) return shard.offset();
  if (pos_table.rows() == shard.len()) return 0;
  throw ShapeError("pos_table has " + std::to_string(pos_table.rows()) +
                   " rows; expected the full sequence or the shard's " +
                   std::to_string(shard.len()));
}

AttentionSite attention_site(const ModelConfig& config, const ShardSpec& shard,
                             const StepContext& context, std::uint32_t layer,
                             std::uint64_t sequence) {
  return AttentionSite{config.heads, config.causal, shard.offset(), layer, sequence, context};
}

}  // namespace

ForwardResult forward_segment(const ModelConfig& config, const Parameters& params,
                              const Batch& segment, const ShardSpec& shard,
                              const StepContext& context, KeyValueExchange& exchange) {
  config.validate();
  segment.validate();
  context.dropout.validate();
  if (shard.seq_len != config.seq_len || segment.seq_len != shard.len()) {
    throw ShapeError("forward: segment of " + std::to_string(segment.seq_len) +
                     " positions does not match shard of " + std::to_string(shard.len()));
  }
  if (params.layers.size() != config.layers) throw ShapeError("forward: layer count mismatch");
  if (segment.batch == 0) throw ShapeError("forward: empty batch");
  const std::size_t nb = segment.batch;
  const std::size_t base = positional_base(params.pos_table, shard);
  const DropoutPolicy& policy = context.dropout;

  ForwardResult result;
  ForwardCaches& caches = result.caches;
  caches.config = config;
  caches.shard = shard;
  caches.context = context;
  caches.sequences.resize(nb);

  const Tensor pe_rows =
      embed_positions(ShardSpec{0, 1, params.pos_table.rows()}, params.pos_table);
  const Tensor positions = slice_rows(pe_rows, base, base + shard.len());

  std::vector<Tensor> x(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    SequenceCache& sc = caches.sequences[b];
    sc.sequence = segment.first_sequence + b;
    const auto ids = segment.tokens_of(b);
    const auto tgt = segment.targets_of(b);
    sc.tokens.assign(ids.begin(), ids.end());
    sc.targets.assign(tgt.begin(), tgt.end());
    sc.layers.resize(config.layers);
    const Tensor emb = add(embed_tokens(ids, params.token_table), positions);
    DropoutOutput d = dropout_fwd(
        emb, policy,
        DropoutSite{context.step, kNoLayer, DropoutTag::kEmbedding, sc.sequence, shard.offset(), 0});
    x[b] = std::move(d.y);
    sc.embed_scale = std::move(d.scale);
  }

  for (std::size_t l = 0; l < config.layers; ++l) {
    const LayerParams& lp = params.layers[l];
    const auto layer = static_cast<std::uint32_t>(l);
    std::vector<Tensor> xn1(nb);
    for (std::size_t b = 0; b < nb; ++b) {
      LayerCache& lc = caches.sequences[b].layers[l];
      LayerNormOutput ln = layernorm_fwd(x[b], lp.ln1);
      lc.ln1 = std::move(ln.cache);
      lc.xn1 = ln.y;
      xn1[b] = std::move(ln.y);
    }

    std::vector<Tensor> attn_out(nb);
    if (exchange.fused()) {
      const std::vector<Tensor> kv = exchange.gather(xn1, layer);
      for (std::size_t b = 0; b < nb; ++b) {
        SequenceCache& sc = caches.sequences[b];
        attn_out[b] = attention_fwd(lp, xn1[b], kv.at(b),
                                    attention_site(config, shard, context, layer, sc.sequence),
                                    sc.layers[l].attention);
      }
    } else {
      std::vector<Tensor> k_local(nb), v_local(nb);
      for (std::size_t b = 0; b < nb; ++b) {
        LayerCache& lc = caches.sequences[b].layers[l];
        k_local[b] = linear_fwd(xn1[b], lp.key);
        v_local[b] = linear_fwd(xn1[b], lp.value);
        lc.k_local = k_local[b];
        lc.v_local = v_local[b];
      }
      const std::vector<Tensor> k_full = exchange.gather(k_local, layer);
      const std::vector<Tensor> v_full = exchange.gather(v_local, layer);
      for (std::size_t b = 0; b < nb; ++b) {
        SequenceCache& sc = caches.sequences[b];
        AttentionCache& ac = sc.layers[l].attention;
        ac.q_input = xn1[b];
        ac.q = linear_fwd(xn1[b], lp.query);
        ac.k = k_full.at(b);
        ac.v = v_full.at(b);
        ac.core_out = attention_core_fwd(
            ac.q, ac.k, ac.v, attention_site(config, shard, context, layer, sc.sequence), ac.core);
        attn_out[b] = linear_fwd(ac.core_out, lp.output);
      }
    }
    end_attention_layer();

    for (std::size_t b = 0; b < nb; ++b) {
      SequenceCache& sc = caches.sequences[b];
      LayerCache& lc = sc.layers[l];
      DropoutOutput ad = dropout_fwd(attn_out[b], policy,
                                     DropoutSite{context.step, layer, DropoutTag::kAttentionResidual,
                                                 sc.sequence, shard.offset(), 0});
      lc.attention_scale = std::move(ad.scale);
      x[b] = add(x[b], ad.y);

      LayerNormOutput ln2 = layernorm_fwd(x[b], lp.ln2);
      lc.ln2 = std::move(ln2.cache);
      const Tensor f = ffn_fwd(
          lp, ln2.y,
          DropoutSite{context.step, layer, DropoutTag::kFfnHidden, sc.sequence, shard.offset(), 0},
          policy, lc.ffn);
      DropoutOutput fd = dropout_fwd(
          f, policy,
          DropoutSite{context.step, layer, DropoutTag::kFfnResidual, sc.sequence, shard.offset(), 0});
      lc.ffn_scale = std::move(fd.scale);
      x[b] = add(x[b], fd.y);
    }
  }

  double total = 0.0;
  for (std::size_t b = 0; b < nb; ++b) {
    SequenceCache& sc = caches.sequences[b];
    LayerNormOutput lnf = layernorm_fwd(x[b], params.final_norm);
    sc.final_norm = std::move(lnf.cache);
    sc.final_normed = std::move(lnf.y);
    sc.logits = linear_fwd(sc.final_normed, params.head);
    CrossEntropyResult ce = cross_entropy(sc.logits, sc.targets);
    total += ce.loss;
    sc.grad_logits = std::move(ce.grad_logits);
  }
  result.loss = total / static_cast<double>(nb);
  if (!std::isfinite(result.loss)) throw NumericError("forward: non-finite loss");
  return result;
}

Gradients backward_segment(const Parameters& params, const ForwardCaches& caches,
                           KeyValueExchange& exchange, double loss_scale) {
  const ModelConfig& config = caches.config;
  const ShardSpec& shard = caches.shard;
  const std::size_t nb = caches.sequences.size();
  const std::size_t base = positional_base(params.pos_table, shard);
  Gradients grads = Parameters::zeros_like(params);

  std::vector<Tensor> dx(nb);
  const double seq_scale = loss_scale / static_cast<double>(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    const SequenceCache& sc = caches.sequences[b];
    const Tensor dlogits = scale(sc.grad_logits, seq_scale);
    const LinearGrad hg = linear_bwd(sc.final_normed, params.head, dlogits);
    accumulate(grads.head, hg.grad);
    const LayerNormGrad fg = layernorm_bwd(sc.final_norm, params.final_norm, hg.grad_x);
    accumulate(grads.final_norm, fg.grad);
    dx[b] = fg.grad_x;
  }

  for (std::size_t li = config.layers; li-- > 0;) {
    const LayerParams& lp = params.layers[li];
    LayerParams& lg = grads.layers[li];
    const auto layer = static_cast<std::uint32_t>(li);
    std::vector<Tensor> d_attn(nb);
    for (std::size_t b = 0; b < nb; ++b) {
      const LayerCache& lc = caches.sequences[b].layers[li];
      const Tensor d_ffn = dropout_bwd(lc.ffn_scale, dx[b]);
      const Tensor d_xn2 = ffn_bwd(lp, lc.ffn, d_ffn, lg);
      const LayerNormGrad g2 = layernorm_bwd(lc.ln2, lp.ln2, d_xn2);
      accumulate(lg.ln2, g2.grad);
      dx[b] = add(dx[b], g2.grad_x);
      d_attn[b] = dropout_bwd(lc.attention_scale, dx[b]);
    }

    std::vector<Tensor> d_xn1(nb);
    if (exchange.fused()) {
      std::vector<Tensor> d_q(nb), d_kv(nb);
      for (std::size_t b = 0; b < nb; ++b) {
        const SequenceCache& sc = caches.sequences[b];
        AttentionInputGrad ag =
            attention_bwd(lp, sc.layers[li].attention,
                          attention_site(config, shard, caches.context, layer, sc.sequence),
                          d_attn[b], lg);
        d_q[b] = std::move(ag.grad_q_input);
        d_kv[b] = std::move(ag.grad_kv_input);
      }
      const std::vector<Tensor> d_kv_local = exchange.reduce(d_kv, layer);
      for (std::size_t b = 0; b < nb; ++b) d_xn1[b] = add(d_q[b], d_kv_local.at(b));
    } else {
      std::vector<Tensor> d_q(nb), d_k(nb), d_v(nb);
      for (std::size_t b = 0; b < nb; ++b) {
        const SequenceCache& sc = caches.sequences[b];
        const AttentionCache& ac = sc.layers[li].attention;
        const LinearGrad og = linear_bwd(ac.core_out, lp.output, d_attn[b]);
        accumulate(lg.output, og.grad);
        AttentionCoreGrad cg = attention_core_bwd(
            ac.q, ac.k, ac.v, ac.core,
            attention_site(config, shard, caches.context, layer, sc.sequence), og.grad_x);
        const LinearGrad qg = linear_bwd(ac.q_input, lp.query, cg.dq);
        accumulate(lg.query, qg.grad);
        d_q[b] = qg.grad_x;
        d_k[b] = std::move(cg.dk);
        d_v[b] = std::move(cg.dv);
      }
      const std::vector<Tensor> d_k_local = exchange.reduce(d_k, layer);
      const std::vector<Tensor> d_v_local = exchange.reduce(d_v, layer);
      for (std::size_t b = 0; b < nb; ++b) {
        const LayerCache& lc = caches.sequences[b].layers[li];
        const LinearGrad kg = linear_bwd(lc.xn1, lp.key, d_k_local.at(b));
        accumulate(lg.key, kg.grad);
        const LinearGrad vg = linear_bwd(lc.xn1, lp.value, d_v_local.at(b));
        accumulate(lg.value, vg.grad);
        d_xn1[b] = add(d_q[b], add(kg.grad_x, vg.grad_x));
      }
    }

    for (std::size_t b = 0; b < nb; ++b) {
      const LayerCache& lc = caches.sequences[b].layers[li];
      const LayerNormGrad g1 = layernorm_bwd(lc.ln1, lp.ln1, d_xn1[b]);
      accumulate(lg.ln1, g1.grad);
      dx[b] = add(dx[b], g1.grad_x);
    }
  }

  const std::size_t width = config.embed;
  for (std::size_t b = 0; b < nb; ++b) {
    const SequenceCache& sc = caches.sequences[b];
    const Tensor d_emb = dropout_bwd(sc.embed_scale, dx[b]);
    embed_tokens_bwd(sc.tokens, d_emb, grads.token_table);
    for (std::size_t i = 0; i < d_emb.rows(); ++i) {
      double* row = grads.pos_table.data() + (base + i) * width;
      for (std::size_t j = 0; j < width; ++j) row[j] += d_emb(i, j);
    }
  }
  grads.pos_table = finalize(std::move(grads.pos_table));
  grads.for_each([](const std::string& name, const Tensor& t, bool) {
    check_finite(t, ("gradient " + name).c_str());
  });
  return grads;
}

ForwardResult forward(const ModelConfig& config, const Parameters& params, const Batch& batch,
                      const StepContext& context) {
  LocalExchange local;
  return forward_segment(config, params, batch, ShardSpec::whole(config.seq_len), context, local);
}

Gradients backward(const Parameters& params, const ForwardCaches& caches, double loss_scale) {
  LocalExchange local;
  return backward_segment(params, caches, local, loss_scale);
}

Tensor forward_logits(const ModelConfig& config, const Parameters& params,
                      std::span<const std::int32_t> tokens) {
  ModelConfig one = config;
  one.batch = 1;
  Batch batch;
  batch.batch = 1;
  batch.seq_len = tokens.size();
  batch.tokens.assign(tokens.begin(), tokens.end());
  batch.targets.assign(tokens.size(), 0);
  ForwardResult r = forward(one, params, batch);
  return r.caches.sequences.front().logits;
}

}  // namespace lsst
