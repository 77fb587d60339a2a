#include "lsst/baseline_engine.hpp"

#include <cmath>

#include "lsst/errors.hpp"
#include "lsst/instrumentation.hpp"

namespace lsst {
namespace {

std::vector<Tensor> unstack_all(const Tensor& t, std::size_t batch) {
  std::vector<Tensor> out;
  out.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) out.push_back(unstack_at(t, b));
  return out;
}

struct RootLayer {
  AttentionCache attention;
  FfnCache ffn;
};

// Collectives of one step, all rooted at kBaselineRoot.
class RootedComm {
 public:
  RootedComm(const Group& group, std::size_t batch, std::size_t seq_len, std::size_t width,
             std::uint64_t step)
      : group_(group), batch_(batch), seq_len_(seq_len), width_(width), step_(step) {}

  bool is_root() const { return group_.rank() == kBaselineRoot; }

  // Root's whole sequences -> every worker's segment.
  std::vector<Tensor> scatter_rows(const std::vector<Tensor>& full, Phase phase,
                                   std::optional<std::uint32_t> layer) {
    const Tensor in = is_root() ? stack(full) : Tensor{};
    return unstack_all(scatter(group_, kBaselineRoot, in, 1, tag(phase, layer)), batch_);
  }

  // Every worker's segment -> root's whole sequences (empty elsewhere).
  std::vector<Tensor> gather_rows(const std::vector<Tensor>& local, Phase phase,
                                  std::optional<std::uint32_t> layer) {
    const Tensor out = gather(group_, kBaselineRoot, stack(local), 1, tag(phase, layer));
    return is_root() ? unstack_all(out, batch_) : std::vector<Tensor>{};
  }

  // Root's whole-sequence gradients -> each worker's rows. Other workers
  // contribute zeros.
  std::vector<Tensor> reduce_rows(const std::vector<Tensor>& full, Phase phase,
                                  std::optional<std::uint32_t> layer, Precision precision) {
    const Tensor in = is_root() ? stack(full) : Tensor({batch_, seq_len_, width_}, precision);
    return unstack_all(reduce_scatter(group_, in, 1, tag(phase, layer)), batch_);
  }

  CommTag tag(Phase phase, std::optional<std::uint32_t> layer) const {
    return CommTag{phase, layer, step_};
  }

 private:
  Group group_;
  std::size_t batch_;
  std::size_t seq_len_;
  std::size_t width_;
  std::uint64_t step_;
};

void accumulate(LayerNormParams& into, const LayerNormParams& g) {
  add_inplace(into.gain, g.gain);
  add_inplace(into.bias, g.bias);
}

void accumulate(LinearParams& into, const LinearParams& g) {
  add_inplace(into.weight, g.weight);
  add_inplace(into.bias, g.bias);
}

}  // namespace

StepGradients baseline_step(const Group& group, const ModelConfig& config,
                            const Parameters& params, const Batch& batch,
                            const StepContext& context) {
  config.validate();
  batch.validate();
  context.dropout.validate();
  if (batch.seq_len != config.seq_len) throw ShapeError("baseline: batch length mismatch");
  if (params.pos_table.rows() != config.seq_len) {
    throw ShapeError("baseline: every worker needs the full positional table");
  }
  if (params.layers.size() != config.layers) throw ShapeError("baseline: layer count mismatch");

  StepGradients out;
  CounterScope counter_scope(out.counters);

  const ShardSpec shard = ShardSpec::make(group.rank(), group.size(), config.seq_len);
  const std::size_t nb = batch.batch;
  const Precision prec = config.precision;
  const DropoutPolicy& policy = context.dropout;
  const std::uint64_t step = context.step;
  RootedComm comm(group, nb, config.seq_len, config.embed, step);
  const bool root = comm.is_root();
  auto sequence = [&](std::size_t b) { return batch.first_sequence + b; };
  auto local_site = [&](std::uint32_t layer, DropoutTag tag, std::size_t b) {
    return DropoutSite{step, layer, tag, sequence(b), shard.offset(), 0};
  };

  // ---- forward ----
  std::vector<Tensor> embed_scale(nb);
  std::vector<Tensor> x_full;
  if (root) {
    x_full.resize(nb);
    for (std::size_t b = 0; b < nb; ++b) {
      const Tensor emb = add(embed_tokens(batch.tokens_of(b), params.token_table), params.pos_table);
      DropoutOutput d = dropout_fwd(
          emb, policy, DropoutSite{step, kNoLayer, DropoutTag::kEmbedding, sequence(b), 0, 0});
      x_full[b] = std::move(d.y);
      embed_scale[b] = std::move(d.scale);
    }
  }
  std::vector<Tensor> x = comm.scatter_rows(x_full, Phase::kForward, std::nullopt);

  std::vector<std::vector<RootLayer>> at_root(config.layers);
  // Per-sequence caches of the steps every worker runs on its own rows.
  struct SeqLocal {
    std::vector<LayerNormCache> ln1, ln2;
    std::vector<Tensor> attention_scale, ffn_scale;
  };
  std::vector<SeqLocal> seq_local(nb);
  for (auto& s : seq_local) {
    s.ln1.resize(config.layers);
    s.ln2.resize(config.layers);
    s.attention_scale.resize(config.layers);
    s.ffn_scale.resize(config.layers);
  }

  for (std::size_t l = 0; l < config.layers; ++l) {
    const LayerParams& lp = params.layers[l];
    const auto layer = static_cast<std::uint32_t>(l);
    if (root) at_root[l].resize(nb);

    std::vector<Tensor> xn1(nb);
    for (std::size_t b = 0; b < nb; ++b) {
      LayerNormOutput ln = layernorm_fwd(x[b], lp.ln1);
      seq_local[b].ln1[l] = std::move(ln.cache);
      xn1[b] = std::move(ln.y);
    }
    const std::vector<Tensor> xn1_full = comm.gather_rows(xn1, Phase::kForward, layer);
    std::vector<Tensor> attn_full;
    if (root) {
      attn_full.resize(nb);
      for (std::size_t b = 0; b < nb; ++b) {
        const AttentionSite site{config.heads, config.causal, 0, layer, sequence(b), context};
        attn_full[b] = attention_fwd(lp, xn1_full[b], xn1_full[b], site, at_root[l][b].attention);
      }
    }
    end_attention_layer();
    const std::vector<Tensor> attn = comm.scatter_rows(attn_full, Phase::kForward, layer);

    std::vector<Tensor> xn2(nb);
    for (std::size_t b = 0; b < nb; ++b) {
      DropoutOutput ad =
          dropout_fwd(attn[b], policy, local_site(layer, DropoutTag::kAttentionResidual, b));
      seq_local[b].attention_scale[l] = std::move(ad.scale);
      x[b] = add(x[b], ad.y);
      LayerNormOutput ln2 = layernorm_fwd(x[b], lp.ln2);
      seq_local[b].ln2[l] = std::move(ln2.cache);
      xn2[b] = std::move(ln2.y);
    }
    const std::vector<Tensor> xn2_full = comm.gather_rows(xn2, Phase::kForward, layer);
    std::vector<Tensor> ffn_full;
    if (root) {
      ffn_full.resize(nb);
      for (std::size_t b = 0; b < nb; ++b) {
        ffn_full[b] = ffn_fwd(lp, xn2_full[b],
                              DropoutSite{step, layer, DropoutTag::kFfnHidden, sequence(b), 0, 0},
                              policy, at_root[l][b].ffn);
      }
    }
    const std::vector<Tensor> ffn = comm.scatter_rows(ffn_full, Phase::kForward, layer);
    for (std::size_t b = 0; b < nb; ++b) {
      DropoutOutput fd = dropout_fwd(ffn[b], policy, local_site(layer, DropoutTag::kFfnResidual, b));
      seq_local[b].ffn_scale[l] = std::move(fd.scale);
      x[b] = add(x[b], fd.y);
    }
  }

  const std::vector<Tensor> x_final = comm.gather_rows(x, Phase::kForward, std::nullopt);
  std::vector<LayerNormCache> final_norm(root ? nb : 0);
  std::vector<Tensor> final_normed(root ? nb : 0), grad_logits(root ? nb : 0);
  double loss = 0.0;
  if (root) {
    double total = 0.0;
    for (std::size_t b = 0; b < nb; ++b) {
      LayerNormOutput lnf = layernorm_fwd(x_final[b], params.final_norm);
      final_norm[b] = std::move(lnf.cache);
      final_normed[b] = std::move(lnf.y);
      const Tensor logits = linear_fwd(final_normed[b], params.head);
      CrossEntropyResult ce = cross_entropy(logits, batch.targets_of(b));
      total += ce.loss;
      grad_logits[b] = std::move(ce.grad_logits);
    }
    loss = total / static_cast<double>(nb);
    if (!std::isfinite(loss)) throw NumericError("baseline: non-finite loss");
  }

  // ---- backward ----
  Gradients grads = Parameters::zeros_like(params);
  std::vector<Tensor> dx_full;
  if (root) {
    dx_full.resize(nb);
    const double seq_scale = 1.0 / static_cast<double>(nb);
    for (std::size_t b = 0; b < nb; ++b) {
      const Tensor dlogits = scale(grad_logits[b], seq_scale);
      const LinearGrad hg = linear_bwd(final_normed[b], params.head, dlogits);
      accumulate(grads.head, hg.grad);
      const LayerNormGrad fg = layernorm_bwd(final_norm[b], params.final_norm, hg.grad_x);
      accumulate(grads.final_norm, fg.grad);
      dx_full[b] = fg.grad_x;
    }
  }
  std::vector<Tensor> dx = comm.reduce_rows(dx_full, Phase::kBackward, std::nullopt, prec);

  for (std::size_t li = config.layers; li-- > 0;) {
    const LayerParams& lp = params.layers[li];
    LayerParams& lg = grads.layers[li];
    const auto layer = static_cast<std::uint32_t>(li);

    std::vector<Tensor> d_ffn(nb);
    for (std::size_t b = 0; b < nb; ++b) d_ffn[b] = dropout_bwd(seq_local[b].ffn_scale[li], dx[b]);
    const std::vector<Tensor> d_ffn_full = comm.gather_rows(d_ffn, Phase::kBackward, layer);
    std::vector<Tensor> d_xn2_full;
    if (root) {
      d_xn2_full.resize(nb);
      for (std::size_t b = 0; b < nb; ++b) {
        d_xn2_full[b] = ffn_bwd(lp, at_root[li][b].ffn, d_ffn_full[b], lg);
      }
    }
    const std::vector<Tensor> d_xn2 = comm.reduce_rows(d_xn2_full, Phase::kBackward, layer, prec);

    std::vector<Tensor> d_attn(nb);
    for (std::size_t b = 0; b < nb; ++b) {
      const LayerNormGrad g2 = layernorm_bwd(seq_local[b].ln2[li], lp.ln2, d_xn2[b]);
      accumulate(lg.ln2, g2.grad);
      dx[b] = add(dx[b], g2.grad_x);
      d_attn[b] = dropout_bwd(seq_local[b].attention_scale[li], dx[b]);
    }
    const std::vector<Tensor> d_attn_full = comm.gather_rows(d_attn, Phase::kBackward, layer);
    std::vector<Tensor> d_xn1_full;
    if (root) {
      d_xn1_full.resize(nb);
      for (std::size_t b = 0; b < nb; ++b) {
        const AttentionSite site{config.heads, config.causal, 0, layer, sequence(b), context};
        const AttentionInputGrad ag =
            attention_bwd(lp, at_root[li][b].attention, site, d_attn_full[b], lg);
        d_xn1_full[b] = add(ag.grad_q_input, ag.grad_kv_input);
      }
    }
    const std::vector<Tensor> d_xn1 = comm.reduce_rows(d_xn1_full, Phase::kBackward, layer, prec);
    for (std::size_t b = 0; b < nb; ++b) {
      const LayerNormGrad g1 = layernorm_bwd(seq_local[b].ln1[li], lp.ln1, d_xn1[b]);
      accumulate(lg.ln1, g1.grad);
      dx[b] = add(dx[b], g1.grad_x);
    }
  }

  const std::vector<Tensor> d_emb_full = comm.gather_rows(dx, Phase::kBackward, std::nullopt);
  if (root) {
    for (std::size_t b = 0; b < nb; ++b) {
      const Tensor d_emb = dropout_bwd(embed_scale[b], d_emb_full[b]);
      embed_tokens_bwd(batch.tokens_of(b), d_emb, grads.token_table);
      add_inplace(grads.pos_table, d_emb);
    }
  }

  // ---- sync: one sum over the group, loss appended ----
  const std::size_t n = grads.element_count(true);
  Tensor payload({n + 1}, prec);
  {
    const Tensor flat = flatten(grads, true);
    std::copy(flat.data(), flat.data() + n, payload.data());
  }
  payload[n] = root ? loss : 0.0;
  const Tensor total = all_reduce(group, payload, ReduceOp::kSum, comm.tag(Phase::kSync, std::nullopt));
  unflatten(total, grads, true);
  grads.for_each([](const std::string& name, const Tensor& t, bool) {
    check_finite(t, ("gradient " + name).c_str());
  });
  out.loss = total[n];
  out.grads = std::move(grads);
  return out;
}

TrainResult train_baseline(const ModelConfig& config, const Parameters& init,
                           std::size_t group_size, const BatchSource& source,
                           const TrainOptions& options) {
  config.validate();
  ShardSpec::make(0, group_size, config.seq_len);
  std::vector<Batch> batches;
  batches.reserve(options.steps);
  for (std::size_t i = 0; i < options.steps; ++i) batches.push_back(source(options.first_step + i, 0));

  Communicator comm(group_size);
  std::vector<Parameters> replicas(group_size, init);
  std::vector<std::vector<WorkCounters>> counters(options.steps,
                                                  std::vector<WorkCounters>(group_size));
  std::vector<double> losses(options.steps, 0.0);

  run_workers(comm, [&](std::size_t rank) {
    const Group group = comm.world(rank);
    Parameters& params = replicas[rank];
    Optimizer opt(params, options);
    for (std::size_t i = 0; i < options.steps; ++i) {
      const StepContext context{options.first_step + i, options.dropout};
      StepGradients g = baseline_step(group, config, params, batches[i], context);
      opt.step(params, g.grads);
      counters[i][rank] = g.counters;
      if (rank == 0) losses[i] = g.loss;
    }
  });

  TrainResult result;
  result.params = std::move(replicas.front());
  result.ledger = comm.ledger().records();
  for (std::size_t i = 0; i < options.steps; ++i) {
    StepReport rep{"baseline", options.first_step + i, losses[i], {}, {}};
    for (const auto& c : counters[i]) rep.counters.merge_max(c);
    rep.collectives = comm.ledger().records_for_step(rep.step);
    result.reports.push_back(std::move(rep));
  }
  return result;
}

}  // namespace lsst
