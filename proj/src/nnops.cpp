#include "lsst/nnops.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "lsst/errors.hpp"
#include "lsst/instrumentation.hpp"

namespace lsst {
namespace {

constexpr double kGeluCoeff = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);

std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix");
}

}  // namespace

Tensor linear_fwd(const Tensor& x, const LinearParams& p) {
  require_matrix(x, "linear_fwd");
  if (p.weight.rank() != 2 || x.cols() != p.weight.rows() || p.bias.size() != p.weight.cols()) {
    throw ShapeError("linear_fwd: input " + shape_string(x.shape()) + " weight " +
                     shape_string(p.weight.shape()) + " bias " + shape_string(p.bias.shape()));
  }
  CategoryScope scope(FlopCategory::kProjection);
  return add_row_vector(matmul(x, p.weight), p.bias);
}

LinearGrad linear_bwd(const Tensor& x, const LinearParams& p, const Tensor& grad_out) {
  require_matrix(x, "linear_bwd");
  require_matrix(grad_out, "linear_bwd");
  if (x.rows() != grad_out.rows() || x.cols() != p.weight.rows() ||
      grad_out.cols() != p.weight.cols()) {
    throw ShapeError("linear_bwd: input " + shape_string(x.shape()) + " grad " +
                     shape_string(grad_out.shape()) + " weight " + shape_string(p.weight.shape()));
  }
  CategoryScope scope(FlopCategory::kBackward);
  LinearGrad g;
  g.grad.weight = transposed_matmul(x, grad_out);
  g.grad.bias = column_sum(grad_out);
  g.grad_x = matmul_transposed(grad_out, p.weight);
  return g;
}

LayerNormOutput layernorm_fwd(const Tensor& x, const LayerNormParams& p) {
  require_matrix(x, "layernorm_fwd");
  const std::size_t m = x.rows(), d = x.cols();
  if (d < 2) throw ShapeError("layernorm_fwd: need at least 2 channels");
  if (p.gain.size() != d || p.bias.size() != d) throw ShapeError("layernorm_fwd: affine size");
  LayerNormOutput out;
  out.cache.normalized = Tensor({m, d}, x.precision());
  out.cache.inv_std = Tensor({m}, x.precision());
  out.y = Tensor({m, d}, x.precision());
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    out.cache.inv_std[i] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double n = (x(i, j) - mean) * inv;
      out.cache.normalized(i, j) = n;
      out.y(i, j) = n * p.gain[j] + p.bias[j];
    }
  }
  out.cache.normalized = finalize(std::move(out.cache.normalized));
  out.cache.inv_std = finalize(std::move(out.cache.inv_std));
  out.y = finalize(std::move(out.y));
  return out;
}

LayerNormGrad layernorm_bwd(const LayerNormCache& cache, const LayerNormParams& p,
                            const Tensor& grad_out) {
  const Tensor& xhat = cache.normalized;
  if (grad_out.shape() != xhat.shape()) throw ShapeError("layernorm_bwd: grad shape");
  const std::size_t m = xhat.rows(), d = xhat.cols();
  LayerNormGrad g;
  g.grad_x = Tensor({m, d}, grad_out.precision());
  g.grad.gain = Tensor({d}, grad_out.precision());
  g.grad.bias = Tensor({d}, grad_out.precision());
  std::vector<double> dxhat(d);
  const double inv_d = 1.0 / static_cast<double>(d);
  for (std::size_t i = 0; i < m; ++i) {
    double sum_dxhat = 0.0;
    double sum_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double go = grad_out(i, j);
      g.grad.gain[j] += go * xhat(i, j);
      g.grad.bias[j] += go;
      dxhat[j] = go * p.gain[j];
      sum_dxhat += dxhat[j];
      sum_dxhat_xhat += dxhat[j] * xhat(i, j);
    }
    const double inv = cache.inv_std[i];
    for (std::size_t j = 0; j < d; ++j) {
      g.grad_x(i, j) = inv * (dxhat[j] - inv_d * sum_dxhat - xhat(i, j) * inv_d * sum_dxhat_xhat);
    }
  }
  g.grad_x = finalize(std::move(g.grad_x));
  g.grad.gain = finalize(std::move(g.grad.gain));
  g.grad.bias = finalize(std::move(g.grad.bias));
  return g;
}

Tensor gelu_fwd(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) {
    const double inner = kSqrt2OverPi * (v + kGeluCoeff * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(inner));
  }
  return finalize(std::move(y));
}

Tensor gelu_bwd(const Tensor& x, const Tensor& grad_out) {
  if (x.shape() != grad_out.shape()) throw ShapeError("gelu_bwd: shape mismatch");
  Tensor g = grad_out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    const double inner = kSqrt2OverPi * (v + kGeluCoeff * v * v * v);
    const double t = std::tanh(inner);
    const double dinner = kSqrt2OverPi * (1.0 + 3.0 * kGeluCoeff * v * v);
    g[i] *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
  }
  return finalize(std::move(g));
}

void DropoutPolicy::validate() const {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
}

bool dropout_keeps(const DropoutPolicy& policy, const DropoutSite& site, std::uint64_t position,
                   std::uint64_t channel) {
  std::uint64_t h = mix64(policy.master_seed);
  h = mix64(h ^ site.step);
  h = mix64(h ^ ((static_cast<std::uint64_t>(site.layer) << 8) | static_cast<std::uint8_t>(site.tag)));
  h = mix64(h ^ site.sequence);
  h = mix64(h ^ position);
  h = mix64(h ^ channel);
  const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
  return u >= policy.rate;
}

DropoutOutput dropout_fwd(const Tensor& x, const DropoutPolicy& policy, const DropoutSite& site) {
  policy.validate();
  if (!policy.active()) return DropoutOutput{x, Tensor{}};
  require_matrix(x, "dropout_fwd");
  const double keep_scale = 1.0 / (1.0 - policy.rate);
  DropoutOutput out{x, Tensor({x.rows(), x.cols()}, x.precision())};
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const bool keep = dropout_keeps(policy, site, site.row_offset + i, site.channel_offset + j);
      out.scale(i, j) = keep ? keep_scale : 0.0;
      out.y(i, j) *= out.scale(i, j);
    }
  }
  out.y = finalize(std::move(out.y));
  return out;
}

Tensor dropout_bwd(const Tensor& scale, const Tensor& grad_out) {
  if (scale.empty()) return grad_out;
  return hadamard(grad_out, scale);
}

Tensor embed_tokens(std::span<const std::int32_t> ids, const Tensor& table) {
  require_matrix(table, "embed_tokens");
  const std::size_t vocab = table.rows(), width = table.cols();
  Tensor out({ids.size(), width}, table.precision());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("embed_tokens: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    const double* src = table.data() + static_cast<std::size_t>(ids[i]) * width;
    std::copy(src, src + width, out.data() + i * width);
  }
  return out;
}

void embed_tokens_bwd(std::span<const std::int32_t> ids, const Tensor& grad_out,
                      Tensor& table_grad) {
  require_matrix(grad_out, "embed_tokens_bwd");
  if (grad_out.rows() != ids.size() || grad_out.cols() != table_grad.cols()) {
    throw ShapeError("embed_tokens_bwd: grad shape");
  }
  const std::size_t width = table_grad.cols();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table_grad.rows()) {
      throw IndexError("embed_tokens_bwd: id out of range");
    }
    double* dst = table_grad.data() + static_cast<std::size_t>(ids[i]) * width;
    for (std::size_t j = 0; j < width; ++j) dst[j] += grad_out(i, j);
  }
  table_grad = finalize(std::move(table_grad));
}

Tensor embed_positions(const ShardSpec& shard, const Tensor& pe) {
  require_matrix(pe, "embed_positions");
  if (shard.end() > pe.rows()) {
    throw IndexError("embed_positions: rows [" + std::to_string(shard.offset()) + ", " +
                     std::to_string(shard.end()) + ") outside table of " +
                     std::to_string(pe.rows()));
  }
  return slice_rows(pe, shard.offset(), shard.end());
}

CrossEntropyResult cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets) {
  require_matrix(logits, "cross_entropy");
  const std::size_t m = logits.rows(), v = logits.cols();
  if (m == 0) throw ShapeError("cross_entropy: no rows");
  if (targets.size() != m) throw ShapeError("cross_entropy: target count differs from rows");
  Tensor probs = softmax_rows(logits);
  CrossEntropyResult r;
  const double inv_m = 1.0 / static_cast<double>(m);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[i]) + " out of range");
    }
    // log-softmax computed directly to stay accurate when the target's
    // probability underflows.
    double row_max = logits(i, 0);
    for (std::size_t j = 1; j < v; ++j) row_max = std::max(row_max, logits(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(logits(i, j) - row_max);
    total += -(logits(i, static_cast<std::size_t>(targets[i])) - row_max - std::log(z));
  }
  r.loss = total * inv_m;
  r.grad_logits = std::move(probs);
  for (std::size_t i = 0; i < m; ++i) r.grad_logits(i, static_cast<std::size_t>(targets[i])) -= 1.0;
  r.grad_logits = scale(r.grad_logits, inv_m);
  return r;
}

}  // namespace lsst
