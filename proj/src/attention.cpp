#include "astra/attention.hpp"

#include <cmath>
#include <string>

#include "astra/error.hpp"
#include "astra/ops.hpp"

namespace astra {

BoolMatrix MixedPrecisionMask::device_view(const TokenRange& range) const {
  BoolMatrix out(range.size(), range.size() + tokens_);
  for (std::size_t i = 0; i < range.size(); ++i) {
    const std::size_t q = range.begin + i;
    for (std::size_t j = 0; j < range.size(); ++j) out.set(i, j, full(q, range.begin + j));
    for (std::size_t j = 0; j < tokens_; ++j) out.set(i, range.size() + j, quantized(q, j));
  }
  return out;
}

MixedPrecisionMask build_mask(std::size_t tokens, const ShardPlan& plan, bool causal) {
  if (plan.devices() == 0) throw PlanError("shard plan has no devices");
  if (plan.total_tokens != tokens) {
    throw PlanError("shard plan covers " + std::to_string(plan.total_tokens) + " tokens, expected " +
                    std::to_string(tokens));
  }
  plan.validate();
  BoolMatrix bits(tokens, 2 * tokens);
  for (std::size_t i = 0; i < tokens; ++i) {
    const std::size_t home = plan.device_of(i);
    for (std::size_t j = 0; j < tokens; ++j) {
      if (causal && j > i) continue;
      if (plan.ranges[home].contains(j)) {
        bits.set(i, j, true);
      } else {
        bits.set(i, tokens + j, true);
      }
    }
  }
  return MixedPrecisionMask(tokens, plan.devices(), causal, std::move(bits));
}

namespace {

void check_heads(std::size_t width, int heads) {
  if (heads < 1 || width % static_cast<std::size_t>(heads) != 0) {
    throw DimensionError("model width " + std::to_string(width) + " is not divisible by " +
                         std::to_string(heads) + " heads");
  }
}

}  // namespace

Var mixed_precision_attention(Var q, Var k, Var k_hat, Var v, Var v_hat, const BoolMatrix& mask,
                              int heads, std::vector<Tensor>* weights) {
  const std::size_t width = q.cols();
  check_heads(width, heads);
  if (k.cols() != width || k_hat.cols() != width || v.cols() != width || v_hat.cols() != width) {
    throw DimensionError("mixed_precision_attention: projection widths differ");
  }
  if (k.rows() != v.rows() || k_hat.rows() != v_hat.rows()) {
    throw DimensionError("mixed_precision_attention: key/value row counts differ");
  }
  if (mask.rows() != q.rows() || mask.cols() != k.rows() + k_hat.rows()) {
    throw DimensionError("mixed_precision_attention: mask is " + std::to_string(mask.rows()) + "x" +
                         std::to_string(mask.cols()) + ", expected " + std::to_string(q.rows()) +
                         "x" + std::to_string(k.rows() + k_hat.rows()));
  }
  const std::size_t dk = width / static_cast<std::size_t>(heads);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  if (weights) weights->clear();
  std::vector<Var> outs;
  for (std::size_t h = 0; h < static_cast<std::size_t>(heads); ++h) {
    const std::size_t c0 = h * dk;
    Var qh = heads == 1 ? q : slice_cols(q, c0, dk);
    const Var kparts[] = {heads == 1 ? k : slice_cols(k, c0, dk),
                          heads == 1 ? k_hat : slice_cols(k_hat, c0, dk)};
    const Var vparts[] = {heads == 1 ? v : slice_cols(v, c0, dk),
                          heads == 1 ? v_hat : slice_cols(v_hat, c0, dk)};
    Var keys = concat_rows(kparts);
    Var values = concat_rows(vparts);
    Var probs = masked_softmax(scale(matmul_nt(qh, keys), inv_sqrt_dk), mask);
    if (weights) weights->push_back(probs.value());
    outs.push_back(matmul(probs, values));
  }
  return heads == 1 ? outs.front() : concat_cols(outs);
}

Var mixed_precision_attention(Var q, Var k, Var k_hat, Var v, Var v_hat,
                              const MixedPrecisionMask& mask, int heads,
                              std::vector<Tensor>* weights) {
  return mixed_precision_attention(q, k, k_hat, v, v_hat, mask.matrix(), heads, weights);
}

Var masked_attention(Var q, Var k, Var v, const BoolMatrix& mask, int heads) {
  const std::size_t width = q.cols();
  check_heads(width, heads);
  if (k.cols() != width || v.cols() != width || k.rows() != v.rows()) {
    throw DimensionError("standard_attention: inconsistent shapes");
  }
  if (mask.rows() != q.rows() || mask.cols() != k.rows()) {
    throw DimensionError("standard_attention: mask shape mismatch");
  }
  const std::size_t dk = width / static_cast<std::size_t>(heads);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Var> outs;
  for (std::size_t h = 0; h < static_cast<std::size_t>(heads); ++h) {
    const std::size_t c0 = h * dk;
    Var qh = heads == 1 ? q : slice_cols(q, c0, dk);
    Var kh = heads == 1 ? k : slice_cols(k, c0, dk);
    Var vh = heads == 1 ? v : slice_cols(v, c0, dk);
    Var probs = masked_softmax(scale(matmul_nt(qh, kh), inv_sqrt_dk), mask);
    outs.push_back(matmul(probs, vh));
  }
  return heads == 1 ? outs.front() : concat_cols(outs);
}

Var standard_attention(Var q, Var k, Var v, bool causal, int heads) {
  // Causal masking aligns the last query with the last key, so a query block
  // shorter than the key set (incremental decoding) sees every earlier key.
  BoolMatrix mask(q.rows(), k.rows(), !causal);
  if (causal) {
    if (q.rows() > k.rows()) throw DimensionError("causal attention needs rows(Q) <= rows(K)");
    const std::size_t shift = k.rows() - q.rows();
    for (std::size_t i = 0; i < q.rows(); ++i)
      for (std::size_t j = 0; j <= i + shift; ++j) mask.set(i, j, true);
  }
  return masked_attention(q, k, v, mask, heads);
}

std::vector<double> softmax_perturbation_first_order(std::span<const double> alpha,
                                                     std::span<const double> e) {
  if (alpha.size() != e.size()) throw DimensionError("alpha and e differ in length");
  double weighted = 0.0;
  for (std::size_t k = 0; k < alpha.size(); ++k) weighted += alpha[k] * e[k];
  std::vector<double> out(alpha.size());
  for (std::size_t j = 0; j < alpha.size(); ++j) out[j] = alpha[j] * (e[j] - weighted);
  return out;
}

}  // namespace astra
