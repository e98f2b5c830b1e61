#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "astra/shard_plan.hpp"
#include "astra/tape.hpp"
#include "astra/tensor.hpp"

namespace astra {

// T x 2T mask for mixed-precision attention. Column j < T selects the
// full-precision key of token j, column T + j its quantised counterpart.
class MixedPrecisionMask {
 public:
  MixedPrecisionMask() = default;
  MixedPrecisionMask(std::size_t tokens, std::size_t devices, bool causal, BoolMatrix bits)
      : tokens_(tokens), devices_(devices), causal_(causal), bits_(std::move(bits)) {}

  std::size_t tokens() const { return tokens_; }
  std::size_t devices() const { return devices_; }
  bool causal() const { return causal_; }
  const BoolMatrix& matrix() const { return bits_; }
  bool full(std::size_t query, std::size_t key) const { return bits_(query, key); }
  bool quantized(std::size_t query, std::size_t key) const { return bits_(query, tokens_ + key); }

  // Rows of `range` only, with the full-precision half narrowed to the same
  // range: the mask a device applies to its local queries when its key set is
  // [local keys | all T quantised keys].
  BoolMatrix device_view(const TokenRange& range) const;

 private:
  std::size_t tokens_ = 0;
  std::size_t devices_ = 0;
  bool causal_ = false;
  BoolMatrix bits_;
};

MixedPrecisionMask build_mask(std::size_t tokens, const ShardPlan& plan, bool causal);

// softmax(Q [K | K_hat]^T / sqrt(d_k) masked) [V | V_hat], per head, heads
// concatenated. `mask` is rows(Q) x (rows(K) + rows(K_hat)). If `weights` is
// given it receives one attention matrix per head.
Var mixed_precision_attention(Var q, Var k, Var k_hat, Var v, Var v_hat, const BoolMatrix& mask,
                              int heads, std::vector<Tensor>* weights = nullptr);
Var mixed_precision_attention(Var q, Var k, Var k_hat, Var v, Var v_hat,
                              const MixedPrecisionMask& mask, int heads,
                              std::vector<Tensor>* weights = nullptr);

// Canonical scaled dot-product attention over a single key set.
Var standard_attention(Var q, Var k, Var v, bool causal, int heads);
// Same, with an explicit rows(Q) x rows(K) mask.
Var masked_attention(Var q, Var k, Var v, const BoolMatrix& mask, int heads);

// First-order softmax response to a logit perturbation e:
// d_alpha_j = alpha_j (e_j - sum_k alpha_k e_k).
std::vector<double> softmax_perturbation_first_order(std::span<const double> alpha,
                                                     std::span<const double> e);

}  // namespace astra
