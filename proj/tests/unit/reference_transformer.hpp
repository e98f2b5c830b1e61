#pragma once

#include <vector>

#include "astra/model.hpp"

// Straightforward loop implementation of a pre-norm Transformer in double
// precision. Shares nothing with the library beyond reading weight values.
namespace ref {

using Rows = std::vector<std::vector<double>>;

// Single class token prepended, full attention, mean of the class row.
std::vector<double> classify_logits(const astra::Model& model, const astra::Tensor& input);
// Causal language model, one logit row per position.
Rows lm_logits(const astra::Model& model, const std::vector<int>& ids);
// Greedy decoding that recomputes the whole prefix every step.
std::vector<int> greedy_generate(const astra::Model& model, std::vector<int> prompt, int steps);

// One block over explicit rows with a visibility predicate visible(i, j).
template <class Visible>
Rows block(const astra::BlockWeights<astra::Tensor>& b, const Rows& x, int heads, Visible visible);

Rows block_full(const astra::BlockWeights<astra::Tensor>& b, const Rows& x, int heads, bool causal);

}  // namespace ref
