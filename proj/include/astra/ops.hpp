#pragma once

#include <span>
#include <vector>

#include "astra/tape.hpp"
#include "astra/tensor.hpp"

namespace astra {

// Differentiable kernels. Outputs take the wider precision of their operands;
// products accumulate in double regardless of storage precision.

Var matmul(Var a, Var b);
// a * b^T, avoiding an explicit transpose node.
Var matmul_nt(Var a, Var b);
Var transpose(Var x);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double s);
// Adds a 1 x D bias to every row of x. This is the only broadcast supported.
Var add_row(Var x, Var bias);

Var sum(Var x);
Var mean(Var x);
Var square_sum(Var x);

Var gelu(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

// Row-wise softmax over active entries. Inactive entries receive an additive
// -1e9 before normalisation and come out exactly zero.
Var masked_softmax(Var logits, const BoolMatrix& mask);
Var softmax_rows(Var logits);

// Forward identity, zero gradient. See Tape::next_stop_gradient for replay.
Var stop_gradient(Var x);
// x + sg(target - x): forward equals target, backward is the identity on x.
Var straight_through(Var x, const Tensor& target);

Var slice_rows(Var x, std::size_t start, std::size_t count);
Var slice_cols(Var x, std::size_t start, std::size_t count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var mean_rows(Var x);
Var gather_rows(Var table, std::span<const int> ids);

// Mean negative log-likelihood of `labels` under row-wise softmax(logits).
Var cross_entropy(Var logits, std::span<const int> labels);

// Plain (non-differentiable) helpers shared by kernels and oracles.
Tensor gemm(const Tensor& a, bool transpose_a, const Tensor& b, bool transpose_b,
            Precision out = Precision::f64);
double gelu_value(double x);

}  // namespace astra
