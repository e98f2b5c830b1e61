#pragma once

#include <functional>
#include <span>
#include <vector>

#include "astra/tape.hpp"

namespace astra {

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Compares reverse-mode gradients of `f` against central differences with step
// h. Stop-gradient values recorded at the base point are replayed verbatim in
// every perturbed evaluation, so sg() terms are treated as constants exactly as
// the backward pass treats them.
//
// The per-element error is |a - n| / (|a| + |n| + 1e-12).
GradCheckResult grad_check_detailed(const ScalarFn& f, const std::vector<Tensor>& params,
                                    double h);

inline double grad_check(const ScalarFn& f, const std::vector<Tensor>& params, double h) {
  return grad_check_detailed(f, params, h).max_relative_error;
}

}  // namespace astra
