#include "astra/grad_check.hpp"

#include <cmath>

#include "astra/error.hpp"

namespace astra {
namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& params,
                const std::vector<Tensor>& replay) {
  Tape tape(false);
  tape.set_stop_gradient_replay(replay);
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(tape.leaf(p, false));
  Var out = f(tape, vars);
  if (out.value().size() != 1) throw ContractError("grad_check: function output is not scalar");
  return out.value().item();
}

}  // namespace

GradCheckResult grad_check_detailed(const ScalarFn& f, const std::vector<Tensor>& params, double h) {
  if (!(h >= 1e-6 && h <= 1e-2)) throw ContractError("grad_check: step must lie in [1e-6, 1e-2]");

  Tape tape(true);
  std::vector<Var> vars;
  for (const Tensor& p : params) vars.push_back(tape.leaf(p, true));
  Var out = f(tape, vars);
  if (out.value().size() != 1) {
    throw ContractError("grad_check: function output " + out.value().shape_string() +
                        " is not scalar");
  }
  tape.backward(out);
  const std::vector<Tensor> replay = tape.stop_gradient_record();

  GradCheckResult result;
  std::vector<Tensor> perturbed = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Tensor analytic = vars[p].grad();
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double base = params[p].values()[i];
      perturbed[p].values()[i] = base + h;
      const double up = evaluate(f, perturbed, replay);
      perturbed[p].values()[i] = base - h;
      const double down = evaluate(f, perturbed, replay);
      perturbed[p].values()[i] = base;

      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic.values()[i];
      const double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
      if (err > result.max_relative_error) {
        result = {err, p, i, a, numeric};
      }
    }
  }
  return result;
}

}  // namespace astra
