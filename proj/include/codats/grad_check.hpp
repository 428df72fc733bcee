#pragma once

#include <array>
#include <limits>
#include <string>
#include <vector>

#include "codats/net.hpp"
#include "codats/ops.hpp"
#include "codats/tape.hpp"

namespace codats {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t coords_checked = 0;
};

inline double rel_error(double a, double b) {
  return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b));
}

// Central-difference check of a parameter-to-scalar function against the
// tape's analytic gradients. Run in 64-bit precision. The function is called
// many times, so it must be deterministic: any dropout inside must either be
// in inference mode or draw its mask from a generator reseeded per call.
// Batch-norm running state is restored around every evaluation.
template <typename BuildLoss>
GradCheckResult grad_check(BuildLoss&& build, ParamStore<double>& params, double eps = 1e-5) {
  const std::array<BatchNormState<double>, 3> bn_snapshot = params.bn;

  auto eval = [&]() -> double {
    Tape<double> tape;
    tape.set_check_finite(true);
    BoundNet<double> net = bind_params(tape, params);
    Var loss = build(tape, net);
    const Tensor<double>& lv = tape.val(loss);
    if (lv.numel() != 1) throw std::invalid_argument("grad_check: f must produce a scalar");
    const double v = lv[0];
    params.bn = bn_snapshot;
    return v;
  };

  GradMap<double> analytic;
  {
    Tape<double> tape;
    tape.set_check_finite(true);
    BoundNet<double> net = bind_params(tape, params);
    Var loss = build(tape, net);
    if (tape.val(loss).numel() != 1) {
      throw std::invalid_argument("grad_check: f must produce a scalar");
    }
    tape.backward(loss);
    analytic = collect_grads(tape, net);
    params.bn = bn_snapshot;
  }

  GradCheckResult result;
  for (auto& entry : params.entries) {
    const Tensor<double>& grad = analytic.at(entry.name);
    for (std::size_t i = 0; i < entry.value.numel(); ++i) {
      const double saved = entry.value[i];
      entry.value[i] = saved + eps;
      const double plus = eval();
      entry.value[i] = saved - eps;
      const double minus = eval();
      entry.value[i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double err = rel_error(grad[i], numeric);
      ++result.coords_checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = entry.name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

// Same check for free tensor inputs instead of named parameters; used by the
// per-operator suites. `build` receives leaves for each input, in order.
template <typename BuildLoss>
GradCheckResult grad_check_inputs(BuildLoss&& build, std::vector<Tensor<double>>& inputs,
                                  double eps = 1e-5) {
  auto eval = [&]() -> double {
    Tape<double> tape;
    tape.set_check_finite(true);
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (auto& t : inputs) vars.push_back(tape.leaf(t));
    Var loss = build(tape, vars);
    const Tensor<double>& lv = tape.val(loss);
    if (lv.numel() != 1) throw std::invalid_argument("grad_check: f must produce a scalar");
    return lv[0];
  };

  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    tape.set_check_finite(true);
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (auto& t : inputs) vars.push_back(tape.leaf(t));
    Var loss = build(tape, vars);
    if (tape.val(loss).numel() != 1) {
      throw std::invalid_argument("grad_check: f must produce a scalar");
    }
    tape.backward(loss);
    for (Var v : vars) {
      analytic.push_back(tape.has_grad(v) ? tape.grad(v) : Tensor<double>::zeros(tape.val(v).shape));
    }
  }

  GradCheckResult result;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    for (std::size_t i = 0; i < inputs[t].numel(); ++i) {
      const double saved = inputs[t][i];
      inputs[t][i] = saved + eps;
      const double plus = eval();
      inputs[t][i] = saved - eps;
      const double minus = eval();
      inputs[t][i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double err = rel_error(analytic[t][i], numeric);
      ++result.coords_checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = "input" + std::to_string(t);
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace codats
