// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <cstring>
#include <vector>

#include "stkrige/autodiff.hpp"

namespace stkrige {

/// Builds a scalar expression from leaf variables on a fresh tape.
using ExpressionBuilder =
    std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_entry = 0;
  std::size_t entries_checked = 0;
};

namespace detail {

inline double evaluate(const ExpressionBuilder& f,
                       const std::vector<Tensor>& inputs) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  vars.reserve(inputs.size());
  for (const auto& x : inputs) vars.push_back(tape.leaf(x));
  return f(tape, vars).value().item();
}

}  // namespace detail

/// Compares reverse-mode gradients with central differences. The error per
/// entry is |analytic - numeric| / max(1, |analytic|).
inline GradCheckResult grad_check_detailed(const ExpressionBuilder& f,
                                           std::vector<Tensor> inputs,
                                           double h = 1e-5) {
  if (!(h >= 1e-7 && h <= 1e-3)) {
    throw ConfigError("grad_check: step must lie in [1e-7, 1e-3]");
  }
  std::vector<Tensor> analytic;
  double base = 0.0;
  {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& x : inputs) vars.push_back(tape.leaf(x));
    ad::Var out = f(tape, vars);
    base = out.value().item();
    tape.backward(out);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }
  const double again = detail::evaluate(f, inputs);
  if (std::memcmp(&again, &base, sizeof(double)) != 0) {
    throw Error("grad_check: expression is not deterministic");
  }

  GradCheckResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + h;
      const double fp = detail::evaluate(f, inputs);
      inputs[k][i] = orig - h;
      const double fm = detail::evaluate(f, inputs);
      inputs[k][i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[k][i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_input = k;
        res.worst_entry = i;
      }
      ++res.entries_checked;
    }
  }
  return res;
}

inline double grad_check(const ExpressionBuilder& f,
                         std::vector<Tensor> inputs, double h = 1e-5) {
  return grad_check_detailed(f, std::move(inputs), h).max_rel_error;
}

}  // namespace stkrige
