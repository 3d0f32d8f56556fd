#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "disentangle/tape.hpp"

namespace disentangle {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Scalar objective over a list of parameter tensors, expressed on a tape.
using GradCheckFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Compares reverse-mode gradients against central differences.
///
/// Error per coordinate is |analytic - numeric| / max(1, |analytic|).
/// Throws NumericalError naming the coordinate when f is non-finite at a probe.
inline GradCheckResult grad_check(const GradCheckFn& f, const std::vector<Tensor<double>>& point, double h = 1e-5) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step must be positive");

  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& p : point) leaves.push_back(tape.leaf(p));
    const Var<double> root = f(tape, leaves);
    tape.backward(root);
    for (const auto& v : leaves) analytic.push_back(tape.grad(v));
  }

  auto evaluate = [&](const std::vector<Tensor<double>>& at, std::size_t tensor, std::size_t index) {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& p : at) leaves.push_back(tape.constant(p));
    const double value = f(tape, leaves).value().item();
    if (!std::isfinite(value)) {
      throw NumericalError("grad_check: objective non-finite when probing tensor " + std::to_string(tensor) +
                           " coordinate " + std::to_string(index));
    }
    return value;
  };

  GradCheckResult result;
  std::vector<Tensor<double>> probe = point;
  for (std::size_t p = 0; p < point.size(); ++p) {
    for (std::size_t i = 0; i < point[p].size(); ++i) {
      const double original = point[p][i];
      probe[p][i] = original + h;
      const double up = evaluate(probe, p, i);
      probe[p][i] = original - h;
      const double down = evaluate(probe, p, i);
      probe[p][i] = original;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p][i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      if (err > result.max_rel_error) {
        result = GradCheckResult{err, p, i, a, numeric};
      }
    }
  }
  return result;
}

}  // namespace disentangle
