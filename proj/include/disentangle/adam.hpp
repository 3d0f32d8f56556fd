#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "disentangle/tensor.hpp"

namespace disentangle {

struct AdamOptions {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Outcome of one optimizer step. A rejected step leaves parameters and
/// moments untouched.
struct StepOutcome {
  bool applied = true;
  std::string reason;
};

/// Bias-corrected Adam over a fixed list of parameter tensors.
template <class Scalar>
class Adam {
 public:
  Adam() = default;

  Adam(AdamOptions options, std::span<const Shape> shapes) : options_(options) {
    for (const Shape& s : shapes) {
      first_.emplace_back(s);
      second_.emplace_back(s);
    }
  }

  StepOutcome step(std::span<Tensor<Scalar>* const> params, std::span<const Tensor<Scalar>> grads) {
    if (params.size() != first_.size() || grads.size() != first_.size()) {
      throw ShapeError("adam: expected " + std::to_string(first_.size()) + " tensors");
    }
    for (std::size_t p = 0; p < grads.size(); ++p) {
      require_same_shape(params[p]->shape, first_[p].shape, "adam parameter");
      require_same_shape(grads[p].shape, first_[p].shape, "adam gradient");
      if (!grads[p].all_finite()) {
        return StepOutcome{false, "non-finite gradient in tensor " + std::to_string(p)};
      }
    }
    ++steps_;
    const double b1 = options_.beta1, b2 = options_.beta2;
    const double correct1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double correct2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    for (std::size_t p = 0; p < grads.size(); ++p) {
      Tensor<Scalar>& m = first_[p];
      Tensor<Scalar>& v = second_[p];
      const Tensor<Scalar>& g = grads[p];
      Tensor<Scalar>& w = *params[p];
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = static_cast<Scalar>(b1 * m[i] + (1.0 - b1) * g[i]);
        v[i] = static_cast<Scalar>(b2 * v[i] + (1.0 - b2) * g[i] * g[i]);
        const double m_hat = m[i] / correct1;
        const double v_hat = v[i] / correct2;
        w[i] = static_cast<Scalar>(w[i] - options_.learning_rate * m_hat / (std::sqrt(v_hat) + options_.epsilon));
      }
    }
    return {};
  }

  std::uint64_t steps() const { return steps_; }
  const AdamOptions& options() const { return options_; }
  std::vector<Tensor<Scalar>>& first_moments() { return first_; }
  std::vector<Tensor<Scalar>>& second_moments() { return second_; }
  const std::vector<Tensor<Scalar>>& first_moments() const { return first_; }
  const std::vector<Tensor<Scalar>>& second_moments() const { return second_; }
  void set_steps(std::uint64_t steps) { steps_ = steps; }

 private:
  AdamOptions options_;
  std::vector<Tensor<Scalar>> first_;
  std::vector<Tensor<Scalar>> second_;
  std::uint64_t steps_ = 0;
};

}  // namespace disentangle
