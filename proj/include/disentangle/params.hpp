#pragma once

#include <cstddef>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "disentangle/tape.hpp"
#include "disentangle/tensor.hpp"

namespace disentangle {

/// Which network a parameter belongs to. content, style and decoder make up
/// the autoencoder parameters; the scorer is trained on the opposite side of
/// the min-max game.
enum class ParamGroup { content, style, decoder, scorer };

inline std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::content: return "content";
    case ParamGroup::style: return "style";
    case ParamGroup::decoder: return "decoder";
    case ParamGroup::scorer: return "scorer";
  }
  return "unknown";
}

inline ParamGroup group_from_name(std::string_view name) {
  if (name == "content") return ParamGroup::content;
  if (name == "style") return ParamGroup::style;
  if (name == "decoder") return ParamGroup::decoder;
  if (name == "scorer") return ParamGroup::scorer;
  throw std::invalid_argument("unknown parameter group '" + std::string(name) + "'");
}

template <class Scalar>
struct Parameter {
  std::string name;
  ParamGroup group;
  Tensor<Scalar> value;
  // False for tensors updated outside gradient descent (EMA codebook).
  bool optimized = true;
};

template <class Scalar>
class ParameterSet {
 public:
  std::size_t add(std::string name, ParamGroup group, Tensor<Scalar> value, bool optimized = true) {
    for (const auto& p : params_) {
      if (p.name == name) throw std::invalid_argument("duplicate parameter '" + name + "'");
    }
    params_.push_back(Parameter<Scalar>{std::move(name), group, std::move(value), optimized});
    return params_.size() - 1;
  }

  std::size_t add_normal(std::string name, ParamGroup group, Shape shape, double stddev, std::mt19937_64& rng) {
    Tensor<Scalar> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.values) v = static_cast<Scalar>(dist(rng));
    return add(std::move(name), group, std::move(t));
  }

  std::size_t add_zeros(std::string name, ParamGroup group, Shape shape) {
    return add(std::move(name), group, Tensor<Scalar>(std::move(shape)));
  }

  std::size_t size() const { return params_.size(); }
  Parameter<Scalar>& operator[](std::size_t i) { return params_.at(i); }
  const Parameter<Scalar>& operator[](std::size_t i) const { return params_.at(i); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t find(std::string_view name) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name == name) return i;
    }
    throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  std::vector<Shape> shapes() const {
    std::vector<Shape> out;
    for (const auto& p : params_) out.push_back(p.value.shape);
    return out;
  }

 private:
  std::vector<Parameter<Scalar>> params_;
};

/// Every parameter of a set placed on one tape as a leaf (or as a constant
/// when gradients are not wanted, e.g. frozen encoders or inference).
template <class Scalar>
class Bound {
 public:
  Bound(Tape<Scalar>& tape, const ParameterSet<Scalar>& params, bool requires_grad = true) : tape_(&tape) {
    vars_.reserve(params.size());
    for (const auto& p : params) {
      vars_.push_back(requires_grad ? tape.leaf(p.value) : tape.constant(p.value));
    }
  }

  /// Wraps tape variables that already stand for the set's parameters, in order.
  Bound(Tape<Scalar>& tape, std::vector<Var<Scalar>> vars) : tape_(&tape), vars_(std::move(vars)) {}

  Var<Scalar> operator[](std::size_t i) const { return vars_.at(i); }
  std::size_t size() const { return vars_.size(); }
  Tape<Scalar>& tape() const { return *tape_; }

  std::vector<Tensor<Scalar>> gradients() const {
    std::vector<Tensor<Scalar>> out;
    out.reserve(vars_.size());
    for (const auto& v : vars_) out.push_back(tape_->grad(v));
    return out;
  }

 private:
  Tape<Scalar>* tape_;
  std::vector<Var<Scalar>> vars_;
};

}  // namespace disentangle
