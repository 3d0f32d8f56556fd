#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "disentangle/ops.hpp"
#include "disentangle/params.hpp"

namespace disentangle {

/// Affine map over the last axis.
struct Linear {
  std::size_t weight = 0;
  std::size_t bias = 0;

  template <class S>
  static Linear create(ParameterSet<S>& params, const std::string& name, ParamGroup group, std::size_t in,
                       std::size_t out, double stddev, std::mt19937_64& rng) {
    Linear l;
    l.weight = params.add_normal(name + ".weight", group, Shape{in, out}, stddev, rng);
    l.bias = params.add_zeros(name + ".bias", group, Shape{out});
    return l;
  }

  template <class S>
  Var<S> operator()(const Bound<S>& p, const Var<S>& x) const {
    return ops::add_bias(ops::matmul(x, p[weight]), p[bias]);
  }
};

/// Pre-activation residual 1-D conv layer:
///
///   y = skip(x) + conv(relu(x) [++ cond]) + bias
///
/// skip is the identity when stride == 1 and channel counts agree, and a
/// learned 1x1 strided projection otherwise. The optional conditioning input
/// ([B, T, Ccond]) is concatenated on the channel axis of the conv branch only.
struct ResidualConvBlock {
  std::size_t weight = 0;
  std::size_t bias = 0;
  std::optional<std::size_t> projection;
  std::size_t stride = 1;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t cond_channels = 0;

  template <class S>
  static ResidualConvBlock create(ParameterSet<S>& params, const std::string& name, ParamGroup group,
                                  std::size_t in, std::size_t out, std::size_t stride, std::size_t kernel,
                                  std::size_t cond, double branch_gain, std::mt19937_64& rng) {
    if (stride < 1) throw std::invalid_argument(name + ": stride must be >= 1");
    ResidualConvBlock b;
    b.stride = stride;
    b.in_channels = in;
    b.out_channels = out;
    b.cond_channels = cond;
    const double fan_in = static_cast<double>(kernel * (in + cond));
    b.weight = params.add_normal(name + ".conv", group, Shape{kernel, in + cond, out}, branch_gain / std::sqrt(fan_in), rng);
    b.bias = params.add_zeros(name + ".bias", group, Shape{out});
    if (stride != 1 || in != out) {
      b.projection = params.add_normal(name + ".skip", group, Shape{1, in, out}, 1.0 / std::sqrt(double(in)), rng);
    }
    return b;
  }

  template <class S>
  Var<S> operator()(const Bound<S>& p, const Var<S>& x, const std::optional<Var<S>>& cond = std::nullopt) const {
    Var<S> branch = ops::relu(x);
    if (cond) branch = ops::concat(branch, *cond);
    branch = ops::add_bias(ops::conv1d(branch, p[weight], stride), p[bias]);
    const Var<S> skip = projection ? ops::conv1d(x, p[*projection], stride) : x;
    return ops::add(skip, branch);
  }
};

/// Mean over the time axis: [B, T, D] -> [B, D].
template <class S>
Var<S> global_average_pool(const Var<S>& h) {
  if (h.shape().size() != 3) throw ShapeError("global_average_pool expects [B, T, D], got " + to_string(h.shape()));
  return ops::mean(h, 1);
}

/// Index of the nearest row of `codes` to each row of `rows` by L2 distance.
/// Ties resolve to the lowest index.
template <class S>
std::vector<std::size_t> nearest_codes(const Tensor<S>& rows, const Tensor<S>& codes) {
  if (codes.rank() != 2 || codes.dim(0) == 0) throw std::invalid_argument("nearest_codes: empty codebook");
  const std::size_t d = codes.dim(1), k = codes.dim(0);
  if (rows.last_dim() != d) {
    throw ShapeError("nearest_codes: rows of width " + std::to_string(rows.last_dim()) + " vs codebook width " +
                     std::to_string(d));
  }
  std::vector<std::size_t> out(rows.rows());
  for (std::size_t r = 0; r < out.size(); ++r) {
    const S* z = rows.data() + r * d;
    S best = std::numeric_limits<S>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const S* e = codes.data() + j * d;
      S dist = S(0);
      for (std::size_t i = 0; i < d; ++i) dist += (z[i] - e[i]) * (z[i] - e[i]);
      if (dist < best) {
        best = dist;
        arg = j;
      }
    }
    out[r] = arg;
  }
  return out;
}

/// Pre-quantization sequence, chosen code per frame, and the code vectors.
template <class S>
struct ContentLatent {
  Tensor<S> z;
  std::vector<std::size_t> indices;
  Tensor<S> c;
};

enum class CodebookMode { ema, loss };

struct CodebookOptions {
  CodebookMode mode = CodebookMode::ema;
  double decay = 0.99;
  double epsilon = 1e-5;
};

/// Codebook bookkeeping. The embedding matrix itself lives in the model's
/// ParameterSet (so the auxiliary-loss mode can train it); this struct holds
/// the usage counters and EMA cluster statistics.
template <class S>
struct Codebook {
  std::size_t param = 0;
  CodebookOptions options;
  std::vector<std::uint64_t> usage;  // assignments since last reset
  Tensor<S> cluster_size;            // [K]
  Tensor<S> embed_sum;               // [K, D]

  void reset_statistics(const Tensor<S>& embeddings) {
    const std::size_t k = embeddings.dim(0);
    if (k < 2) throw std::invalid_argument("codebook needs at least 2 entries");
    usage.assign(k, 0);
    cluster_size = Tensor<S>(Shape{k}, S(1));
    embed_sum = embeddings;
  }

  void record_usage(const std::vector<std::size_t>& indices) {
    for (const std::size_t i : indices) ++usage.at(i);
  }

  void reset_usage() { std::fill(usage.begin(), usage.end(), 0); }

  /// Exponential-moving-average update with Laplace smoothing.
  void ema_update(Tensor<S>& embeddings, const Tensor<S>& z_rows, const std::vector<std::size_t>& indices) {
    const std::size_t k = embeddings.dim(0), d = embeddings.dim(1);
    const double decay = options.decay;
    std::vector<double> counts(k, 0.0);
    std::vector<double> sums(k * d, 0.0);
    for (std::size_t r = 0; r < indices.size(); ++r) {
      counts[indices[r]] += 1.0;
      for (std::size_t i = 0; i < d; ++i) sums[indices[r] * d + i] += z_rows[r * d + i];
    }
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      cluster_size[j] = static_cast<S>(decay * cluster_size[j] + (1.0 - decay) * counts[j]);
      total += cluster_size[j];
      for (std::size_t i = 0; i < d; ++i) {
        embed_sum[j * d + i] = static_cast<S>(decay * embed_sum[j * d + i] + (1.0 - decay) * sums[j * d + i]);
      }
    }
    const double eps = options.epsilon;
    for (std::size_t j = 0; j < k; ++j) {
      const double smoothed = (cluster_size[j] + eps) / (total + static_cast<double>(k) * eps) * total;
      for (std::size_t i = 0; i < d; ++i) embeddings[j * d + i] = static_cast<S>(embed_sum[j * d + i] / smoothed);
    }
  }

  /// Re-seeds every code with zero usage from random rows of `z_rows`.
  /// Returns the number of codes replaced.
  std::size_t reseed_dead(Tensor<S>& embeddings, const Tensor<S>& z_rows, std::mt19937_64& rng) {
    const std::size_t k = embeddings.dim(0), d = embeddings.dim(1);
    std::uniform_int_distribution<std::size_t> pick(0, z_rows.rows() - 1);
    std::size_t replaced = 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (usage[j] != 0) continue;
      const std::size_t r = pick(rng);
      std::copy_n(z_rows.data() + r * d, d, embeddings.data() + j * d);
      cluster_size[j] = S(1);
      std::copy_n(z_rows.data() + r * d, d, embed_sum.data() + j * d);
      ++replaced;
    }
    return replaced;
  }
};

/// Nearest-code assignment; increments usage counters.
template <class S>
ContentLatent<S> vq_quantize(const Tensor<S>& z, Codebook<S>& codebook, const Tensor<S>& embeddings) {
  ContentLatent<S> out;
  out.z = z;
  out.indices = nearest_codes(z, embeddings);
  out.c = Tensor<S>(z.shape);
  const std::size_t d = embeddings.dim(1);
  for (std::size_t r = 0; r < out.indices.size(); ++r) {
    std::copy_n(embeddings.data() + out.indices[r] * d, d, out.c.data() + r * d);
  }
  codebook.record_usage(out.indices);
  return out;
}

enum class Mode { train, infer };

/// Tape-side style latent: posterior mean, clamped log-variance and the sample.
template <class S>
struct StyleVars {
  Var<S> mu;
  Var<S> log_var;
  Var<S> s;
};

/// Gaussian posterior head: h -> (mu, log sigma^2 clamped to [-10, 10]),
/// sampled by reparameterization in train mode.
struct GaussianHead {
  Linear mean;
  Linear log_var;
  static constexpr double kLogVarLimit = 10.0;

  template <class S>
  static GaussianHead create(ParameterSet<S>& params, const std::string& name, ParamGroup group, std::size_t in,
                             std::size_t out, std::mt19937_64& rng) {
    GaussianHead g;
    g.mean = Linear::create(params, name + ".mean", group, in, out, 1.0 / std::sqrt(double(in)), rng);
    g.log_var = Linear::create(params, name + ".log_var", group, in, out, 0.1 / std::sqrt(double(in)), rng);
    return g;
  }

  template <class S>
  StyleVars<S> operator()(const Bound<S>& p, const Var<S>& h, Mode mode, std::mt19937_64* rng) const {
    StyleVars<S> out;
    out.mu = mean(p, h);
    out.log_var = ops::clamp(log_var(p, h), S(-kLogVarLimit), S(kLogVarLimit));
    if (!out.mu.value().all_finite() || !out.log_var.value().all_finite()) {
      throw NumericalError("gaussian head produced non-finite mean or log-variance");
    }
    if (mode == Mode::infer) {
      out.s = out.mu;
      return out;
    }
    if (rng == nullptr) throw std::invalid_argument("gaussian head: train mode needs an rng");
    Tensor<S> noise(out.mu.shape());
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : noise.values) v = static_cast<S>(dist(*rng));
    Tape<S>& tape = h.tape();
    const Var<S> sigma = ops::exp(ops::scale(out.log_var, S(0.5)));
    out.s = ops::add(out.mu, ops::mul(sigma, tape.constant(std::move(noise))));
    return out;
  }
};

/// Density-ratio scorer: concat(c, s) -> ReLU MLP with two hidden layers -> scalar.
struct Scorer {
  Linear hidden1;
  Linear hidden2;
  Linear output;

  template <class S>
  static Scorer create(ParameterSet<S>& params, std::size_t content_dim, std::size_t style_dim, std::size_t hidden,
                       std::mt19937_64& rng) {
    Scorer sc;
    const std::size_t in = content_dim + style_dim;
    sc.hidden1 = Linear::create(params, "scorer.hidden1", ParamGroup::scorer, in, hidden, std::sqrt(2.0 / in), rng);
    sc.hidden2 = Linear::create(params, "scorer.hidden2", ParamGroup::scorer, hidden, hidden, std::sqrt(2.0 / hidden), rng);
    sc.output = Linear::create(params, "scorer.output", ParamGroup::scorer, hidden, 1, 1.0 / std::sqrt(double(hidden)), rng);
    return sc;
  }

  /// Scores row-aligned pairs: [N, Dc] x [N, Ds] -> [N, 1].
  template <class S>
  Var<S> operator()(const Bound<S>& p, const Var<S>& c, const Var<S>& s) const {
    Var<S> h = ops::relu(hidden1(p, ops::concat(c, s)));
    h = ops::relu(hidden2(p, h));
    return output(p, h);
  }

  /// All-pairs scores: entry (i, j) = Sc(c_i, s_j), shape [K, K].
  template <class S>
  Var<S> matrix(const Bound<S>& p, const Var<S>& c, const Var<S>& s) const {
    const std::size_t k = c.shape().at(0);
    if (s.shape().at(0) != k) {
      throw ShapeError("scorer matrix: batch mismatch " + to_string(c.shape()) + " vs " + to_string(s.shape()));
    }
    std::vector<std::size_t> rows_c, rows_s;
    rows_c.reserve(k * k);
    rows_s.reserve(k * k);
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        rows_c.push_back(i);
        rows_s.push_back(j);
      }
    }
    const Var<S> pairs = (*this)(p, ops::gather_rows(c, rows_c), ops::gather_rows(s, rows_s));
    return ops::reshape(pairs, Shape{k, k});
  }
};

}  // namespace disentangle
