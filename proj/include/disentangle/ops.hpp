#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "disentangle/tape.hpp"
#include "disentangle/tensor.hpp"

// Differentiable primitives. Every op computes its forward value eagerly and
// records a backward rule that accumulates into the parents' gradient buffers.
namespace disentangle::ops {

namespace detail {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<RowMat<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;

template <class S>
ConstMatMap<S> as_matrix(const Tensor<S>& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap<S>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <class S>
MatMap<S> as_matrix(Tensor<S>& t, std::size_t rows, std::size_t cols) {
  return MatMap<S>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

// Splits a shape around `axis` into (outer, axis length, inner) strides.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

template <class S, class Fwd, class Deriv>
Var<S> unary(const Var<S>& x, Fwd fwd, Deriv deriv) {
  const Tensor<S>& xv = x.value();
  Tensor<S> out(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [xid, deriv](Tape<S>& t, std::size_t self) {
    const Tensor<S>& g = t.upstream(self);
    const Tensor<S>& xv = t.value(xid);
    const Tensor<S>& yv = t.value(self);
    Tensor<S>* gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * deriv(xv[i], yv[i]);
  });
}

inline std::size_t out_length(std::size_t length, std::size_t stride) { return (length + stride - 1) / stride; }

}  // namespace detail

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<S> out = a.value();
  const Tensor<S>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {a, b}, [ai, bi](Tape<S>& t, std::size_t self) {
    const Tensor<S>& g = t.upstream(self);
    for (const std::size_t id : {ai, bi}) {
      if (Tensor<S>* gp = t.grad_buffer(id)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gp)[i] += g[i];
      }
    }
  });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<S> out = a.value();
  const Tensor<S>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {a, b}, [ai, bi](Tape<S>& t, std::size_t self) {
    const Tensor<S>& g = t.upstream(self);
    if (Tensor<S>* ga = t.grad_buffer(ai)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
    if (Tensor<S>* gb = t.grad_buffer(bi)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    }
  });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<S> out = a.value();
  const Tensor<S>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {a, b}, [ai, bi](Tape<S>& t, std::size_t self) {
    const Tensor<S>& g = t.upstream(self);
    const Tensor<S>& av = t.value(ai);
    const Tensor<S>& bv = t.value(bi);
    if (Tensor<S>* ga = t.grad_buffer(ai)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (Tensor<S>* gb = t.grad_buffer(bi)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

template <class S>
Var<S> scale(const Var<S>& x, S factor) {
  return detail::unary(x, [factor](S v) { return v * factor; }, [factor](S, S) { return factor; });
}

template <class S>
Var<S> add_scalar(const Var<S>& x, S c) {
  return detail::unary(x, [c](S v) { return v + c; }, [](S, S) { return S(1); });
}

template <class S>
Var<S> relu(const Var<S>& x) {
  return detail::unary(
      x, [](S v) { return v > S(0) ? v : S(0); }, [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <class S>
Var<S> exp(const Var<S>& x) {
  return detail::unary(x, [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

template <class S>
Var<S> log(const Var<S>& x) {
  return detail::unary(x, [](S v) { return std::log(v); }, [](S v, S) { return S(1) / v; });
}

template <class S>
Var<S> square(const Var<S>& x) {
  return detail::unary(x, [](S v) { return v * v; }, [](S v, S) { return S(2) * v; });
}

template <class S>
Var<S> abs(const Var<S>& x) {
  return detail::unary(
      x, [](S v) { return std::abs(v); },
      [](S v, S) { return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0)); });
}

/// Clamps into [lo, hi]; the gradient is zero where the clamp is active.
template <class S>
Var<S> clamp(const Var<S>& x, S lo, S hi) {
  return detail::unary(
      x, [lo, hi](S v) { return std::min(hi, std::max(lo, v)); },
      [lo, hi](S v, S) { return (v >= lo && v <= hi) ? S(1) : S(0); });
}

template <class S>
Var<S> sum(const Var<S>& x) {
  S total = S(0);
  for (const S v : x.value().values) total += v;
  const std::size_t xid = x.id();
  return x.tape().record(Tensor<S>::scalar(total), {x}, [xid](Tape<S>& t, std::size_t self) {
    const S g = t.upstream(self)[0];
    Tensor<S>* gx = t.grad_buffer(xid);
    for (S& v : gx->values) v += g;
  });
}

template <class S>
Var<S> mean(const Var<S>& x) {
  return scale(sum(x), S(1) / static_cast<S>(x.size()));
}

/// Sum over one axis; the axis is removed from the shape.
template <class S>
Var<S> sum(const Var<S>& x, std::size_t axis) {
  const auto sp = detail::split_axis(x.shape(), axis);
  const Tensor<S>& xv = x.value();
  Tensor<S> out(detail::drop_axis(x.shape(), axis));
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t k = 0; k < sp.n; ++k) {
      const S* src = xv.data() + (o * sp.n + k) * sp.inner;
      S* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [xid, sp](Tape<S>& t, std::size_t self) {
    const Tensor<S>& g = t.upstream(self);
    Tensor<S>* gx = t.grad_buffer(xid);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t k = 0; k < sp.n; ++k) {
        S* dst = gx->data() + (o * sp.n + k) * sp.inner;
        const S* src = g.data() + o * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

template <class S>
Var<S> mean(const Var<S>& x, std::size_t axis) {
  const S n = static_cast<S>(x.shape().at(axis));
  return scale(sum(x, axis), S(1) / n);
}

/// Numerically stable log(sum(exp(x))) over one axis; the axis is removed.
template <class S>
Var<S> logsumexp(const Var<S>& x, std::size_t axis) {
  const auto sp = detail::split_axis(x.shape(), axis);
  const Tensor<S>& xv = x.value();
  Tensor<S> out(detail::drop_axis(x.shape(), axis));
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      S peak = -std::numeric_limits<S>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) peak = std::max(peak, xv[(o * sp.n + k) * sp.inner + i]);
      S acc = S(0);
      for (std::size_t k = 0; k < sp.n; ++k) acc += std::exp(xv[(o * sp.n + k) * sp.inner + i] - peak);
      out[o * sp.inner + i] = peak + std::log(acc);
    }
  }
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [xid, sp](Tape<S>& t, std::size_t self) {
    const Tensor<S>& g = t.upstream(self);
    const Tensor<S>& xv = t.value(xid);
    const Tensor<S>& yv = t.value(self);
    Tensor<S>* gx = t.grad_buffer(xid);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const S lse = yv[o * sp.inner + i];
        const S gi = g[o * sp.inner + i];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t idx = (o * sp.n + k) * sp.inner + i;
          (*gx)[idx] += gi * std::exp(xv[idx] - lse);
        }
      }
    }
  });
}

/// Euclidean norm of all elements.
template <class S>
Var<S> l2norm(const Var<S>& x) {
  S acc = S(0);
  for (const S v : x.value().values) acc += v * v;
  const S norm = std::sqrt(acc);
  const std::size_t xid = x.id();
  return x.tape().record(Tensor<S>::scalar(norm), {x}, [xid](Tape<S>& t, std::size_t self) {
    const S g = t.upstream(self)[0];
    const S n = t.value(self)[0];
    if (n == S(0)) return;  // subgradient 0 at the origin
    const Tensor<S>& xv = t.value(xid);
    Tensor<S>* gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += g * xv[i] / n;
  });
}

template <class S>
Var<S> reshape(const Var<S>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Tensor<S> out(std::move(shape), x.value().values);
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [xid](Tape<S>& t, std::size_t self) {
    const Tensor<S>& g = t.upstream(self);
    Tensor<S>* gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
}

/// x[..., K] times w[K, N] -> [..., N]; leading dimensions are flattened into rows.
template <class S>
Var<S> matmul(const Var<S>& x, const Var<S>& w) {
  const Tensor<S>& xv = x.value();
  const Tensor<S>& wv = w.value();
  if (wv.rank() != 2 || xv.last_dim() != wv.dim(0)) {
    throw ShapeError("matmul: shape mismatch " + to_string(xv.shape) + " x " + to_string(wv.shape));
  }
  const std::size_t rows = xv.rows(), k = wv.dim(0), n = wv.dim(1);
  Shape shape = xv.shape;
  shape.back() = n;
  Tensor<S> out(shape);
  detail::as_matrix(out, rows, n).noalias() = detail::as_matrix(xv, rows, k) * detail::as_matrix(wv, k, n);
  const std::size_t xid = x.id(), wid = w.id();
  return x.tape().record(std::move(out), {x, w}, [xid, wid, rows, k, n](Tape<S>& t, std::size_t self) {
    auto g = detail::as_matrix(t.upstream(self), rows, n);
    if (Tensor<S>* gx = t.grad_buffer(xid)) {
      detail::as_matrix(*gx, rows, k).noalias() += g * detail::as_matrix(t.value(wid), k, n).transpose();
    }
    if (Tensor<S>* gw = t.grad_buffer(wid)) {
      detail::as_matrix(*gw, k, n).noalias() += detail::as_matrix(t.value(xid), rows, k).transpose() * g;
    }
  });
}

/// Adds a vector over the last axis of x.
template <class S>
Var<S> add_bias(const Var<S>& x, const Var<S>& bias) {
  const std::size_t c = x.value().last_dim();
  if (bias.size() != c) {
    throw ShapeError("add_bias: shape mismatch " + to_string(x.shape()) + " + " + to_string(bias.shape()));
  }
  Tensor<S> out = x.value();
  const Tensor<S>& bv = bias.value();
  for (std::size_t r = 0; r < out.size(); r += c) {
    for (std::size_t j = 0; j < c; ++j) out[r + j] += bv[j];
  }
  const std::size_t xid = x.id(), bid = bias.id();
  return x.tape().record(std::move(out), {x, bias}, [xid, bid, c](Tape<S>& t, std::size_t self) {
    const Tensor<S>& g = t.upstream(self);
    if (Tensor<S>* gx = t.grad_buffer(xid)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    }
    if (Tensor<S>* gb = t.grad_buffer(bid)) {
      for (std::size_t r = 0; r < g.size(); r += c) {
        for (std::size_t j = 0; j < c; ++j) (*gb)[j] += g[r + j];
      }
    }
  });
}

/// Repeats v[B, D] over a new time axis: [B, T, D].
template <class S>
Var<S> broadcast_time(const Var<S>& v, std::size_t steps) {
  const Tensor<S>& vv = v.value();
  if (vv.rank() != 2 || steps == 0) {
    throw ShapeError("broadcast_time expects [B, D] and T >= 1, got " + to_string(vv.shape));
  }
  const std::size_t b = vv.dim(0), d = vv.dim(1);
  Tensor<S> out(Shape{b, steps, d});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t t = 0; t < steps; ++t) {
      std::copy_n(vv.data() + i * d, d, out.data() + (i * steps + t) * d);
    }
  }
  const std::size_t vid = v.id();
  return v.tape().record(std::move(out), {v}, [vid, b, steps, d](Tape<S>& t, std::size_t self) {
    const Tensor<S>& g = t.upstream(self);
    Tensor<S>* gv = t.grad_buffer(vid);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t s = 0; s < steps; ++s) {
        for (std::size_t j = 0; j < d; ++j) (*gv)[i * d + j] += g[(i * steps + s) * d + j];
      }
    }
  });
}

/// Concatenates along the last (channel) axis.
template <class S>
Var<S> concat(const Var<S>& a, const Var<S>& b) {
  const Tensor<S>& av = a.value();
  const Tensor<S>& bv = b.value();
  Shape lead_a(av.shape.begin(), av.shape.end() - 1), lead_b(bv.shape.begin(), bv.shape.end() - 1);
  if (lead_a != lead_b) {
    throw ShapeError("concat: shape mismatch " + to_string(av.shape) + " vs " + to_string(bv.shape));
  }
  const std::size_t rows = av.rows(), ca = av.last_dim(), cb = bv.last_dim();
  Shape shape = av.shape;
  shape.back() = ca + cb;
  Tensor<S> out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data() + r * ca, ca, out.data() + r * (ca + cb));
    std::copy_n(bv.data() + r * cb, cb, out.data() + r * (ca + cb) + ca);
  }
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record(std::move(out), {a, b}, [aid, bid, rows, ca, cb](Tape<S>& t, std::size_t self) {
    const Tensor<S>& g = t.upstream(self);
    if (Tensor<S>* ga = t.grad_buffer(aid)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < ca; ++j) (*ga)[r * ca + j] += g[r * (ca + cb) + j];
      }
    }
    if (Tensor<S>* gb = t.grad_buffer(bid)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < cb; ++j) (*gb)[r * cb + j] += g[r * (ca + cb) + ca + j];
      }
    }
  });
}

/// Selects rows (over the last axis) by index: [N, D] -> [len(idx), D].
template <class S>
Var<S> gather_rows(const Var<S>& x, std::vector<std::size_t> index) {
  const Tensor<S>& xv = x.value();
  const std::size_t d = xv.last_dim(), n = xv.rows();
  if (index.empty()) throw ShapeError("gather_rows: empty index");
  Tensor<S> out(Shape{index.size(), d});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= n) {
      throw std::out_of_range("gather_rows: row " + std::to_string(index[r]) + " of " + std::to_string(n));
    }
    std::copy_n(xv.data() + index[r] * d, d, out.data() + r * d);
  }
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [xid, d, index = std::move(index)](Tape<S>& t, std::size_t self) {
    const Tensor<S>& g = t.upstream(self);
    Tensor<S>* gx = t.grad_buffer(xid);
    for (std::size_t r = 0; r < index.size(); ++r) {
      for (std::size_t j = 0; j < d; ++j) (*gx)[index[r] * d + j] += g[r * d + j];
    }
  });
}

/// Takes `length` steps starting at `start` along the time axis of [B, T, C].
template <class S>
Var<S> narrow_time(const Var<S>& x, std::size_t start, std::size_t length) {
  const Tensor<S>& xv = x.value();
  if (xv.rank() != 3 || start + length > xv.dim(1) || length == 0) {
    throw ShapeError("narrow_time: cannot take [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") from " + to_string(xv.shape));
  }
  const std::size_t b = xv.dim(0), steps = xv.dim(1), c = xv.dim(2);
  Tensor<S> out(Shape{b, length, c});
  for (std::size_t i = 0; i < b; ++i) {
    std::copy_n(xv.data() + (i * steps + start) * c, length * c, out.data() + i * length * c);
  }
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [xid, b, steps, c, start, length](Tape<S>& t, std::size_t self) {
    const Tensor<S>& g = t.upstream(self);
    Tensor<S>* gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < length * c; ++j) (*gx)[(i * steps + start) * c + j] += g[i * length * c + j];
    }
  });
}

/// Forward value of `quantized`, gradient routed unchanged to `input`.
/// `quantized` never receives a gradient through this op.
template <class S>
Var<S> straight_through(const Var<S>& input, const Var<S>& quantized) {
  require_same_shape(input.shape(), quantized.shape(), "straight_through");
  Tensor<S> out = quantized.value();
  const std::size_t iid = input.id();
  return input.tape().record(std::move(out), {input}, [iid](Tape<S>& t, std::size_t self) {
    const Tensor<S>& g = t.upstream(self);
    Tensor<S>* gi = t.grad_buffer(iid);
    for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
  });
}

/// Stop-gradient: same value, recorded as a constant.
template <class S>
Var<S> detach(const Var<S>& x) {
  return x.tape().constant(x.value());
}

/// 1-D convolution over [B, T, Cin] with weights [K, Cin, Cout].
/// Zero "same" padding with (K-1)/2 frames on the left; output length ceil(T / stride).
template <class S>
Var<S> conv1d(const Var<S>& x, const Var<S>& w, std::size_t stride) {
  if (stride < 1) throw std::invalid_argument("conv1d: stride must be >= 1");
  const Tensor<S>& xv = x.value();
  const Tensor<S>& wv = w.value();
  if (xv.rank() != 3 || wv.rank() != 3 || xv.dim(2) != wv.dim(1)) {
    throw ShapeError("conv1d: shape mismatch input " + to_string(xv.shape) + " weights " + to_string(wv.shape));
  }
  const std::size_t b = xv.dim(0), steps = xv.dim(1), cin = xv.dim(2);
  const std::size_t k = wv.dim(0), cout = wv.dim(2);
  const std::size_t out_steps = detail::out_length(steps, stride);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
  const std::size_t rows = b * out_steps, width = k * cin;

  // im2col: one row per output frame holding its K input frames.
  Tensor<S> cols(Shape{rows, width});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t t = 0; t < out_steps; ++t) {
      S* dst = cols.data() + (i * out_steps + t) * width;
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + j) - pad;
        if (src >= 0 && src < static_cast<std::ptrdiff_t>(steps)) {
          std::copy_n(xv.data() + (i * steps + static_cast<std::size_t>(src)) * cin, cin, dst + j * cin);
        }
      }
    }
  }
  Tensor<S> out(Shape{b, out_steps, cout});
  detail::as_matrix(out, rows, cout).noalias() = detail::as_matrix(cols, rows, width) * detail::as_matrix(wv, width, cout);

  const std::size_t xid = x.id(), wid = w.id();
  return x.tape().record(
      std::move(out), {x, w},
      [xid, wid, cols = std::move(cols), b, steps, cin, k, cout, out_steps, stride, pad, rows, width](
          Tape<S>& t, std::size_t self) {
        auto g = detail::as_matrix(t.upstream(self), rows, cout);
        if (Tensor<S>* gw = t.grad_buffer(wid)) {
          detail::as_matrix(*gw, width, cout).noalias() += detail::as_matrix(cols, rows, width).transpose() * g;
        }
        if (Tensor<S>* gx = t.grad_buffer(xid)) {
          Tensor<S> gcols(Shape{rows, width});
          detail::as_matrix(gcols, rows, width).noalias() = g * detail::as_matrix(t.value(wid), width, cout).transpose();
          for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t o = 0; o < out_steps; ++o) {
              const S* src = gcols.data() + (i * out_steps + o) * width;
              for (std::size_t j = 0; j < k; ++j) {
                const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(o * stride + j) - pad;
                if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(steps)) continue;
                S* dst = gx->data() + (i * steps + static_cast<std::size_t>(pos)) * cin;
                for (std::size_t c = 0; c < cin; ++c) dst[c] += src[j * cin + c];
              }
            }
          }
        }
      });
}

/// Transposed 1-D convolution over [B, T, Cin] with weights [K, Cin, Cout]:
/// input frame t contributes to output frames t*stride + j - padding.
/// Output length (T - 1) * stride - 2 * padding + K.
template <class S>
Var<S> conv_transpose1d(const Var<S>& x, const Var<S>& w, std::size_t stride, std::size_t padding) {
  if (stride < 1) throw std::invalid_argument("conv_transpose1d: stride must be >= 1");
  const Tensor<S>& xv = x.value();
  const Tensor<S>& wv = w.value();
  if (xv.rank() != 3 || wv.rank() != 3 || xv.dim(2) != wv.dim(1)) {
    throw ShapeError("conv_transpose1d: shape mismatch input " + to_string(xv.shape) + " weights " +
                     to_string(wv.shape));
  }
  const std::size_t b = xv.dim(0), steps = xv.dim(1), cin = xv.dim(2);
  const std::size_t k = wv.dim(0), cout = wv.dim(2);
  const std::ptrdiff_t full = static_cast<std::ptrdiff_t>((steps - 1) * stride + k) - 2 * static_cast<std::ptrdiff_t>(padding);
  if (full < 1) throw ShapeError("conv_transpose1d: padding leaves no output frames");
  const std::size_t out_steps = static_cast<std::size_t>(full);
  const std::size_t rows = b * steps;

  // contrib[r, j*Cout + c]: what input row r sends to tap j.
  Tensor<S> wide(Shape{cin, k * cout});
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      std::copy_n(wv.data() + (j * cin + ci) * cout, cout, wide.data() + ci * k * cout + j * cout);
    }
  }
  Tensor<S> contrib(Shape{rows, k * cout});
  detail::as_matrix(contrib, rows, k * cout).noalias() = detail::as_matrix(xv, rows, cin) * detail::as_matrix(wide, cin, k * cout);
  Tensor<S> out(Shape{b, out_steps, cout});
  auto target = [=](std::size_t tin, std::size_t j) {
    return static_cast<std::ptrdiff_t>(tin * stride + j) - static_cast<std::ptrdiff_t>(padding);
  };
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t tin = 0; tin < steps; ++tin) {
      const S* src = contrib.data() + (i * steps + tin) * k * cout;
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t pos = target(tin, j);
        if (pos < 0 || pos >= full) continue;
        S* dst = out.data() + (i * out_steps + static_cast<std::size_t>(pos)) * cout;
        for (std::size_t c = 0; c < cout; ++c) dst[c] += src[j * cout + c];
      }
    }
  }

  const std::size_t xid = x.id(), wid = w.id();
  return x.tape().record(
      std::move(out), {x, w},
      [xid, wid, wide = std::move(wide), b, steps, cin, k, cout, out_steps, rows, target, full](
          Tape<S>& t, std::size_t self) {
        const Tensor<S>& g = t.upstream(self);
        // gcontrib mirrors contrib: the output gradient each input row saw per tap.
        Tensor<S> gcontrib(Shape{rows, k * cout});
        for (std::size_t i = 0; i < b; ++i) {
          for (std::size_t tin = 0; tin < steps; ++tin) {
            S* dst = gcontrib.data() + (i * steps + tin) * k * cout;
            for (std::size_t j = 0; j < k; ++j) {
              const std::ptrdiff_t pos = target(tin, j);
              if (pos < 0 || pos >= full) continue;
              std::copy_n(g.data() + (i * out_steps + static_cast<std::size_t>(pos)) * cout, cout, dst + j * cout);
            }
          }
        }
        if (Tensor<S>* gx = t.grad_buffer(xid)) {
          detail::as_matrix(*gx, rows, cin).noalias() +=
              detail::as_matrix(gcontrib, rows, k * cout) * detail::as_matrix(wide, cin, k * cout).transpose();
        }
        if (Tensor<S>* gw = t.grad_buffer(wid)) {
          Tensor<S> gwide(Shape{cin, k * cout});
          detail::as_matrix(gwide, cin, k * cout).noalias() =
              detail::as_matrix(t.value(xid), rows, cin).transpose() * detail::as_matrix(gcontrib, rows, k * cout);
          for (std::size_t j = 0; j < k; ++j) {
            for (std::size_t ci = 0; ci < cin; ++ci) {
              for (std::size_t c = 0; c < cout; ++c) {
                (*gw)[(j * cin + ci) * cout + c] += gwide[ci * k * cout + j * cout + c];
              }
            }
          }
        }
      });
}

}  // namespace disentangle::ops
