#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "disentangle/gradcheck.hpp"
#include "disentangle/model.hpp"

namespace disentangle {

/// Loss paths covered by the finite-difference suite.
enum class LossPath { reconstruction, vq, codebook, kl, info_nce, total };

inline const char* loss_path_name(LossPath p) {
  switch (p) {
    case LossPath::reconstruction: return "L_REC";
    case LossPath::vq: return "L_VQ";
    case LossPath::codebook: return "L_CODEBOOK";
    case LossPath::kl: return "L_KL";
    case LossPath::info_nce: return "I_NCE";
    case LossPath::total: return "L_TOTAL";
  }
  return "?";
}

inline constexpr LossPath kAllLossPaths[] = {LossPath::reconstruction, LossPath::vq, LossPath::codebook,
                                             LossPath::kl, LossPath::info_nce, LossPath::total};

/// A model small enough that every coordinate can be probed in seconds.
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.feature_dim = 3;
  c.content_dim = 4;
  c.style_dim = 2;
  c.codebook_size = 4;
  c.content_layers = 2;
  c.content_width = 4;
  c.content_stride_layers = {1};
  c.style_layers = 2;
  c.style_width = 4;
  c.style_stride_layers = {1, 2};
  c.decoder_layers = 2;
  c.decoder_width = 4;
  c.decoder_concat_layers = {1, 2};
  c.scorer_hidden = 4;
  return c;
}

struct GradCheckEntry {
  LossPath path;
  GradCheckResult result;
  std::string parameter;  // name of the worst coordinate's tensor
  bool passed = false;
};

struct GradCheckSuiteOptions {
  ModelConfig model = tiny_model_config();
  std::size_t batch = 3;
  std::size_t frames = 8;
  std::uint64_t seed = 11;
  double step = 1e-5;
  double tolerance = 1e-4;
  // Test hook: wraps this path's loss in an op whose backward is wrong by a
  // factor of 1.5, to confirm the suite notices.
  std::optional<LossPath> corrupt;
};

struct GradCheckSuiteReport {
  std::vector<GradCheckEntry> entries;
  std::size_t parameters = 0;
  double seconds = 0.0;
  bool passed() const {
    for (const auto& e : entries) {
      if (!e.passed) return false;
    }
    return !entries.empty();
  }
};

namespace detail {

template <class S>
Var<S> miscaled_backward(const Var<S>& x) {
  const std::size_t xid = x.id();
  return x.tape().record(x.value(), {x}, [xid](Tape<S>& t, std::size_t self) {
    const Tensor<S>& g = t.upstream(self);
    Tensor<S>* gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += S(1.5) * g[i];
  });
}

}  // namespace detail

/// Finite-difference check of every loss path of a tiny 64-bit model.
///
/// Two things are frozen so the objective is smooth in the parameters: the
/// code assignment (the indices chosen at the base point) and the
/// quantization residual E[idx] - Z. The quantized value is then Z + residual,
/// whose true derivative is the identity, which is exactly what the
/// straight-through rule claims. Arguments under a stop-gradient are held at
/// their base-point values, so central differences see the same function the
/// backward pass differentiates. The reparameterization noise is replayed
/// from a fixed seed on every evaluation.
inline GradCheckSuiteReport run_grad_check_suite(const GradCheckSuiteOptions& opt) {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(opt.seed);
  Model<double> model(opt.model, rng);
  ParameterSet<double> scorer_params;
  const Scorer scorer =
      Scorer::create(scorer_params, opt.model.content_dim, opt.model.style_dim, opt.model.scorer_hidden, rng);

  Tensor<double> x(Shape{opt.batch, opt.frames, opt.model.feature_dim});
  std::normal_distribution<double> unit(0.0, 1.0);
  for (auto& v : x.values) v = unit(rng);
  const std::uint64_t noise_seed = rng();

  // Base-point assignment, residual, and the values the stop-gradients freeze.
  std::vector<std::size_t> indices;
  Tensor<double> residual, z_base, selected_base;
  {
    Tape<double> tape;
    Bound<double> p(tape, model.params(), false);
    const ContentVars<double> cv = model.encode_content(p, tape.constant(x));
    indices = cv.indices;
    z_base = cv.z.value();
    selected_base = cv.selected.value();
    residual = cv.selected.value();
    for (std::size_t i = 0; i < residual.size(); ++i) residual[i] -= cv.z.value()[i];
  }

  const std::size_t n_model = model.params().size();
  std::vector<Tensor<double>> point;
  std::vector<std::string> names;
  for (const auto& p : model.params()) {
    point.push_back(p.value);
    names.push_back(p.name);
  }
  for (const auto& p : scorer_params) {
    point.push_back(p.value);
    names.push_back(p.name);
  }

  auto objective = [&](LossPath path) -> GradCheckFn {
    return [&, path](Tape<double>& tape, const std::vector<Var<double>>& vars) {
      const Bound<double> p(tape, std::vector<Var<double>>(vars.begin(), vars.begin() + n_model));
      const Bound<double> sc(tape, std::vector<Var<double>>(vars.begin() + n_model, vars.end()));
      const Var<double> in = tape.constant(x);
      const Var<double> z = model.content_features(p, in);
      const Var<double> codes = p[model.codebook().param];
      const Var<double> selected = ops::reshape(ops::gather_rows(codes, indices), z.shape());
      Tensor<double> shifted = z.value();
      for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += residual[i];
      const Var<double> c = ops::straight_through(z, tape.constant(std::move(shifted)));
      std::mt19937_64 noise(noise_seed);
      const StyleVars<double> style = model.encode_style(p, in, Mode::train, &noise);

      auto term = [&](LossPath which) -> Var<double> {
        Var<double> v;
        switch (which) {
          case LossPath::reconstruction:
            v = reconstruction_loss(in, model.decode(p, c, style.s, opt.frames), opt.model.reconstruction);
            break;
          case LossPath::vq: v = ops::scale(vq_loss(z, tape.constant(selected_base)), opt.model.gamma); break;
          case LossPath::codebook: v = codebook_loss(tape.constant(z_base), selected); break;
          case LossPath::kl: v = kl_loss(style.mu, style.log_var); break;
          case LossPath::info_nce: v = info_nce(scorer.matrix(sc, global_average_pool(z), style.mu)); break;
          case LossPath::total: break;
        }
        return opt.corrupt == which ? detail::miscaled_backward(v) : v;
      };
      if (path != LossPath::total) return term(path);
      Var<double> total = ops::add(ops::add(term(LossPath::reconstruction), term(LossPath::vq)), term(LossPath::kl));
      total = ops::add(total, term(LossPath::info_nce));
      return opt.corrupt == LossPath::total ? detail::miscaled_backward(total) : total;
    };
  };

  GradCheckSuiteReport report;
  report.parameters = model.params().scalar_count() + scorer_params.scalar_count();
  for (const LossPath path : kAllLossPaths) {
    GradCheckEntry e{path, grad_check(objective(path), point, opt.step), {}, false};
    e.parameter = names[e.result.worst_tensor];
    e.passed = e.result.max_rel_error < opt.tolerance;
    report.entries.push_back(std::move(e));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace disentangle
