#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "disentangle/layers.hpp"
#include "disentangle/ops.hpp"
#include "disentangle/params.hpp"

namespace disentangle {

enum class ReconstructionMode {
  mean,     // mean |d| + mean d^2 over all elements
  literal,  // (sum |d|)^2 + sum d^2
  utterance,  // (sum |d| + sum d^2) per utterance, averaged over the batch
};

struct ModelConfig {
  std::size_t feature_dim = 16;
  std::size_t content_dim = 64;
  std::size_t style_dim = 16;
  std::size_t codebook_size = 64;
  std::size_t kernel = 3;

  std::size_t content_layers = 10;
  std::size_t content_width = 64;
  std::set<std::size_t> content_stride_layers{3};  // 1-based, stride 2

  std::size_t style_layers = 6;
  std::size_t style_width = 32;
  std::set<std::size_t> style_stride_layers{2, 4, 6};

  std::size_t decoder_layers = 10;
  std::size_t decoder_width = 64;
  std::set<std::size_t> decoder_concat_layers{1, 3, 5, 7};  // 1-based

  std::size_t scorer_hidden = 64;

  double gamma = 0.25;
  // Per-utterance sums keep reconstruction from being swamped by the
  // per-frame VQ and per-utterance KL terms (the mean form collapses s).
  ReconstructionMode reconstruction = ReconstructionMode::utterance;
  CodebookOptions codebook;
  double codebook_loss_weight = 1.0;  // used in CodebookMode::loss only

  std::size_t content_reduction() const { return std::size_t{1} << content_stride_layers.size(); }
  std::size_t style_reduction() const { return std::size_t{1} << style_stride_layers.size(); }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw std::invalid_argument("model." + field + ": " + why);
    };
    if (feature_dim == 0) fail("feature_dim", "must be >= 1");
    if (content_dim == 0) fail("content_dim", "must be >= 1");
    if (style_dim == 0) fail("style_dim", "must be >= 1");
    if (codebook_size < 2) fail("codebook_size", "must be >= 2");
    if (kernel == 0 || kernel % 2 == 0) fail("kernel", "must be odd");
    if (!(gamma > 0.0)) fail("gamma", "must be > 0");
    if (content_stride_layers.size() != 1) fail("content_stride_layers", "decoder restores exactly one 2x reduction");
    auto check_layers = [&](const std::set<std::size_t>& s, std::size_t layers, const std::string& field) {
      for (const std::size_t l : s) {
        if (l < 1 || l > layers) fail(field, "layer index " + std::to_string(l) + " outside 1.." + std::to_string(layers));
      }
    };
    check_layers(content_stride_layers, content_layers, "content_stride_layers");
    check_layers(style_stride_layers, style_layers, "style_stride_layers");
    check_layers(decoder_concat_layers, decoder_layers, "decoder_concat_layers");
    if (content_width == 0 || style_width == 0 || decoder_width == 0 || scorer_hidden == 0) {
      fail("width", "must be >= 1");
    }
  }
};

/// Tape-side content latent: Z, straight-through quantized C, chosen codes.
template <class S>
struct ContentVars {
  Var<S> z;
  Var<S> c;
  Var<S> selected;  // gathered code vectors, gradient-stopped
  std::vector<std::size_t> indices;
};

/// The content encoder (ConvC + codebook), style encoder (ConvS + Gaussian
/// head) and conditional decoder. All activations are [B, T, C].
template <class S>
class Model {
 public:
  Model(const ModelConfig& config, std::mt19937_64& rng) : config_(config) {
    config_.validate();
    const std::size_t k = config_.kernel;
    // Residual branches are scaled down so activation variance stays O(1) with depth.
    auto gain = [](std::size_t layers) { return 1.0 / std::sqrt(static_cast<double>(layers)); };

    std::size_t in = config_.feature_dim;
    for (std::size_t l = 1; l <= config_.content_layers; ++l) {
      const std::size_t stride = config_.content_stride_layers.count(l) ? 2 : 1;
      content_.push_back(ResidualConvBlock::create(params_, "content.layer" + std::to_string(l), ParamGroup::content,
                                                   in, config_.content_width, stride, k, 0, gain(config_.content_layers), rng));
      in = config_.content_width;
    }
    content_head_ = Linear::create(params_, "content.head", ParamGroup::content, in, config_.content_dim,
                                   1.0 / std::sqrt(double(in)), rng);
    Tensor<S> codes(Shape{config_.codebook_size, config_.content_dim});
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : codes.values) v = static_cast<S>(dist(rng));
    codebook_.options = config_.codebook;
    const bool trained_by_loss = config_.codebook.mode == CodebookMode::loss;
    codebook_.param = params_.add("content.codebook", ParamGroup::content, codes, trained_by_loss);
    codebook_.reset_statistics(params_[codebook_.param].value);

    in = config_.feature_dim;
    for (std::size_t l = 1; l <= config_.style_layers; ++l) {
      const std::size_t stride = config_.style_stride_layers.count(l) ? 2 : 1;
      style_.push_back(ResidualConvBlock::create(params_, "style.layer" + std::to_string(l), ParamGroup::style, in,
                                                 config_.style_width, stride, k, 0, gain(config_.style_layers), rng));
      in = config_.style_width;
    }
    style_head_ = GaussianHead::create(params_, "style.head", ParamGroup::style, in, config_.style_dim, rng);

    in = config_.content_dim;
    for (std::size_t l = 1; l <= config_.decoder_layers; ++l) {
      const std::size_t cond = config_.decoder_concat_layers.count(l) ? config_.style_dim : 0;
      decoder_.push_back(ResidualConvBlock::create(params_, "decoder.layer" + std::to_string(l), ParamGroup::decoder,
                                                   in, config_.decoder_width, 1, k, cond, gain(config_.decoder_layers), rng));
      in = config_.decoder_width;
    }
    const std::size_t w = config_.decoder_width;
    upsample_ = params_.add_normal("decoder.upsample", ParamGroup::decoder, Shape{4, w, w},
                                   1.0 / std::sqrt(2.0 * w), rng);
    upsample_bias_ = params_.add_zeros("decoder.upsample_bias", ParamGroup::decoder, Shape{w});
    decoder_head_ = Linear::create(params_, "decoder.head", ParamGroup::decoder, w, config_.feature_dim,
                                   1.0 / std::sqrt(double(w)), rng);
  }

  const ModelConfig& config() const { return config_; }
  ParameterSet<S>& params() { return params_; }
  const ParameterSet<S>& params() const { return params_; }
  Codebook<S>& codebook() { return codebook_; }
  const Codebook<S>& codebook() const { return codebook_; }
  const Tensor<S>& codebook_embeddings() const { return params_[codebook_.param].value; }
  Tensor<S>& codebook_embeddings() { return params_[codebook_.param].value; }

  std::size_t min_content_frames() const { return config_.content_reduction(); }
  std::size_t min_style_frames() const { return config_.style_reduction(); }

  /// ConvC: [B, T, F] -> Z [B, ceil(T/2), D_C], before quantization.
  Var<S> content_features(const Bound<S>& p, const Var<S>& x) const {
    check_input(x, min_content_frames(), "content encoder");
    Var<S> h = x;
    for (const auto& block : content_) h = block(p, h);
    return content_head_(p, h);
  }

  /// Quantizes Z against the current codebook. C carries straight-through gradients.
  ContentVars<S> quantize(const Bound<S>& p, const Var<S>& z) const {
    ContentVars<S> out;
    out.z = z;
    const Var<S> codes = p[codebook_.param];
    out.indices = nearest_codes(z.value(), codes.value());
    Var<S> gathered = ops::reshape(ops::gather_rows(codes, out.indices), z.shape());
    out.selected = gathered;
    Tensor<S> values = gathered.value();
    out.c = ops::straight_through(z, z.tape().constant(std::move(values)));
    return out;
  }

  ContentVars<S> encode_content(const Bound<S>& p, const Var<S>& x) const { return quantize(p, content_features(p, x)); }

  /// ConvS + average pooling + Gaussian head.
  StyleVars<S> encode_style(const Bound<S>& p, const Var<S>& x, Mode mode, std::mt19937_64* rng) const {
    check_input(x, min_style_frames(), "style encoder");
    Var<S> h = x;
    for (const auto& block : style_) h = block(p, h);
    return style_head_(p, global_average_pool(h), mode, rng);
  }

  /// Dec: content [B, T', D_C] and style [B, D_S] -> [B, out_frames, F].
  /// out_frames defaults to 2T' and may be one less (odd input length).
  Var<S> decode(const Bound<S>& p, const Var<S>& c, const Var<S>& s, std::optional<std::size_t> out_frames = {}) const {
    if (c.shape().size() != 3 || c.shape()[2] != config_.content_dim) {
      throw ShapeError("decoder expects content [B, T', " + std::to_string(config_.content_dim) + "], got " +
                       to_string(c.shape()));
    }
    if (s.shape().size() != 2 || s.shape()[0] != c.shape()[0] || s.shape()[1] != config_.style_dim) {
      throw ShapeError("decoder style shape " + to_string(s.shape()) + " does not match content " + to_string(c.shape()));
    }
    const std::size_t steps = c.shape()[1];
    const Var<S> cond = ops::broadcast_time(s, steps);
    Var<S> h = c;
    for (std::size_t l = 0; l < decoder_.size(); ++l) {
      h = decoder_[l](p, h, decoder_[l].cond_channels ? std::optional<Var<S>>(cond) : std::nullopt);
    }
    h = ops::add_bias(ops::conv_transpose1d(ops::relu(h), p[upsample_], 2, 1), p[upsample_bias_]);
    Var<S> out = decoder_head_(p, ops::relu(h));
    const std::size_t full = out.shape()[1];
    const std::size_t want = out_frames.value_or(full);
    if (want > full || want + 1 < full) {
      throw ShapeError("decoder cannot produce " + std::to_string(want) + " frames from " + std::to_string(steps));
    }
    return want == full ? out : ops::narrow_time(out, 0, want);
  }

 private:
  void check_input(const Var<S>& x, std::size_t min_frames, const char* who) const {
    const Shape& s = x.shape();
    if (s.size() != 3 || s[2] != config_.feature_dim) {
      throw ShapeError(std::string(who) + " expects [B, T, " + std::to_string(config_.feature_dim) + "], got " +
                       to_string(s));
    }
    if (s[1] < min_frames) {
      throw std::invalid_argument(std::string(who) + " needs at least " + std::to_string(min_frames) +
                                  " frames, got " + std::to_string(s[1]));
    }
  }

  ModelConfig config_;
  ParameterSet<S> params_;
  Codebook<S> codebook_;
  std::vector<ResidualConvBlock> content_;
  Linear content_head_;
  std::vector<ResidualConvBlock> style_;
  GaussianHead style_head_;
  std::vector<ResidualConvBlock> decoder_;
  std::size_t upsample_ = 0;
  std::size_t upsample_bias_ = 0;
  Linear decoder_head_;
};

// ---------------------------------------------------------------------------
// Losses

template <class S>
Var<S> reconstruction_loss(const Var<S>& x, const Var<S>& x_hat, ReconstructionMode mode = ReconstructionMode::mean) {
  require_same_shape(x.shape(), x_hat.shape(), "reconstruction loss");
  const Var<S> diff = ops::sub(x, x_hat);
  if (mode == ReconstructionMode::literal) {
    return ops::add(ops::square(ops::sum(ops::abs(diff))), ops::sum(ops::square(diff)));
  }
  if (mode == ReconstructionMode::utterance) {
    const S rows = static_cast<S>(x.shape()[0]);
    return ops::scale(ops::add(ops::sum(ops::abs(diff)), ops::sum(ops::square(diff))), S(1) / rows);
  }
  return ops::add(ops::mean(ops::abs(diff)), ops::mean(ops::square(diff)));
}

/// Commitment term: mean over frames of ||z_t - sg(e_t)||^2.
template <class S>
Var<S> vq_loss(const Var<S>& z, const Var<S>& selected) {
  require_same_shape(z.shape(), selected.shape(), "vq loss");
  const Var<S> diff = ops::sub(z, ops::detach(selected));
  return ops::scale(ops::sum(ops::square(diff)), S(1) / static_cast<S>(z.value().rows()));
}

/// Codebook term for CodebookMode::loss: mean over frames of ||sg(z_t) - e_t||^2.
template <class S>
Var<S> codebook_loss(const Var<S>& z, const Var<S>& selected) {
  require_same_shape(z.shape(), selected.shape(), "codebook loss");
  const Var<S> diff = ops::sub(ops::detach(z), selected);
  return ops::scale(ops::sum(ops::square(diff)), S(1) / static_cast<S>(z.value().rows()));
}

/// KL(N(mu, exp(log_var)) || N(0, I)) summed over the latent dimension and
/// averaged over batch rows.
template <class S>
Var<S> kl_loss(const Var<S>& mu, const Var<S>& log_var) {
  require_same_shape(mu.shape(), log_var.shape(), "kl loss");
  Var<S> terms = ops::add(ops::square(mu), ops::exp(log_var));
  terms = ops::add_scalar(ops::sub(terms, log_var), S(-1));
  return ops::scale(ops::sum(terms), S(0.5) / static_cast<S>(mu.value().rows()));
}

/// Closed-form KL for one diagonal Gaussian against N(0, I).
inline double kl_divergence(const std::vector<double>& mu, const std::vector<double>& variance) {
  if (mu.size() != variance.size()) throw ShapeError("kl_divergence: mean/variance length mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!(variance[i] > 0.0)) throw std::invalid_argument("kl_divergence: variance must be positive");
    total += mu[i] * mu[i] + variance[i] - std::log(variance[i]) - 1.0;
  }
  return 0.5 * total;
}

/// InfoNCE lower bound from a [K, K] score matrix with entry (i, j) = Sc(C_i, S_j):
/// mean_i [ Sc(C_i, S_i) - log(1/K sum_j exp Sc(C_i, S_j)) ].
template <class S>
Var<S> info_nce(const Var<S>& scores) {
  const Shape& sh = scores.shape();
  if (sh.size() != 2 || sh[0] != sh[1]) throw ShapeError("info_nce expects a square score matrix, got " + to_string(sh));
  const std::size_t k = sh[0];
  if (k < 2) throw std::invalid_argument("info_nce needs K >= 2 samples for negatives");
  std::vector<std::size_t> diag(k);
  for (std::size_t i = 0; i < k; ++i) diag[i] = i * k + i;
  const Var<S> positives = ops::reshape(ops::gather_rows(ops::reshape(scores, Shape{k * k, 1}), diag), Shape{k});
  const Var<S> normalizers = ops::logsumexp(scores, 1);
  return ops::add_scalar(ops::mean(ops::sub(positives, normalizers)), static_cast<S>(std::log(static_cast<double>(k))));
}

struct LossBreakdown {
  double reconstruction = 0.0;
  double vq = 0.0;
  double kl = 0.0;
  double info_nce = 0.0;
  double total = 0.0;
};

/// L = L_rec + gamma * L_vq + L_kl. InfoNCE is excluded; the trainer handles it.
inline double combine_losses(const LossBreakdown& b, double gamma) {
  const std::pair<const char*, double> parts[] = {{"reconstruction", b.reconstruction}, {"vq", b.vq}, {"kl", b.kl}};
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) throw NumericalError(std::string("non-finite loss component: ") + name);
  }
  return b.reconstruction + gamma * b.vq + b.kl;
}

/// Everything one autoencoder forward pass leaves on the tape.
template <class S>
struct ForwardPass {
  ContentVars<S> content;
  StyleVars<S> style;
  Var<S> x_hat;
  Var<S> reconstruction;
  Var<S> vq;
  Var<S> kl;
  std::optional<Var<S>> codebook;  // CodebookMode::loss only
  Var<S> total;                    // weighted loss sum, plus the codebook term when enabled
  Var<S> content_pool;             // time-averaged Z (pre-quantization), [B, D_C]
};

template <class S>
ForwardPass<S> forward(const Model<S>& model, const Bound<S>& p, const Var<S>& x, Mode mode, std::mt19937_64* rng) {
  const ModelConfig& cfg = model.config();
  ForwardPass<S> f;
  f.content = model.encode_content(p, x);
  f.style = model.encode_style(p, x, mode, rng);
  f.x_hat = model.decode(p, f.content.c, f.style.s, x.shape()[1]);
  f.reconstruction = reconstruction_loss(x, f.x_hat, cfg.reconstruction);
  f.vq = vq_loss(f.content.z, f.content.selected);
  f.kl = kl_loss(f.style.mu, f.style.log_var);
  f.total = ops::add(ops::add(f.reconstruction, ops::scale(f.vq, static_cast<S>(cfg.gamma))), f.kl);
  if (cfg.codebook.mode == CodebookMode::loss) {
    f.codebook = codebook_loss(f.content.z, f.content.selected);
    f.total = ops::add(f.total, ops::scale(*f.codebook, static_cast<S>(cfg.codebook_loss_weight)));
  }
  f.content_pool = global_average_pool(f.content.z);
  return f;
}

}  // namespace disentangle
