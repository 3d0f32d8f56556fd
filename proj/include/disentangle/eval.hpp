#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "disentangle/adam.hpp"
#include "disentangle/config.hpp"
#include "disentangle/data.hpp"
#include "disentangle/model.hpp"

namespace disentangle {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Sequence scoring

/// Levenshtein distance with unit substitution, insertion and deletion costs.
inline std::size_t edit_distance(const std::vector<std::size_t>& ref, const std::vector<std::size_t>& hyp) {
  std::vector<std::size_t> prev(hyp.size() + 1), cur(hyp.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (std::size_t i = 1; i <= ref.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= hyp.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[hyp.size()];
}

/// Segments a style-free [T, F] matrix into a template sequence by dynamic
/// programming over squared distance. A final partial template is allowed
/// when no exact tiling of T exists.
inline std::vector<std::size_t> decode_templates(const Tensor<double>& x, const std::vector<Tensor<double>>& templates) {
  const std::size_t t_len = x.dim(0), f = x.dim(1);
  const double inf = std::numeric_limits<double>::infinity();
  auto segment_cost = [&](std::size_t start, std::size_t v, std::size_t frames) {
    double d = 0.0;
    for (std::size_t r = 0; r < frames; ++r) {
      for (std::size_t c = 0; c < f; ++c) {
        const double diff = x[(start + r) * f + c] - templates[v][r * f + c];
        d += diff * diff;
      }
    }
    return d;
  };
  std::vector<double> best(t_len + 1, inf);
  std::vector<std::size_t> choice(t_len + 1, 0), from(t_len + 1, 0);
  best[0] = 0.0;
  for (std::size_t t = 0; t < t_len; ++t) {
    if (best[t] == inf) continue;
    for (std::size_t v = 0; v < templates.size(); ++v) {
      const std::size_t len = templates[v].dim(0);
      if (t + len > t_len) continue;
      const double c = best[t] + segment_cost(t, v, len);
      if (c < best[t + len]) {
        best[t + len] = c;
        choice[t + len] = v;
        from[t + len] = t;
      }
    }
  }
  std::size_t end = t_len;
  std::vector<std::size_t> tail;
  if (best[t_len] == inf) {
    double tail_best = inf;
    std::size_t tail_start = 0, tail_symbol = 0;
    for (std::size_t t = 0; t < t_len; ++t) {
      if (best[t] == inf) continue;
      for (std::size_t v = 0; v < templates.size(); ++v) {
        if (t + templates[v].dim(0) <= t_len) continue;
        const double c = best[t] + segment_cost(t, v, t_len - t);
        if (c < tail_best) {
          tail_best = c;
          tail_start = t;
          tail_symbol = v;
        }
      }
    }
    tail.push_back(tail_symbol);
    end = tail_start;
  }
  std::vector<std::size_t> out;
  while (end > 0) {
    out.push_back(choice[end]);
    end = from[end];
  }
  std::reverse(out.begin(), out.end());
  out.insert(out.end(), tail.begin(), tail.end());
  return out;
}

// ---------------------------------------------------------------------------
// Inference

/// Frozen-encoder view of one utterance.
struct Encoding {
  std::vector<std::size_t> codes;  // one per downsampled frame
  std::vector<double> code_mean;   // time-averaged code embeddings, D_C
  std::vector<double> style_mu;    // D_S
};

template <class S>
Tensor<S> as_batch(const Tensor<S>& x) {
  if (x.rank() != 2) throw ShapeError("expected a [T, F] utterance, got " + to_string(x.shape));
  return Tensor<S>(Shape{1, x.dim(0), x.dim(1)}, x.values);
}

/// Encodes a normalized [T, F] utterance in inference mode.
template <class S>
Encoding encode_utterance(const Model<S>& model, const Tensor<S>& x) {
  Tape<S> tape;
  Bound<S> p(tape, model.params(), false);
  const Var<S> in = tape.constant(as_batch(x));
  const ContentVars<S> content = model.encode_content(p, in);
  const StyleVars<S> style = model.encode_style(p, in, Mode::infer, nullptr);
  Encoding e;
  e.codes = content.indices;
  const Tensor<S>& codes = model.codebook_embeddings();
  const std::size_t d = codes.dim(1);
  e.code_mean.assign(d, 0.0);
  for (const std::size_t k : e.codes) {
    for (std::size_t i = 0; i < d; ++i) e.code_mean[i] += codes[k * d + i];
  }
  for (auto& v : e.code_mean) v /= static_cast<double>(e.codes.size());
  for (const S v : style.mu.value().values) e.style_mu.push_back(v);
  return e;
}

/// Dec(EncC(x_content), EncS(x_style)) in inference mode, [T_content, F].
template <class S>
Tensor<S> recombine(const Model<S>& model, const Tensor<S>& x_content, const Tensor<S>& x_style) {
  Tape<S> tape;
  Bound<S> p(tape, model.params(), false);
  const Var<S> c = model.encode_content(p, tape.constant(as_batch(x_content))).c;
  const Var<S> s = model.encode_style(p, tape.constant(as_batch(x_style)), Mode::infer, nullptr).mu;
  const Tensor<S>& out = model.decode(p, c, s, x_content.dim(0)).value();
  return Tensor<S>(Shape{x_content.dim(0), x_content.dim(1)}, out.values);
}

/// Maps a model-space (normalized) matrix back to the template space of `style`.
template <class S>
Tensor<double> to_template_space(const Tensor<S>& x_normalized, const NormStats& norm, const StyleTransform& style) {
  const Tensor<double> raw = norm.denormalize(x_normalized.template cast<double>());
  Tensor<double> out(raw.shape);
  const std::size_t f = raw.dim(1);
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = style.invert(raw[i], i % f, f);
  return out;
}

// ---------------------------------------------------------------------------
// Linear softmax probes

struct LinearProbe {
  Tensor<double> weight;  // [D, C]
  Tensor<double> bias;    // [C]
  std::vector<double> mean, scale;  // feature standardization from the fit set

  std::vector<double> logits(const std::vector<double>& x) const {
    const std::size_t d = weight.dim(0), c = weight.dim(1);
    std::vector<double> out(bias.values);
    for (std::size_t i = 0; i < d; ++i) {
      const double v = (x[i] - mean[i]) / scale[i];
      if (v == 0.0) continue;
      for (std::size_t k = 0; k < c; ++k) out[k] += v * weight[i * c + k];
    }
    return out;
  }

  std::size_t predict(const std::vector<double>& x) const {
    const auto l = logits(x);
    return static_cast<std::size_t>(std::max_element(l.begin(), l.end()) - l.begin());
  }
};

struct ProbeOptions {
  std::size_t steps = 400;
  double learning_rate = 0.05;
};

/// Fits softmax regression by full-batch Adam on mean cross-entropy.
/// Features are standardized with statistics of the fit set.
inline LinearProbe fit_linear_probe(const std::vector<std::vector<double>>& x, const std::vector<std::size_t>& labels,
                                    std::size_t classes, const ProbeOptions& options) {
  if (x.empty() || x.size() != labels.size()) throw std::invalid_argument("probe: need matching non-empty data");
  const std::size_t n = x.size(), d = x.front().size();
  LinearProbe probe;
  probe.mean.assign(d, 0.0);
  probe.scale.assign(d, 0.0);
  for (const auto& row : x) {
    if (row.size() != d) throw ShapeError("probe: ragged feature rows");
    for (std::size_t i = 0; i < d; ++i) probe.mean[i] += row[i] / static_cast<double>(n);
  }
  for (const auto& row : x) {
    for (std::size_t i = 0; i < d; ++i) probe.scale[i] += (row[i] - probe.mean[i]) * (row[i] - probe.mean[i]) / n;
  }
  for (auto& s : probe.scale) s = s > 1e-12 ? std::sqrt(s) : 1.0;

  Tensor<double> features(Shape{n, d});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < d; ++i) features[r * d + i] = (x[r][i] - probe.mean[i]) / probe.scale[i];
  }
  std::vector<std::size_t> target(n);
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] >= classes) throw std::out_of_range("probe: label outside class range");
    target[r] = r * classes + labels[r];
  }
  probe.weight = Tensor<double>(Shape{d, classes});
  probe.bias = Tensor<double>(Shape{classes});
  const Shape shapes[] = {probe.weight.shape, probe.bias.shape};
  Adam<double> adam(AdamOptions{options.learning_rate}, shapes);
  for (std::size_t step = 0; step < options.steps; ++step) {
    Tape<double> tape;
    const Var<double> w = tape.leaf(probe.weight), b = tape.leaf(probe.bias);
    const Var<double> logits = ops::add_bias(ops::matmul(tape.constant(features), w), b);
    const Var<double> picked = ops::gather_rows(ops::reshape(logits, Shape{n * classes, 1}), target);
    const Var<double> loss = ops::mean(ops::sub(ops::logsumexp(logits, 1), ops::reshape(picked, Shape{n})));
    tape.backward(loss);
    Tensor<double>* params[] = {&probe.weight, &probe.bias};
    const Tensor<double> grads[] = {tape.grad(w), tape.grad(b)};
    adam.step(params, grads);
  }
  return probe;
}

inline double probe_accuracy(const LinearProbe& probe, const std::vector<std::vector<double>>& x,
                             const std::vector<std::size_t>& labels) {
  if (x.empty()) throw std::invalid_argument("probe accuracy: empty evaluation set");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < x.size(); ++i) hit += probe.predict(x[i]) == labels[i];
  return static_cast<double>(hit) / static_cast<double>(x.size());
}

// ---------------------------------------------------------------------------
// Evaluation context

/// Test-time inputs shared by all protocols: the corpus, its normalization,
/// normalized copies of every utterance and a seeded RNG stream.
template <class S>
struct EvalData {
  const Corpus* corpus = nullptr;
  NormStats norm;
  std::vector<Tensor<S>> normalized;  // parallel to corpus->utterances
  std::vector<std::size_t> train, test;  // utterance indices
  EvalOptions options;

  EvalData(const Corpus& c, NormStats stats, EvalOptions opts) : corpus(&c), norm(std::move(stats)), options(opts) {
    options.validate();
    for (std::size_t i = 0; i < c.utterances.size(); ++i) {
      normalized.push_back(norm.normalize(c.utterances[i].features).template cast<S>());
      if (c.utterances[i].split == Split::train) train.push_back(i);
      if (c.utterances[i].split == Split::test) test.push_back(i);
    }
    if (test.size() < 2) throw EvalError("evaluation needs at least two test utterances");
    if (train.empty()) throw EvalError("evaluation needs training utterances for probes");
  }

  const Utterance& utt(std::size_t i) const { return corpus->utterances[i]; }
  std::size_t styles() const { return corpus->spec.options.styles; }

  /// A deterministic subset of the training split used to fit probes.
  std::vector<std::size_t> probe_fit_set() const {
    std::vector<std::size_t> idx = train;
    std::mt19937_64 rng(options.seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(idx.size(), options.probe_train_utterances));
    return idx;
  }

  ProbeOptions probe_options() const { return ProbeOptions{options.probe_steps, options.probe_learning_rate}; }
};

// ---------------------------------------------------------------------------
// Content preservation

struct ContentReport {
  double ser = 0.0;  // total edits / total reference length, capped at 1
  std::size_t utterances = 0;
  std::size_t edits = 0;
  std::size_t reference_symbols = 0;
};

enum class ShuffleMode { no_shuffle, shuffle };

inline const char* shuffle_name(ShuffleMode m) { return m == ShuffleMode::shuffle ? "shuffle" : "no-shuffle"; }

/// Uniform donor j != i for every position, from a fixed seed.
inline std::vector<std::size_t> shuffle_donors(std::size_t n, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("shuffle pairing needs at least two utterances");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> donors(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t j = std::uniform_int_distribution<std::size_t>(0, n - 2)(rng);
    donors[i] = j >= i ? j + 1 : j;
  }
  return donors;
}

/// Recombines every test utterance with itself (no-shuffle) or a random
/// donor (shuffle), decodes the output with the donor's style removed, and
/// scores it against the content utterance's symbols.
template <class S>
ContentReport content_eval(const Model<S>& model, const EvalData<S>& data, ShuffleMode mode) {
  const auto& test = data.test;
  const auto donors = shuffle_donors(test.size(), data.options.seed + 1);
  ContentReport r;
  for (std::size_t k = 0; k < test.size(); ++k) {
    const std::size_t i = test[k];
    const std::size_t j = mode == ShuffleMode::shuffle ? test[donors[k]] : i;
    const Tensor<S> x_hat = recombine(model, data.normalized[i], data.normalized[j]);
    const Tensor<double> clean = to_template_space(x_hat, data.norm, data.corpus->spec.styles[data.utt(j).style]);
    const auto hyp = decode_templates(clean, data.corpus->spec.templates);
    r.edits += edit_distance(data.utt(i).content, hyp);
    r.reference_symbols += data.utt(i).content.size();
    ++r.utterances;
  }
  r.ser = std::min(1.0, static_cast<double>(r.edits) / static_cast<double>(r.reference_symbols));
  return r;
}

/// Frame-level symbol label for each downsampled content frame: the symbol
/// occupying input frame 2t.
inline std::vector<std::size_t> code_frame_labels(const Utterance& u, const SynthSpec& spec, std::size_t frames) {
  const auto labels = frame_labels(u.content, spec);
  std::vector<std::size_t> out(frames);
  for (std::size_t t = 0; t < frames; ++t) out[t] = labels.at(std::min(2 * t, labels.size() - 1));
  return out;
}

/// Linear probe from the one-hot VQ code of each frame to the symbol it
/// covers. Returns test accuracy over frames.
template <class S>
double content_probe_accuracy(const Model<S>& model, const EvalData<S>& data) {
  const std::size_t k = model.config().codebook_size;
  auto collect = [&](const std::vector<std::size_t>& idx, std::vector<std::vector<double>>& x,
                     std::vector<std::size_t>& y) {
    for (const std::size_t i : idx) {
      const Encoding e = encode_utterance(model, data.normalized[i]);
      const auto labels = code_frame_labels(data.utt(i), data.corpus->spec, e.codes.size());
      for (std::size_t t = 0; t < e.codes.size(); ++t) {
        std::vector<double> one_hot(k, 0.0);
        one_hot[e.codes[t]] = 1.0;
        x.push_back(std::move(one_hot));
        y.push_back(labels[t]);
      }
    }
  };
  std::vector<std::vector<double>> fit_x, test_x;
  std::vector<std::size_t> fit_y, test_y;
  collect(data.probe_fit_set(), fit_x, fit_y);
  collect(data.test, test_x, test_y);
  const LinearProbe probe = fit_linear_probe(fit_x, fit_y, data.corpus->spec.options.vocab_size, data.probe_options());
  return probe_accuracy(probe, test_x, test_y);
}

// ---------------------------------------------------------------------------
// Style judge and ranking

/// Utterance summary the judge classifies: per-channel mean and std.
template <class S>
std::vector<double> judge_features(const Tensor<S>& x) {
  const std::size_t t_len = x.dim(0), f = x.dim(1);
  std::vector<double> out(2 * f, 0.0);
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t c = 0; c < f; ++c) out[c] += static_cast<double>(x[t * f + c]) / t_len;
  }
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t c = 0; c < f; ++c) {
      const double d = static_cast<double>(x[t * f + c]) - out[c];
      out[f + c] += d * d / t_len;
    }
  }
  for (std::size_t c = 0; c < f; ++c) out[f + c] = std::sqrt(out[f + c]);
  return out;
}

/// Style classifier trained on ground-truth styled features (normalized).
struct StyleJudge {
  LinearProbe probe;
  double test_accuracy = 0.0;
  static constexpr double kMinAccuracy = 0.95;

  /// Rank (1 = best) of `label` in the judge's scores for x.
  template <class S>
  std::size_t rank_of(const Tensor<S>& x, std::size_t label) const {
    const auto l = probe.logits(judge_features(x));
    std::size_t rank = 1;
    for (std::size_t k = 0; k < l.size(); ++k) rank += (k != label && l[k] > l[label]);
    return rank;
  }
};

template <class S>
StyleJudge train_judge(const EvalData<S>& data) {
  std::vector<std::vector<double>> x, tx;
  std::vector<std::size_t> y, ty;
  for (const std::size_t i : data.probe_fit_set()) {
    x.push_back(judge_features(data.normalized[i]));
    y.push_back(data.utt(i).style);
  }
  for (const std::size_t i : data.test) {
    tx.push_back(judge_features(data.normalized[i]));
    ty.push_back(data.utt(i).style);
  }
  StyleJudge judge;
  judge.probe = fit_linear_probe(x, y, data.styles(), ProbeOptions{1000, 0.05});
  judge.test_accuracy = probe_accuracy(judge.probe, tx, ty);
  return judge;
}

struct RankingReport {
  double average_rank = 0.0;
  double top1 = 0.0, top3 = 0.0, top5 = 0.0;
  std::vector<std::size_t> ranks;

  static RankingReport from_ranks(std::vector<std::size_t> ranks) {
    RankingReport r;
    if (ranks.empty()) return r;
    std::size_t sum = 0, in1 = 0, in3 = 0, in5 = 0;
    for (const std::size_t k : ranks) {
      sum += k;
      in1 += k <= 1;
      in3 += k <= 3;
      in5 += k <= 5;
    }
    const double n = static_cast<double>(ranks.size());
    r.average_rank = static_cast<double>(sum) / n;
    r.top1 = static_cast<double>(in1) / n;
    r.top3 = static_cast<double>(in3) / n;
    r.top5 = static_cast<double>(in5) / n;
    r.ranks = std::move(ranks);
    return r;
  }
};

struct StyleTransferReport {
  RankingReport target;  // rank of the style donor's class
  RankingReport source;  // rank of the content utterance's class
  double judge_accuracy = 0.0;
};

/// Pairs every test utterance with a donor of a different style, so that the
/// target and source classes are distinct, and ranks both with the judge.
/// Refuses to run if the judge misclassifies more than 5% of raw test data.
template <class S>
StyleTransferReport style_ranking_eval(const Model<S>& model, const EvalData<S>& data, const StyleJudge& judge) {
  if (judge.test_accuracy < StyleJudge::kMinAccuracy) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "style judge accuracy %.3f on raw test features is below %.2f", judge.test_accuracy,
                  StyleJudge::kMinAccuracy);
    throw EvalError(buf);
  }
  std::mt19937_64 rng(data.options.seed + 2);
  std::vector<std::size_t> target, source;
  for (const std::size_t i : data.test) {
    std::vector<std::size_t> pool;
    for (const std::size_t j : data.test) {
      if (data.utt(j).style != data.utt(i).style) pool.push_back(j);
    }
    if (pool.empty()) throw EvalError("style ranking needs test utterances of at least two styles");
    const std::size_t j = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    const Tensor<S> x_hat = recombine(model, data.normalized[i], data.normalized[j]);
    target.push_back(judge.rank_of(x_hat, data.utt(j).style));
    source.push_back(judge.rank_of(x_hat, data.utt(i).style));
  }
  return StyleTransferReport{RankingReport::from_ranks(std::move(target)), RankingReport::from_ranks(std::move(source)),
                             judge.test_accuracy};
}

// ---------------------------------------------------------------------------
// Leakage and style probes

enum class Representation { codes, style_mu };

inline const char* representation_name(Representation r) { return r == Representation::codes ? "codes" : "s_mu"; }

/// Style-id accuracy of a linear probe on an utterance-level representation:
/// time-averaged code embeddings (leakage) or the style posterior mean.
template <class S>
double style_probe_accuracy(const Model<S>& model, const EvalData<S>& data, Representation rep) {
  auto collect = [&](const std::vector<std::size_t>& idx, std::vector<std::vector<double>>& x,
                     std::vector<std::size_t>& y) {
    for (const std::size_t i : idx) {
      Encoding e = encode_utterance(model, data.normalized[i]);
      x.push_back(rep == Representation::codes ? std::move(e.code_mean) : std::move(e.style_mu));
      y.push_back(data.utt(i).style);
    }
  };
  std::vector<std::vector<double>> fit_x, test_x;
  std::vector<std::size_t> fit_y, test_y;
  collect(data.probe_fit_set(), fit_x, fit_y);
  collect(data.test, test_x, test_y);
  const LinearProbe probe = fit_linear_probe(fit_x, fit_y, data.styles(), data.probe_options());
  return probe_accuracy(probe, test_x, test_y);
}

// ---------------------------------------------------------------------------
// Few-shot style classification

/// `shots` training utterances per style class, sampled without replacement.
template <class S>
std::vector<std::size_t> sample_shots(const EvalData<S>& data, std::size_t shots, std::uint64_t seed) {
  if (shots == 0) throw std::invalid_argument("few-shot: shots must be >= 1");
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (const std::size_t i : data.train) by_class[data.utt(i).style].push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  for (std::size_t m = 0; m < data.styles(); ++m) {
    auto& pool = by_class[m];
    if (pool.size() < shots) {
      throw EvalError("few-shot: style " + std::to_string(m) + " has " + std::to_string(pool.size()) +
                      " training utterances, fewer than " + std::to_string(shots) + " shots");
    }
    std::shuffle(pool.begin(), pool.end(), rng);
    out.insert(out.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(shots));
  }
  return out;
}

/// Frozen pre-trained style encoder: only a linear head on s_mu is fitted.
template <class S>
double few_shot_frozen(const Model<S>& model, const EvalData<S>& data, std::size_t shots) {
  const auto fit = sample_shots(data, shots, data.options.seed + 10 * shots);
  std::vector<std::vector<double>> x, tx;
  std::vector<std::size_t> y, ty;
  for (const std::size_t i : fit) {
    x.push_back(encode_utterance(model, data.normalized[i]).style_mu);
    y.push_back(data.utt(i).style);
  }
  for (const std::size_t i : data.test) {
    tx.push_back(encode_utterance(model, data.normalized[i]).style_mu);
    ty.push_back(data.utt(i).style);
  }
  const LinearProbe probe = fit_linear_probe(x, y, data.styles(), data.probe_options());
  return probe_accuracy(probe, tx, ty);
}

/// From scratch: a freshly initialized style encoder and linear head trained
/// jointly on the shots (first crop_frames frames of each), tested on full
/// test utterances.
template <class S>
double few_shot_scratch(const ModelConfig& config, const EvalData<S>& data, std::size_t shots, std::size_t crop) {
  const auto fit = sample_shots(data, shots, data.options.seed + 10 * shots);
  std::mt19937_64 rng(data.options.seed + 100 + shots);
  Model<S> encoder(config, rng);
  ParameterSet<S>& params = encoder.params();
  const std::size_t classes = data.styles();
  const Linear head = Linear::create(params, "fewshot.head", ParamGroup::style, config.style_dim, classes,
                                     1.0 / std::sqrt(double(config.style_dim)), rng);
  std::vector<std::size_t> trainable;
  std::vector<Shape> shapes;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].group == ParamGroup::style) {
      trainable.push_back(i);
      shapes.push_back(params[i].value.shape);
    }
  }
  Adam<S> adam(AdamOptions{data.options.fewshot_learning_rate}, shapes);

  std::size_t frames = crop;
  for (const std::size_t i : fit) frames = std::min(frames, data.normalized[i].dim(0));
  const std::size_t f = config.feature_dim;
  Tensor<S> batch(Shape{fit.size(), frames, f});
  std::vector<std::size_t> target;
  for (std::size_t b = 0; b < fit.size(); ++b) {
    std::copy_n(data.normalized[fit[b]].data(), frames * f, batch.data() + b * frames * f);
    target.push_back(b * classes + data.utt(fit[b]).style);
  }
  for (std::size_t step = 0; step < data.options.fewshot_steps; ++step) {
    Tape<S> tape;
    Bound<S> p(tape, params);
    const Var<S> mu = encoder.encode_style(p, tape.constant(batch), Mode::infer, nullptr).mu;
    const Var<S> logits = head(p, mu);
    const Var<S> picked = ops::gather_rows(ops::reshape(logits, Shape{fit.size() * classes, 1}), target);
    const Var<S> loss = ops::mean(ops::sub(ops::logsumexp(logits, 1), ops::reshape(picked, Shape{fit.size()})));
    tape.backward(loss);
    std::vector<Tensor<S>*> targets;
    std::vector<Tensor<S>> grads;
    for (const std::size_t i : trainable) {
      targets.push_back(&params[i].value);
      grads.push_back(tape.grad(p[i]));
    }
    adam.step(targets, grads);
  }
  std::size_t hit = 0;
  for (const std::size_t i : data.test) {
    Tape<S> tape;
    Bound<S> p(tape, params, false);
    const Var<S> mu = encoder.encode_style(p, tape.constant(as_batch(data.normalized[i])), Mode::infer, nullptr).mu;
    const Tensor<S>& l = head(p, mu).value();
    const auto best = static_cast<std::size_t>(std::max_element(l.values.begin(), l.values.end()) - l.values.begin());
    hit += best == data.utt(i).style;
  }
  return static_cast<double>(hit) / static_cast<double>(data.test.size());
}

// ---------------------------------------------------------------------------
// Report rows

/// Short identifier of a trained configuration used in report files.
inline std::string run_label(const RunConfig& cfg) {
  return "codebook_size=" + std::to_string(cfg.model.codebook_size) + ";mi_loss=" + (cfg.train.mi_loss ? "on" : "off") +
         ";train_seed=" + std::to_string(cfg.train.seed);
}

inline std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace disentangle
