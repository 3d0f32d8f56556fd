#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "disentangle/adam.hpp"
#include "disentangle/config.hpp"
#include "disentangle/io.hpp"
#include "disentangle/layers.hpp"
#include "disentangle/model.hpp"

namespace disentangle {

/// Per-step diagnostics. Norms are over the whole flattened autoencoder
/// parameter vector.
struct GradReport {
  std::uint64_t step = 0;
  LossBreakdown losses;
  double g_theta_norm = 0.0;
  double g_a_norm = 0.0;
  double g_b_norm = 0.0;
  double cosine_b_a = 0.0;  // cos(g_b, g_a); 0 when g_a vanishes
  bool skipped = false;
  std::string incident;
};

inline constexpr const char* kMetricsHeader =
    "step,l_rec,l_vq,l_kl,i_nce,l_total,g_theta_norm,g_a_norm,g_b_norm";

inline std::string metrics_row(const GradReport& r) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%llu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g",
                static_cast<unsigned long long>(r.step), r.losses.reconstruction, r.losses.vq, r.losses.kl,
                r.losses.info_nce, r.losses.total, r.g_theta_norm, r.g_a_norm, r.g_b_norm);
  return buf;
}

/// Adaptive gradient scaling: rescales g_a to norm min(|g_a|, |g_theta|).
/// Returns the scale factor applied to g_a (0 when |g_a| == 0).
inline double adaptive_scale(double g_a_norm, double g_theta_norm) {
  if (!(g_a_norm > 0.0)) return 0.0;
  return std::min(g_a_norm, g_theta_norm) / g_a_norm;
}

template <class S>
double flat_norm(const std::vector<Tensor<S>>& grads, const std::vector<std::size_t>& index) {
  double acc = 0.0;
  for (const std::size_t p : index) {
    for (const S v : grads[p].values) acc += static_cast<double>(v) * static_cast<double>(v);
  }
  return std::sqrt(acc);
}

/// Shuffled pass over the training utterances; reshuffles when exhausted.
struct DataCursor {
  std::vector<std::uint64_t> order;
  std::uint64_t position = 0;
  std::uint64_t epoch = 0;

  void reset(std::size_t n, std::mt19937_64& rng) {
    order.resize(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    position = 0;
  }

  std::size_t next(std::mt19937_64& rng) {
    if (position == order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      position = 0;
      ++epoch;
    }
    return static_cast<std::size_t>(order[position++]);
  }
};

/// The components one optimization step touches.
template <class S>
struct StepState {
  Model<S>& model;
  const Scorer& scorer;
  ParameterSet<S>& scorer_params;
  Adam<S>& theta_optimizer;
  Adam<S>& scorer_optimizer;
  const std::vector<std::size_t>& theta_index;  // optimized autoencoder parameters
};

/// One step of the min-max game:
///
///   g_theta = dL/dtheta,  g_a = dI_NCE/dtheta,
///   g_b = min(|g_a|, |g_theta|) g_a / |g_a|,
///   theta <- Adam(g_theta + g_b),  Sc <- Adam ascent on dI_NCE/dSc.
///
/// With the MI loss off, g_b = 0 and the scorer is untouched. On a
/// non-finite loss or gradient the step is skipped and reported.
/// `z_rows` receives the batch's pre-quantization outputs for codebook upkeep.
template <class S>
GradReport train_step(StepState<S>& st, const Tensor<S>& batch, const TrainConfig& cfg, std::mt19937_64& rng,
                      Tensor<S>* z_rows = nullptr) {
  GradReport report;
  Model<S>& model = st.model;
  Tape<S> tape;
  Bound<S> theta(tape, model.params());
  const Var<S> x = tape.constant(batch);

  ForwardPass<S> f;
  try {
    f = forward(model, theta, x, Mode::train, &rng);
  } catch (const NumericalError& e) {
    report.skipped = true;
    report.incident = e.what();
    return report;
  }
  report.losses.reconstruction = f.reconstruction.value().item();
  report.losses.vq = f.vq.value().item();
  report.losses.kl = f.kl.value().item();
  report.losses.total = f.total.value().item();
  if (!std::isfinite(report.losses.total)) {
    report.skipped = true;
    report.incident = "non-finite loss";
    return report;
  }

  tape.backward(f.total);
  std::vector<Tensor<S>> grads = theta.gradients();
  report.g_theta_norm = flat_norm(grads, st.theta_index);

  std::vector<Tensor<S>> scorer_grads;
  if (cfg.mi_loss) {
    Bound<S> sc(tape, st.scorer_params);
    const Var<S> nce = info_nce(st.scorer.matrix(sc, f.content_pool, f.style.mu));
    report.losses.info_nce = nce.value().item();
    if (!std::isfinite(report.losses.info_nce)) {
      report.skipped = true;
      report.incident = "non-finite InfoNCE";
      return report;
    }
    tape.backward(nce);
    const std::vector<Tensor<S>> aux = theta.gradients();
    report.g_a_norm = flat_norm(aux, st.theta_index);
    const double scale = adaptive_scale(report.g_a_norm, report.g_theta_norm);
    report.g_b_norm = scale * report.g_a_norm;
    report.cosine_b_a = scale > 0.0 ? 1.0 : 0.0;
    if (scale > 0.0) {
      double dot = 0.0, nb = 0.0;
      for (const std::size_t p : st.theta_index) {
        for (std::size_t i = 0; i < aux[p].size(); ++i) {
          const S gb = static_cast<S>(scale * aux[p][i]);
          dot += static_cast<double>(gb) * aux[p][i];
          nb += static_cast<double>(gb) * gb;
          grads[p][i] += gb;
        }
      }
      report.g_b_norm = std::sqrt(nb);
      report.cosine_b_a = dot / (std::sqrt(nb) * report.g_a_norm);
    }
    // Gradient ascent on the scorer: feed the negated gradient to Adam.
    scorer_grads = sc.gradients();
    for (auto& g : scorer_grads) {
      for (auto& v : g.values) v = -v;
    }
  }

  std::vector<Tensor<S>*> targets;
  std::vector<Tensor<S>> theta_grads;
  for (const std::size_t p : st.theta_index) {
    targets.push_back(&model.params()[p].value);
    theta_grads.push_back(std::move(grads[p]));
  }
  const StepOutcome outcome = st.theta_optimizer.step(targets, theta_grads);
  if (!outcome.applied) {
    report.skipped = true;
    report.incident = "autoencoder update rejected: " + outcome.reason;
    return report;
  }
  if (cfg.mi_loss) {
    std::vector<Tensor<S>*> sc_targets;
    for (auto& p : st.scorer_params) sc_targets.push_back(&p.value);
    const StepOutcome sc_outcome = st.scorer_optimizer.step(sc_targets, scorer_grads);
    if (!sc_outcome.applied) report.incident = "scorer update rejected: " + sc_outcome.reason;
  }

  const Tensor<S>& z = f.content.z.value();
  Codebook<S>& codebook = model.codebook();
  codebook.record_usage(f.content.indices);
  if (codebook.options.mode == CodebookMode::ema) {
    codebook.ema_update(model.codebook_embeddings(), z, f.content.indices);
  }
  if (z_rows) *z_rows = z;
  return report;
}

inline constexpr std::string_view kCheckpointMagic = "DSCK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Owns the full training state: model, scorer, both optimizers, data
/// cursor and RNG. Everything needed to continue bit-identically is captured
/// by checkpoint().
template <class S>
class Trainer {
 public:
  /// `utterances` are normalized [T, F] matrices of the training split.
  Trainer(const RunConfig& config, std::vector<Tensor<S>> utterances)
      : config_(validated(config)),
        rng_(config_.train.seed),
        model_(config_.model, rng_),
        scorer_(Scorer::create(scorer_params_, config_.model.content_dim, config_.model.style_dim,
                               config_.model.scorer_hidden, rng_)),
        data_(std::move(utterances)) {
    if (data_.empty()) throw std::invalid_argument("trainer: no training utterances");
    for (const auto& u : data_) {
      if (u.rank() != 2 || u.dim(1) != config_.model.feature_dim) {
        throw ShapeError("trainer: utterance shape " + to_string(u.shape) + " does not match feature_dim");
      }
      if (u.dim(0) < config_.train.crop_frames) {
        throw std::invalid_argument("trainer: utterance of " + std::to_string(u.dim(0)) + " frames is shorter than crop " +
                                    std::to_string(config_.train.crop_frames));
      }
    }
    std::vector<Shape> theta_shapes;
    for (std::size_t i = 0; i < model_.params().size(); ++i) {
      if (model_.params()[i].optimized) {
        theta_index_.push_back(i);
        theta_shapes.push_back(model_.params()[i].value.shape);
      }
    }
    theta_opt_ = Adam<S>(AdamOptions{config_.train.learning_rate}, theta_shapes);
    const auto scorer_shapes = scorer_params_.shapes();
    scorer_opt_ = Adam<S>(AdamOptions{config_.train.scorer_learning_rate}, scorer_shapes);
    cursor_.reset(data_.size(), rng_);
  }

  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  /// Draws the next batch of random crops, [B, crop, F].
  Tensor<S> next_batch() {
    const std::size_t b = config_.train.batch_size, crop = config_.train.crop_frames, f = config_.model.feature_dim;
    Tensor<S> batch(Shape{b, crop, f});
    for (std::size_t i = 0; i < b; ++i) {
      const Tensor<S>& u = data_[cursor_.next(rng_)];
      const std::size_t start = std::uniform_int_distribution<std::size_t>(0, u.dim(0) - crop)(rng_);
      std::copy_n(u.data() + start * f, crop * f, batch.data() + i * crop * f);
    }
    return batch;
  }

  GradReport step() {
    const std::uint64_t epoch_before = cursor_.epoch;
    const Tensor<S> batch = next_batch();
    StepState<S> st{model_, scorer_, scorer_params_, theta_opt_, scorer_opt_, theta_index_};
    Tensor<S> z_rows;
    GradReport r = train_step(st, batch, config_.train, rng_, &z_rows);
    ++step_;
    r.step = step_;
    if (r.skipped) {
      incidents_.push_back("step " + std::to_string(step_) + ": " + r.incident);
    } else if (cursor_.epoch != epoch_before) {
      if (config_.train.reseed_dead_codes) {
        model_.codebook().reseed_dead(model_.codebook_embeddings(), z_rows, rng_);
      }
      model_.codebook().reset_usage();
    }
    return r;
  }

  std::uint64_t step_count() const { return step_; }
  const RunConfig& config() const { return config_; }
  Model<S>& model() { return model_; }
  const Model<S>& model() const { return model_; }
  const Scorer& scorer() const { return scorer_; }
  ParameterSet<S>& scorer_params() { return scorer_params_; }
  const ParameterSet<S>& scorer_params() const { return scorer_params_; }
  Adam<S>& theta_optimizer() { return theta_opt_; }
  Adam<S>& scorer_optimizer() { return scorer_opt_; }
  const std::vector<std::size_t>& theta_index() const { return theta_index_; }
  std::mt19937_64& rng() { return rng_; }
  const DataCursor& cursor() const { return cursor_; }
  const std::vector<std::string>& incidents() const { return incidents_; }

  io::Archive checkpoint() const {
    io::Archive a;
    a.config_hash = training_config_hash(config_);
    a.put_u64("step", step_);
    a.put_text("config", config_.to_text());
    std::ostringstream rng_state;
    rng_state << rng_;
    a.put_text("rng", rng_state.str());
    for (const auto& p : model_.params()) {
      a.put("param/" + std::string(group_name(p.group)) + "/" + p.name, p.value);
    }
    for (const auto& p : scorer_params_) a.put("param/scorer/" + p.name, p.value);
    const Codebook<S>& cb = model_.codebook();
    a.put("codebook/usage", Shape{cb.usage.size()}, cb.usage);
    a.put("codebook/cluster_size", cb.cluster_size);
    a.put("codebook/embed_sum", cb.embed_sum);
    put_adam(a, "adam/theta", theta_opt_);
    put_adam(a, "adam/scorer", scorer_opt_);
    a.put("cursor/order", Shape{cursor_.order.size()}, cursor_.order);
    a.put_u64("cursor/position", cursor_.position);
    a.put_u64("cursor/epoch", cursor_.epoch);
    return a;
  }

  /// Restores a checkpoint taken from a trainer with the same configuration.
  /// Validates every entry before touching any state.
  void restore(const io::Archive& a) {
    if (a.config_hash != training_config_hash(config_)) {
      throw io::FormatError(io::FormatErrorCode::version, "checkpoint was written with a different configuration");
    }
    auto staged_model = model_.params();
    for (auto& p : staged_model) {
      p.value = checked(a.get_tensor<S>("param/" + std::string(group_name(p.group)) + "/" + p.name), p.value.shape);
    }
    auto staged_scorer = scorer_params_;
    for (auto& p : staged_scorer) p.value = checked(a.get_tensor<S>("param/scorer/" + p.name), p.value.shape);
    Codebook<S> cb = model_.codebook();
    cb.usage = a.get_values<std::uint64_t>("codebook/usage");
    cb.cluster_size = checked(a.get_tensor<S>("codebook/cluster_size"), cb.cluster_size.shape);
    cb.embed_sum = checked(a.get_tensor<S>("codebook/embed_sum"), cb.embed_sum.shape);
    if (cb.usage.size() != model_.codebook().usage.size()) {
      throw io::FormatError(io::FormatErrorCode::truncated, "codebook usage length mismatch");
    }
    Adam<S> theta_opt = theta_opt_, scorer_opt = scorer_opt_;
    get_adam(a, "adam/theta", theta_opt);
    get_adam(a, "adam/scorer", scorer_opt);
    DataCursor cursor;
    cursor.order = a.get_values<std::uint64_t>("cursor/order");
    cursor.position = a.get_u64("cursor/position");
    cursor.epoch = a.get_u64("cursor/epoch");
    if (cursor.order.size() != data_.size() || cursor.position > cursor.order.size()) {
      throw io::FormatError(io::FormatErrorCode::truncated, "data cursor does not match the training set");
    }
    std::mt19937_64 rng;
    std::istringstream rng_state(a.get_text("rng"));
    rng_state >> rng;
    if (!rng_state) throw io::FormatError(io::FormatErrorCode::truncated, "unreadable RNG state");
    const std::uint64_t step = a.get_u64("step");

    model_.params() = std::move(staged_model);
    scorer_params_ = std::move(staged_scorer);
    model_.codebook() = std::move(cb);
    theta_opt_ = std::move(theta_opt);
    scorer_opt_ = std::move(scorer_opt);
    cursor_ = std::move(cursor);
    rng_ = rng;
    step_ = step;
  }

 private:
  static const RunConfig& validated(const RunConfig& c) {
    c.model.validate();
    c.train.validate();
    return c;
  }

  static Tensor<S> checked(Tensor<S> t, const Shape& want) {
    if (t.shape != want) {
      throw io::FormatError(io::FormatErrorCode::truncated,
                            "checkpoint tensor shape " + to_string(t.shape) + ", expected " + to_string(want));
    }
    return t;
  }

  static void put_adam(io::Archive& a, const std::string& prefix, const Adam<S>& opt) {
    a.put_u64(prefix + "/steps", opt.steps());
    for (std::size_t i = 0; i < opt.first_moments().size(); ++i) {
      a.put(prefix + "/m/" + std::to_string(i), opt.first_moments()[i]);
      a.put(prefix + "/v/" + std::to_string(i), opt.second_moments()[i]);
    }
  }

  static void get_adam(const io::Archive& a, const std::string& prefix, Adam<S>& opt) {
    opt.set_steps(a.get_u64(prefix + "/steps"));
    for (std::size_t i = 0; i < opt.first_moments().size(); ++i) {
      auto& m = opt.first_moments()[i];
      auto& v = opt.second_moments()[i];
      m = checked(a.get_tensor<S>(prefix + "/m/" + std::to_string(i)), m.shape);
      v = checked(a.get_tensor<S>(prefix + "/v/" + std::to_string(i)), v.shape);
    }
  }

  RunConfig config_;
  std::mt19937_64 rng_;
  Model<S> model_;
  ParameterSet<S> scorer_params_;
  Scorer scorer_;
  std::vector<std::size_t> theta_index_;
  Adam<S> theta_opt_;
  Adam<S> scorer_opt_;
  std::vector<Tensor<S>> data_;
  DataCursor cursor_;
  std::uint64_t step_ = 0;
  std::vector<std::string> incidents_;
};

/// Loads a checkpoint file (validated in full before returning).
inline io::Archive load_checkpoint(const std::filesystem::path& path) {
  return io::Archive::load(path, kCheckpointMagic, kCheckpointVersion);
}

inline void save_checkpoint(const std::filesystem::path& path, const io::Archive& a) {
  a.save(path, kCheckpointMagic, kCheckpointVersion);
}

/// Restores the configuration stored inside a checkpoint.
inline RunConfig checkpoint_config(const io::Archive& a) {
  RunConfig cfg;
  cfg.merge_text(a.get_text("config"));
  return cfg;
}

/// Rebuilds only the model (weights and codebook) from a checkpoint.
template <class S>
Model<S> model_from_checkpoint(const io::Archive& a) {
  const RunConfig cfg = checkpoint_config(a);
  std::mt19937_64 rng(0);
  Model<S> model(cfg.model, rng);
  for (auto& p : model.params()) {
    Tensor<S> t = a.get_tensor<S>("param/" + std::string(group_name(p.group)) + "/" + p.name);
    if (t.shape != p.value.shape) {
      throw io::FormatError(io::FormatErrorCode::truncated, "checkpoint tensor '" + p.name + "' has the wrong shape");
    }
    p.value = std::move(t);
  }
  model.codebook().usage = a.get_values<std::uint64_t>("codebook/usage");
  model.codebook().cluster_size = a.get_tensor<S>("codebook/cluster_size");
  model.codebook().embed_sum = a.get_tensor<S>("codebook/embed_sum");
  return model;
}

struct RunHooks {
  std::ostream* metrics = nullptr;                  // CSV rows, header written by the caller
  std::filesystem::path checkpoint_path;            // empty: no snapshots
  std::function<void(const GradReport&)> on_step;   // optional observer
};

/// Runs until `config.train.steps` total steps. Snapshots every
/// snapshot_interval steps and at the end. Returns the reports of this call.
template <class S>
std::vector<GradReport> run_training(Trainer<S>& trainer, const RunHooks& hooks) {
  std::vector<GradReport> reports;
  const std::size_t target = trainer.config().train.steps;
  const std::size_t interval = trainer.config().train.snapshot_interval;
  auto snapshot = [&] {
    if (hooks.checkpoint_path.empty()) return;
    try {
      save_checkpoint(hooks.checkpoint_path, trainer.checkpoint());
    } catch (const std::exception& e) {
      throw io::FormatError(io::FormatErrorCode::io, std::string("snapshot failed at step ") +
                                                         std::to_string(trainer.step_count()) +
                                                         " (last good snapshot left in place): " + e.what());
    }
  };
  while (trainer.step_count() < target) {
    GradReport r = trainer.step();
    if (hooks.metrics) *hooks.metrics << metrics_row(r) << '\n';
    if (hooks.on_step) hooks.on_step(r);
    reports.push_back(std::move(r));
    if (interval > 0 && trainer.step_count() % interval == 0) snapshot();
  }
  if (hooks.metrics) hooks.metrics->flush();
  snapshot();
  return reports;
}

}  // namespace disentangle
