// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.
//
// The sweep (codebook sizes 32/64/128, MI on/off, five seeds, default budget)
// dominates the run time. Every trained model and every evaluation number is
// cached under --cache, and interrupted training resumes from its last
// snapshot, so a rerun only repeats what is missing.

#include <malloc.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "disentangle/disentangle.hpp"

namespace fs = std::filesystem;
using namespace disentangle;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string f3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

std::string list_of(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + f3(v[i]);
  return s + "]";
}

void log(const std::string& msg) {
  std::fprintf(stderr, "[acceptance] %s\n", msg.c_str());
  std::fflush(stderr);
}

// ---------------------------------------------------------------------------
// 1. Gradient check

Outcome gradient_check() {
  const GradCheckSuiteReport r = run_grad_check_suite(GradCheckSuiteOptions{});
  double worst = 0.0;
  std::string detail;
  for (const auto& e : r.entries) {
    worst = std::max(worst, e.result.max_rel_error);
    detail += std::string(loss_path_name(e.path)) + "=" + sci(e.result.max_rel_error) + " ";
  }
  detail += "in " + f3(r.seconds) + " s";
  return {r.passed() && worst < 1e-4 && r.seconds < 60.0, detail};
}

// ---------------------------------------------------------------------------
// 2. KL and InfoNCE

// KL(N(mu, var) || N(0, 1)) for one dimension by composite Simpson
// integration of q log(q / p) over mu +- 14 sd.
double kl_by_quadrature(double mu, double var) {
  const double sd = std::sqrt(var), a = mu - 14.0 * sd, b = mu + 14.0 * sd;
  const std::size_t n = 40000;
  const double h = (b - a) / n;
  const double log_norm = 0.5 * std::log(2.0 * M_PI);
  auto integrand = [&](double x) {
    const double z = (x - mu) / sd;
    const double log_q = -0.5 * z * z - std::log(sd) - log_norm;
    const double log_p = -0.5 * x * x - log_norm;
    return std::exp(log_q) * (log_q - log_p);
  };
  double acc = integrand(a) + integrand(b);
  for (std::size_t i = 1; i < n; ++i) acc += integrand(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return acc * h / 3.0;
}

Outcome kl_and_info_nce() {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> log_var_dist(-2.0, 2.0);
  const std::size_t d = ModelConfig{}.style_dim;

  double worst_closed = 0.0;
  for (int point = 0; point < 100; ++point) {
    Tensor<double> mu(Shape{1, d}), lv(Shape{1, d});
    double oracle = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      mu[i] = unit(rng);
      lv[i] = log_var_dist(rng);
      oracle += kl_by_quadrature(mu[i], std::exp(lv[i]));
    }
    Tape<double> tape;
    const double kl = kl_loss(tape.constant(mu), tape.constant(lv)).value().item();
    worst_closed = std::max(worst_closed, std::abs(kl - oracle));
  }

  // Monte Carlo: mean of log q(s) - log p(s) over 1e6 draws s ~ q.
  double worst_mc = 0.0;
  for (int point = 0; point < 3; ++point) {
    std::vector<double> mu(d), var(d);
    for (std::size_t i = 0; i < d; ++i) {
      mu[i] = unit(rng);
      var[i] = std::exp(log_var_dist(rng));
    }
    double acc = 0.0;
    const std::size_t draws = 1000000;
    for (std::size_t n = 0; n < draws; ++n) {
      for (std::size_t i = 0; i < d; ++i) {
        const double z = unit(rng);
        const double s = mu[i] + std::sqrt(var[i]) * z;
        acc += -0.5 * z * z - 0.5 * std::log(var[i]) + 0.5 * s * s;
      }
    }
    const double mc = acc / draws;
    worst_mc = std::max(worst_mc, std::abs(kl_divergence(mu, var) - mc) / mc);
  }

  double worst_constant = 0.0, worst_excess = -1e300;
  std::uniform_int_distribution<std::size_t> k_dist(2, 32);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t k = k_dist(rng);
    Tape<double> tape;
    Tensor<double> scores(Shape{k, k});
    const double scale = std::exp(3.0 * unit(rng));
    for (auto& v : scores.values) v = scale * unit(rng);
    if (trial % 7 == 0) {
      for (std::size_t i = 0; i < k; ++i) scores[i * k + i] += 50.0;  // near-perfect separation
    }
    const double bound = std::log(static_cast<double>(k));
    worst_excess = std::max(worst_excess, info_nce(tape.constant(scores)).value().item() - bound);
    const Tensor<double> constant(Shape{k, k}, scale * unit(rng));
    worst_constant = std::max(worst_constant, std::abs(info_nce(tape.constant(constant)).value().item()));
  }
  const bool pass = worst_closed < 1e-10 && worst_mc < 0.01 && worst_constant < 1e-12 && worst_excess <= 1e-12;
  return {pass, "closed-form err " + sci(worst_closed) + ", MC rel err " + sci(worst_mc) + ", constant-scorer |I| " +
                    sci(worst_constant) + ", max I - log K " + sci(worst_excess)};
}

// ---------------------------------------------------------------------------
// Shared training sweep

struct RunKey {
  std::size_t codebook = 64;
  bool mi = true;
  std::size_t seed = 1;
  std::string name() const {
    return "K" + std::to_string(codebook) + "_mi" + (mi ? "on" : "off") + "_seed" + std::to_string(seed);
  }
};

class Sweep {
 public:
  Sweep(fs::path cache, std::size_t steps, std::size_t seeds)
      : cache_(std::move(cache)), steps_(steps), seeds_(seeds) {
    fs::create_directories(cache_);
    const RunConfig base;
    corpus_ = make_corpus(SynthSpec::generate(base.data), base.splits);
    norm_ = NormStats::from_corpus(corpus_);
    for (const auto* u : corpus_.split(Split::train)) train_.push_back(norm_.normalize(u->features).cast<float>());
  }

  std::size_t seeds() const { return seeds_; }
  std::size_t steps() const { return steps_; }
  const fs::path& cache() const { return cache_; }
  const std::vector<Tensor<float>>& train_data() const { return train_; }

  RunConfig config(const RunKey& k) const {
    RunConfig cfg;
    cfg.model.codebook_size = k.codebook;
    cfg.train.mi_loss = k.mi;
    cfg.train.seed = k.seed;
    cfg.train.steps = steps_;
    return cfg;
  }

  /// Trained model for `k`, training (or resuming) into the cache when needed.
  const Model<float>& model(const RunKey& k) {
    const std::string name = k.name();
    if (auto it = models_.find(name); it != models_.end()) return it->second;
    const fs::path dir = cache_ / name, ckpt = dir / "checkpoint.bin";
    fs::create_directories(dir);
    const RunConfig cfg = config(k);
    bool done = false;
    if (fs::exists(ckpt)) {
      const io::Archive a = load_checkpoint(ckpt);
      done = a.config_hash == training_config_hash(cfg) && a.get_u64("step") == steps_;
    }
    if (!done) {
      Trainer<float> trainer(cfg, train_);
      if (fs::exists(ckpt)) {
        const io::Archive a = load_checkpoint(ckpt);
        if (a.config_hash == training_config_hash(cfg) && a.get_u64("step") <= steps_) trainer.restore(a);
      }
      log("training " + name + " from step " + std::to_string(trainer.step_count()));
      const auto start = std::chrono::steady_clock::now();
      RunHooks hooks;
      hooks.checkpoint_path = ckpt;
      hooks.on_step = [&](const GradReport& r) {
        if (r.step % 2000 == 0) {
          const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
          log(name + " step " + std::to_string(r.step) + " l_rec " + f3(r.losses.reconstruction) + " i_nce " +
              f3(r.losses.info_nce) + " (" + f3(s) + " s)");
        }
      };
      run_training(trainer, hooks);
      if (!trainer.incidents().empty()) log(name + ": " + std::to_string(trainer.incidents().size()) + " skipped steps");
    }
    return models_.emplace(name, model_from_checkpoint<float>(load_checkpoint(ckpt))).first->second;
  }

  /// Evaluation context for seed index `seed` (1-based); the evaluation seed
  /// follows the training seed so per-seed numbers are independent draws.
  const EvalData<float>& eval_data(std::size_t seed) {
    auto it = eval_.find(seed);
    if (it == eval_.end()) {
      EvalOptions opts;
      opts.seed = EvalOptions{}.seed + seed - 1;
      it = eval_.emplace(seed, EvalData<float>(corpus_, norm_, opts)).first;
    }
    return it->second;
  }

  const StyleJudge& judge(std::size_t seed) {
    auto it = judges_.find(seed);
    if (it == judges_.end()) it = judges_.emplace(seed, train_judge(eval_data(seed))).first;
    return it->second;
  }

  /// Evaluation number cached as a text file under the cache directory.
  double cached(const fs::path& rel, const std::function<double()>& compute) {
    const fs::path path = cache_ / rel;
    if (fs::exists(path)) {
      std::ifstream in(path);
      double v = 0.0;
      if (in >> v) return v;
    }
    const double v = compute();
    fs::create_directories(path.parent_path());
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g\n", v);
    write_text(path, buf);
    return v;
  }

  double metric(const RunKey& k, const std::string& what, const std::function<double(const Model<float>&)>& fn) {
    return cached(fs::path(k.name()) / (what + ".txt"), [&] { return fn(model(k)); });
  }

  std::vector<double> over_seeds(std::size_t codebook, bool mi, const std::string& what,
                                 const std::function<double(const Model<float>&, std::size_t)>& fn) {
    std::vector<double> out;
    for (std::size_t s = 1; s <= seeds_; ++s) {
      const RunKey k{codebook, mi, s};
      out.push_back(metric(k, what, [&](const Model<float>& m) { return fn(m, s); }));
    }
    return out;
  }

 private:
  fs::path cache_;
  std::size_t steps_, seeds_;
  Corpus corpus_;
  NormStats norm_;
  std::vector<Tensor<float>> train_;
  std::map<std::string, Model<float>> models_;
  std::map<std::size_t, EvalData<float>> eval_;
  std::map<std::size_t, StyleJudge> judges_;
};

// ---------------------------------------------------------------------------
// 3. Gradient-scaling invariants and the MI-off reduction

Outcome scaling_invariants(Sweep& sweep) {
  // Double precision, so the norm comparison is not dominated by float
  // rounding of the rescaled gradient.
  const fs::path summary = sweep.cache() / "invariants.txt";
  double max_ratio = 0.0, min_cos = 2.0;
  std::size_t active = 0, skipped = 0, steps = 0;
  if (std::ifstream in(summary); !(in >> steps >> max_ratio >> min_cos >> active >> skipped) ||
                                 steps != sweep.steps()) {
    RunConfig cfg = sweep.config(RunKey{64, true, 1});
    cfg.train.snapshot_interval = 0;
    std::vector<Tensor<double>> data;
    for (const auto& u : sweep.train_data()) data.push_back(u.cast<double>());
    Trainer<double> trainer(cfg, std::move(data));
    log("double-precision invariant run, " + std::to_string(sweep.steps()) + " steps");
    max_ratio = 0.0;
    min_cos = 2.0;
    active = skipped = 0;
    RunHooks hooks;
    hooks.on_step = [&](const GradReport& r) {
      if (r.skipped) {
        ++skipped;
        return;
      }
      if (r.g_theta_norm > 0.0) max_ratio = std::max(max_ratio, r.g_b_norm / r.g_theta_norm);
      if (r.g_a_norm > 0.0) {
        ++active;
        min_cos = std::min(min_cos, r.cosine_b_a);
      }
      if (r.step % 2000 == 0) log("invariant run step " + std::to_string(r.step));
    };
    run_training(trainer, hooks);
    steps = sweep.steps();
    std::ostringstream out;
    out.precision(17);
    out << steps << " " << max_ratio << " " << min_cos << " " << active << " " << skipped << "\n";
    write_text(summary, out.str());
  }
  const bool pass = skipped == 0 && active > 0 && max_ratio <= 1.0 + 1e-12 && min_cos >= 1.0 - 1e-6;
  char buf[200];
  std::snprintf(buf, sizeof buf, "max |g_b|/|g_theta| = %.15f, min cos(g_b, g_a) = %.12f over %zu steps with g_a > 0",
                max_ratio, min_cos, active);
  return {pass, buf};
}

Outcome mi_off_is_plain_adam(Sweep& sweep) {
  const RunKey key{64, false, 1};
  const Model<float>& trained = sweep.model(key);
  const RunConfig cfg = sweep.config(key);

  // Reference: the same data stream and RNG, one backward pass on the
  // autoencoder loss, an Adam step and the codebook upkeep. No scorer, no
  // auxiliary gradient.
  Trainer<float> ref(cfg, sweep.train_data());
  const ParameterSet<float> scorer_init = ref.scorer_params();
  Model<float>& model = ref.model();
  for (std::size_t step = 0; step < cfg.train.steps; ++step) {
    const std::uint64_t epoch = ref.cursor().epoch;
    const Tensor<float> batch = ref.next_batch();
    Tape<float> tape;
    Bound<float> p(tape, model.params());
    const ForwardPass<float> f = forward(model, p, tape.constant(batch), Mode::train, &ref.rng());
    tape.backward(f.total);
    const auto grads = p.gradients();
    std::vector<Tensor<float>*> targets;
    std::vector<Tensor<float>> g;
    for (const std::size_t i : ref.theta_index()) {
      targets.push_back(&model.params()[i].value);
      g.push_back(grads[i]);
    }
    ref.theta_optimizer().step(targets, g);
    model.codebook().record_usage(f.content.indices);
    model.codebook().ema_update(model.codebook_embeddings(), f.content.z.value(), f.content.indices);
    if (ref.cursor().epoch != epoch) {
      if (cfg.train.reseed_dead_codes) model.codebook().reseed_dead(model.codebook_embeddings(), f.content.z.value(), ref.rng());
      model.codebook().reset_usage();
    }
    if ((step + 1) % 2000 == 0) log("plain-Adam reference step " + std::to_string(step + 1));
  }

  std::size_t differing = 0;
  for (std::size_t i = 0; i < model.params().size(); ++i) differing += !(model.params()[i].value == trained.params()[i].value);
  const bool codebook_same = model.codebook().cluster_size == trained.codebook().cluster_size &&
                             model.codebook().embed_sum == trained.codebook().embed_sum;
  const io::Archive ckpt = load_checkpoint(sweep.cache() / key.name() / "checkpoint.bin");
  std::size_t scorer_moved = 0;
  for (const auto& p : scorer_init) {
    scorer_moved += !(ckpt.get_tensor<float>("param/scorer/" + p.name) == p.value);
  }
  const bool pass = differing == 0 && codebook_same && scorer_moved == 0;
  return {pass, std::to_string(differing) + " of " + std::to_string(model.params().size()) +
                    " parameter tensors differ after " + std::to_string(cfg.train.steps) +
                    " steps; codebook statistics " + (codebook_same ? "equal" : "differ") + "; " +
                    std::to_string(scorer_moved) + " scorer tensors moved"};
}

// ---------------------------------------------------------------------------
// 4-7. Sweep criteria

Outcome default_config_probes(Sweep& sweep, bool content) {
  const auto acc = content ? sweep.over_seeds(64, true, "content_probe",
                                              [&](const Model<float>& m, std::size_t s) {
                                                return content_probe_accuracy(m, sweep.eval_data(s));
                                              })
                           : sweep.over_seeds(64, true, "style_probe_mu", [&](const Model<float>& m, std::size_t s) {
                               return style_probe_accuracy(m, sweep.eval_data(s), Representation::style_mu);
                             });
  const bool pass = *std::min_element(acc.begin(), acc.end()) >= 0.90;
  return {pass, std::string(content ? "symbol probe on codes" : "style probe on s_mu") + " per seed " + list_of(acc) +
                    ", mean " + f3(mean_of(acc)) + " (every seed >= 0.90)"};
}

Outcome style_transfer(Sweep& sweep) {
  std::vector<double> target, source;
  for (std::size_t s = 1; s <= sweep.seeds(); ++s) {
    const RunKey k{64, true, s};
    auto ranking = [&](bool tgt) {
      return sweep.metric(k, tgt ? "rank_target_top1" : "rank_source_top1", [&](const Model<float>& m) {
        const StyleTransferReport r = style_ranking_eval(m, sweep.eval_data(s), sweep.judge(s));
        return tgt ? r.target.top1 : r.source.top1;
      });
    };
    target.push_back(ranking(true));
    source.push_back(ranking(false));
  }
  std::size_t wins = 0;
  for (std::size_t i = 0; i < target.size(); ++i) wins += target[i] > source[i];
  const std::size_t needed = (4 * sweep.seeds() + 4) / 5;
  return {wins >= needed, "target top-1 " + list_of(target) + " vs source top-1 " + list_of(source) + ": " +
                              std::to_string(wins) + "/" + std::to_string(sweep.seeds()) + " seeds"};
}

const std::size_t kSizes[] = {32, 64, 128};

double shuffle_ser(Sweep& sweep, std::size_t codebook, bool mi) {
  return mean_of(sweep.over_seeds(codebook, mi, "ser_shuffle", [&](const Model<float>& m, std::size_t s) {
    return content_eval(m, sweep.eval_data(s), ShuffleMode::shuffle).ser;
  }));
}

Outcome ser_versus_codebook(Sweep& sweep) {
  std::map<std::pair<std::size_t, bool>, double> ser;
  for (const bool mi : {true, false}) {
    for (const std::size_t k : kSizes) ser[{k, mi}] = shuffle_ser(sweep, k, mi);
  }
  bool monotone = true, mi_helps = true;
  for (std::size_t i = 1; i < std::size(kSizes); ++i) monotone = monotone && ser[{kSizes[i], true}] < ser[{kSizes[i - 1], true}];
  for (const std::size_t k : kSizes) mi_helps = mi_helps && ser[{k, true}] <= ser[{k, false}];
  std::string detail = "mean shuffle SER (MI / no-MI):";
  for (const std::size_t k : kSizes) detail += " K=" + std::to_string(k) + " " + f3(ser[{k, true}]) + "/" + f3(ser[{k, false}]);
  detail += std::string("; strictly decreasing with K (MI): ") + (monotone ? "yes" : "no") +
            "; MI <= no-MI at every K: " + (mi_helps ? "yes" : "no");
  return {monotone && mi_helps, detail};
}

Outcome code_leakage(Sweep& sweep) {
  auto leak = [&](bool mi) {
    return sweep.over_seeds(32, mi, "style_probe_codes", [&](const Model<float>& m, std::size_t s) {
      return style_probe_accuracy(m, sweep.eval_data(s), Representation::codes);
    });
  };
  const auto on = leak(true), off = leak(false);
  return {mean_of(on) < mean_of(off), "K=32 style probe on codes: MI " + list_of(on) + " mean " + f3(mean_of(on)) +
                                          ", no-MI " + list_of(off) + " mean " + f3(mean_of(off))};
}

Outcome few_shot(Sweep& sweep) {
  auto frozen = [&](bool mi, std::size_t shots) {
    return mean_of(sweep.over_seeds(64, mi, "fewshot_frozen_" + std::to_string(shots),
                                    [&](const Model<float>& m, std::size_t s) {
                                      return few_shot_frozen(m, sweep.eval_data(s), shots);
                                    }));
  };
  auto scratch = [&](std::size_t shots) {
    std::vector<double> acc;
    const RunConfig cfg;
    for (std::size_t s = 1; s <= sweep.seeds(); ++s) {
      acc.push_back(sweep.cached("scratch/seed" + std::to_string(s) + "_shots" + std::to_string(shots) + ".txt", [&] {
        return few_shot_scratch(cfg.model, sweep.eval_data(s), shots, cfg.train.crop_frames);
      }));
    }
    return mean_of(acc);
  };
  const double mi1 = frozen(true, 1), mi3 = frozen(true, 3), off1 = frozen(false, 1), off3 = frozen(false, 3);
  const double sc1 = scratch(1), sc3 = scratch(3);
  const bool gap = mi1 - sc1 >= 0.30 && off1 - sc1 >= 0.30;
  const bool more_shots = mi3 >= mi1 && off3 >= off1;
  const bool mi_better = mi1 >= off1 && mi3 >= off3;
  return {gap && more_shots && mi_better,
          "mean accuracy 1/3-shot: MI " + f3(mi1) + "/" + f3(mi3) + ", no-MI " + f3(off1) + "/" + f3(off3) + ", scratch " +
              f3(sc1) + "/" + f3(sc3) + "; frozen - scratch at 1 shot >= 0.30: " + (gap ? "yes" : "no") +
              "; 3-shot >= 1-shot: " + (more_shots ? "yes" : "no") + "; MI >= no-MI: " + (mi_better ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 8. Reproducibility and checkpoint integrity

Outcome reproducibility(Sweep& sweep) {
  RunConfig cfg;
  cfg.train.steps = 200;
  cfg.train.snapshot_interval = 0;
  const fs::path dir = sweep.cache() / "repro";
  fs::remove_all(dir);
  fs::create_directories(dir);

  auto run = [&](const RunConfig& c, Trainer<float>* resume_into, const fs::path& ckpt) {
    std::ostringstream metrics;
    if (resume_into) {
      run_training(*resume_into, RunHooks{&metrics, ckpt, {}});
    } else {
      Trainer<float> t(c, sweep.train_data());
      run_training(t, RunHooks{&metrics, ckpt, {}});
    }
    return metrics.str();
  };
  const std::string a = run(cfg, nullptr, dir / "a.bin");
  const std::string b = run(cfg, nullptr, dir / "b.bin");
  const bool same_metrics = a == b && io::read_file(dir / "a.bin") == io::read_file(dir / "b.bin");

  RunConfig half = cfg;
  half.train.steps = 100;
  std::string resumed = run(half, nullptr, dir / "half.bin");
  Trainer<float> tail(cfg, sweep.train_data());
  tail.restore(load_checkpoint(dir / "half.bin"));
  resumed += run(cfg, &tail, dir / "resumed.bin");
  const bool resume_bitwise = resumed == a && io::read_file(dir / "resumed.bin") == io::read_file(dir / "a.bin");

  // Corruptions: each must be rejected and leave the trainer untouched.
  const auto good = io::read_file(dir / "half.bin");
  Trainer<float> target(cfg, sweep.train_data());
  const io::Archive before = target.checkpoint();
  std::size_t rejected = 0, attempts = 0;
  auto attempt = [&](const std::vector<std::uint8_t>& bytes) {
    ++attempts;
    io::write_file_atomic(dir / "bad.bin", bytes);
    try {
      target.restore(load_checkpoint(dir / "bad.bin"));
    } catch (const io::FormatError&) {
      ++rejected;
    }
  };
  for (const std::size_t pos : {std::size_t{2}, std::size_t{6}, good.size() / 3, good.size() / 2, good.size() - 2}) {
    auto bad = good;
    bad[pos] ^= 0x5a;
    attempt(bad);
  }
  attempt(std::vector<std::uint8_t>(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(good.size() / 2)));
  attempt({});
  // Structurally valid but incomplete: the failure surfaces after some entries were read.
  {
    ++attempts;
    io::Archive partial = load_checkpoint(dir / "half.bin");
    partial.erase("cursor/epoch");
    try {
      target.restore(partial);
    } catch (const io::FormatError&) {
      ++rejected;
    }
  }
  const bool untouched = target.checkpoint().serialize(kCheckpointMagic, kCheckpointVersion) ==
                         before.serialize(kCheckpointMagic, kCheckpointVersion);
  const bool pass = same_metrics && resume_bitwise && rejected == attempts && untouched;
  return {pass, std::string("same-seed metrics and checkpoints identical: ") + (same_metrics ? "yes" : "no") +
                    "; resume at step 100 bitwise: " + (resume_bitwise ? "yes" : "no") + "; corrupted checkpoints rejected " +
                    std::to_string(rejected) + "/" + std::to_string(attempts) + ", trainer state unchanged: " +
                    (untouched ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  // Same heap tuning as the command-line tool.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);

  CLI::App app{"Acceptance checks"};
  std::string cache = "acceptance_cache";
  std::size_t steps = TrainConfig{}.steps, seeds = 5;
  app.add_option("--cache", cache, "Directory for trained models and cached evaluation results");
  app.add_option("--steps", steps, "Training steps per sweep run (default: the standard budget)");
  app.add_option("--seeds", seeds, "Training seeds per configuration")->check(CLI::Range(1, 100));
  CLI11_PARSE(app, argc, argv);
  if (steps != TrainConfig{}.steps || seeds != 5) {
    cache += "_steps" + std::to_string(steps) + "_seeds" + std::to_string(seeds);
    log("reduced budget; results are not comparable with the standard sweep");
  }

  std::setvbuf(stdout, nullptr, _IOLBF, 0);
  Sweep sweep(cache, steps, seeds);
  bool all = true;
  auto report = [&](const char* name, const std::function<Outcome()>& check) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    all = all && o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    log(std::string(name) + " took " + f3(s) + " s");
  };

  report("grad-check", gradient_check);
  report("kl-and-infonce", kl_and_info_nce);
  report("scaling-invariants", [&] { return scaling_invariants(sweep); });
  report("mi-off-plain-adam", [&] { return mi_off_is_plain_adam(sweep); });
  report("content-probe", [&] { return default_config_probes(sweep, true); });
  report("style-probe", [&] { return default_config_probes(sweep, false); });
  report("style-transfer-ranking", [&] { return style_transfer(sweep); });
  report("ser-vs-codebook", [&] { return ser_versus_codebook(sweep); });
  report("code-leakage", [&] { return code_leakage(sweep); });
  report("few-shot", [&] { return few_shot(sweep); });
  report("reproducibility", [&] { return reproducibility(sweep); });
  return all ? 0 : 1;
}
