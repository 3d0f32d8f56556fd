// Command-line driver: data generation, training, evaluation, gradient check.

#include <malloc.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "disentangle/disentangle.hpp"

namespace fs = std::filesystem;
using namespace disentangle;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void apply_env_seed(RunConfig& cfg) {
  if (const char* env = std::getenv("DISENTANGLE_SEED")) {
    cfg.set("train.seed", env);
    cfg.set("data.seed", env);
  }
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
}

void merge_file(RunConfig& cfg, const std::string& path) {
  if (path.empty()) return;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  cfg.merge_text(ss.str());
}

bool non_empty_dir(const fs::path& p) { return fs::exists(p) && !fs::is_empty(p); }

std::vector<Tensor<float>> training_matrices(const Corpus& corpus, const NormStats& norm) {
  std::vector<Tensor<float>> out;
  for (const auto* u : corpus.split(Split::train)) out.push_back(norm.normalize(u->features).cast<float>());
  return out;
}

Corpus load_data(const fs::path& dir, NormStats& norm) {
  if (!fs::exists(dir / "manifest.csv")) throw DataError("no manifest.csv in " + dir.string());
  Corpus corpus = load_corpus(dir);
  norm = NormStats::from_csv(read_text(dir / "norm_stats.csv"));
  return corpus;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string spec, out;
  std::uint64_t seed = 0;
  bool seed_given = false, force = false;
  std::vector<std::string> sets;
};

int gen_data(const GenDataArgs& a) {
  RunConfig cfg;
  apply_env_seed(cfg);
  merge_file(cfg, a.spec);
  apply_overrides(cfg, a.sets);
  if (a.seed_given) cfg.data.seed = a.seed;
  cfg.data.validate();
  const fs::path out(a.out);
  if (non_empty_dir(out) && !a.force) {
    throw ConfigError("output directory " + out.string() + " is not empty (use --force)");
  }
  std::cout << cfg.to_text({"data."});
  const SynthSpec spec = SynthSpec::generate(cfg.data);
  const Corpus corpus = make_corpus(spec, cfg.splits);
  fs::create_directories(out);
  write_corpus(out, corpus);
  write_text(out / "config.txt", cfg.to_text({"data."}));
  std::printf("wrote %zu utterances to %s (manifest hash %016llx)\n", corpus.utterances.size(), out.string().c_str(),
              static_cast<unsigned long long>(io::fnv1a(manifest_csv(corpus))));
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out;
  std::size_t codebook_size = 0;
  std::string mi_loss;
  std::size_t steps = 0;
  bool steps_given = false;
  std::uint64_t seed = 0;
  bool seed_given = false, resume = false;
  std::vector<std::string> sets;
};

/// Keeps metrics rows up to `step`, dropping rows written after the last snapshot.
void truncate_metrics(const fs::path& path, std::uint64_t step) {
  std::ifstream in(path);
  std::string line, kept;
  std::getline(in, line);
  kept = std::string(kMetricsHeader) + "\n";
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (std::stoull(line.substr(0, line.find(','))) <= step) kept += line + "\n";
  }
  in.close();
  write_text(path, kept);
}

int train(const TrainArgs& a) {
  RunConfig cfg;
  apply_env_seed(cfg);
  merge_file(cfg, a.config);
  apply_overrides(cfg, a.sets);
  if (a.codebook_size) cfg.model.codebook_size = a.codebook_size;
  if (!a.mi_loss.empty()) cfg.set("train.mi_loss", a.mi_loss);
  if (a.steps_given) cfg.train.steps = a.steps;
  if (a.seed_given) cfg.train.seed = a.seed;

  NormStats norm;
  const Corpus corpus = load_data(a.data, norm);
  cfg.data = corpus.spec.options;
  cfg.validate();

  const fs::path out(a.out);
  const fs::path ckpt = out / "checkpoint.bin", metrics_path = out / "metrics.csv";
  if (!a.resume && fs::exists(ckpt)) {
    throw ConfigError(out.string() + " already holds a checkpoint (use --resume to continue)");
  }
  fs::create_directories(out);
  write_text(out / "config.txt", cfg.to_text());
  std::cout << "model.codebook_size = " << cfg.model.codebook_size << "\ntrain.mi_loss = "
            << (cfg.train.mi_loss ? "on" : "off") << "\ntrain.seed = " << cfg.train.seed << "\ntrain.steps = "
            << cfg.train.steps << "\n";

  Trainer<float> trainer(cfg, training_matrices(corpus, norm));
  if (a.resume && fs::exists(ckpt)) {
    trainer.restore(load_checkpoint(ckpt));
    truncate_metrics(metrics_path, trainer.step_count());
    std::printf("resumed at step %llu\n", static_cast<unsigned long long>(trainer.step_count()));
  } else {
    write_text(metrics_path, std::string(kMetricsHeader) + "\n");
  }

  std::ofstream metrics(metrics_path, std::ios::app);
  std::size_t consecutive_skips = 0;
  constexpr std::size_t kMaxConsecutiveSkips = 10;
  std::ofstream incidents;
  RunHooks hooks;
  hooks.metrics = &metrics;
  hooks.checkpoint_path = ckpt;
  hooks.on_step = [&](const GradReport& r) {
    if (r.skipped) {
      if (!incidents.is_open()) incidents.open(out / "incidents.log", std::ios::app);
      incidents << "step " << r.step << ": " << r.incident << "\n";
      if (++consecutive_skips >= kMaxConsecutiveSkips) {
        throw NumericalError("aborting after " + std::to_string(consecutive_skips) + " consecutive skipped steps: " +
                             r.incident);
      }
    } else {
      consecutive_skips = 0;
    }
    if (r.step % 1000 == 0) {
      std::printf("step %llu  l_rec %.4f  l_vq %.4f  l_kl %.4f  i_nce %.4f\n", static_cast<unsigned long long>(r.step),
                  r.losses.reconstruction, r.losses.vq, r.losses.kl, r.losses.info_nce);
      std::fflush(stdout);
    }
  };
  run_training(trainer, hooks);
  std::printf("finished at step %llu; checkpoint %s\n", static_cast<unsigned long long>(trainer.step_count()),
              ckpt.string().c_str());
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::vector<std::string> checkpoints;
  std::string data, protocol, out;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

struct LoadedRun {
  RunConfig config;
  Model<float> model;
};

std::string csv_line(const std::vector<std::string>& cells) {
  std::string s;
  for (std::size_t i = 0; i < cells.size(); ++i) s += (i ? "," : "") + cells[i];
  return s + "\n";
}

int evaluate(const EvalArgs& a) {
  NormStats norm;
  const Corpus corpus = load_data(a.data, norm);
  std::vector<LoadedRun> runs;
  for (const auto& path : a.checkpoints) {
    const io::Archive archive = load_checkpoint(path);
    runs.push_back(LoadedRun{checkpoint_config(archive), model_from_checkpoint<float>(archive)});
    if (runs.back().config.model.feature_dim != corpus.spec.options.feature_dim) {
      throw DataError("checkpoint " + path + " expects feature_dim " +
                      std::to_string(runs.back().config.model.feature_dim));
    }
  }
  EvalOptions options = runs.front().config.eval;
  if (a.seed_given) options.seed = a.seed;
  const EvalData<float> data(corpus, norm, options);
  const fs::path out = a.out.empty() ? fs::path(a.checkpoints.front()).parent_path() : fs::path(a.out);
  if (!out.empty()) fs::create_directories(out);
  const std::string seed = std::to_string(options.seed);
  std::string csv;

  if (a.protocol == "content") {
    csv = csv_line({"config", "seed", "mode", "ser", "edits", "reference_symbols", "utterances", "code_probe_accuracy"});
    for (const auto& run : runs) {
      const double probe = content_probe_accuracy(run.model, data);
      for (const ShuffleMode mode : {ShuffleMode::no_shuffle, ShuffleMode::shuffle}) {
        const ContentReport r = content_eval(run.model, data, mode);
        csv += csv_line({run_label(run.config), seed, shuffle_name(mode), fmt(r.ser), std::to_string(r.edits),
                         std::to_string(r.reference_symbols), std::to_string(r.utterances), fmt(probe)});
        std::printf("%s  %s SER %.4f\n", run_label(run.config).c_str(), shuffle_name(mode), r.ser);
      }
      std::printf("%s  code probe accuracy %.4f\n", run_label(run.config).c_str(), probe);
    }
    write_text(out / "content_eval.csv", csv);
  } else if (a.protocol == "style") {
    const StyleJudge judge = train_judge(data);
    csv = csv_line({"config", "seed", "reference", "avg_rank", "top1", "top3", "top5", "utterances", "judge_accuracy"});
    for (const auto& run : runs) {
      const StyleTransferReport r = style_ranking_eval(run.model, data, judge);
      for (const auto& [name, rep] : {std::pair<const char*, const RankingReport*>{"target", &r.target},
                                      std::pair<const char*, const RankingReport*>{"source", &r.source}}) {
        csv += csv_line({run_label(run.config), seed, name, fmt(rep->average_rank), fmt(rep->top1), fmt(rep->top3),
                         fmt(rep->top5), std::to_string(rep->ranks.size()), fmt(r.judge_accuracy)});
        std::printf("%s  %s style: avg rank %.3f top1 %.3f top3 %.3f top5 %.3f\n", run_label(run.config).c_str(), name,
                    rep->average_rank, rep->top1, rep->top3, rep->top5);
      }
    }
    write_text(out / "style_rank.csv", csv);
  } else if (a.protocol == "fewshot") {
    csv = csv_line({"config", "seed", "scenario", "shots", "accuracy"});
    const RunConfig& base = runs.front().config;
    for (const std::size_t shots : {1, 3}) {
      const double acc = few_shot_scratch(base.model, data, shots, base.train.crop_frames);
      csv += csv_line({"scratch", seed, "scratch", std::to_string(shots), fmt(acc)});
      std::printf("scratch  %zu-shot accuracy %.4f\n", shots, acc);
    }
    for (const auto& run : runs) {
      const char* scenario = run.config.train.mi_loss ? "mi" : "no-mi";
      for (const std::size_t shots : {1, 3}) {
        const double acc = few_shot_frozen(run.model, data, shots);
        csv += csv_line({run_label(run.config), seed, scenario, std::to_string(shots), fmt(acc)});
        std::printf("%-6s %zu-shot accuracy %.4f  (%s)\n", scenario, shots, acc, run_label(run.config).c_str());
      }
    }
    write_text(out / "few_shot.csv", csv);
  } else {
    csv = csv_line({"config", "seed", "representation", "style_accuracy"});
    for (const auto& run : runs) {
      for (const Representation rep : {Representation::codes, Representation::style_mu}) {
        const double acc = style_probe_accuracy(run.model, data, rep);
        csv += csv_line({run_label(run.config), seed, representation_name(rep), fmt(acc)});
        std::printf("%s  style probe on %s: %.4f\n", run_label(run.config).c_str(), representation_name(rep), acc);
      }
    }
    write_text(out / "leakage.csv", csv);
  }
  return kOk;
}

// ---------------------------------------------------------------------------

int grad_check_cmd(const std::string& size) {
  if (size != "tiny") throw ConfigError("grad-check supports --size tiny only");
  const GradCheckSuiteReport r = run_grad_check_suite(GradCheckSuiteOptions{});
  std::printf("%-11s %-14s %-28s %s\n", "component", "max_rel_error", "worst_parameter", "status");
  for (const auto& e : r.entries) {
    std::printf("%-11s %-14.3e %-28s %s\n", loss_path_name(e.path), e.result.max_rel_error, e.parameter.c_str(),
                e.passed ? "pass" : "FAIL");
  }
  std::printf("%zu parameters, %.2f s\n", r.parameters, r.seconds);
  return r.passed() ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  // Tapes allocate and free many large buffers per step; keep them in the heap
  // instead of returning them to the OS each time.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);

  CLI::App app{"Content/style disentangling autoencoder on synthetic speech-like features"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic corpus directory");
  gen_cmd->add_option("--spec", gen.spec, "Config file with data.* keys (defaults when omitted)");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  auto* gen_seed = gen_cmd->add_option("--seed", gen.seed, "Generation seed");
  gen_cmd->add_flag("--force", gen.force, "Allow writing into a non-empty directory");
  gen_cmd->add_option("--set", gen.sets, "Extra key=value overrides");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--config", tr.config, "Config file (key = value lines)");
  train_cmd->add_option("--data", tr.data, "Corpus directory")->required();
  train_cmd->add_option("--out", tr.out, "Run directory")->required();
  train_cmd->add_option("--codebook-size", tr.codebook_size, "Number of VQ codes");
  train_cmd->add_option("--mi-loss", tr.mi_loss, "on|off")->check(CLI::IsMember({"on", "off"}));
  auto* train_steps = train_cmd->add_option("--steps", tr.steps, "Total training steps");
  auto* train_seed = train_cmd->add_option("--seed", tr.seed, "Training seed");
  train_cmd->add_flag("--resume", tr.resume, "Continue from the run directory's checkpoint");
  train_cmd->add_option("--set", tr.sets, "Extra key=value overrides");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate trained checkpoints");
  eval_cmd->add_option("--checkpoint", ev.checkpoints, "Checkpoint file (repeatable)")->required();
  eval_cmd->add_option("--data", ev.data, "Corpus directory")->required();
  eval_cmd->add_option("--protocol", ev.protocol, "content|style|fewshot|leakage")
      ->required()
      ->check(CLI::IsMember({"content", "style", "fewshot", "leakage"}));
  eval_cmd->add_option("--out", ev.out, "Report directory (default: next to the first checkpoint)");
  auto* eval_seed = eval_cmd->add_option("--seed", ev.seed, "Evaluation seed");

  std::string size = "tiny";
  auto* gc_cmd = app.add_subcommand("grad-check", "Finite-difference check of every loss path");
  gc_cmd->add_option("--size", size, "Model size")->check(CLI::IsMember({"tiny"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (gen_cmd->parsed()) {
      gen.seed_given = gen_seed->count() > 0;
      return gen_data(gen);
    }
    if (train_cmd->parsed()) {
      tr.steps_given = train_steps->count() > 0;
      tr.seed_given = train_seed->count() > 0;
      return train(tr);
    }
    if (eval_cmd->parsed()) {
      ev.seed_given = eval_seed->count() > 0;
      return evaluate(ev);
    }
    return grad_check_cmd(size);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kUsage;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return kNumerical;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "invalid configuration: %s\n", e.what());
    return kUsage;
  } catch (const io::FormatError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const EvalError& e) {
    std::fprintf(stderr, "evaluation refused: %s\n", e.what());
    return kData;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kData;
  }
}
