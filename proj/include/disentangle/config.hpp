#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "disentangle/data.hpp"
#include "disentangle/model.hpp"

namespace disentangle {

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t steps = 20000;
  double learning_rate = 3e-4;
  double scorer_learning_rate = 3e-4;
  bool mi_loss = true;
  std::uint64_t seed = 1;
  std::size_t snapshot_interval = 1000;  // 0 disables intermediate snapshots
  std::size_t crop_frames = 32;
  bool reseed_dead_codes = true;

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw std::invalid_argument("train." + field + ": " + why);
    };
    if (batch_size < 1) fail("batch_size", "must be >= 1");
    if (mi_loss && batch_size < 2) fail("batch_size", "must be >= 2 when the MI loss is enabled");
    if (!(learning_rate > 0.0)) fail("learning_rate", "must be > 0");
    if (!(scorer_learning_rate > 0.0)) fail("scorer_learning_rate", "must be > 0");
    if (crop_frames < 8 || crop_frames % 2 != 0) fail("crop_frames", "must be even and >= 8");
  }
};

struct EvalOptions {
  std::uint64_t seed = 7;
  std::size_t probe_steps = 400;
  double probe_learning_rate = 0.05;
  std::size_t fewshot_steps = 300;
  double fewshot_learning_rate = 3e-3;
  std::size_t probe_train_utterances = 400;  // train-split utterances used to fit probes

  void validate() const {
    if (probe_steps < 1) throw std::invalid_argument("eval.probe_steps: must be >= 1");
    if (fewshot_steps < 1) throw std::invalid_argument("eval.fewshot_steps: must be >= 1");
    if (!(probe_learning_rate > 0.0)) throw std::invalid_argument("eval.probe_learning_rate: must be > 0");
    if (!(fewshot_learning_rate > 0.0)) throw std::invalid_argument("eval.fewshot_learning_rate: must be > 0");
    if (probe_train_utterances < 1) throw std::invalid_argument("eval.probe_train_utterances: must be >= 1");
  }
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Everything a run needs, with a flat `section.key = value` text form.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SynthOptions data;
  SplitCounts splits;
  EvalOptions eval;

  /// Applies one key. Unknown keys and malformed values raise ConfigError.
  void set(const std::string& key, const std::string& value) {
    const auto& table = registry();
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    try {
      it->second.set(*this, value);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("bad value '" + value + "' for " + key + ": " + e.what());
    }
  }

  std::string get(const std::string& key) const {
    const auto& table = registry();
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second.get(*this);
  }

  /// Parses `key = value` lines; '#' starts a comment.
  void merge_text(const std::string& text) {
    std::stringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
    }
  }

  /// Canonical serialization of the keys under the given prefixes (all when empty).
  std::string to_text(const std::vector<std::string>& prefixes = {}) const {
    std::string out;
    for (const auto& [key, entry] : registry()) {
      bool keep = prefixes.empty();
      for (const auto& p : prefixes) keep = keep || key.rfind(p, 0) == 0;
      if (keep) out += key + " = " + entry.get(*this) + "\n";
    }
    return out;
  }

  void validate() const {
    model.validate();
    train.validate();
    data.validate();
    eval.validate();
    if (model.feature_dim != data.feature_dim) {
      throw ConfigError("model.feature_dim (" + std::to_string(model.feature_dim) + ") must equal data.feature_dim (" +
                        std::to_string(data.feature_dim) + ")");
    }
  }

  static std::vector<std::string> keys() {
    std::vector<std::string> out;
    for (const auto& [k, _] : registry()) out.push_back(k);
    return out;
  }

 private:
  struct Entry {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
  };

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static std::size_t parse_size(const std::string& v) {
    std::size_t pos = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("must be non-negative");
    const unsigned long long n = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return static_cast<std::size_t>(n);
  }
  static double parse_double(const std::string& v) {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return d;
  }
  static bool parse_bool(const std::string& v) {
    if (v == "on" || v == "true" || v == "1") return true;
    if (v == "off" || v == "false" || v == "0") return false;
    throw std::invalid_argument("expected on|off");
  }
  static std::set<std::size_t> parse_set(const std::string& v) {
    std::set<std::size_t> out;
    std::stringstream in(v);
    std::string item;
    while (std::getline(in, item, ',')) {
      if (!trim(item).empty()) out.insert(parse_size(trim(item)));
    }
    return out;
  }
  static std::string fmt_double(double d) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", d);
    return buf;
  }
  static std::string fmt_set(const std::set<std::size_t>& s) {
    std::string out;
    for (const std::size_t v : s) out += (out.empty() ? "" : ",") + std::to_string(v);
    return out;
  }

  template <class Field>
  static Entry size_entry(Field field) {
    return {[field](RunConfig& c, const std::string& v) { field(c) = parse_size(v); },
            [field](const RunConfig& c) { return std::to_string(field(c)); }};
  }
  template <class Field>
  static Entry double_entry(Field field) {
    return {[field](RunConfig& c, const std::string& v) { field(c) = parse_double(v); },
            [field](const RunConfig& c) { return fmt_double(field(c)); }};
  }
  template <class Field>
  static Entry bool_entry(Field field) {
    return {[field](RunConfig& c, const std::string& v) { field(c) = parse_bool(v); },
            [field](const RunConfig& c) { return std::string(field(c) ? "on" : "off"); }};
  }
  template <class Field>
  static Entry set_entry(Field field) {
    return {[field](RunConfig& c, const std::string& v) { field(c) = parse_set(v); },
            [field](const RunConfig& c) { return fmt_set(field(c)); }};
  }

  static const std::map<std::string, Entry>& registry() {
    static const std::map<std::string, Entry> table = [] {
      std::map<std::string, Entry> t;
      // model
      t["model.feature_dim"] = size_entry([](auto& c) -> auto& { return c.model.feature_dim; });
      t["model.content_dim"] = size_entry([](auto& c) -> auto& { return c.model.content_dim; });
      t["model.style_dim"] = size_entry([](auto& c) -> auto& { return c.model.style_dim; });
      t["model.codebook_size"] = size_entry([](auto& c) -> auto& { return c.model.codebook_size; });
      t["model.kernel"] = size_entry([](auto& c) -> auto& { return c.model.kernel; });
      t["model.content_layers"] = size_entry([](auto& c) -> auto& { return c.model.content_layers; });
      t["model.content_width"] = size_entry([](auto& c) -> auto& { return c.model.content_width; });
      t["model.content_stride_layers"] =
          set_entry([](auto& c) -> auto& { return c.model.content_stride_layers; });
      t["model.style_layers"] = size_entry([](auto& c) -> auto& { return c.model.style_layers; });
      t["model.style_width"] = size_entry([](auto& c) -> auto& { return c.model.style_width; });
      t["model.style_stride_layers"] =
          set_entry([](auto& c) -> auto& { return c.model.style_stride_layers; });
      t["model.decoder_layers"] = size_entry([](auto& c) -> auto& { return c.model.decoder_layers; });
      t["model.decoder_width"] = size_entry([](auto& c) -> auto& { return c.model.decoder_width; });
      t["model.decoder_concat_layers"] =
          set_entry([](auto& c) -> auto& { return c.model.decoder_concat_layers; });
      t["model.scorer_hidden"] = size_entry([](auto& c) -> auto& { return c.model.scorer_hidden; });
      t["model.gamma"] = double_entry([](auto& c) -> auto& { return c.model.gamma; });
      t["model.reconstruction"] = Entry{
          [](RunConfig& c, const std::string& v) {
            if (v == "mean") c.model.reconstruction = ReconstructionMode::mean;
            else if (v == "literal") c.model.reconstruction = ReconstructionMode::literal;
            else if (v == "utterance") c.model.reconstruction = ReconstructionMode::utterance;
            else throw std::invalid_argument("expected mean|literal|utterance");
          },
          [](const RunConfig& c) {
            switch (c.model.reconstruction) {
              case ReconstructionMode::mean: return std::string("mean");
              case ReconstructionMode::literal: return std::string("literal");
              case ReconstructionMode::utterance: return std::string("utterance");
            }
            return std::string();
          }};
      t["model.codebook_mode"] = Entry{
          [](RunConfig& c, const std::string& v) {
            if (v == "ema") c.model.codebook.mode = CodebookMode::ema;
            else if (v == "loss") c.model.codebook.mode = CodebookMode::loss;
            else throw std::invalid_argument("expected ema|loss");
          },
          [](const RunConfig& c) { return std::string(c.model.codebook.mode == CodebookMode::ema ? "ema" : "loss"); }};
      t["model.codebook_decay"] = double_entry([](auto& c) -> auto& { return c.model.codebook.decay; });
      t["model.codebook_epsilon"] = double_entry([](auto& c) -> auto& { return c.model.codebook.epsilon; });
      t["model.codebook_loss_weight"] = double_entry([](auto& c) -> auto& { return c.model.codebook_loss_weight; });
      // train
      t["train.batch_size"] = size_entry([](auto& c) -> auto& { return c.train.batch_size; });
      t["train.steps"] = size_entry([](auto& c) -> auto& { return c.train.steps; });
      t["train.learning_rate"] = double_entry([](auto& c) -> auto& { return c.train.learning_rate; });
      t["train.scorer_learning_rate"] = double_entry([](auto& c) -> auto& { return c.train.scorer_learning_rate; });
      t["train.mi_loss"] = bool_entry([](auto& c) -> auto& { return c.train.mi_loss; });
      t["train.seed"] = size_entry([](auto& c) -> auto& { return c.train.seed; });
      t["train.snapshot_interval"] = size_entry([](auto& c) -> auto& { return c.train.snapshot_interval; });
      t["train.crop_frames"] = size_entry([](auto& c) -> auto& { return c.train.crop_frames; });
      t["train.reseed_dead_codes"] = bool_entry([](auto& c) -> auto& { return c.train.reseed_dead_codes; });
      // data
      t["data.vocab_size"] = size_entry([](auto& c) -> auto& { return c.data.vocab_size; });
      t["data.styles"] = size_entry([](auto& c) -> auto& { return c.data.styles; });
      t["data.feature_dim"] = size_entry([](auto& c) -> auto& { return c.data.feature_dim; });
      t["data.frames_min"] = size_entry([](auto& c) -> auto& { return c.data.frames_min; });
      t["data.frames_max"] = size_entry([](auto& c) -> auto& { return c.data.frames_max; });
      t["data.symbols_min"] = size_entry([](auto& c) -> auto& { return c.data.symbols_min; });
      t["data.symbols_max"] = size_entry([](auto& c) -> auto& { return c.data.symbols_max; });
      t["data.noise"] = double_entry([](auto& c) -> auto& { return c.data.noise; });
      t["data.gain_spread"] = double_entry([](auto& c) -> auto& { return c.data.gain_spread; });
      t["data.offset_scale"] = double_entry([](auto& c) -> auto& { return c.data.offset_scale; });
      t["data.tilt_scale"] = double_entry([](auto& c) -> auto& { return c.data.tilt_scale; });
      t["data.seed"] = size_entry([](auto& c) -> auto& { return c.data.seed; });
      t["data.train_count"] = size_entry([](auto& c) -> auto& { return c.splits.train; });
      t["data.dev_count"] = size_entry([](auto& c) -> auto& { return c.splits.dev; });
      t["data.test_count"] = size_entry([](auto& c) -> auto& { return c.splits.test; });
      t["data.held_out_styles"] = size_entry([](auto& c) -> auto& { return c.splits.held_out_styles; });
      // eval
      t["eval.seed"] = size_entry([](auto& c) -> auto& { return c.eval.seed; });
      t["eval.probe_steps"] = size_entry([](auto& c) -> auto& { return c.eval.probe_steps; });
      t["eval.probe_learning_rate"] = double_entry([](auto& c) -> auto& { return c.eval.probe_learning_rate; });
      t["eval.fewshot_steps"] = size_entry([](auto& c) -> auto& { return c.eval.fewshot_steps; });
      t["eval.fewshot_learning_rate"] =
          double_entry([](auto& c) -> auto& { return c.eval.fewshot_learning_rate; });
      t["eval.probe_train_utterances"] =
          size_entry([](auto& c) -> auto& { return c.eval.probe_train_utterances; });
      return t;
    }();
    return table;
  }
};

/// Hash of everything that shapes a training trajectory (model and train
/// keys, except the step budget and snapshot cadence).
inline std::uint64_t training_config_hash(const RunConfig& cfg) {
  RunConfig copy = cfg;
  copy.train.steps = 0;
  copy.train.snapshot_interval = 0;
  return io::fnv1a(copy.to_text({"model.", "train."}));
}

}  // namespace disentangle
