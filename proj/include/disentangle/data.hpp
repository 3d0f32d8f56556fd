#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "disentangle/io.hpp"
#include "disentangle/tensor.hpp"

namespace disentangle {

/// Generative description of the synthetic corpus. Content is a sequence of
/// symbols, each rendered as a fixed template; style is a per-channel affine
/// transform plus a spectral tilt applied to the whole utterance.
struct SynthOptions {
  std::size_t vocab_size = 20;
  std::size_t styles = 8;
  std::size_t feature_dim = 16;
  std::size_t frames_min = 4;  // template length range per symbol
  std::size_t frames_max = 8;
  std::size_t symbols_min = 8;  // symbols per utterance
  std::size_t symbols_max = 14;
  double noise = 0.05;
  double gain_spread = 0.3;   // gains uniform in [1 - spread, 1 + spread]
  double offset_scale = 0.5;  // offsets ~ N(0, scale^2)
  double tilt_scale = 0.5;    // tilt slope uniform in [-scale, scale]
  std::uint64_t seed = 1;

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw std::invalid_argument("data." + field + ": " + why);
    };
    if (vocab_size < 2) fail("vocab_size", "must be >= 2");
    if (styles < 1) fail("styles", "must be >= 1");
    if (feature_dim < 2) fail("feature_dim", "must be >= 2");
    if (frames_min < 1 || frames_max < frames_min) fail("frames_min", "need 1 <= frames_min <= frames_max");
    if (symbols_min < 1 || symbols_max < symbols_min) fail("symbols_min", "need 1 <= symbols_min <= symbols_max");
    if (!(noise >= 0.0)) fail("noise", "must be >= 0");
    if (!(gain_spread >= 0.0 && gain_spread < 0.9)) fail("gain_spread", "must be in [0, 0.9) to keep gains away from 0");
    if (!(offset_scale >= 0.0)) fail("offset_scale", "must be >= 0");
    if (!(tilt_scale >= 0.0)) fail("tilt_scale", "must be >= 0");
  }
};

struct StyleTransform {
  std::vector<double> gain;
  std::vector<double> offset;
  double tilt = 0.0;

  static StyleTransform identity(std::size_t dims) {
    return StyleTransform{std::vector<double>(dims, 1.0), std::vector<double>(dims, 0.0), 0.0};
  }

  double tilt_at(std::size_t channel, std::size_t dims) const {
    return tilt * (static_cast<double>(channel) / static_cast<double>(dims - 1) - 0.5);
  }
  double apply(double v, std::size_t channel, std::size_t dims) const {
    return gain[channel] * v + offset[channel] + tilt_at(channel, dims);
  }
  double invert(double v, std::size_t channel, std::size_t dims) const {
    return (v - offset[channel] - tilt_at(channel, dims)) / gain[channel];
  }
};

/// Frozen draw of templates and style transforms.
struct SynthSpec {
  SynthOptions options;
  std::vector<Tensor<double>> templates;  // V x [L_v, F]
  std::vector<StyleTransform> styles;     // M

  static SynthSpec generate(const SynthOptions& options) {
    options.validate();
    SynthSpec spec;
    spec.options = options;
    std::mt19937_64 rng(options.seed);
    std::uniform_int_distribution<std::size_t> length(options.frames_min, options.frames_max);
    std::normal_distribution<double> unit(0.0, 1.0);
    const std::size_t f = options.feature_dim;
    for (std::size_t v = 0; v < options.vocab_size; ++v) {
      Tensor<double> t(Shape{length(rng), f});
      for (auto& x : t.values) x = unit(rng);
      spec.templates.push_back(std::move(t));
    }
    std::uniform_real_distribution<double> gain(1.0 - options.gain_spread, 1.0 + options.gain_spread);
    std::uniform_real_distribution<double> tilt(-options.tilt_scale, options.tilt_scale);
    for (std::size_t m = 0; m < options.styles; ++m) {
      StyleTransform s;
      for (std::size_t c = 0; c < f; ++c) {
        s.gain.push_back(gain(rng));
        s.offset.push_back(options.offset_scale * unit(rng));
      }
      s.tilt = tilt(rng);
      spec.styles.push_back(std::move(s));
    }
    spec.validate();
    return spec;
  }

  /// Minimum L2 distance between equal-length templates (infinite if none share a length).
  double min_template_distance() const {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < templates.size(); ++a) {
      for (std::size_t b = a + 1; b < templates.size(); ++b) {
        if (templates[a].shape != templates[b].shape) continue;
        double d = 0.0;
        for (std::size_t i = 0; i < templates[a].size(); ++i) {
          d += (templates[a][i] - templates[b][i]) * (templates[a][i] - templates[b][i]);
        }
        best = std::min(best, std::sqrt(d));
      }
    }
    return best;
  }

  void validate() const {
    if (templates.size() != options.vocab_size || styles.size() != options.styles) {
      throw std::invalid_argument("synthetic spec: template/style counts disagree with options");
    }
    if (options.noise > 0.0 && !(min_template_distance() > 10.0 * options.noise)) {
      throw std::invalid_argument("synthetic spec: templates closer than 10 x noise");
    }
    for (const auto& s : styles) {
      for (const double g : s.gain) {
        if (std::abs(g) < 0.05) throw std::invalid_argument("synthetic spec: style gain too close to 0");
      }
    }
  }

  io::Archive to_archive() const {
    io::Archive a;
    const SynthOptions& o = options;
    a.put("options", Shape{12},
          std::vector<double>{double(o.vocab_size), double(o.styles), double(o.feature_dim), double(o.frames_min),
                              double(o.frames_max), double(o.symbols_min), double(o.symbols_max), o.noise,
                              o.gain_spread, o.offset_scale, o.tilt_scale, double(o.seed)});
    for (std::size_t v = 0; v < templates.size(); ++v) a.put("template/" + std::to_string(v), templates[v]);
    for (std::size_t m = 0; m < styles.size(); ++m) {
      a.put("style/" + std::to_string(m) + "/gain", Shape{styles[m].gain.size()}, styles[m].gain);
      a.put("style/" + std::to_string(m) + "/offset", Shape{styles[m].offset.size()}, styles[m].offset);
      a.put("style/" + std::to_string(m) + "/tilt", Shape{1}, std::vector<double>{styles[m].tilt});
    }
    return a;
  }

  static SynthSpec from_archive(const io::Archive& a) {
    SynthSpec spec;
    const auto o = a.get_values<double>("options");
    if (o.size() != 12) throw io::FormatError(io::FormatErrorCode::truncated, "synthetic spec options");
    SynthOptions& opt = spec.options;
    opt.vocab_size = std::size_t(o[0]);
    opt.styles = std::size_t(o[1]);
    opt.feature_dim = std::size_t(o[2]);
    opt.frames_min = std::size_t(o[3]);
    opt.frames_max = std::size_t(o[4]);
    opt.symbols_min = std::size_t(o[5]);
    opt.symbols_max = std::size_t(o[6]);
    opt.noise = o[7];
    opt.gain_spread = o[8];
    opt.offset_scale = o[9];
    opt.tilt_scale = o[10];
    opt.seed = std::uint64_t(o[11]);
    for (std::size_t v = 0; v < opt.vocab_size; ++v) {
      spec.templates.push_back(a.get_tensor<double>("template/" + std::to_string(v)));
    }
    for (std::size_t m = 0; m < opt.styles; ++m) {
      StyleTransform s;
      s.gain = a.get_values<double>("style/" + std::to_string(m) + "/gain");
      s.offset = a.get_values<double>("style/" + std::to_string(m) + "/offset");
      s.tilt = a.get_values<double>("style/" + std::to_string(m) + "/tilt").at(0);
      spec.styles.push_back(std::move(s));
    }
    spec.validate();
    return spec;
  }
};

/// Concatenates symbol templates, applies the style transform, adds i.i.d.
/// Gaussian noise with standard deviation options.noise.
inline Tensor<double> render(const std::vector<std::size_t>& content, std::size_t style, const SynthSpec& spec,
                             std::mt19937_64& rng) {
  if (content.empty()) throw std::invalid_argument("render: empty content sequence");
  if (style >= spec.styles.size()) {
    throw std::out_of_range("render: style id " + std::to_string(style) + " outside [0, " +
                            std::to_string(spec.styles.size()) + ")");
  }
  std::size_t frames = 0;
  for (const std::size_t v : content) {
    if (v >= spec.templates.size()) {
      throw std::out_of_range("render: content id " + std::to_string(v) + " outside [0, " +
                              std::to_string(spec.templates.size()) + ")");
    }
    frames += spec.templates[v].dim(0);
  }
  const std::size_t f = spec.options.feature_dim;
  const StyleTransform& st = spec.styles[style];
  Tensor<double> x(Shape{frames, f});
  std::normal_distribution<double> noise(0.0, 1.0);
  std::size_t t = 0;
  for (const std::size_t v : content) {
    const Tensor<double>& tpl = spec.templates[v];
    for (std::size_t r = 0; r < tpl.dim(0); ++r, ++t) {
      for (std::size_t c = 0; c < f; ++c) x[t * f + c] = st.apply(tpl[r * f + c], c, f);
    }
  }
  if (spec.options.noise > 0.0) {
    for (auto& v : x.values) v += spec.options.noise * noise(rng);
  }
  return x;
}

/// Symbol id of every frame of a rendered sequence.
inline std::vector<std::size_t> frame_labels(const std::vector<std::size_t>& content, const SynthSpec& spec) {
  std::vector<std::size_t> out;
  for (const std::size_t v : content) out.insert(out.end(), spec.templates.at(v).dim(0), v);
  return out;
}

enum class Split { train, dev, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "unknown";
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "dev") return Split::dev;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + s + "'");
}

struct Utterance {
  std::string id;
  Split split = Split::train;
  std::size_t style = 0;
  std::vector<std::size_t> content;
  Tensor<double> features;  // raw (unnormalized), [T, F]
};

struct SplitCounts {
  std::size_t train = 2000;
  std::size_t dev = 200;
  std::size_t test = 200;
  std::size_t held_out_styles = 0;  // last N style ids appear only in dev/test
};

struct Corpus {
  SynthSpec spec;
  std::vector<Utterance> utterances;

  std::vector<const Utterance*> split(Split s) const {
    std::vector<const Utterance*> out;
    for (const auto& u : utterances) {
      if (u.split == s) out.push_back(&u);
    }
    return out;
  }
};

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}
}  // namespace detail

/// Samples uniform content sequences and style ids. Each utterance draws
/// from its own derived seed, so generation order does not matter.
inline Corpus make_corpus(const SynthSpec& spec, const SplitCounts& counts) {
  if (counts.train < 1 || counts.dev < 1 || counts.test < 1) {
    throw std::invalid_argument("make_corpus: every split needs at least one utterance");
  }
  const std::size_t m = spec.options.styles;
  if (counts.held_out_styles >= m) throw std::invalid_argument("make_corpus: cannot hold out every style");
  Corpus corpus;
  corpus.spec = spec;
  const std::size_t total = counts.train + counts.dev + counts.test;
  for (std::size_t i = 0; i < total; ++i) {
    std::mt19937_64 rng(detail::splitmix64(spec.options.seed ^ detail::splitmix64(i + 1)));
    Utterance u;
    u.split = i < counts.train ? Split::train : (i < counts.train + counts.dev ? Split::dev : Split::test);
    char id[32];
    std::snprintf(id, sizeof id, "utt%05zu", i);
    u.id = id;
    const std::size_t seen = m - counts.held_out_styles;
    const std::size_t pool = (u.split == Split::train) ? seen : m;
    u.style = std::uniform_int_distribution<std::size_t>(0, pool - 1)(rng);
    if (counts.held_out_styles > 0 && u.split == Split::test) {
      u.style = seen + std::uniform_int_distribution<std::size_t>(0, counts.held_out_styles - 1)(rng);
    }
    const std::size_t n = std::uniform_int_distribution<std::size_t>(spec.options.symbols_min, spec.options.symbols_max)(rng);
    std::uniform_int_distribution<std::size_t> symbol(0, spec.options.vocab_size - 1);
    for (std::size_t k = 0; k < n; ++k) u.content.push_back(symbol(rng));
    u.features = render(u.content, u.style, spec, rng);
    corpus.utterances.push_back(std::move(u));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Manifest: utt_id,split,style_id,content_ids,path

inline std::string join_ids(const std::vector<std::size_t>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) s += '|';
    s += std::to_string(ids[i]);
  }
  return s;
}

inline std::vector<std::size_t> split_ids(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, '|')) out.push_back(std::stoul(item));
  return out;
}

inline std::string feature_path(const Utterance& u) { return "features/" + u.id + ".ftrm"; }

inline std::string manifest_csv(const Corpus& corpus) {
  std::string out = "utt_id,split,style_id,content_ids,path\n";
  for (const auto& u : corpus.utterances) {
    out += u.id + ',' + split_name(u.split) + ',' + std::to_string(u.style) + ',' + join_ids(u.content) + ',' +
           feature_path(u) + '\n';
  }
  return out;
}

struct ManifestRow {
  std::string id;
  Split split = Split::train;
  std::size_t style = 0;
  std::vector<std::size_t> content;
  std::string path;
};

inline std::vector<ManifestRow> parse_manifest(const std::string& text) {
  std::vector<ManifestRow> rows;
  std::stringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != "utt_id,split,style_id,content_ids,path") throw std::invalid_argument("manifest: unexpected header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ls(line);
    std::string col;
    while (std::getline(ls, col, ',')) cols.push_back(col);
    if (cols.size() != 5) throw std::invalid_argument("manifest: malformed row '" + line + "'");
    rows.push_back(ManifestRow{cols[0], split_from_name(cols[1]), std::stoul(cols[2]), split_ids(cols[3]), cols[4]});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-feature mean and standard deviation over the training split.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;

  static NormStats from_frames(const std::vector<const Tensor<double>*>& matrices) {
    if (matrices.empty()) throw std::invalid_argument("normalization statistics need at least one matrix");
    const std::size_t f = matrices.front()->dim(1);
    std::vector<double> sum(f, 0.0), sq(f, 0.0);
    double n = 0.0;
    for (const auto* x : matrices) {
      if (x->dim(1) != f) throw ShapeError("normalization: inconsistent feature dimension");
      for (std::size_t t = 0; t < x->dim(0); ++t) {
        for (std::size_t c = 0; c < f; ++c) sum[c] += (*x)[t * f + c];
      }
      n += static_cast<double>(x->dim(0));
    }
    NormStats s;
    for (std::size_t c = 0; c < f; ++c) s.mean.push_back(sum[c] / n);
    for (const auto* x : matrices) {
      for (std::size_t t = 0; t < x->dim(0); ++t) {
        for (std::size_t c = 0; c < f; ++c) {
          const double d = (*x)[t * f + c] - s.mean[c];
          sq[c] += d * d;
        }
      }
    }
    for (std::size_t c = 0; c < f; ++c) s.stddev.push_back(std::sqrt(sq[c] / n));
    s.validate();
    return s;
  }

  static NormStats from_corpus(const Corpus& corpus) {
    std::vector<const Tensor<double>*> mats;
    for (const auto* u : corpus.split(Split::train)) mats.push_back(&u->features);
    return from_frames(mats);
  }

  void validate() const {
    if (mean.size() != stddev.size() || mean.empty()) throw std::invalid_argument("normalization: size mismatch");
    for (std::size_t c = 0; c < stddev.size(); ++c) {
      if (!std::isfinite(mean[c]) || !std::isfinite(stddev[c])) {
        throw std::invalid_argument("normalization: non-finite statistic for feature " + std::to_string(c));
      }
      if (!(stddev[c] > 0.0)) throw std::invalid_argument("normalization: zero std for feature " + std::to_string(c));
    }
  }

  template <class S>
  Tensor<S> normalize(const Tensor<S>& x) const {
    const std::size_t f = check(x);
    Tensor<S> out = x;
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = static_cast<S>((static_cast<double>(x[i]) - mean[i % f]) / stddev[i % f]);
    }
    return out;
  }

  template <class S>
  Tensor<S> denormalize(const Tensor<S>& x) const {
    const std::size_t f = check(x);
    Tensor<S> out = x;
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = static_cast<S>(static_cast<double>(x[i]) * stddev[i % f] + mean[i % f]);
    }
    return out;
  }

  std::string to_csv() const {
    std::string out = "feature,mean,std\n";
    char buf[96];
    for (std::size_t c = 0; c < mean.size(); ++c) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", c, mean[c], stddev[c]);
      out += buf;
    }
    return out;
  }

  static NormStats from_csv(const std::string& text) {
    NormStats s;
    std::stringstream in(text);
    std::string line;
    std::getline(in, line);
    if (line != "feature,mean,std") throw std::invalid_argument("norm stats: unexpected header");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::stringstream ls(line);
      std::string idx, m, sd;
      std::getline(ls, idx, ',');
      std::getline(ls, m, ',');
      std::getline(ls, sd, ',');
      s.mean.push_back(std::stod(m));
      s.stddev.push_back(std::stod(sd));
    }
    s.validate();
    return s;
  }

 private:
  template <class S>
  std::size_t check(const Tensor<S>& x) const {
    if (x.last_dim() != mean.size()) {
      throw ShapeError("normalization: feature dimension " + std::to_string(x.last_dim()) + " vs statistics " +
                       std::to_string(mean.size()));
    }
    return mean.size();
  }
};

// ---------------------------------------------------------------------------
// Corpus directories

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw io::FormatError(io::FormatErrorCode::io, "cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  io::write_file_atomic(p, std::vector<std::uint8_t>(text.begin(), text.end()));
}

inline constexpr std::string_view kSpecMagic = "SYNS";
inline constexpr std::uint32_t kSpecVersion = 1;

/// Writes feature files, manifest.csv, norm_stats.csv and synth_spec.bin.
inline void write_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  std::filesystem::create_directories(dir / "features");
  for (const auto& u : corpus.utterances) {
    io::write_feature_file(dir / feature_path(u), u.features.cast<float>());
  }
  write_text(dir / "manifest.csv", manifest_csv(corpus));
  corpus.spec.to_archive().save(dir / "synth_spec.bin", kSpecMagic, kSpecVersion);
  // Stats from the stored (f32) values so they match what loaders see.
  Corpus stored;
  for (const auto& u : corpus.utterances) {
    Utterance copy = u;
    copy.features = u.features.cast<float>().cast<double>();
    stored.utterances.push_back(std::move(copy));
  }
  write_text(dir / "norm_stats.csv", NormStats::from_corpus(stored).to_csv());
}

/// Reads a corpus directory written by write_corpus (features as stored, unnormalized).
inline Corpus load_corpus(const std::filesystem::path& dir) {
  Corpus corpus;
  corpus.spec = SynthSpec::from_archive(io::Archive::load(dir / "synth_spec.bin", kSpecMagic, kSpecVersion));
  for (const auto& row : parse_manifest(read_text(dir / "manifest.csv"))) {
    Utterance u;
    u.id = row.id;
    u.split = row.split;
    u.style = row.style;
    u.content = row.content;
    u.features = io::load_feature_file(dir / row.path).cast<double>();
    corpus.utterances.push_back(std::move(u));
  }
  return corpus;
}

}  // namespace disentangle
