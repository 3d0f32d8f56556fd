#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "disentangle/data.hpp"

using namespace disentangle;
namespace fs = std::filesystem;

namespace {

SynthOptions quiet_options() {
  SynthOptions o;
  o.noise = 0.0;
  return o;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("disentangle_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// log P(X = k) for X ~ Binomial(n, p).
double log_binomial_pmf(std::size_t n, std::size_t k, double p) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) + k * std::log(p) +
         (n - k) * std::log1p(-p);
}

std::size_t nearest_template(const Tensor<double>& x, std::size_t start, const SynthSpec& spec) {
  const std::size_t f = spec.options.feature_dim;
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < spec.templates.size(); ++v) {
    const auto& t = spec.templates[v];
    if (start + t.dim(0) > x.dim(0)) continue;
    double d = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) d += std::pow(x[start * f + i] - t[i], 2);
    d /= static_cast<double>(t.size());
    if (d < best_d) {
      best_d = d;
      best = v;
    }
  }
  return best;
}

}  // namespace

TEST(Render, IdentityStyleWithoutNoiseIsTemplateConcatenation) {
  SynthSpec spec = SynthSpec::generate(quiet_options());
  spec.styles[0] = StyleTransform::identity(spec.options.feature_dim);
  std::mt19937_64 rng(1);
  const std::vector<std::size_t> content{3, 0, 7, 3};
  const Tensor<double> x = render(content, 0, spec, rng);
  std::vector<double> expected;
  std::size_t frames = 0;
  for (const std::size_t v : content) {
    expected.insert(expected.end(), spec.templates[v].values.begin(), spec.templates[v].values.end());
    frames += spec.templates[v].dim(0);
  }
  EXPECT_EQ(x.values, expected);
  EXPECT_EQ(x.dim(0), frames);
  EXPECT_EQ(frame_labels(content, spec).size(), frames);
}

TEST(Render, StylesDifferByTheirTransform) {
  const SynthSpec spec = SynthSpec::generate(quiet_options());
  std::mt19937_64 rng(2);
  const std::vector<std::size_t> content{1, 2, 3};
  const Tensor<double> a = render(content, 0, spec, rng), b = render(content, 1, spec, rng);
  EXPECT_NE(a, b);
  const std::size_t f = spec.options.feature_dim;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const std::size_t c = i % f;
    EXPECT_NEAR(spec.styles[0].invert(a[i], c, f), spec.styles[1].invert(b[i], c, f), 1e-12);
  }
}

TEST(Render, OutOfRangeIdsRejected) {
  const SynthSpec spec = SynthSpec::generate(SynthOptions{});
  std::mt19937_64 rng(3);
  EXPECT_THROW(render({20}, 0, spec, rng), std::out_of_range);
  EXPECT_THROW(render({0}, 8, spec, rng), std::out_of_range);
  EXPECT_THROW(render({}, 0, spec, rng), std::invalid_argument);
}

TEST(SynthSpec, InvariantsAndValidation) {
  const SynthSpec spec = SynthSpec::generate(SynthOptions{});
  EXPECT_GT(spec.min_template_distance(), 10.0 * spec.options.noise);
  for (const auto& s : spec.styles) {
    for (const double g : s.gain) EXPECT_GE(std::abs(g), 0.05);
  }
  SynthOptions bad;
  bad.styles = 0;
  try {
    SynthSpec::generate(bad);
    FAIL() << "expected validation error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("data.styles"), std::string::npos);
  }
  bad = SynthOptions{};
  bad.gain_spread = 0.95;
  EXPECT_THROW(SynthSpec::generate(bad), std::invalid_argument);
}

TEST(SynthSpec, ArchiveRoundTrip) {
  const SynthSpec spec = SynthSpec::generate(SynthOptions{});
  const auto bytes = spec.to_archive().serialize(kSpecMagic, kSpecVersion);
  const SynthSpec back = SynthSpec::from_archive(io::Archive::parse(bytes, kSpecMagic, kSpecVersion));
  ASSERT_EQ(back.templates.size(), spec.templates.size());
  for (std::size_t v = 0; v < spec.templates.size(); ++v) EXPECT_EQ(back.templates[v], spec.templates[v]);
  for (std::size_t m = 0; m < spec.styles.size(); ++m) {
    EXPECT_EQ(back.styles[m].gain, spec.styles[m].gain);
    EXPECT_EQ(back.styles[m].tilt, spec.styles[m].tilt);
  }
}

TEST(Corpus, SameSeedSameManifest) {
  const SynthSpec spec = SynthSpec::generate(SynthOptions{});
  const SplitCounts counts{50, 5, 5, 0};
  EXPECT_EQ(io::fnv1a(manifest_csv(make_corpus(spec, counts))), io::fnv1a(manifest_csv(make_corpus(spec, counts))));
  SynthOptions other;
  other.seed = 2;
  EXPECT_NE(manifest_csv(make_corpus(SynthSpec::generate(other), counts)), manifest_csv(make_corpus(spec, counts)));
}

TEST(Corpus, SplitsAreDisjointAndCounted) {
  const Corpus c = make_corpus(SynthSpec::generate(SynthOptions{}), SplitCounts{30, 4, 6, 0});
  std::set<std::string> ids;
  for (const auto& u : c.utterances) EXPECT_TRUE(ids.insert(u.id).second) << u.id;
  EXPECT_EQ(c.split(Split::train).size(), 30u);
  EXPECT_EQ(c.split(Split::dev).size(), 4u);
  EXPECT_EQ(c.split(Split::test).size(), 6u);
  for (const auto& u : c.utterances) {
    EXPECT_GE(u.content.size(), c.spec.options.symbols_min);
    EXPECT_LE(u.content.size(), c.spec.options.symbols_max);
  }
  EXPECT_THROW(make_corpus(c.spec, SplitCounts{0, 1, 1, 0}), std::invalid_argument);
}

TEST(Corpus, HeldOutStylesNeverInTrain) {
  const Corpus c = make_corpus(SynthSpec::generate(SynthOptions{}), SplitCounts{300, 20, 40, 2});
  for (const auto* u : c.split(Split::train)) EXPECT_LT(u->style, 6u);
  for (const auto* u : c.split(Split::test)) EXPECT_GE(u->style, 6u);
  EXPECT_THROW(make_corpus(c.spec, SplitCounts{10, 1, 1, 8}), std::invalid_argument);
}

TEST(Corpus, EveryStyleWellRepresented) {
  // Union bound over 8 styles of P(Binomial(2000, 1/8) < 100), summed exactly.
  double tail = 0.0;
  for (std::size_t k = 0; k < 100; ++k) tail += std::exp(log_binomial_pmf(2000, k, 1.0 / 8.0));
  EXPECT_LT(8.0 * tail, 1e-3);

  const Corpus c = make_corpus(SynthSpec::generate(SynthOptions{}), SplitCounts{});
  std::vector<std::size_t> counts(8, 0);
  for (const auto* u : c.split(Split::train)) ++counts[u->style];
  for (std::size_t m = 0; m < 8; ++m) EXPECT_GE(counts[m], 100u) << "style " << m;
}

TEST(Corpus, NearestTemplateRecoversContent) {
  for (const double noise : {0.0, 0.05}) {
    SynthOptions o;
    o.noise = noise;
    const Corpus c = make_corpus(SynthSpec::generate(o), SplitCounts{100, 1, 1, 0});
    std::size_t right = 0, total = 0;
    for (const auto& u : c.utterances) {
      // Undo the style so templates can be compared directly, then walk the known segmentation.
      Tensor<double> x = u.features;
      const std::size_t f = o.feature_dim;
      for (std::size_t i = 0; i < x.size(); ++i) x[i] = c.spec.styles[u.style].invert(x[i], i % f, f);
      std::size_t start = 0;
      for (const std::size_t v : u.content) {
        right += nearest_template(x, start, c.spec) == v;
        ++total;
        start += c.spec.templates[v].dim(0);
      }
    }
    const double acc = static_cast<double>(right) / total;
    if (noise == 0.0) {
      EXPECT_EQ(acc, 1.0);
    } else {
      EXPECT_GT(acc, 0.99);
    }
  }
}

TEST(Normalize, Examples) {
  const Corpus c = make_corpus(SynthSpec::generate(SynthOptions{}), SplitCounts{40, 3, 3, 0});
  const NormStats s = NormStats::from_corpus(c);
  const std::size_t f = s.mean.size();
  Tensor<double> mean_rows(Shape{3, f});
  for (std::size_t i = 0; i < mean_rows.size(); ++i) mean_rows[i] = s.mean[i % f];
  for (const double v : s.normalize(mean_rows).values) EXPECT_NEAR(v, 0.0, 1e-12);

  const Tensor<double>& x = c.utterances.front().features;
  const Tensor<double> back = s.denormalize(s.normalize(x));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back[i], x[i], 1e-6 * std::max(1.0, std::abs(x[i])));

  std::vector<double> sums(f, 0.0);
  double frames = 0.0;
  for (const auto* u : c.split(Split::train)) {
    const auto n = s.normalize(u->features);
    for (std::size_t i = 0; i < n.size(); ++i) sums[i % f] += n[i];
    frames += static_cast<double>(n.dim(0));
  }
  for (const double sum : sums) EXPECT_NEAR(sum / frames, 0.0, 1e-6);
}

TEST(Normalize, StatisticsUseTrainingSplitOnly) {
  Corpus c = make_corpus(SynthSpec::generate(SynthOptions{}), SplitCounts{20, 3, 3, 0});
  const NormStats before = NormStats::from_corpus(c);
  for (auto& u : c.utterances) {
    if (u.split != Split::train) {
      for (auto& v : u.features.values) v += 100.0;
    }
  }
  const NormStats after = NormStats::from_corpus(c);
  EXPECT_EQ(before.mean, after.mean);
  EXPECT_EQ(before.stddev, after.stddev);
}

TEST(Normalize, ZeroStdRejected) {
  const Tensor<double> flat(Shape{4, 2}, {1, 2, 1, 3, 1, 4, 1, 5});
  EXPECT_THROW(NormStats::from_frames({&flat}), std::invalid_argument);
}

TEST(Normalize, CsvRoundTrip) {
  const Corpus c = make_corpus(SynthSpec::generate(SynthOptions{}), SplitCounts{10, 1, 1, 0});
  const NormStats s = NormStats::from_corpus(c);
  const NormStats back = NormStats::from_csv(s.to_csv());
  EXPECT_EQ(back.mean, s.mean);
  EXPECT_EQ(back.stddev, s.stddev);
}

TEST(FeatureFile, LayoutAndRoundTrip) {
  Tensor<float> x(Shape{100, 80});
  std::mt19937_64 rng(4);
  std::normal_distribution<float> unit(0.0f, 1.0f);
  for (auto& v : x.values) v = unit(rng);
  const auto bytes = io::encode_features(x);
  ASSERT_EQ(bytes.size(), 4 + 1 + 4 + 4 + 1 + 8000 * 4 + 4u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "FTRM");
  EXPECT_EQ(bytes[4], 1);
  std::uint32_t t = 0, f = 0;
  std::memcpy(&t, bytes.data() + 5, 4);
  std::memcpy(&f, bytes.data() + 9, 4);
  EXPECT_EQ(t, 100u);
  EXPECT_EQ(f, 80u);
  EXPECT_EQ(bytes[13], 1);
  std::uint32_t crc = 0;
  std::memcpy(&crc, bytes.data() + bytes.size() - 4, 4);
  EXPECT_EQ(crc, io::crc32(bytes.data(), bytes.size() - 4));

  const fs::path dir = scratch_dir("ftrm");
  io::write_feature_file(dir / "x.ftrm", x);
  const Tensor<float> back = io::load_feature_file(dir / "x.ftrm");
  EXPECT_EQ(back.shape, (Shape{100, 80}));
  EXPECT_EQ(back, x);
}

TEST(FeatureFile, DistinctErrors) {
  const auto good = io::encode_features(Tensor<float>(Shape{3, 2}, 1.5f));
  auto expect_code = [](std::vector<std::uint8_t> b, io::FormatErrorCode code) {
    try {
      io::decode_features(b);
      ADD_FAILURE() << "expected " << io::to_string(code);
    } catch (const io::FormatError& e) {
      EXPECT_EQ(e.code(), code) << e.what();
    }
  };
  auto bad_magic = good;
  bad_magic[0] = 'X';
  expect_code(bad_magic, io::FormatErrorCode::magic);
  auto bad_dtype = good;
  bad_dtype[13] = 2;
  expect_code(bad_dtype, io::FormatErrorCode::dtype);
  expect_code(std::vector<std::uint8_t>(good.begin(), good.end() - 9), io::FormatErrorCode::truncated);
  auto flipped = good;
  flipped[16] ^= 1;
  expect_code(flipped, io::FormatErrorCode::checksum);
}

TEST(CorpusDirectory, WriteAndLoadAgree) {
  const Corpus c = make_corpus(SynthSpec::generate(SynthOptions{}), SplitCounts{12, 2, 2, 0});
  const fs::path dir = scratch_dir("corpus");
  write_corpus(dir, c);
  const Corpus back = load_corpus(dir);
  ASSERT_EQ(back.utterances.size(), c.utterances.size());
  for (std::size_t i = 0; i < c.utterances.size(); ++i) {
    EXPECT_EQ(back.utterances[i].content, c.utterances[i].content);
    EXPECT_EQ(back.utterances[i].style, c.utterances[i].style);
    EXPECT_EQ(back.utterances[i].features, c.utterances[i].features.cast<float>().cast<double>());
  }
  const NormStats stored = NormStats::from_csv(read_text(dir / "norm_stats.csv"));
  const NormStats recomputed = NormStats::from_corpus(back);
  EXPECT_EQ(stored.mean, recomputed.mean);
  const auto rows = parse_manifest(read_text(dir / "manifest.csv"));
  EXPECT_EQ(rows.size(), c.utterances.size());
  EXPECT_EQ(rows[0].path, "features/" + c.utterances[0].id + ".ftrm");
}
