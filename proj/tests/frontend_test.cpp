#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "test_util.hpp"
#include "textless/frontend.hpp"
#include "textless/toy_corpus.hpp"
#include "textless/transcribe.hpp"

using namespace textless;
using textless::testing::random_tensor;
using textless::testing::scratch_dir;

namespace {

std::vector<double> tone(double hz, std::size_t n, double amp = 0.5) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = amp * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / 16000.0);
  return w;
}

Spectrogram constant_spec(std::size_t t, std::size_t d, double v) { return {Tensor::matrix(t, d, v), 100.0}; }

// Small corpus shared by the corpus-level tests.
const std::vector<ToyUtterancePair>& small_corpus() {
  static const auto pairs = generate_toy_corpus(default_grammar(), 200, 7);
  return pairs;
}

ToyGrammar tiny_grammar(std::vector<int> lexicon, std::vector<SwapRule> rules = {}) {
  ToyGrammar g;
  for (std::size_t i = 0; i < lexicon.size(); ++i) {
    g.source_vocab.push_back({200.0 + 100.0 * static_cast<double>(i), {1.0, 0.5}});
    g.target_vocab.push_back({250.0 + 100.0 * static_cast<double>(i), {1.0, 0.3}});
  }
  g.lexicon = std::move(lexicon);
  g.swap_rules = std::move(rules);
  return g;
}

}  // namespace

TEST(LogMel, FrameCountLaw) {
  EXPECT_EQ(log_mel_spectrogram(std::vector<double>(1600, 0.0)).num_frames(), 8u);
  for (std::size_t len : {400u, 401u, 559u, 560u, 16000u}) {
    EXPECT_EQ(log_mel_spectrogram(std::vector<double>(len, 0.0)).num_frames(), (len - 400) / 160 + 1) << len;
  }
  EXPECT_THROW(log_mel_spectrogram(std::vector<double>(399, 0.0)), std::invalid_argument);
}

TEST(LogMel, SilenceHitsFloor) {
  const auto spec = log_mel_spectrogram(std::vector<double>(3200, 0.0));
  EXPECT_EQ(spec.dim(), 80u);
  for (double v : spec.frames.values()) EXPECT_EQ(v, std::log(1e-6));
}

TEST(LogMel, ToneLandsInNearestChannel) {
  // Filter centres recomputed from the common-log HTK mel formula.
  auto mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
  auto inv = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  for (double hz : {1000.0, 440.0, 3000.0}) {
    std::size_t nearest = 0;
    double best = 1e300;
    for (std::size_t m = 0; m < 80; ++m) {
      const double c = inv(mel(8000.0) * static_cast<double>(m + 1) / 81.0);
      if (std::abs(c - hz) < best) {
        best = std::abs(c - hz);
        nearest = m;
      }
    }
    const auto spec = log_mel_spectrogram(tone(hz, 4000));
    for (std::size_t t = 0; t < spec.num_frames(); ++t) {
      const auto row = spec.frames.row(t);
      EXPECT_EQ(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()), nearest) << hz;
    }
  }
}

TEST(LogMel, FilterCentresAreIncreasingAndBounded) {
  LogMelExtractor extract;
  const auto centres = extract.filterbank().center_frequencies();
  ASSERT_EQ(centres.size(), 80u);
  EXPECT_GT(centres.front(), 0.0);
  EXPECT_LT(centres.back(), 8000.0);
  for (std::size_t i = 1; i < centres.size(); ++i) EXPECT_GT(centres[i], centres[i - 1]);
}

TEST(ChannelStats, ConstantCorpusHasFlooredStd) {
  const std::vector<Spectrogram> corpus{constant_spec(5, 3, 2.5)};
  const auto stats = compute_channel_stats(corpus);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_DOUBLE_EQ(stats.mean[c], 2.5);
    EXPECT_EQ(stats.stddev[c], ChannelStats::kStdFloor);
  }
}

TEST(ChannelStats, PoolsEqualVolumes) {
  const std::vector<Spectrogram> corpus{constant_spec(4, 2, 0.0), constant_spec(4, 2, 2.0)};
  const auto stats = compute_channel_stats(corpus);
  EXPECT_DOUBLE_EQ(stats.mean[0], 1.0);
  EXPECT_DOUBLE_EQ(stats.stddev[1], 1.0);
}

TEST(ChannelStats, EmptyCorpusRejected) {
  EXPECT_THROW(compute_channel_stats(std::vector<Spectrogram>{}), std::invalid_argument);
}

TEST(ChannelNormalize, Examples) {
  ChannelStats stats{{1.0, -2.0}, {2.0, 0.5}};
  Spectrogram at_mean{Tensor::matrix(3, 2, {1.0, -2.0, 1.0, -2.0, 1.0, -2.0}), 100.0};
  const auto zeros = channel_normalize(at_mean, stats);
  for (double v : zeros.frames.values()) EXPECT_EQ(v, 0.0);

  Rng rng(2);
  Spectrogram x{random_tensor({4, 2}, rng, 1.0, false), 100.0};
  EXPECT_EQ(channel_normalize(x, ChannelStats{{0.0, 0.0}, {1.0, 1.0}}).frames, x.frames);

  const auto y = channel_normalize(x, stats);
  EXPECT_DOUBLE_EQ(y.frames(2, 1), (x.frames(2, 1) + 2.0) / 0.5);
  const auto back = channel_denormalize(y, stats);
  for (std::size_t i = 0; i < x.frames.size(); ++i) EXPECT_NEAR(back.frames[i], x.frames[i], 1e-12);

  EXPECT_THROW(channel_normalize(x, ChannelStats{{0.0}, {1.0}}), ShapeError);
}

TEST(ChannelNormalize, ToyCorpusBecomesStandardised) {
  std::vector<Spectrogram> specs;
  for (const auto& p : small_corpus()) specs.push_back(p.target);
  const auto stats = compute_channel_stats(specs);
  std::vector<Spectrogram> normed;
  for (const auto& s : specs) normed.push_back(channel_normalize(s, stats));
  const auto again = compute_channel_stats(normed);
  for (std::size_t c = 0; c < again.dim(); ++c) {
    EXPECT_NEAR(again.mean[c], 0.0, 0.01) << c;
    EXPECT_NEAR(again.stddev[c], 1.0, 0.01) << c;
    EXPECT_GE(again.stddev[c] * again.stddev[c], 0.99);
    EXPECT_LE(again.stddev[c] * again.stddev[c], 1.01);
  }
}

TEST(StackFrames, Examples) {
  Rng rng(4);
  Spectrogram x{random_tensor({10, 3}, rng, 1.0, false), 100.0};
  const auto s4 = stack_frames(x, 4);
  EXPECT_EQ(s4.frames.rows(), 2u);
  EXPECT_EQ(s4.frames.cols(), 12u);
  EXPECT_EQ(s4.stride, 4u);

  const auto s1 = stack_frames(x, 1);
  EXPECT_EQ(s1.frames.shape(), x.frames.shape());
  EXPECT_EQ(s1.frames.values(), x.frames.values());

  Spectrogram aligned{random_tensor({16, 3}, rng, 1.0, false), 100.0};
  EXPECT_EQ(unstack_frames(stack_frames(aligned, 8)).frames, aligned.frames);

  EXPECT_THROW(stack_frames(x, 16), std::invalid_argument);
  EXPECT_THROW(stack_frames(x, 3), std::invalid_argument);
}

TEST(StackFrames, RowLawAndLayout) {
  Rng rng(5);
  for (std::size_t s : {1u, 2u, 4u, 8u, 16u}) {
    for (std::size_t t = s; t < s + 40; t += 3) {
      Spectrogram x{random_tensor({t, 2}, rng, 1.0, false), 100.0};
      const auto st = stack_frames(x, s);
      ASSERT_EQ(st.frames.rows(), t / s);
      ASSERT_EQ(st.frames.cols(), 2 * s);
      for (std::size_t i = 0; i < st.frames.rows(); ++i) {
        for (std::size_t j = 0; j < s; ++j) {
          for (std::size_t c = 0; c < 2; ++c) ASSERT_EQ(st.frames(i, j * 2 + c), x.frames(i * s + j, c));
        }
      }
    }
  }
}

TEST(ToyGrammar, TranslateRules) {
  auto identity = tiny_grammar({0, 1, 2, 3, 4});
  EXPECT_EQ(identity.translate(std::vector<int>{3}), std::vector<int>{3});

  auto swap = tiny_grammar({0, 1, 2, 3, 4}, {SwapRule{3, 3, 4, 4}});
  EXPECT_EQ(swap.translate(std::vector<int>{3, 4}), (std::vector<int>{4, 3}));
  EXPECT_EQ(swap.translate(std::vector<int>{4, 3}), (std::vector<int>{4, 3}));
  EXPECT_EQ(swap.translate(std::vector<int>{3, 4, 3, 4}), (std::vector<int>{4, 3, 4, 3}));

  auto lex = tiny_grammar({2, 0, 1}, {SwapRule{0, 0, 1, 1}});
  EXPECT_EQ(lex.translate(std::vector<int>{0, 1, 2}), (std::vector<int>{0, 2, 1}));
}

TEST(ToyGrammar, DefaultHasPermutationLexiconAndOneSwapRule) {
  const auto g = default_grammar();
  EXPECT_EQ(g.source_vocab.size(), 20u);
  EXPECT_EQ(g.target_vocab.size(), 20u);
  auto sorted = g.lexicon;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 20; ++i) EXPECT_EQ(sorted[static_cast<std::size_t>(i)], i);
  ASSERT_EQ(g.swap_rules.size(), 1u);
  EXPECT_EQ(g.translate(std::vector<int>{12, 3}),
            (std::vector<int>{g.lexicon[3], g.lexicon[12]}));
}

TEST(ToyGrammar, JsonRoundTripAndValidation) {
  const auto g = default_grammar();
  const nlohmann::json j = g;
  const auto back = j.get<ToyGrammar>();
  EXPECT_EQ(nlohmann::json(back), j);

  auto bad = j;
  bad["lexicon"][0] = 99;
  EXPECT_THROW(bad.get<ToyGrammar>(), std::invalid_argument);
  bad = j;
  bad["source_vocab"] = nlohmann::json::array();
  EXPECT_THROW(bad.get<ToyGrammar>(), std::invalid_argument);
}

TEST(ToyCorpus, SeedDeterminism) {
  const auto g = default_grammar();
  const auto a = generate_toy_corpus(g, 5, 7);
  const auto b = generate_toy_corpus(g, 5, 7);
  const auto c = generate_toy_corpus(g, 5, 8);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].source.frames, b[i].source.frames);
    EXPECT_EQ(a[i].target.frames, b[i].target.frames);
    EXPECT_EQ(a[i].source_tokens, b[i].source_tokens);
    differs = differs || !(a[i].source.frames == c[i].source.frames);
  }
  EXPECT_TRUE(differs);
}

TEST(ToyCorpus, UtteranceIndependentOfCorpusSize) {
  const auto g = default_grammar();
  const auto small = generate_toy_corpus(g, 3, 9);
  const auto large = generate_toy_corpus(g, 6, 9);
  for (std::size_t i = 0; i < small.size(); ++i) EXPECT_EQ(small[i].target.frames, large[i].target.frames);
}

TEST(ToyCorpus, PairsFollowGrammarAndDifferInLength) {
  const auto g = default_grammar();
  std::size_t src_frames = 0, tgt_frames = 0, length_mismatch = 0;
  for (const auto& p : small_corpus()) {
    EXPECT_EQ(p.target_tokens, g.translate(p.source_tokens));
    EXPECT_GE(p.source_tokens.size(), 2u);
    EXPECT_LE(p.source_tokens.size(), 4u);
    EXPECT_TRUE(p.source.frames.all_finite());
    src_frames += p.source.num_frames();
    tgt_frames += p.target.num_frames();
    length_mismatch += p.source.num_frames() != p.target.num_frames();
  }
  EXPECT_LT(tgt_frames, src_frames);
  EXPECT_GT(length_mismatch, small_corpus().size() / 2);
}

TEST(ToyCorpus, InvalidRequestsRejected) {
  EXPECT_THROW(generate_toy_corpus(default_grammar(), 0, 1), std::invalid_argument);
  ToyGrammar empty;
  EXPECT_THROW(generate_toy_corpus(empty, 3, 1), std::invalid_argument);
}

TEST(ToyCorpus, DirectoryRoundTrip) {
  const auto dir = scratch_dir("corpus_io");
  const auto corpus = make_toy_corpus(default_grammar(), 12, 3, 0.25);
  save_corpus(dir, corpus);
  EXPECT_EQ(read_manifest(dir).size(), 12u);
  const auto back = load_corpus(dir);
  ASSERT_EQ(back.pairs.size(), 12u);
  EXPECT_EQ(back.split("test").size(), 3u);
  EXPECT_EQ(back.pairs[5].target.frames, corpus.pairs[5].target.frames);
  EXPECT_EQ(back.pairs[5].source_tokens, corpus.pairs[5].source_tokens);
  EXPECT_EQ(back.stats.target.mean, corpus.stats.target.mean);
  EXPECT_EQ(load_corpus(dir, std::string("test")).pairs.size(), 3u);
}

TEST(ToyCorpus, StatsComeFromTrainSplitOnly) {
  const auto corpus = make_toy_corpus(default_grammar(), 10, 4, 0.5);
  std::vector<Spectrogram> train;
  for (const auto* p : corpus.split("train")) train.push_back(p->source);
  EXPECT_EQ(compute_channel_stats(train).mean, corpus.stats.source.mean);
}

TEST(Transcriber, RecoversCleanCorpus) {
  const auto g = default_grammar();
  const auto templates = target_token_templates(g);
  std::size_t correct = 0, total = 0;
  for (const auto& p : small_corpus()) {
    const auto hyp = transcribe_toy(p.target, templates);
    total += p.target_tokens.size();
    if (hyp == p.target_tokens) correct += hyp.size();
  }
  EXPECT_GE(static_cast<double>(correct) / static_cast<double>(total), 0.99);
}

TEST(Transcriber, SilenceIsEmpty) {
  const auto templates = target_token_templates(default_grammar());
  EXPECT_TRUE(transcribe_toy(log_mel_spectrogram(std::vector<double>(8000, 0.0)), templates).empty());
  Rng rng(1);
  std::vector<double> noise(8000);
  for (auto& v : noise) v = 1e-4 * rng.normal();
  EXPECT_TRUE(transcribe_toy(log_mel_spectrogram(noise), templates).empty());
}

TEST(Transcriber, ConcatenationDistributes) {
  const auto templates = target_token_templates(default_grammar());
  const auto& pairs = small_corpus();
  for (std::size_t i = 0; i + 1 < 20; ++i) {
    const auto& a = pairs[i].target;
    const auto& b = pairs[i + 1].target;
    std::vector<double> joined(a.frames.values());
    joined.insert(joined.end(), b.frames.values().begin(), b.frames.values().end());
    const Spectrogram cat{Tensor::matrix(a.num_frames() + b.num_frames(), a.dim(), std::move(joined)), 100.0};
    auto expect = transcribe_toy(a, templates);
    const auto tail = transcribe_toy(b, templates);
    expect.insert(expect.end(), tail.begin(), tail.end());
    EXPECT_EQ(transcribe_toy(cat, templates), expect) << i;
  }
}

TEST(Transcriber, PearsonBasics) {
  const std::vector<double> a{1, 2, 3}, b{2, 4, 6}, c{3, 2, 1}, flat{1, 1, 1};
  EXPECT_NEAR(pearson(a, b), 1.0, 1e-15);
  EXPECT_NEAR(pearson(a, c), -1.0, 1e-15);
  EXPECT_EQ(pearson(a, flat), 0.0);
}
