#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "test_util.hpp"
#include "textless/eval.hpp"

using namespace textless;

namespace {

// Independent reference: full (m+1) x (n+1) table, filled recursively with
// memoization.
std::size_t reference_distance(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::vector<long>> memo(a.size() + 1, std::vector<long>(b.size() + 1, -1));
  std::function<long(std::size_t, std::size_t)> d = [&](std::size_t i, std::size_t j) -> long {
    if (i == 0) return static_cast<long>(j);
    if (j == 0) return static_cast<long>(i);
    if (memo[i][j] >= 0) return memo[i][j];
    const long sub = d(i - 1, j - 1) + (a[i - 1] == b[j - 1] ? 0 : 1);
    const long del = d(i - 1, j) + 1;
    const long ins = d(i, j - 1) + 1;
    return memo[i][j] = std::min({sub, del, ins});
  };
  return static_cast<std::size_t>(d(a.size(), b.size()));
}

std::vector<int> random_sequence(Rng& rng, int max_len, int vocab) {
  std::vector<int> s(static_cast<std::size_t>(rng.uniform_int(0, max_len)));
  for (auto& v : s) v = static_cast<int>(rng.uniform_int(0, vocab - 1));
  return s;
}

VqConfig tiny_vq() {
  VqConfig c;
  c.codebook_size = 16;
  c.latent_dim = 8;
  c.encoder = c.decoder = TransformerConfig{16, 1, 2, 32};
  return c;
}

ModelConfig tiny_model(const VqConfig& vq) {
  auto c = ModelConfig::for_quantizer(vq, 80);
  c.encoder = c.decoder = TransformerConfig{16, 1, 2, 32};
  c.max_decode_len = 12;
  return c;
}

const ToyCorpus& small_corpus() {
  static const ToyCorpus c = make_toy_corpus(default_grammar(), 40, 3, 0.25);
  return c;
}

}  // namespace

TEST(TokenAccuracy, Examples) {
  const std::vector<int> a{1, 2, 3}, b{1, 3}, e{};
  EXPECT_EQ(token_accuracy(a, a), 1.0);
  EXPECT_NEAR(token_accuracy(b, a), 1.0 - 1.0 / 3.0, 1e-15);
  EXPECT_EQ(token_accuracy(e, e), 1.0);
  EXPECT_EQ(token_accuracy(e, a), 0.0);
  const std::vector<int> c{4, 5, 6};
  EXPECT_EQ(token_accuracy(c, a), 0.0);
}

TEST(TokenAccuracy, MatchesReferenceEditDistance) {
  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    const auto a = random_sequence(rng, 9, 4);
    const auto b = random_sequence(rng, 9, 4);
    const auto d = reference_distance(a, b);
    ASSERT_EQ(edit_distance(a, b), d) << "case " << i;
    const auto len = std::max(a.size(), b.size());
    const double expect = len == 0 ? 1.0 : 1.0 - static_cast<double>(d) / static_cast<double>(len);
    EXPECT_EQ(token_accuracy(a, b), expect);
  }
}

TEST(TokenAccuracy, SymmetricBoundedAndOneOnlyWhenEqual) {
  Rng rng(6);
  for (int i = 0; i < 500; ++i) {
    const auto a = random_sequence(rng, 6, 3);
    const auto b = random_sequence(rng, 6, 3);
    const double ab = token_accuracy(a, b);
    EXPECT_EQ(ab, token_accuracy(b, a));
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
    EXPECT_EQ(ab == 1.0, a == b);
  }
}

TEST(PaddedL1, PenalizesLengthDifference) {
  const auto a = Tensor::matrix(2, 2, std::vector<double>{1, 1, 1, 1});
  const auto b = Tensor::matrix(1, 2, std::vector<double>{1, 1});
  EXPECT_EQ(padded_l1(a, a), 0.0);
  EXPECT_EQ(padded_l1(a, b), 0.5);
  EXPECT_EQ(padded_l1(b, a), 0.5);
  EXPECT_EQ(padded_l1(Tensor::matrix(0, 2), Tensor::matrix(0, 2)), 0.0);
}

TEST(Transcriber, CalibrationGateOnCleanCorpus) {
  const auto& c = small_corpus();
  const auto templates = target_token_templates(c.grammar, c.frontend);
  std::vector<const ToyUtterancePair*> all;
  for (const auto& p : c.pairs) all.push_back(&p);
  EXPECT_GE(transcriber_recovery(all, templates, {}), kCalibrationGate);
}

TEST(EvaluateModel, UntrainedModelIsNearChance) {
  const auto& c = small_corpus();
  const auto vq = tiny_vq();
  auto q = init_quantizer(vq, 80, 1);
  q.stats = c.stats.target;
  auto m = init_model(tiny_model(vq), 2);
  m.source_stats = c.stats.source;
  const auto r = evaluate_model(m, q, c, "test");
  EXPECT_EQ(r.utterances, c.split("test").size());
  EXPECT_GE(r.transcriber_recovery, kCalibrationGate);
  // 20 target tokens
  EXPECT_LE(r.metrics.token_accuracy, 2.0 / 20.0);
  EXPECT_EQ(r.metrics.sequence_exact_match, 0.0);
  for (double v : {r.metrics.token_accuracy, r.metrics.sequence_exact_match, r.metrics.code_prediction_accuracy,
                   r.metrics.truncation_rate, r.metrics.teacher_forced_token_accuracy}) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_GE(r.metrics.codebook_entropy, 0.0);
  EXPECT_LE(r.metrics.codebook_entropy, std::log(16.0) + 1e-12);
}

TEST(EvaluateModel, DeterministicReport) {
  const auto& c = small_corpus();
  const auto vq = tiny_vq();
  auto q = init_quantizer(vq, 80, 3);
  q.stats = c.stats.target;
  auto m = init_model(tiny_model(vq), 4);
  m.source_stats = c.stats.source;
  const auto a = nlohmann::json(evaluate_model(m, q, c, "test")).dump();
  const auto b = nlohmann::json(evaluate_model(m, q, c, "test")).dump();
  EXPECT_EQ(a, b);
  EXPECT_EQ(nlohmann::json::parse(a).get<EvalReport>().split, "test");
}

TEST(EvaluateModel, ErrorsOnMissingSplitAndMismatch) {
  const auto& c = small_corpus();
  auto vq = tiny_vq();
  auto q = init_quantizer(vq, 80, 1);
  q.stats = c.stats.target;
  auto m = init_model(tiny_model(vq), 2);
  EXPECT_THROW(evaluate_model(m, q, c, "dev"), std::invalid_argument);
  vq.stride = 8;
  auto m8 = init_model(tiny_model(vq), 2);
  EXPECT_THROW(evaluate_model(m8, q, c, "test"), ConfigError);
}

TEST(EvaluateModel, CalibrationFailureStopsEvaluation) {
  const auto& c = small_corpus();
  const auto vq = tiny_vq();
  auto q = init_quantizer(vq, 80, 1);
  q.stats = c.stats.target;
  auto m = init_model(tiny_model(vq), 2);
  TranscriberConfig strict;
  strict.threshold = 1.01;  // unreachable correlation
  EXPECT_THROW(evaluate_model(m, q, c, "test", strict), CalibrationError);
}
