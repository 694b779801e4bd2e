#pragma once

// Oracle metrics for toy translation: edit-distance token accuracy, the
// transcriber calibration gate, and the per-split evaluation report.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "textless/quantizer.hpp"
#include "textless/toy_corpus.hpp"
#include "textless/transcribe.hpp"
#include "textless/translator.hpp"

namespace textless {

inline std::size_t edit_distance(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> row(b.size() + 1);
  std::iota(row.begin(), row.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] != b[j - 1] ? 1 : 0)});
      diag = up;
    }
  }
  return row[b.size()];
}

/// 1 - edit distance / max length; two empty sequences score 1.
inline double token_accuracy(std::span<const int> hyp, std::span<const int> ref) {
  const auto len = std::max(hyp.size(), ref.size());
  if (len == 0) return 1.0;
  return 1.0 - static_cast<double>(edit_distance(hyp, ref)) / static_cast<double>(len);
}

/// The transcriber failed to recover the generator's own tokens.
class CalibrationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kCalibrationGate = 0.99;

/// Corpus-wide token recovery on clean target spectrograms:
/// 1 - total edit distance / total reference tokens.
inline double transcriber_recovery(const std::vector<const ToyUtterancePair*>& pairs,
                                   const std::vector<std::vector<double>>& templates, const TranscriberConfig& cfg) {
  std::size_t errors = 0, tokens = 0;
  for (const auto* p : pairs) {
    errors += edit_distance(transcribe_toy(p->target, templates, cfg), p->target_tokens);
    tokens += p->target_tokens.size();
  }
  return tokens == 0 ? 1.0 : 1.0 - static_cast<double>(errors) / static_cast<double>(tokens);
}

struct EvalMetrics {
  double token_accuracy = 0;
  double sequence_exact_match = 0;
  double code_prediction_accuracy = 0;  // teacher-forced next-code top-1, EOS included
  double spec_l1 = 0;                   // normalized target space
  double codebook_entropy = 0;          // nats, over emitted code ids
  double truncation_rate = 0;
  double teacher_forced_token_accuracy = 0;  // ground-truth codes through decoder and synthesizer
};

struct EvalReport {
  std::string split;
  std::size_t utterances = 0;
  double transcriber_recovery = 0;
  EvalMetrics metrics;
};

inline void to_json(nlohmann::json& j, const EvalMetrics& m) {
  j = {{"token_accuracy", m.token_accuracy},
       {"sequence_exact_match", m.sequence_exact_match},
       {"code_prediction_accuracy", m.code_prediction_accuracy},
       {"spec_l1", m.spec_l1},
       {"codebook_entropy", m.codebook_entropy},
       {"truncation_rate", m.truncation_rate},
       {"teacher_forced_token_accuracy", m.teacher_forced_token_accuracy}};
}

inline void from_json(const nlohmann::json& j, EvalMetrics& m) {
  m.token_accuracy = j.at("token_accuracy").get<double>();
  m.sequence_exact_match = j.at("sequence_exact_match").get<double>();
  m.code_prediction_accuracy = j.at("code_prediction_accuracy").get<double>();
  m.spec_l1 = j.at("spec_l1").get<double>();
  m.codebook_entropy = j.at("codebook_entropy").get<double>();
  m.truncation_rate = j.at("truncation_rate").get<double>();
  m.teacher_forced_token_accuracy = j.at("teacher_forced_token_accuracy").get<double>();
}

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"split", r.split},
       {"utterances", r.utterances},
       {"transcriber_recovery", r.transcriber_recovery},
       {"metrics", r.metrics}};
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  r.split = j.at("split").get<std::string>();
  r.utterances = j.at("utterances").get<std::size_t>();
  r.transcriber_recovery = j.at("transcriber_recovery").get<double>();
  r.metrics = j.at("metrics").get<EvalMetrics>();
}

/// Mean absolute difference over max(T_a, T_b) frames, the shorter side
/// zero-padded, so length errors are penalized.
inline double padded_l1(const Tensor& a, const Tensor& b) {
  const auto rows = std::max(a.rows(), b.rows());
  const auto cols = std::max(a.cols(), b.cols());
  if (rows == 0) return 0.0;
  double s = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const double x = r < a.rows() && c < a.cols() ? a(r, c) : 0.0;
      const double y = r < b.rows() && c < b.cols() ? b(r, c) : 0.0;
      s += std::abs(x - y);
    }
  }
  return s / static_cast<double>(rows * cols);
}

struct UtteranceResult {
  std::vector<int> hypothesis;
  std::vector<int> code_ids;
  bool truncated = false;
  double spec_l1 = 0;
  std::size_t code_correct = 0;
  std::size_t code_labels = 0;
  std::vector<int> teacher_forced_hypothesis;
};

/// Runs inference and the teacher-forced probe on one pair.
inline UtteranceResult evaluate_utterance(const TextlessModel& m, const QuantizerModel& q, const Tensor& unit_codebook,
                                          const ToyUtterancePair& p, const std::vector<std::vector<double>>& templates,
                                          const TranscriberConfig& tcfg) {
  UtteranceResult out;
  const auto r = infer(m, p.source);
  out.code_ids = r.code_ids;
  out.truncated = r.truncated;
  out.hypothesis = transcribe_toy(channel_denormalize(r.spectrogram, q.stats), templates, tcfg);

  const auto target = channel_normalize(p.target, q.stats);
  out.spec_l1 = padded_l1(r.spectrogram.frames, target.frames);

  const auto codes = quantize_ids(q, target, &unit_codebook);
  Tape tape(false);
  const Tensor x = encoder_input(channel_normalize(p.source, m.source_stats));
  const Var memory = encode_memory(tape, m, tape.constant(x), Segments::single(x.rows()));
  std::vector<int> ids{m.cfg.bos()};
  ids.insert(ids.end(), codes.begin(), codes.end());
  const Var h = decoder_states(tape, m, ids, Segments::single(ids.size()), memory, Segments::single(x.rows()));
  const auto top = argmax_rows(m.logits(tape, h).value());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const int label = t < codes.size() ? codes[t] : m.cfg.eos();
    out.code_correct += top[t] == label;
  }
  out.code_labels = ids.size();

  std::vector<long> rows(codes.size());
  std::iota(rows.begin(), rows.end(), 1L);
  const auto frames = synthesize(tape, m, gather_rows(h, rows), Segments::single(rows.size())).value();
  out.teacher_forced_hypothesis =
      transcribe_toy(channel_denormalize(Spectrogram{frames, 100.0}, q.stats), templates, tcfg);
  return out;
}

/// Evaluates every pair of `split`. The transcriber calibration gate runs
/// first on the split's clean targets.
inline EvalReport evaluate_model(const TextlessModel& m, const QuantizerModel& q, const ToyCorpus& corpus,
                                 const std::string& split, const TranscriberConfig& tcfg = {}) {
  if (m.cfg.stride != q.cfg.stride) {
    throw ConfigError("stride mismatch: model " + std::to_string(m.cfg.stride) + ", quantizer " + std::to_string(q.cfg.stride));
  }
  if (m.cfg.codebook_size != q.cfg.codebook_size) {
    throw ConfigError("codebook size mismatch: model " + std::to_string(m.cfg.codebook_size) + ", quantizer " +
                      std::to_string(q.cfg.codebook_size));
  }
  const auto pairs = corpus.split(split);
  if (pairs.empty()) throw std::invalid_argument("split '" + split + "' has no utterances");
  const auto templates = target_token_templates(corpus.grammar, corpus.frontend);

  EvalReport report;
  report.split = split;
  report.utterances = pairs.size();
  report.transcriber_recovery = transcriber_recovery(pairs, templates, tcfg);
  if (report.transcriber_recovery < kCalibrationGate) {
    throw CalibrationError("transcriber recovers only " + std::to_string(report.transcriber_recovery) +
                           " of clean target tokens (gate " + std::to_string(kCalibrationGate) + ")");
  }

  const Tensor unit = q.codebook.normalized();
  double acc = 0, tf_acc = 0, l1 = 0;
  std::size_t exact = 0, truncated = 0, correct = 0, labels = 0;
  std::vector<int> emitted;
  for (const auto* p : pairs) {
    const auto u = evaluate_utterance(m, q, unit, *p, templates, tcfg);
    acc += token_accuracy(u.hypothesis, p->target_tokens);
    tf_acc += token_accuracy(u.teacher_forced_hypothesis, p->target_tokens);
    exact += u.hypothesis == p->target_tokens;
    truncated += u.truncated;
    l1 += u.spec_l1;
    correct += u.code_correct;
    labels += u.code_labels;
    emitted.insert(emitted.end(), u.code_ids.begin(), u.code_ids.end());
  }
  const auto n = static_cast<double>(pairs.size());
  auto& mt = report.metrics;
  mt.token_accuracy = acc / n;
  mt.sequence_exact_match = static_cast<double>(exact) / n;
  mt.code_prediction_accuracy = static_cast<double>(correct) / static_cast<double>(labels);
  mt.spec_l1 = l1 / n;
  mt.codebook_entropy = codebook_utilization(emitted, q.cfg.codebook_size).entropy;
  mt.truncation_rate = static_cast<double>(truncated) / n;
  mt.teacher_forced_token_accuracy = tf_acc / n;
  return report;
}

}  // namespace textless
