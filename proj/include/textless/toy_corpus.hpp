#pragma once

// Procedural parallel "speech" corpus. Every token is a harmonic tone with
// its own fundamental and harmonic amplitude profile; an utterance is a
// sequence of tones separated by short noise-floor gaps. The target side is
// the source sequence translated through a lexicon plus adjacent-pair swap
// rules, rendered with independent durations.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "textless/frontend.hpp"
#include "textless/io.hpp"
#include "textless/random.hpp"

namespace textless {

struct ToneToken {
  double f0 = 200.0;
  std::vector<double> harmonics;  // relative amplitude of partial h+1
};

/// Adjacent pair (a, b) with a in [first_lo, first_hi] and b in
/// [second_lo, second_hi] is emitted as (lex(b), lex(a)).
struct SwapRule {
  int first_lo = 0, first_hi = 0;
  int second_lo = 0, second_hi = 0;

  bool matches(int a, int b) const { return a >= first_lo && a <= first_hi && b >= second_lo && b <= second_hi; }
};

struct IntRange {
  int lo = 0, hi = 0;
};

struct ToyGrammar {
  std::vector<ToneToken> source_vocab;
  std::vector<ToneToken> target_vocab;
  std::vector<int> lexicon;  // source id -> target id
  std::vector<SwapRule> swap_rules;

  IntRange tokens_per_utterance{2, 4};
  IntRange source_duration{9, 13};  // frames
  IntRange target_duration{7, 11};
  IntRange gap{3, 6};
  IntRange edge{2, 4};
  double amplitude = 0.3;
  double amplitude_jitter_db = 3.0;
  double f0_jitter = 0.01;
  double noise_level = 1e-5;

  void validate() const;

  /// Applies swap rules left to right over non-overlapping pairs, then the
  /// lexicon.
  std::vector<int> translate(std::span<const int> source) const {
    std::vector<int> out;
    out.reserve(source.size());
    for (std::size_t i = 0; i < source.size(); ++i) {
      if (i + 1 < source.size()) {
        const bool swap = std::any_of(swap_rules.begin(), swap_rules.end(),
                                      [&](const SwapRule& r) { return r.matches(source[i], source[i + 1]); });
        if (swap) {
          out.push_back(lexicon.at(static_cast<std::size_t>(source[i + 1])));
          out.push_back(lexicon.at(static_cast<std::size_t>(source[i])));
          ++i;
          continue;
        }
      }
      out.push_back(lexicon.at(static_cast<std::size_t>(source[i])));
    }
    return out;
  }
};

inline void to_json(nlohmann::json& j, const ToneToken& t) { j = {{"f0", t.f0}, {"harmonics", t.harmonics}}; }
inline void from_json(const nlohmann::json& j, ToneToken& t) {
  j.at("f0").get_to(t.f0);
  j.at("harmonics").get_to(t.harmonics);
}
inline void to_json(nlohmann::json& j, const SwapRule& r) {
  j = {{"first", {r.first_lo, r.first_hi}}, {"second", {r.second_lo, r.second_hi}}};
}
inline void from_json(const nlohmann::json& j, SwapRule& r) {
  r.first_lo = j.at("first").at(0).get<int>();
  r.first_hi = j.at("first").at(1).get<int>();
  r.second_lo = j.at("second").at(0).get<int>();
  r.second_hi = j.at("second").at(1).get<int>();
}
inline void to_json(nlohmann::json& j, const IntRange& r) { j = {r.lo, r.hi}; }
inline void from_json(const nlohmann::json& j, IntRange& r) {
  r.lo = j.at(0).get<int>();
  r.hi = j.at(1).get<int>();
}

inline void to_json(nlohmann::json& j, const ToyGrammar& g) {
  j = {{"source_vocab", g.source_vocab},
       {"target_vocab", g.target_vocab},
       {"lexicon", g.lexicon},
       {"swap_rules", g.swap_rules},
       {"tokens_per_utterance", g.tokens_per_utterance},
       {"source_duration", g.source_duration},
       {"target_duration", g.target_duration},
       {"gap", g.gap},
       {"edge", g.edge},
       {"amplitude", g.amplitude},
       {"amplitude_jitter_db", g.amplitude_jitter_db},
       {"f0_jitter", g.f0_jitter},
       {"noise_level", g.noise_level}};
}

inline void from_json(const nlohmann::json& j, ToyGrammar& g) {
  j.at("source_vocab").get_to(g.source_vocab);
  j.at("target_vocab").get_to(g.target_vocab);
  j.at("lexicon").get_to(g.lexicon);
  g.swap_rules = j.value("swap_rules", std::vector<SwapRule>{});
  g.tokens_per_utterance = j.value("tokens_per_utterance", g.tokens_per_utterance);
  g.source_duration = j.value("source_duration", g.source_duration);
  g.target_duration = j.value("target_duration", g.target_duration);
  g.gap = j.value("gap", g.gap);
  g.edge = j.value("edge", g.edge);
  g.amplitude = j.value("amplitude", g.amplitude);
  g.amplitude_jitter_db = j.value("amplitude_jitter_db", g.amplitude_jitter_db);
  g.f0_jitter = j.value("f0_jitter", g.f0_jitter);
  g.noise_level = j.value("noise_level", g.noise_level);
  g.validate();
}

inline void ToyGrammar::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("grammar: " + m); };
  if (source_vocab.empty() || target_vocab.empty()) fail("empty vocabulary");
  if (lexicon.size() != source_vocab.size()) fail("lexicon must have one entry per source token");
  for (int t : lexicon) {
    if (t < 0 || static_cast<std::size_t>(t) >= target_vocab.size()) fail("lexicon entry out of range");
  }
  for (const auto* vocab : {&source_vocab, &target_vocab}) {
    for (const auto& tok : *vocab) {
      if (!(tok.f0 > 0.0) || tok.harmonics.empty()) fail("tokens need f0 > 0 and at least one harmonic");
    }
  }
  for (const auto& r : {tokens_per_utterance, source_duration, target_duration, gap, edge}) {
    if (r.lo < 0 || r.hi < r.lo) fail("invalid range [" + std::to_string(r.lo) + ", " + std::to_string(r.hi) + "]");
  }
  if (tokens_per_utterance.lo < 1) fail("utterances need at least one token");
  if (source_duration.lo < 1 || target_duration.lo < 1) fail("token durations must be at least one frame");
  if (gap.lo < 1) fail("gaps must be at least one frame");
}

/// Builds vocab_size source and vocab_size target tones with interleaved,
/// log-spaced fundamentals, a permutation lexicon and one swap rule
/// (upper-half token followed by lower-half token).
inline ToyGrammar default_grammar(int vocab_size = 20, std::uint64_t seed = 1) {
  if (vocab_size < 2) throw std::invalid_argument("default_grammar: vocab_size must be at least 2");
  ToyGrammar g;
  Rng rng(derive_seed(seed, "grammar"));
  const double lo = 150.0, hi = 1200.0;
  const int total = 2 * vocab_size;
  for (int i = 0; i < total; ++i) {
    ToneToken tok;
    tok.f0 = lo * std::pow(hi / lo, static_cast<double>(i) / static_cast<double>(total - 1));
    const double tilt = rng.uniform(0.3, 1.2);
    const int count = std::min(12, static_cast<int>(7000.0 / tok.f0));
    for (int h = 1; h <= std::max(count, 1); ++h) {
      tok.harmonics.push_back(std::pow(static_cast<double>(h), -tilt) * rng.uniform(0.2, 1.0));
    }
    (i % 2 == 0 ? g.source_vocab : g.target_vocab).push_back(std::move(tok));
  }
  g.lexicon.resize(static_cast<std::size_t>(vocab_size));
  int step = 7;
  while (std::gcd(step, vocab_size) != 1) ++step;
  for (int i = 0; i < vocab_size; ++i) g.lexicon[static_cast<std::size_t>(i)] = (step * i + 3) % vocab_size;
  const int half = vocab_size / 2;
  g.swap_rules.push_back(SwapRule{half, vocab_size - 1, 0, half - 1});
  return g;
}

// ---------------------------------------------------------------------------
// Rendering

/// Token placement within one rendered side of an utterance.
struct TokenSpan {
  int token = 0;
  std::size_t start = 0;  // first frame
  std::size_t frames = 0;
};

/// Renders tokens at the given frame spans into a waveform whose frame count
/// under `frontend` equals total_frames exactly.
inline std::vector<double> render_waveform(std::span<const ToneToken> vocab, std::span<const TokenSpan> spans,
                                           std::size_t total_frames, const ToyGrammar& g, const FrontendConfig& fe,
                                           Rng& rng) {
  const std::size_t len = total_frames * fe.hop + (fe.window - fe.hop);
  std::vector<double> wave(len);
  for (auto& v : wave) v = g.noise_level * rng.normal();
  const double ramp = 0.005 * fe.sample_rate;
  for (const auto& sp : spans) {
    const auto& tok = vocab[static_cast<std::size_t>(sp.token)];
    const double gain = g.amplitude * std::pow(10.0, rng.uniform(-g.amplitude_jitter_db, g.amplitude_jitter_db) / 20.0);
    const double f0 = tok.f0 * (1.0 + rng.uniform(-g.f0_jitter, g.f0_jitter));
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    // Centre the tone within its frames so the analysis windows see it.
    const std::size_t begin = sp.start * fe.hop + (fe.window - fe.hop) / 2;
    const std::size_t n = sp.frames * fe.hop;
    for (std::size_t i = 0; i < n && begin + i < len; ++i) {
      const double t = static_cast<double>(i) / fe.sample_rate;
      const double pos = static_cast<double>(i);
      const double env = std::min({1.0, pos / ramp, (static_cast<double>(n) - pos) / ramp});
      double v = 0.0;
      for (std::size_t h = 0; h < tok.harmonics.size(); ++h) {
        const double f = f0 * static_cast<double>(h + 1);
        if (f >= 0.5 * fe.sample_rate) break;
        v += tok.harmonics[h] * std::sin(2.0 * std::numbers::pi * f * t + phase * static_cast<double>(h + 1));
      }
      wave[begin + i] += gain * env * v;
    }
  }
  return wave;
}

/// Lays tokens out with edge silences and inter-token gaps.
inline std::pair<std::vector<TokenSpan>, std::size_t> layout_tokens(std::span<const int> tokens, IntRange duration,
                                                                    const ToyGrammar& g, Rng& rng) {
  std::vector<TokenSpan> spans;
  std::size_t t = static_cast<std::size_t>(rng.uniform_int(g.edge.lo, g.edge.hi));
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) t += static_cast<std::size_t>(rng.uniform_int(g.gap.lo, g.gap.hi));
    const auto d = static_cast<std::size_t>(rng.uniform_int(duration.lo, duration.hi));
    spans.push_back({tokens[i], t, d});
    t += d;
  }
  t += static_cast<std::size_t>(rng.uniform_int(g.edge.lo, g.edge.hi));
  return {spans, std::max<std::size_t>(t, 1)};
}

struct ToyUtterancePair {
  std::string id;
  std::uint64_t seed = 0;
  std::vector<int> source_tokens;
  std::vector<int> target_tokens;
  Spectrogram source;
  Spectrogram target;
};

/// One utterance, a pure function of (grammar, seed).
inline ToyUtterancePair generate_utterance(const ToyGrammar& g, std::uint64_t seed, LogMelExtractor& extract) {
  ToyUtterancePair p;
  p.seed = seed;
  Rng rng(seed);
  const auto count = rng.uniform_int(g.tokens_per_utterance.lo, g.tokens_per_utterance.hi);
  for (long i = 0; i < count; ++i) {
    p.source_tokens.push_back(static_cast<int>(rng.uniform_int(0, static_cast<long>(g.source_vocab.size()) - 1)));
  }
  p.target_tokens = g.translate(p.source_tokens);
  const auto& fe = extract.config();
  {
    Rng side(derive_seed(seed, "source"));
    auto [spans, frames] = layout_tokens(p.source_tokens, g.source_duration, g, side);
    p.source = extract(render_waveform(g.source_vocab, spans, frames, g, fe, side));
  }
  {
    Rng side(derive_seed(seed, "target"));
    auto [spans, frames] = layout_tokens(p.target_tokens, g.target_duration, g, side);
    p.target = extract(render_waveform(g.target_vocab, spans, frames, g, fe, side));
  }
  return p;
}

inline std::string utterance_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "utt%06zu", index);
  return buf;
}

inline std::vector<ToyUtterancePair> generate_toy_corpus(const ToyGrammar& g, long count, std::uint64_t seed,
                                                         const FrontendConfig& fe = {}) {
  if (count < 1) throw std::invalid_argument("generate_toy_corpus: count must be at least 1, got " + std::to_string(count));
  g.validate();
  LogMelExtractor extract(fe);
  std::vector<ToyUtterancePair> out;
  out.reserve(static_cast<std::size_t>(count));
  for (long i = 0; i < count; ++i) {
    auto p = generate_utterance(g, derive_seed(seed, "utterance", static_cast<std::uint64_t>(i)), extract);
    p.id = utterance_id(static_cast<std::size_t>(i));
    out.push_back(std::move(p));
  }
  return out;
}

/// Mean log-mel frame of each target token rendered without jitter, used by
/// the oracle transcriber.
inline std::vector<std::vector<double>> target_token_templates(const ToyGrammar& g, const FrontendConfig& fe = {}) {
  ToyGrammar clean = g;
  clean.amplitude_jitter_db = 0.0;
  clean.f0_jitter = 0.0;
  LogMelExtractor extract(fe);
  std::vector<std::vector<double>> templates;
  const std::size_t frames = 16, start = 2, len = 12;
  for (std::size_t v = 0; v < g.target_vocab.size(); ++v) {
    Rng rng(derive_seed(0, "template", v));
    const TokenSpan span{static_cast<int>(v), start, len};
    const auto spec = extract(render_waveform(clean.target_vocab, std::span(&span, 1), frames, clean, fe, rng));
    std::vector<double> mean(spec.dim(), 0.0);
    for (std::size_t t = start + 1; t + 1 < start + len; ++t) {
      for (std::size_t c = 0; c < spec.dim(); ++c) mean[c] += spec.frames(t, c);
    }
    for (auto& m : mean) m /= static_cast<double>(len - 2);
    templates.push_back(std::move(mean));
  }
  return templates;
}

// ---------------------------------------------------------------------------
// Corpus directory
//
//   grammar.json, frontend.json, manifest.jsonl
//   utt/<id>.src.tltn, utt/<id>.tgt.tltn   (raw log-mel, tensor file format)
//   stats.json  {"source": ChannelStats, "target": ChannelStats} from train

struct ManifestEntry {
  std::string id;
  std::uint64_t seed = 0;
  std::string split;
  std::vector<int> source_tokens;
  std::vector<int> target_tokens;
  std::string source_path;
  std::string target_path;
};

inline void to_json(nlohmann::json& j, const ManifestEntry& e) {
  j = {{"id", e.id},
       {"seed", e.seed},
       {"split", e.split},
       {"source_tokens", e.source_tokens},
       {"target_tokens", e.target_tokens},
       {"source_path", e.source_path},
       {"target_path", e.target_path}};
}
inline void from_json(const nlohmann::json& j, ManifestEntry& e) {
  j.at("id").get_to(e.id);
  j.at("seed").get_to(e.seed);
  j.at("split").get_to(e.split);
  j.at("source_tokens").get_to(e.source_tokens);
  j.at("target_tokens").get_to(e.target_tokens);
  j.at("source_path").get_to(e.source_path);
  j.at("target_path").get_to(e.target_path);
}

struct CorpusStats {
  ChannelStats source;
  ChannelStats target;
};

inline void to_json(nlohmann::json& j, const CorpusStats& s) { j = {{"source", s.source}, {"target", s.target}}; }
inline void from_json(const nlohmann::json& j, CorpusStats& s) {
  j.at("source").get_to(s.source);
  j.at("target").get_to(s.target);
}

/// Pairs with split labels.
struct ToyCorpus {
  ToyGrammar grammar;
  FrontendConfig frontend;
  CorpusStats stats;
  std::vector<ToyUtterancePair> pairs;
  std::vector<std::string> splits;

  std::vector<const ToyUtterancePair*> split(const std::string& name) const {
    std::vector<const ToyUtterancePair*> out;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (splits[i] == name) out.push_back(&pairs[i]);
    }
    return out;
  }
};

/// The last round(count * test_fraction) utterances form the test split.
inline std::vector<std::string> assign_splits(std::size_t count, double test_fraction) {
  if (test_fraction < 0.0 || test_fraction >= 1.0) throw std::invalid_argument("test_fraction must be in [0, 1)");
  const auto test = static_cast<std::size_t>(std::llround(static_cast<double>(count) * test_fraction));
  std::vector<std::string> out(count, "train");
  for (std::size_t i = count - std::min(test, count); i < count; ++i) out[i] = "test";
  return out;
}

inline CorpusStats compute_corpus_stats(const std::vector<ToyUtterancePair>& pairs, const std::vector<std::string>& splits) {
  std::vector<Spectrogram> src, tgt;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (splits[i] != "train") continue;
    src.push_back(pairs[i].source);
    tgt.push_back(pairs[i].target);
  }
  if (src.empty()) throw std::invalid_argument("corpus has no train split to compute statistics from");
  return {compute_channel_stats(src), compute_channel_stats(tgt)};
}

inline ToyCorpus make_toy_corpus(const ToyGrammar& g, long count, std::uint64_t seed, double test_fraction = 0.1,
                                 const FrontendConfig& fe = {}) {
  ToyCorpus c;
  c.grammar = g;
  c.frontend = fe;
  c.pairs = generate_toy_corpus(g, count, seed, fe);
  c.splits = assign_splits(c.pairs.size(), test_fraction);
  c.stats = compute_corpus_stats(c.pairs, c.splits);
  return c;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  write_atomic(path, j.dump(2) + "\n");
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

inline void save_corpus(const std::filesystem::path& dir, const ToyCorpus& c) {
  std::filesystem::create_directories(dir / "utt");
  write_json_file(dir / "grammar.json", c.grammar);
  write_json_file(dir / "frontend.json", c.frontend);
  write_json_file(dir / "stats.json", c.stats);
  std::string manifest;
  for (std::size_t i = 0; i < c.pairs.size(); ++i) {
    const auto& p = c.pairs[i];
    ManifestEntry e{p.id, p.seed, c.splits[i], p.source_tokens, p.target_tokens,
                    "utt/" + p.id + ".src.tltn", "utt/" + p.id + ".tgt.tltn"};
    save_tensor(dir / e.source_path, p.source.frames);
    save_tensor(dir / e.target_path, p.target.frames);
    manifest += nlohmann::json(e).dump() + "\n";
  }
  write_atomic(dir / "manifest.jsonl", manifest);
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.jsonl");
  if (!in) throw std::runtime_error("no manifest.jsonl in " + dir.string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<ManifestEntry>());
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument((dir / "manifest.jsonl").string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

/// Loads the corpus; when `only_split` is set, other utterances are skipped.
inline ToyCorpus load_corpus(const std::filesystem::path& dir, const std::optional<std::string>& only_split = {}) {
  ToyCorpus c;
  c.grammar = read_json_file(dir / "grammar.json").get<ToyGrammar>();
  c.frontend = read_json_file(dir / "frontend.json").get<FrontendConfig>();
  c.stats = read_json_file(dir / "stats.json").get<CorpusStats>();
  const double rate = c.frontend.frame_rate_hz();
  for (auto& e : read_manifest(dir)) {
    if (only_split && e.split != *only_split) continue;
    ToyUtterancePair p;
    p.id = e.id;
    p.seed = e.seed;
    p.source_tokens = e.source_tokens;
    p.target_tokens = e.target_tokens;
    p.source = Spectrogram{load_tensor(dir / e.source_path), rate};
    p.target = Spectrogram{load_tensor(dir / e.target_path), rate};
    c.pairs.push_back(std::move(p));
    c.splits.push_back(e.split);
  }
  return c;
}

}  // namespace textless
