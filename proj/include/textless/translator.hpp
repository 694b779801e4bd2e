#pragma once

// Speech-to-speech translation over discrete speech codes: a Transformer
// speech encoder, an autoregressive code decoder with cross-attention, and a
// non-autoregressive synthesizer that upsamples decoder states to frames.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "textless/frontend.hpp"
#include "textless/harness.hpp"
#include "textless/io.hpp"
#include "textless/nn.hpp"
#include "textless/quantizer.hpp"

namespace textless {

inline constexpr std::size_t kEncoderSubsample = 4;

enum class DecodeMode { greedy, beam };

struct ModelConfig {
  std::size_t feature_dim = 80;
  std::size_t stride = 4;           // synthesizer upsampling; equals the quantizer stride
  std::size_t codebook_size = 512;  // decoder vocabulary is codebook_size + 3
  TransformerConfig encoder{128, 4, 4, 512};
  TransformerConfig decoder{128, 3, 4, 512};
  TransformerConfig synthesizer{64, 4, 4, 256};
  double lambda_spec = 1.0;
  DecodeMode decode = DecodeMode::greedy;
  std::size_t beam_width = 4;
  std::size_t max_decode_len = 64;
  bool freeze_encoder = false;

  std::size_t vocab() const { return codebook_size + 3; }
  int bos() const { return static_cast<int>(codebook_size); }
  int eos() const { return static_cast<int>(codebook_size) + 1; }
  int pad() const { return static_cast<int>(codebook_size) + 2; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (!is_supported_stride(stride)) fail("stride must be one of 1, 2, 4, 8, 16");
    if (codebook_size < 2) fail("codebook_size must be >= 2");
    if (feature_dim < 1) fail("feature_dim must be >= 1");
    if (lambda_spec < 0.0) fail("lambda_spec must be >= 0");
    if (max_decode_len < 1) fail("max_decode_len must be >= 1");
    if (decode == DecodeMode::beam && beam_width < 1) fail("beam_width must be >= 1");
    for (const auto* t : {&encoder, &decoder, &synthesizer}) {
      if (t->width == 0 || t->heads == 0 || t->width % t->heads != 0) fail("transformer width must be a multiple of heads");
    }
  }

  /// Model shaped to consume a quantizer's codes and reuse its decoder.
  static ModelConfig for_quantizer(const VqConfig& vq, std::size_t d) {
    ModelConfig c;
    c.feature_dim = d;
    c.stride = vq.stride;
    c.codebook_size = vq.codebook_size;
    c.synthesizer = vq.decoder;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"feature_dim", c.feature_dim},
       {"stride", c.stride},
       {"codebook_size", c.codebook_size},
       {"encoder", c.encoder},
       {"decoder", c.decoder},
       {"synthesizer", c.synthesizer},
       {"lambda_spec", c.lambda_spec},
       {"decode", c.decode == DecodeMode::greedy ? "greedy" : "beam"},
       {"beam_width", c.beam_width},
       {"max_decode_len", c.max_decode_len},
       {"freeze_encoder", c.freeze_encoder}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const std::vector<std::string> known{"feature_dim", "stride",      "codebook_size", "encoder",
                                              "decoder",     "synthesizer", "lambda_spec",   "decode",
                                              "beam_width",  "max_decode_len", "freeze_encoder"};
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("model config: unknown field '" + k + "'");
  }
  try {
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.stride = j.value("stride", c.stride);
    c.codebook_size = j.value("codebook_size", c.codebook_size);
    c.encoder = j.value("encoder", c.encoder);
    c.decoder = j.value("decoder", c.decoder);
    c.synthesizer = j.value("synthesizer", c.synthesizer);
    c.lambda_spec = j.value("lambda_spec", c.lambda_spec);
    if (j.contains("decode")) {
      const auto mode = j.at("decode").get<std::string>();
      if (mode == "greedy") {
        c.decode = DecodeMode::greedy;
      } else if (mode == "beam") {
        c.decode = DecodeMode::beam;
      } else {
        throw ConfigError("model config: decode must be greedy or beam, got '" + mode + "'");
      }
    }
    c.beam_width = j.value("beam_width", c.beam_width);
    c.max_decode_len = j.value("max_decode_len", c.max_decode_len);
    c.freeze_encoder = j.value("freeze_encoder", c.freeze_encoder);
  } catch (const nlohmann::json::type_error& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
}

// ---------------------------------------------------------------------------
// Model

/// Frame stacking by 4 (a stride-4 convolution) with GELU, then a
/// non-causal Transformer.
struct SpeechEncoder {
  Linear in;
  TransformerStack stack;

  SpeechEncoder() = default;
  SpeechEncoder(const TransformerConfig& cfg, std::size_t d, Rng& rng)
      : in(d * kEncoderSubsample, cfg.width, rng), stack(cfg, false, rng) {}

  Var operator()(Tape& tape, const Var& stacked, const Segments& segs) const {
    Var h = gelu(in(tape, stacked));
    return stack(tape, add_positions(tape, h, segs), segs, false);
  }

  void visit(const std::string& prefix, const ParamVisitor& f) {
    in.visit(prefix + "/in", f);
    stack.visit(prefix + "/stack", f);
  }
};

struct TextlessModel {
  ModelConfig cfg;
  ChannelStats source_stats;
  SpeechEncoder encoder;
  Linear memory;      // encoder width -> decoder width
  Tensor embed;       // vocab x decoder width
  TransformerStack decoder;
  Linear logits;      // decoder width -> vocab
  Linear synth_in;    // decoder width -> synthesizer width
  SpectrogramDecoder synthesizer;

  void visit(const std::string& prefix, const ParamVisitor& f) {
    encoder.visit(prefix + "encoder", f);
    memory.visit(prefix + "decoder/memory", f);
    f(prefix + "decoder/embed", embed);
    decoder.visit(prefix + "decoder/stack", f);
    logits.visit(prefix + "decoder/logits", f);
    synth_in.visit(prefix + "synthesizer/in", f);
    synthesizer.visit(prefix + "synthesizer", f);
  }

  ParamList encoder_params() {
    ParamList out;
    encoder.visit("encoder", [&](const std::string& n, Tensor& t) { out.push_back({n, &t}); });
    return out;
  }
};

inline TextlessModel init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  TextlessModel m;
  m.cfg = cfg;
  m.source_stats = ChannelStats{std::vector<double>(cfg.feature_dim, 0.0), std::vector<double>(cfg.feature_dim, 1.0)};
  Rng enc_rng(derive_seed(seed, "model/encoder"));
  m.encoder = SpeechEncoder(cfg.encoder, cfg.feature_dim, enc_rng);
  Rng dec_rng(derive_seed(seed, "model/decoder"));
  m.memory = Linear(cfg.encoder.width, cfg.decoder.width, dec_rng);
  m.embed = gaussian({cfg.vocab(), cfg.decoder.width}, 1.0, dec_rng);
  m.embed.set_requires_grad(true);
  m.decoder = TransformerStack(cfg.decoder, true, dec_rng);
  m.logits = Linear(cfg.decoder.width, cfg.vocab(), dec_rng);
  Rng syn_rng(derive_seed(seed, "model/synthesizer"));
  m.synth_in = Linear(cfg.decoder.width, cfg.synthesizer.width, syn_rng);
  m.synthesizer = SpectrogramDecoder(cfg.synthesizer, cfg.stride, cfg.feature_dim, syn_rng);
  if (cfg.freeze_encoder) m.encoder.visit("", [](const std::string&, Tensor& t) { t.set_requires_grad(false); });
  return m;
}

/// Copies the quantizer decoder's Transformer stack and output projection
/// into the synthesizer. Nothing is written unless every tensor matches.
inline void init_synthesizer_from_vqvae(TextlessModel& m, QuantizerModel& q) {
  Checkpoint src;
  q.decoder.visit("synthesizer", [&](const std::string& n, Tensor& t) { src.tensors[n] = t; });
  ParamList dst;
  m.synthesizer.visit("synthesizer", [&](const std::string& n, Tensor& t) { dst.push_back({n, &t}); });
  std::vector<std::string> problems;
  if (q.cfg.stride != m.cfg.stride) {
    problems.push_back("stride (quantizer " + std::to_string(q.cfg.stride) + ", model " + std::to_string(m.cfg.stride) + ")");
  }
  for (const auto& p : dst) {
    auto it = src.tensors.find(p.name);
    if (it == src.tensors.end()) {
      problems.push_back(p.name + " (missing in quantizer decoder)");
    } else if (it->second.shape() != p.tensor->shape()) {
      problems.push_back(p.name + " (quantizer " + to_string(it->second.shape()) + ", model " + to_string(p.tensor->shape()) + ")");
    }
  }
  for (const auto& [name, t] : src.tensors) {
    if (std::none_of(dst.begin(), dst.end(), [&](const ParamRef& p) { return p.name == name; })) {
      problems.push_back(name + " (missing in synthesizer)");
    }
  }
  if (!problems.empty()) {
    std::string msg = "synthesizer does not match quantizer decoder:";
    for (const auto& s : problems) msg += "\n  " + s;
    throw ShapeError(msg);
  }
  restore_params(src, dst);
}

// ---------------------------------------------------------------------------
// Inputs

/// Normalized frames stacked in groups of 4 with the tail zero-padded:
/// ceil(T/4) rows of width 4d.
inline Tensor encoder_input(const Spectrogram& normalized) {
  const auto t_count = normalized.num_frames();
  if (t_count == 0) throw std::invalid_argument("encoder_input: empty spectrogram");
  const auto d = normalized.dim();
  const auto rows = (t_count + kEncoderSubsample - 1) / kEncoderSubsample;
  std::vector<double> v(rows * kEncoderSubsample * d, 0.0);
  std::copy(normalized.frames.values().begin(), normalized.frames.values().end(), v.begin());
  return Tensor::matrix(rows, kEncoderSubsample * d, std::move(v));
}

/// Source encoder input and stacked normalized target for one pair.
struct S2stExample {
  Tensor source;  // ceil(T_src/4) x 4d
  Tensor target;  // floor(T_tgt/s) x d*s
};

inline S2stExample make_example(const Spectrogram& source, const Spectrogram& target, const ChannelStats& source_stats,
                                const ChannelStats& target_stats, std::size_t stride) {
  return {encoder_input(channel_normalize(source, source_stats)),
          stack_frames(channel_normalize(target, target_stats), stride).frames};
}

// ---------------------------------------------------------------------------
// Forward passes

/// Encoder memory in decoder width.
inline Var encode_memory(Tape& tape, const TextlessModel& m, const Var& source_rows, const Segments& segs) {
  if (source_rows.cols() != m.cfg.feature_dim * kEncoderSubsample) {
    throw ShapeError("encode_speech: input width " + std::to_string(source_rows.cols()) + ", expected " +
                     std::to_string(m.cfg.feature_dim * kEncoderSubsample));
  }
  return m.memory(tape, m.encoder(tape, source_rows, segs));
}

/// Contextual source representation: ceil(T/4) rows of encoder width.
inline Tensor encode_speech(const TextlessModel& m, const Spectrogram& normalized_source) {
  Tape tape(false);
  const Tensor x = encoder_input(normalized_source);
  return m.encoder(tape, tape.constant(x), Segments::single(x.rows())).value();
}

/// Decoder states for packed input ids (each sequence starting with BOS).
inline Var decoder_states(Tape& tape, const TextlessModel& m, std::span<const int> ids, const Segments& segs,
                          const Var& memory, const Segments& memory_segs) {
  Var x = embedding(tape.param(m.embed), ids);
  return m.decoder(tape, add_positions(tape, x, segs), segs, true, &memory, &memory_segs);
}

/// Teacher-forced logits (len+1 rows per sequence) for one utterance.
inline Tensor decode_linguistic_teacher_forced(const TextlessModel& m, const Tensor& memory, std::span<const int> codes) {
  for (int c : codes) {
    if (c < 0 || c >= static_cast<int>(m.cfg.codebook_size)) {
      throw std::out_of_range("decode_linguistic_teacher_forced: code id " + std::to_string(c) + " outside codebook");
    }
  }
  std::vector<int> ids{m.cfg.bos()};
  ids.insert(ids.end(), codes.begin(), codes.end());
  Tape tape(false);
  Var mem = tape.constant(memory);
  Var h = decoder_states(tape, m, ids, Segments::single(ids.size()), mem, Segments::single(memory.rows()));
  return m.logits(tape, h).value();
}

/// Decoder states (M rows) to M*s frames.
inline Var synthesize(Tape& tape, const TextlessModel& m, const Var& states, const Segments& segs) {
  if (states.rows() == 0) throw std::invalid_argument("synthesize: no decoder states");
  return m.synthesizer(tape, m.synth_in(tape, states), segs);
}

struct S2stLoss {
  Var code_ce;
  Var spec_l1;
  Var total;
  std::size_t correct = 0;  // teacher-forced next-code top-1 hits
  std::size_t labels = 0;
};

/// Packs a batch and computes code_ce + lambda * spec_l1. Target codes come
/// from the frozen quantizer on this tape, so its tensors are bound but never
/// receive gradient.
inline S2stLoss forward_training(Tape& tape, const TextlessModel& m, const QuantizerModel& q,
                                 const std::vector<const S2stExample*>& batch, const Tensor& unit_codebook) {
  if (q.cfg.stride != m.cfg.stride) {
    throw ConfigError("stride mismatch: model " + std::to_string(m.cfg.stride) + ", quantizer " + std::to_string(q.cfg.stride));
  }
  if (q.cfg.codebook_size != m.cfg.codebook_size) {
    throw ConfigError("codebook size mismatch: model " + std::to_string(m.cfg.codebook_size) + ", quantizer " +
                      std::to_string(q.cfg.codebook_size));
  }
  std::vector<Tensor> src, tgt;
  for (const auto* ex : batch) {
    src.push_back(ex->source);
    tgt.push_back(ex->target);
  }
  std::vector<std::size_t> all(batch.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto sp = pack_rows(src, all);
  const auto tp = pack_rows(tgt, all);

  const Var target_rows = tape.constant(tp.rows);
  const auto codes = nearest_codes(encode_latents(tape, q, target_rows, tp.segs).value(), unit_codebook);

  std::vector<int> ids, labels;
  std::vector<long> synth_rows;
  std::vector<std::size_t> dec_len;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto off = tp.segs.offset[i], len = tp.segs.length[i];
    const auto base = ids.size();
    ids.push_back(m.cfg.bos());
    for (std::size_t j = 0; j < len; ++j) {
      ids.push_back(codes[off + j]);
      labels.push_back(codes[off + j]);
      synth_rows.push_back(static_cast<long>(base + j + 1));
    }
    labels.push_back(m.cfg.eos());
    dec_len.push_back(len + 1);
  }
  const auto dsegs = Segments::from_lengths(dec_len);

  Var memory = encode_memory(tape, m, tape.constant(sp.rows), sp.segs);
  Var h = decoder_states(tape, m, ids, dsegs, memory, sp.segs);
  Var logits = m.logits(tape, h);

  S2stLoss out;
  out.code_ce = cross_entropy(logits, labels);
  const auto top = argmax_rows(logits.value());
  for (std::size_t r = 0; r < labels.size(); ++r) out.correct += top[r] == labels[r];
  out.labels = labels.size();

  Var frames = synthesize(tape, m, gather_rows(h, synth_rows), tp.segs);
  Var target_frames = reshape(target_rows, Shape{tp.rows.rows() * m.cfg.stride, m.cfg.feature_dim});
  out.spec_l1 = mean_abs(sub(frames, target_frames));
  out.total = m.cfg.lambda_spec == 0.0 ? out.code_ce : add(out.code_ce, scale(out.spec_l1, m.cfg.lambda_spec));
  return out;
}

// ---------------------------------------------------------------------------
// Inference

struct InferenceResult {
  std::vector<int> code_ids;
  Spectrogram spectrogram;  // normalized target space, s frames per code
  bool truncated = false;
};

namespace detail {

inline std::vector<double> log_softmax_row(std::span<const double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double z = 0;
  for (double v : row) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = row[i] - lz;
  return out;
}

/// Log-probabilities for the next token after `prefix` (starting with BOS).
/// BOS and PAD are never proposed.
inline std::vector<double> next_token_logprobs(const TextlessModel& m, const Tensor& memory, const std::vector<int>& prefix) {
  Tape tape(false);
  Var mem = tape.constant(memory);
  Var h = decoder_states(tape, m, prefix, Segments::single(prefix.size()), mem, Segments::single(memory.rows()));
  Var last = gather_rows(h, {static_cast<long>(prefix.size()) - 1});
  auto lp = log_softmax_row(m.logits(tape, last).value().row(0));
  lp[static_cast<std::size_t>(m.cfg.bos())] = -std::numeric_limits<double>::infinity();
  lp[static_cast<std::size_t>(m.cfg.pad())] = -std::numeric_limits<double>::infinity();
  return lp;
}

inline int argmax(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace detail

inline std::vector<int> greedy_decode(const TextlessModel& m, const Tensor& memory, bool& truncated) {
  std::vector<int> prefix{m.cfg.bos()};
  truncated = true;
  while (prefix.size() - 1 < m.cfg.max_decode_len) {
    const int next = detail::argmax(detail::next_token_logprobs(m, memory, prefix));
    if (next == m.cfg.eos()) {
      truncated = false;
      break;
    }
    prefix.push_back(next);
  }
  return {prefix.begin() + 1, prefix.end()};
}

/// Beam search on summed log-probability; ties keep the earlier candidate.
inline std::vector<int> beam_decode(const TextlessModel& m, const Tensor& memory, bool& truncated) {
  struct Hyp {
    std::vector<int> ids;
    double score;
  };
  std::vector<Hyp> beams{{{m.cfg.bos()}, 0.0}};
  std::vector<Hyp> finished;
  const auto width = m.cfg.beam_width;
  for (std::size_t step = 0; step < m.cfg.max_decode_len && !beams.empty(); ++step) {
    std::vector<Hyp> cand;
    for (const auto& b : beams) {
      const auto lp = detail::next_token_logprobs(m, memory, b.ids);
      std::vector<int> order(lp.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int c) { return lp[a] > lp[c]; });
      for (std::size_t k = 0; k < std::min(width, order.size()); ++k) {
        if (!std::isfinite(lp[order[k]])) break;
        Hyp h = b;
        h.ids.push_back(order[k]);
        h.score += lp[order[k]];
        cand.push_back(std::move(h));
      }
    }
    std::stable_sort(cand.begin(), cand.end(), [](const Hyp& a, const Hyp& b) { return a.score > b.score; });
    beams.clear();
    for (auto& c : cand) {
      if (beams.size() + finished.size() >= width && beams.size() >= width) break;
      if (c.ids.back() == m.cfg.eos()) {
        finished.push_back(std::move(c));
      } else if (beams.size() < width) {
        beams.push_back(std::move(c));
      }
    }
    if (finished.size() >= width) break;
    if (!finished.empty() && !beams.empty()) {
      const double best_done = std::max_element(finished.begin(), finished.end(), [](const Hyp& a, const Hyp& b) {
                                 return a.score < b.score;
                               })->score;
      // scores only decrease, so no open beam can overtake
      if (beams.front().score <= best_done) break;
    }
  }
  truncated = finished.empty();
  const auto& pool = finished.empty() ? beams : finished;
  const Hyp* best = &pool.front();
  for (const auto& h : pool) {
    if (h.score > best->score) best = &h;
  }
  std::vector<int> out(best->ids.begin() + 1, best->ids.end());
  if (!out.empty() && out.back() == m.cfg.eos()) out.pop_back();
  return out;
}

/// Decodes codes from a raw source spectrogram and synthesizes the
/// (normalized) target spectrogram from the decoder states of the emitted
/// codes.
inline InferenceResult infer(const TextlessModel& m, const Spectrogram& source) {
  const Tensor x = encoder_input(channel_normalize(source, m.source_stats));
  Tensor memory;
  {
    Tape tape(false);
    memory = encode_memory(tape, m, tape.constant(x), Segments::single(x.rows())).value();
  }
  InferenceResult r;
  r.code_ids = m.cfg.decode == DecodeMode::beam ? beam_decode(m, memory, r.truncated) : greedy_decode(m, memory, r.truncated);
  if (r.code_ids.empty()) {
    r.spectrogram = Spectrogram{Tensor::matrix(0, m.cfg.feature_dim), 100.0};
    return r;
  }
  std::vector<int> ids{m.cfg.bos()};
  ids.insert(ids.end(), r.code_ids.begin(), r.code_ids.end());
  Tape tape(false);
  Var mem = tape.constant(memory);
  Var h = decoder_states(tape, m, ids, Segments::single(ids.size()), mem, Segments::single(memory.rows()));
  std::vector<long> rows(r.code_ids.size());
  std::iota(rows.begin(), rows.end(), 1L);
  const auto segs = Segments::single(rows.size());
  r.spectrogram = Spectrogram{synthesize(tape, m, gather_rows(h, rows), segs).value(), 100.0};
  return r;
}

// ---------------------------------------------------------------------------
// Training

/// Trains encoder, decoder and synthesizer; the quantizer is frozen first.
/// Logs code_ce, spec_l1, total and code_accuracy.
inline void train_s2st(TextlessModel& m, QuantizerModel& q, const std::vector<S2stExample>& examples, const TrainConfig& cfg,
                       AdamState& adam, MetricLog& log, const std::function<void(long)>& checkpoint = {}) {
  if (examples.empty()) throw std::invalid_argument("train_s2st: empty corpus");
  q.freeze();
  const Tensor unit = q.codebook.normalized();
  const auto params = trainable(collect_params(m, ""));
  EpochSampler sampler(examples.size(), derive_seed(cfg.seed, "s2st/batches"));
  train_loop(params, adam, cfg, log, checkpoint, [&](Tape& tape, long step) {
    std::vector<const S2stExample*> batch;
    for (auto i : sampler.batch(step, cfg.batch_size)) batch.push_back(&examples[i]);
    auto loss = forward_training(tape, m, q, batch, unit);
    const double ce = loss.code_ce.value().item(), l1 = loss.spec_l1.value().item();
    std::vector<std::pair<std::string, double>> metrics{
        {"code_ce", ce},
        {"spec_l1", l1},
        {"total", loss.total.value().item()},
        {"code_accuracy", static_cast<double>(loss.correct) / static_cast<double>(loss.labels)}};
    return StepOutput{loss.total, std::move(metrics)};
  });
}

// ---------------------------------------------------------------------------
// Masked-prediction encoder pretraining

struct MaskConfig {
  double fraction = 0.4;
  std::size_t span = 4;

  void validate() const {
    if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("mask fraction must be in (0, 1)");
    if (span < 1) throw ConfigError("mask span must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const MaskConfig& c) { j = {{"fraction", c.fraction}, {"span", c.span}}; }
inline void from_json(const nlohmann::json& j, MaskConfig& c) {
  c.fraction = j.value("fraction", c.fraction);
  c.span = j.value("span", c.span);
  c.validate();
}

/// Marks spans of `span` positions at random starts until at least
/// round(fraction * length) positions are masked.
inline std::vector<bool> sample_mask(std::size_t length, const MaskConfig& cfg, Rng& rng) {
  cfg.validate();
  std::vector<bool> mask(length, false);
  const auto goal = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.fraction * static_cast<double>(length))));
  std::size_t count = 0;
  while (count < std::min(goal, length)) {
    const auto start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(length) - 1));
    for (std::size_t i = start; i < std::min(length, start + cfg.span); ++i) {
      if (!mask[i]) {
        mask[i] = true;
        ++count;
      }
    }
  }
  return mask;
}

/// Encoder plus a linear head over the random quantizer's codes.
struct PretrainModel {
  SpeechEncoder encoder;
  Linear head;

  void visit(const std::string& prefix, const ParamVisitor& f) {
    encoder.visit(prefix + "encoder", f);
    head.visit(prefix + "pretrain/head", f);
  }
};

inline PretrainModel init_pretrain_model(const ModelConfig& cfg, std::size_t n_codes, std::uint64_t seed) {
  PretrainModel p;
  Rng enc_rng(derive_seed(seed, "model/encoder"));
  p.encoder = SpeechEncoder(cfg.encoder, cfg.feature_dim, enc_rng);
  Rng head_rng(derive_seed(seed, "pretrain/head"));
  p.head = Linear(cfg.encoder.width, n_codes, head_rng);
  return p;
}

/// One masked utterance: zeroed encoder input rows and code labels at
/// masked positions (-1 elsewhere).
struct MaskedExample {
  Tensor input;
  std::vector<int> labels;
};

/// Encoder input rows and the random quantizer's code per row (the stride-4
/// quantizer aligns one code with each encoder position).
struct PretrainExample {
  Tensor input;
  std::vector<int> codes;  // -1 for the zero-padded tail row
};

inline PretrainExample make_pretrain_example(const Spectrogram& normalized, const QuantizerModel& random_q,
                                             const Tensor& unit_codebook) {
  if (random_q.cfg.stride != kEncoderSubsample) throw ConfigError("pretraining quantizer stride must be 4");
  PretrainExample ex;
  ex.input = encoder_input(normalized);
  ex.codes.assign(ex.input.rows(), -1);
  if (normalized.num_frames() >= kEncoderSubsample) {
    const auto ids = quantize_ids(random_q, normalized, &unit_codebook);
    std::copy(ids.begin(), ids.end(), ex.codes.begin());
  }
  return ex;
}

inline MaskedExample apply_mask(const PretrainExample& ex, const std::vector<bool>& mask) {
  MaskedExample out{ex.input, std::vector<int>(ex.codes.size(), -1)};
  const auto c = out.input.cols();
  for (std::size_t r = 0; r < mask.size(); ++r) {
    if (!mask[r]) continue;
    std::fill_n(out.input.values().begin() + static_cast<std::ptrdiff_t>(r * c), c, 0.0);
    out.labels[r] = ex.codes[r];
  }
  return out;
}

struct PretrainLoss {
  Var loss;
  std::size_t correct = 0;
  std::size_t masked = 0;
};

inline PretrainLoss pretrain_loss(Tape& tape, const PretrainModel& p, const std::vector<MaskedExample>& batch) {
  std::vector<Tensor> inputs;
  std::vector<int> labels;
  for (const auto& ex : batch) {
    inputs.push_back(ex.input);
    labels.insert(labels.end(), ex.labels.begin(), ex.labels.end());
  }
  std::vector<std::size_t> all(batch.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto packed = pack_rows(inputs, all);
  Var logits = p.head(tape, p.encoder(tape, tape.constant(packed.rows), packed.segs));
  PretrainLoss out;
  out.loss = cross_entropy(logits, labels);
  const auto top = argmax_rows(logits.value());
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0) continue;
    ++out.masked;
    out.correct += top[r] == labels[r];
  }
  return out;
}

/// Masks are drawn per (seed, step, batch slot), so resumed runs replay them.
inline void pretrain_encoder_masked(PretrainModel& p, const std::vector<PretrainExample>& corpus, const MaskConfig& mask,
                                    const TrainConfig& cfg, AdamState& adam, MetricLog& log,
                                    const std::function<void(long)>& checkpoint = {}) {
  if (corpus.empty()) throw std::invalid_argument("pretrain_encoder_masked: empty corpus");
  mask.validate();
  const auto params = trainable(collect_params(p, ""));
  EpochSampler sampler(corpus.size(), derive_seed(cfg.seed, "pretrain/batches"));
  train_loop(params, adam, cfg, log, checkpoint, [&](Tape& tape, long step) {
    std::vector<MaskedExample> batch;
    const auto idx = sampler.batch(step, cfg.batch_size);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      Rng rng(derive_seed(cfg.seed, "pretrain/mask", static_cast<std::uint64_t>(step) * 4096 + j));
      const auto& ex = corpus[idx[j]];
      batch.push_back(apply_mask(ex, sample_mask(ex.input.rows(), mask, rng)));
    }
    auto out = pretrain_loss(tape, p, batch);
    const double acc = out.masked ? static_cast<double>(out.correct) / static_cast<double>(out.masked) : 0.0;
    return StepOutput{out.loss, {{"masked_ce", out.loss.value().item()}, {"masked_accuracy", acc}}};
  });
}

/// Copies pretrained encoder tensors (names "encoder/...") into m.
inline void load_encoder_weights(TextlessModel& m, const Checkpoint& ck) {
  const auto params = m.encoder_params();
  Checkpoint sub;
  for (const auto& p : params) {
    if (auto it = ck.tensors.find(p.name); it != ck.tensors.end()) sub.tensors[p.name] = it->second;
  }
  restore_params(sub, params);
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json model_config_json(const TextlessModel& m) {
  return {{"type", "textless_model"}, {"model", m.cfg}, {"source_stats", m.source_stats}};
}

inline Checkpoint model_checkpoint(TextlessModel& m, const AdamState* adam = nullptr) {
  Checkpoint ck;
  ck.config = model_config_json(m);
  store_params(ck, collect_params(m, ""));
  if (adam) store_adam(ck, *adam);
  return ck;
}

inline TextlessModel model_from_checkpoint(const Checkpoint& ck) {
  if (ck.config.value("type", std::string()) != "textless_model") throw ConfigError("checkpoint is not a translation model");
  auto m = init_model(ck.config.at("model").get<ModelConfig>(), 0);
  m.source_stats = ck.config.at("source_stats").get<ChannelStats>();
  restore_params(ck, collect_params(m, ""));
  return m;
}

inline void save_model(const std::filesystem::path& path, TextlessModel& m, const AdamState* adam = nullptr) {
  save_checkpoint(path, model_checkpoint(m, adam));
}

inline TextlessModel load_model(const std::filesystem::path& path) { return model_from_checkpoint(load_checkpoint(path)); }

inline Checkpoint pretrain_checkpoint(PretrainModel& p, const ModelConfig& cfg, const AdamState* adam = nullptr) {
  Checkpoint ck;
  ck.config = {{"type", "encoder_pretrain"}, {"model", cfg}, {"head_classes", p.head.out_features()}};
  store_params(ck, collect_params(p, ""));
  if (adam) store_adam(ck, *adam);
  return ck;
}

}  // namespace textless
