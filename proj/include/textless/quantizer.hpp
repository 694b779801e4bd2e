#pragma once

// Speech quantizers: a projection (random, linear) or Transformer encoder,
// a codebook searched in normalized space, and a non-causal Transformer
// decoder that reconstructs the stacked frames from codewords.

#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "textless/frontend.hpp"
#include "textless/harness.hpp"
#include "textless/io.hpp"
#include "textless/nn.hpp"

namespace textless {

enum class QuantizerKind { random, linear, transformer };

inline std::string to_string(QuantizerKind k) {
  switch (k) {
    case QuantizerKind::random: return "random";
    case QuantizerKind::linear: return "linear";
    case QuantizerKind::transformer: return "transformer";
  }
  return "?";
}

inline QuantizerKind parse_quantizer_kind(const std::string& s) {
  if (s == "random") return QuantizerKind::random;
  if (s == "linear") return QuantizerKind::linear;
  if (s == "transformer") return QuantizerKind::transformer;
  throw ConfigError("unknown quantizer kind '" + s + "' (expected random, linear or transformer)");
}

struct VqConfig {
  QuantizerKind kind = QuantizerKind::linear;
  double alpha = 1.0;
  double beta = 0.25;
  std::size_t stride = 4;
  std::size_t codebook_size = 512;
  std::size_t latent_dim = 64;
  bool straight_through = true;
  bool literal_norm = false;  // unsquared distances in the codebook/commitment terms
  TransformerConfig encoder{};
  TransformerConfig decoder{};

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("quantizer config: " + m); };
    if (alpha < 0.0 || beta < 0.0) fail("alpha and beta must be >= 0");
    if (!is_supported_stride(stride)) fail("stride must be one of 1, 2, 4, 8, 16");
    if (codebook_size < 2) fail("codebook_size must be >= 2");
    if (latent_dim < 1) fail("latent_dim must be >= 1");
    for (const auto* t : {&encoder, &decoder}) {
      if (t->width == 0 || t->heads == 0 || t->width % t->heads != 0) fail("transformer width must be a multiple of heads");
    }
  }

  /// 256-wide, 12-layer encoder/decoder stacks.
  static VqConfig large_profile() {
    VqConfig c;
    c.encoder = c.decoder = TransformerConfig{256, 12, 4, 1024};
    return c;
  }
};

inline void to_json(nlohmann::json& j, const VqConfig& c) {
  j = {{"kind", to_string(c.kind)},
       {"alpha", c.alpha},
       {"beta", c.beta},
       {"stride", c.stride},
       {"codebook_size", c.codebook_size},
       {"latent_dim", c.latent_dim},
       {"straight_through", c.straight_through},
       {"literal_norm", c.literal_norm},
       {"encoder", c.encoder},
       {"decoder", c.decoder}};
}

inline void from_json(const nlohmann::json& j, VqConfig& c) {
  static const std::vector<std::string> known{"kind",       "alpha",           "beta",         "stride",  "codebook_size",
                                              "latent_dim", "straight_through", "literal_norm", "encoder", "decoder"};
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("quantizer config: unknown field '" + k + "'");
  }
  try {
    if (j.contains("kind")) c.kind = parse_quantizer_kind(j.at("kind").get<std::string>());
    c.alpha = j.value("alpha", c.alpha);
    c.beta = j.value("beta", c.beta);
    c.stride = j.value("stride", c.stride);
    c.codebook_size = j.value("codebook_size", c.codebook_size);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.straight_through = j.value("straight_through", c.straight_through);
    c.literal_norm = j.value("literal_norm", c.literal_norm);
    c.encoder = j.value("encoder", c.encoder);
    c.decoder = j.value("decoder", c.decoder);
  } catch (const nlohmann::json::type_error& e) {
    throw ConfigError(std::string("quantizer config: ") + e.what());
  }
  c.validate();
}

struct Codebook {
  Tensor vectors;  // n x k
  bool learned = true;

  std::size_t size() const { return vectors.rows(); }
  std::size_t dim() const { return vectors.cols(); }
  Tensor normalized() const { return l2_normalize(vectors); }
};

struct LossBreakdown {
  double reconstruction = 0;
  double codebook_term = 0;
  double commitment_term = 0;
  double total = 0;
};

struct QuantizationResult {
  std::vector<int> code_ids;
  Tensor quantized;  // normalized codewords, one row per code
  LossBreakdown losses;
};

/// Transformer over code-rate vectors followed by a stride-s transposed
/// convolution to frame rate. Used as the quantizer decoder and as the
/// translation model's synthesizer.
struct SpectrogramDecoder {
  TransformerStack stack;
  Tensor kernel;  // {width, stride, d}
  Tensor bias;    // {d}
  std::size_t stride = 4;

  SpectrogramDecoder() = default;
  SpectrogramDecoder(const TransformerConfig& cfg, std::size_t s, std::size_t d, Rng& rng)
      : stack(cfg, false, rng), kernel(Shape{cfg.width, s, d}), bias(filled({d}, 0.0)), stride(s) {
    const double bound = std::sqrt(6.0 / static_cast<double>(cfg.width + d));
    for (auto& v : kernel.values()) v = rng.uniform(-bound, bound);
    kernel.set_requires_grad(true);
  }

  std::size_t width() const { return stack.config.width; }
  std::size_t output_dim() const { return bias.size(); }

  /// x: packed (M x width) code-rate inputs. Returns (M*s x d) frames.
  Var operator()(Tape& tape, const Var& x, const Segments& segs) const {
    Var h = stack(tape, add_positions(tape, x, segs), segs, false);
    return add_row(conv_transpose_1d(h, tape.param(kernel), stride), tape.param(bias));
  }

  void visit(const std::string& prefix, const ParamVisitor& f) {
    stack.visit(prefix + "/stack", f);
    f(prefix + "/upsample/kernel", kernel);
    f(prefix + "/upsample/bias", bias);
  }
};

/// Segments of an s-times upsampled packed sequence.
inline Segments upsampled(const Segments& segs, std::size_t s) {
  Segments out = segs;
  for (auto& o : out.offset) o *= s;
  for (auto& l : out.length) l *= s;
  return out;
}

struct QuantizerModel {
  VqConfig cfg;
  std::size_t feature_dim = 80;
  ChannelStats stats;  // target-side normalization this quantizer was trained with

  Tensor projection;  // A, (d*s) x k; random and linear kinds
  std::optional<Linear> enc_in;
  std::optional<TransformerStack> enc_stack;
  std::optional<Linear> enc_out;
  Codebook codebook;
  Linear dec_in;
  SpectrogramDecoder decoder;

  std::size_t input_width() const { return feature_dim * cfg.stride; }

  void visit(const std::string& prefix, const ParamVisitor& f) {
    if (cfg.kind == QuantizerKind::transformer) {
      enc_in->visit(prefix + "encoder/in", f);
      enc_stack->visit(prefix + "encoder/stack", f);
      enc_out->visit(prefix + "encoder/out", f);
    } else {
      f(prefix + "encoder/A", projection);
    }
    f(prefix + "codebook", codebook.vectors);
    dec_in.visit(prefix + "decoder/in", f);
    decoder.visit(prefix + "decoder", f);
  }

  /// Marks every tensor as constant.
  void freeze() {
    visit("", [](const std::string&, Tensor& t) { t.set_requires_grad(false); });
  }
};

inline QuantizerModel init_quantizer(const VqConfig& cfg, std::size_t d, std::uint64_t seed) {
  cfg.validate();
  QuantizerModel q;
  q.cfg = cfg;
  q.feature_dim = d;
  q.stats = ChannelStats{std::vector<double>(d, 0.0), std::vector<double>(d, 1.0)};
  const auto ds = d * cfg.stride;
  Rng enc_rng(derive_seed(seed, "quantizer/encoder"));
  if (cfg.kind == QuantizerKind::transformer) {
    q.enc_in.emplace(ds, cfg.encoder.width, enc_rng);
    q.enc_stack.emplace(cfg.encoder, false, enc_rng);
    q.enc_out.emplace(cfg.encoder.width, cfg.latent_dim, enc_rng);
  } else {
    q.projection = xavier_uniform(ds, cfg.latent_dim, enc_rng);
  }
  Rng cb_rng(derive_seed(seed, "quantizer/codebook"));
  q.codebook.vectors = gaussian({cfg.codebook_size, cfg.latent_dim}, 1.0, cb_rng);
  Rng dec_rng(derive_seed(seed, "quantizer/decoder"));
  q.dec_in = Linear(cfg.latent_dim, cfg.decoder.width, dec_rng);
  q.decoder = SpectrogramDecoder(cfg.decoder, cfg.stride, d, dec_rng);
  if (cfg.kind == QuantizerKind::random) {
    q.projection.set_requires_grad(false);
    q.codebook.vectors.set_requires_grad(false);
    q.codebook.learned = false;
  }
  return q;
}

/// Xavier-uniform projection and standard-normal codebook, both frozen.
inline QuantizerModel init_random_quantizer(VqConfig cfg, std::size_t d, std::uint64_t seed) {
  if (cfg.kind != QuantizerKind::random) throw ConfigError("init_random_quantizer: config kind must be random");
  return init_quantizer(cfg, d, seed);
}

// ---------------------------------------------------------------------------
// Encoding and code search

/// Packed stacked rows (rows x d*s) to latents (rows x k).
inline Var encode_latents(Tape& tape, const QuantizerModel& q, const Var& stacked, const Segments& segs) {
  if (stacked.cols() != q.input_width()) {
    throw ShapeError("encode_latents: stacked width " + std::to_string(stacked.cols()) + " does not match quantizer input " +
                     std::to_string(q.input_width()) + " (d=" + std::to_string(q.feature_dim) +
                     ", s=" + std::to_string(q.cfg.stride) + ")");
  }
  if (q.cfg.kind != QuantizerKind::transformer) return matmul(stacked, tape.param(q.projection));
  Var h = (*q.enc_in)(tape, stacked);
  h = (*q.enc_stack)(tape, add_positions(tape, h, segs), segs, false);
  return (*q.enc_out)(tape, h);
}

inline Tensor encode_latents(const QuantizerModel& q, const StackedSequence& stacked) {
  Tape tape(false);
  return encode_latents(tape, q, tape.constant(stacked.frames), Segments::single(stacked.frames.rows())).value();
}

/// Index of the nearest row of `unit_codebook` to the (already normalized)
/// vector u by squared Euclidean distance; the lowest index wins ties.
inline int nearest_normalized(std::span<const double> u, const Tensor& unit_codebook) {
  const auto k = unit_codebook.cols();
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < unit_codebook.rows(); ++i) {
    const auto c = unit_codebook.row(i);
    double d = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const double diff = c[j] - u[j];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

/// argmin_i |normalize(c_i) - normalize(latent)|.
inline int nearest_code(std::span<const double> latent, const Codebook& codebook) {
  if (latent.size() != codebook.dim()) {
    throw ShapeError("nearest_code: latent has " + std::to_string(latent.size()) + " dims, codebook " +
                     std::to_string(codebook.dim()));
  }
  const Tensor u = l2_normalize(Tensor::matrix(1, latent.size(), std::vector<double>(latent.begin(), latent.end())));
  return nearest_normalized(u.data(), codebook.normalized());
}

/// Row-wise nearest codes for raw latents against a normalized codebook.
inline std::vector<int> nearest_codes(const Tensor& latents, const Tensor& unit_codebook) {
  const Tensor u = l2_normalize(latents);
  std::vector<int> ids(u.rows());
  for (std::size_t r = 0; r < u.rows(); ++r) ids[r] = nearest_normalized(u.row(r), unit_codebook);
  return ids;
}

// ---------------------------------------------------------------------------
// Objective

struct VqLossVars {
  Var reconstruction;
  Var codebook_term;
  Var commitment_term;
  Var total;

  LossBreakdown values() const {
    return {reconstruction.value().item(), codebook_term.value().item(), commitment_term.value().item(),
            total.value().item()};
  }
};

/// Mean over rows of the squared (or, with literal_norm, plain) distance.
inline Var row_distance(const Var& a, const Var& b, bool literal) {
  Var diff = sub(a, b);
  if (literal) return mean(row_norms(diff, 1e-12));
  return scale(sum_squares(diff), 1.0 / static_cast<double>(diff.rows()));
}

/// x and reconstruction are frame matrices of equal shape; latents are raw
/// encoder outputs and quantized the selected normalized codewords.
inline VqLossVars vq_loss(const Var& x, const Var& latents, const Var& quantized, const Var& reconstruction,
                          const VqConfig& cfg) {
  if (x.shape() != reconstruction.shape()) {
    throw ShapeError("vq_loss: reconstruction " + to_string(reconstruction.shape()) + " vs input " + to_string(x.shape()));
  }
  if (latents.shape() != quantized.shape()) {
    throw ShapeError("vq_loss: latents " + to_string(latents.shape()) + " vs quantized " + to_string(quantized.shape()));
  }
  Var zn = l2_normalize(latents);
  VqLossVars out;
  out.reconstruction = mean_abs(sub(x, reconstruction));
  out.codebook_term = row_distance(stop_gradient(zn), quantized, cfg.literal_norm);
  out.commitment_term = row_distance(zn, stop_gradient(quantized), cfg.literal_norm);
  out.total = add(add(out.reconstruction, scale(out.codebook_term, cfg.alpha)), scale(out.commitment_term, cfg.beta));
  return out;
}

struct VqForward {
  VqLossVars loss;
  std::vector<int> ids;
  Var reconstruction;
};

/// Full autoencoder pass over packed stacked rows.
inline VqForward vq_forward(Tape& tape, const QuantizerModel& q, const Tensor& stacked, const Segments& segs) {
  Var x = tape.constant(stacked);
  Var z = encode_latents(tape, q, x, segs);
  Var cb = l2_normalize(tape.param(q.codebook.vectors));
  VqForward out;
  out.ids = nearest_codes(z.value(), cb.value());
  Var quantized = gather_rows(cb, std::vector<long>(out.ids.begin(), out.ids.end()));
  Var zn = l2_normalize(z);
  Var dec_input = q.cfg.straight_through ? add(zn, stop_gradient(sub(quantized, zn))) : stop_gradient(quantized);
  out.reconstruction = q.decoder(tape, q.dec_in(tape, dec_input), segs);
  Var frames = reshape(x, Shape{stacked.rows() * q.cfg.stride, q.feature_dim});
  out.loss = vq_loss(frames, z, quantized, out.reconstruction, q.cfg);
  return out;
}

// ---------------------------------------------------------------------------
// Inference

/// Reconstructs a (normalized) spectrogram of s frames per code.
inline Spectrogram decode_codes(const QuantizerModel& q, std::span<const int> ids) {
  if (ids.empty()) throw std::invalid_argument("decode_codes: empty code sequence");
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= q.codebook.size()) {
      throw std::out_of_range("decode_codes: code id " + std::to_string(id) + " outside codebook of size " +
                              std::to_string(q.codebook.size()));
    }
  }
  Tape tape(false);
  Var cb = l2_normalize(tape.param(q.codebook.vectors));
  Var emb = q.dec_in(tape, embedding(cb, ids));
  return Spectrogram{q.decoder(tape, emb, Segments::single(ids.size())).value(), 100.0};
}

/// Stacks, encodes and quantizes a channel-normalized spectrogram.
inline QuantizationResult quantize_utterance(const QuantizerModel& q, const Spectrogram& normalized) {
  if (normalized.dim() != q.feature_dim) {
    throw ShapeError("quantize_utterance: spectrogram has " + std::to_string(normalized.dim()) + " channels, quantizer expects " +
                     std::to_string(q.feature_dim));
  }
  const auto stacked = stack_frames(normalized, q.cfg.stride);
  Tape tape(false);
  auto fwd = vq_forward(tape, q, stacked.frames, Segments::single(stacked.frames.rows()));
  QuantizationResult r;
  r.code_ids = fwd.ids;
  r.quantized = gather_rows(l2_normalize(tape.param(q.codebook.vectors)), std::vector<long>(fwd.ids.begin(), fwd.ids.end())).value();
  r.losses = fwd.loss.values();
  return r;
}

/// Code ids only, skipping the decoder.
inline std::vector<int> quantize_ids(const QuantizerModel& q, const Spectrogram& normalized, const Tensor* unit_codebook = nullptr) {
  const auto stacked = stack_frames(normalized, q.cfg.stride);
  const Tensor latents = encode_latents(q, stacked);
  if (unit_codebook) return nearest_codes(latents, *unit_codebook);
  return nearest_codes(latents, q.codebook.normalized());
}

struct CodebookUtilization {
  std::vector<std::size_t> histogram;
  double entropy = 0;  // nats
  double perplexity = 1;
};

inline CodebookUtilization codebook_utilization(std::span<const int> codes, std::size_t n) {
  CodebookUtilization u;
  u.histogram.assign(n, 0);
  for (int c : codes) {
    if (c < 0 || static_cast<std::size_t>(c) >= n) throw std::out_of_range("codebook_utilization: code out of range");
    ++u.histogram[static_cast<std::size_t>(c)];
  }
  const auto total = static_cast<double>(codes.size());
  if (codes.empty()) return u;
  for (auto h : u.histogram) {
    if (h == 0) continue;
    const double p = static_cast<double>(h) / total;
    u.entropy -= p * std::log(p);
  }
  u.perplexity = std::exp(u.entropy);
  return u;
}

// ---------------------------------------------------------------------------
// Training

struct PackedBatch {
  Tensor rows;
  Segments segs;
};

/// Concatenates the selected row blocks.
inline PackedBatch pack_rows(const std::vector<Tensor>& items, std::span<const std::size_t> indices) {
  std::vector<std::size_t> lengths;
  std::size_t total = 0;
  const auto width = items.at(indices[0]).cols();
  for (auto i : indices) {
    lengths.push_back(items[i].rows());
    total += items[i].rows();
  }
  std::vector<double> values;
  values.reserve(total * width);
  for (auto i : indices) values.insert(values.end(), items[i].values().begin(), items[i].values().end());
  return {Tensor::matrix(total, width, std::move(values)), Segments::from_lengths(lengths)};
}

/// Stacked, normalized target spectrograms: the quantizer's training items.
inline std::vector<Tensor> stacked_items(const std::vector<Spectrogram>& normalized, std::size_t s) {
  std::vector<Tensor> out;
  out.reserve(normalized.size());
  for (const auto& spec : normalized) {
    if (spec.num_frames() >= s) out.push_back(stack_frames(spec, s).frames);
  }
  return out;
}

/// Minimizes the VQ objective from the optimizer's current step to
/// cfg.steps. Frozen tensors are never updated.
inline void train_quantizer(QuantizerModel& q, const std::vector<Tensor>& items, const TrainConfig& cfg, AdamState& adam,
                            MetricLog& log, const std::function<void(long)>& checkpoint = {}) {
  if (items.empty()) throw std::invalid_argument("train_quantizer: empty corpus");
  const auto params = trainable(collect_params(q, ""));
  EpochSampler sampler(items.size(), derive_seed(cfg.seed, "quantizer/batches"));
  train_loop(params, adam, cfg, log, checkpoint, [&](Tape& tape, long step) {
    const auto idx = sampler.batch(step, cfg.batch_size);
    const auto batch = pack_rows(items, idx);
    auto fwd = vq_forward(tape, q, batch.rows, batch.segs);
    const auto v = fwd.loss.values();
    return StepOutput{fwd.loss.total,
                      {{"total", v.total},
                       {"reconstruction", v.reconstruction},
                       {"codebook_term", v.codebook_term},
                       {"commitment_term", v.commitment_term}}};
  });
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json quantizer_config_json(const QuantizerModel& q) {
  return {{"type", "quantizer"}, {"vq", q.cfg}, {"feature_dim", q.feature_dim}, {"stats", q.stats}};
}

inline Checkpoint quantizer_checkpoint(QuantizerModel& q, const AdamState* adam = nullptr) {
  Checkpoint ck;
  ck.config = quantizer_config_json(q);
  store_params(ck, collect_params(q, ""));
  if (adam) store_adam(ck, *adam);
  return ck;
}

inline QuantizerModel quantizer_from_checkpoint(const Checkpoint& ck) {
  if (ck.config.value("type", std::string()) != "quantizer") throw ConfigError("checkpoint is not a quantizer");
  const auto cfg = ck.config.at("vq").get<VqConfig>();
  auto q = init_quantizer(cfg, ck.config.at("feature_dim").get<std::size_t>(), 0);
  q.stats = ck.config.at("stats").get<ChannelStats>();
  restore_params(ck, collect_params(q, ""));
  return q;
}

inline void save_quantizer(const std::filesystem::path& path, QuantizerModel& q, const AdamState* adam = nullptr) {
  save_checkpoint(path, quantizer_checkpoint(q, adam));
}

inline QuantizerModel load_quantizer(const std::filesystem::path& path) { return quantizer_from_checkpoint(load_checkpoint(path)); }

/// JSON lines {"utterance_id", "ids"}.
inline std::string code_stream_jsonl(const std::vector<std::string>& ids, const std::vector<std::vector<int>>& codes) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) out += nlohmann::json{{"utterance_id", ids[i]}, {"ids", codes[i]}}.dump() + "\n";
  return out;
}

}  // namespace textless
