#pragma once

// Parameterized building blocks: linear layers, layer norm, and pre-LN
// Transformer stacks over packed sequences.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "textless/ops.hpp"
#include "textless/random.hpp"

namespace textless {

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

inline Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = Tensor::matrix(fan_in, fan_out);
  for (auto& v : t.values()) v = rng.uniform(-bound, bound);
  t.set_requires_grad(true);
  return t;
}

inline Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = stddev * rng.normal();
  t.set_requires_grad(true);
  return t;
}

inline Tensor filled(Shape shape, double value) {
  Tensor t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng) : weight(xavier_uniform(in, out, rng)), bias(filled({out}, 0.0)) {}

  std::size_t in_features() const { return weight.rows(); }
  std::size_t out_features() const { return weight.cols(); }

  Var operator()(Tape& tape, const Var& x) const { return linear(x, tape.param(weight), tape.param(bias)); }

  void visit(const std::string& prefix, const ParamVisitor& f) {
    f(prefix + "/weight", weight);
    f(prefix + "/bias", bias);
  }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width) : gain(filled({width}, 1.0)), bias(filled({width}, 0.0)) {}

  Var operator()(Tape& tape, const Var& x) const { return layer_norm(x, tape.param(gain), tape.param(bias)); }

  void visit(const std::string& prefix, const ParamVisitor& f) {
    f(prefix + "/gain", gain);
    f(prefix + "/bias", bias);
  }
};

struct TransformerConfig {
  std::size_t width = 64;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t ffn = 256;

  bool operator==(const TransformerConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const TransformerConfig& c) {
  j = {{"width", c.width}, {"layers", c.layers}, {"heads", c.heads}, {"ffn", c.ffn}};
}
inline void from_json(const nlohmann::json& j, TransformerConfig& c) {
  c.width = j.value("width", c.width);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.ffn = j.value("ffn", c.ffn);
}

struct Attention {
  Linear q, k, v, o;

  Attention() = default;
  Attention(std::size_t width, Rng& rng) : q(width, width, rng), k(width, width, rng), v(width, width, rng), o(width, width, rng) {}

  Var operator()(Tape& tape, const Var& x, const Var& memory, std::size_t heads, const Segments& q_segs,
                 const Segments& k_segs, bool causal) const {
    Var att = multi_head_attention(q(tape, x), k(tape, memory), v(tape, memory), heads, q_segs, k_segs, causal);
    return o(tape, att);
  }

  void visit(const std::string& prefix, const ParamVisitor& f) {
    q.visit(prefix + "/q", f);
    k.visit(prefix + "/k", f);
    v.visit(prefix + "/v", f);
    o.visit(prefix + "/o", f);
  }
};

/// Pre-LN layer: self-attention, optional cross-attention, GELU feed-forward.
struct TransformerLayer {
  LayerNorm ln_self;
  Attention self_attn;
  std::optional<LayerNorm> ln_cross;
  std::optional<Attention> cross_attn;
  LayerNorm ln_ffn;
  Linear ffn_in;
  Linear ffn_out;

  TransformerLayer() = default;
  TransformerLayer(const TransformerConfig& c, bool with_cross, Rng& rng)
      : ln_self(c.width), self_attn(c.width, rng), ln_ffn(c.width), ffn_in(c.width, c.ffn, rng), ffn_out(c.ffn, c.width, rng) {
    if (with_cross) {
      ln_cross.emplace(c.width);
      cross_attn.emplace(c.width, rng);
    }
  }

  void visit(const std::string& prefix, const ParamVisitor& f) {
    ln_self.visit(prefix + "/ln_self", f);
    self_attn.visit(prefix + "/self_attn", f);
    if (cross_attn) {
      ln_cross->visit(prefix + "/ln_cross", f);
      cross_attn->visit(prefix + "/cross_attn", f);
    }
    ln_ffn.visit(prefix + "/ln_ffn", f);
    ffn_in.visit(prefix + "/ffn_in", f);
    ffn_out.visit(prefix + "/ffn_out", f);
  }
};

/// Sinusoidal position table restarting at 0 for every segment.
inline Tensor sinusoidal_positions(const Segments& segs, std::size_t width) {
  Tensor pe = Tensor::matrix(segs.total(), width);
  for (std::size_t s = 0; s < segs.count(); ++s) {
    for (std::size_t t = 0; t < segs.length[s]; ++t) {
      auto row = pe.row(segs.offset[s] + t);
      for (std::size_t i = 0; i < width; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(width));
        row[i] = std::sin(static_cast<double>(t) * freq);
        if (i + 1 < width) row[i + 1] = std::cos(static_cast<double>(t) * freq);
      }
    }
  }
  return pe;
}

struct TransformerStack {
  TransformerConfig config;
  std::vector<TransformerLayer> layers;
  LayerNorm final_ln;

  TransformerStack() = default;
  TransformerStack(const TransformerConfig& c, bool with_cross, Rng& rng) : config(c), final_ln(c.width) {
    for (std::size_t i = 0; i < c.layers; ++i) layers.emplace_back(c, with_cross, rng);
  }

  /// x: packed (rows x width) input with positions already added. memory /
  /// memory_segs are required for stacks built with cross-attention.
  Var operator()(Tape& tape, Var x, const Segments& segs, bool causal, const Var* memory = nullptr,
                 const Segments* memory_segs = nullptr) const {
    for (const auto& layer : layers) {
      Var h = layer.ln_self(tape, x);
      x = add(x, layer.self_attn(tape, h, h, config.heads, segs, segs, causal));
      if (layer.cross_attn) {
        if (!memory || !memory_segs) throw std::logic_error("cross-attention layer called without memory");
        Var hc = (*layer.ln_cross)(tape, x);
        x = add(x, (*layer.cross_attn)(tape, hc, *memory, config.heads, segs, *memory_segs, false));
      }
      Var hf = layer.ln_ffn(tape, x);
      x = add(x, layer.ffn_out(tape, gelu(layer.ffn_in(tape, hf))));
    }
    return final_ln(tape, x);
  }

  void visit(const std::string& prefix, const ParamVisitor& f) {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + "/layer" + std::to_string(i), f);
    final_ln.visit(prefix + "/final_ln", f);
  }
};

/// Adds the per-segment sinusoid table to x.
inline Var add_positions(Tape& tape, const Var& x, const Segments& segs) {
  return add(x, tape.constant(sinusoidal_positions(segs, x.cols()).reshaped(x.shape())));
}

}  // namespace textless
