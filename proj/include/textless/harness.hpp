#pragma once

// Optimizer, learning-rate schedule, stateless batching, metric logging and
// parameter checkpointing shared by every training stage.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "textless/autograd.hpp"
#include "textless/io.hpp"
#include "textless/random.hpp"
#include "textless/tensor.hpp"

namespace textless {

/// Non-finite loss or gradient.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ParamRef {
  std::string name;
  Tensor* tensor;
};
using ParamList = std::vector<ParamRef>;

/// Collects every tensor a model exposes through visit(prefix, f).
template <class Model>
ParamList collect_params(Model& model, const std::string& prefix) {
  ParamList out;
  model.visit(prefix, [&](const std::string& name, Tensor& t) { out.push_back({name, &t}); });
  return out;
}

inline ParamList trainable(const ParamList& params) {
  ParamList out;
  for (const auto& p : params) {
    if (p.tensor->requires_grad()) out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  long steps = 1000;
  long batch_size = 16;
  double learning_rate = 1e-3;
  long warmup_steps = 100;
  std::uint64_t seed = 1;
  long checkpoint_every = 0;  // 0: only the final checkpoint
  long eval_every = 50;
  std::string precision = "float64";
  double clip_norm = 1.0;     // global gradient-norm clip, 0 disables

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
    if (steps < 1) fail("steps must be >= 1, got " + std::to_string(steps));
    if (batch_size < 1) fail("batch_size must be >= 1, got " + std::to_string(batch_size));
    if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
    if (warmup_steps < 0 || warmup_steps > steps) fail("warmup_steps must be in [0, steps]");
    if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
    if (eval_every < 1) fail("eval_every must be >= 1");
    if (clip_norm < 0.0) fail("clip_norm must be >= 0");
    if (precision != "float64") fail("precision '" + precision + "' is not supported (only float64)");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"steps", c.steps},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"warmup_steps", c.warmup_steps},
       {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every},
       {"eval_every", c.eval_every},
       {"precision", c.precision},
       {"clip_norm", c.clip_norm}};
}

/// Reads known keys, rejecting unknown ones so typos surface as errors.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::vector<std::string> known{"steps",           "batch_size", "learning_rate", "warmup_steps", "seed",
                                              "checkpoint_every", "eval_every", "precision",     "clip_norm"};
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("train config: unknown field '" + k + "'");
  }
  try {
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.precision = j.value("precision", c.precision);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
  } catch (const nlohmann::json::type_error& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

/// Linear warmup to the peak, then inverse square-root decay. The update
/// that moves the model from step t to t+1 uses lr_schedule(t + 1).
inline double lr_schedule(long step, const TrainConfig& cfg) {
  if (step <= 0) return 0.0;
  if (cfg.warmup_steps == 0) return cfg.learning_rate;
  const double t = static_cast<double>(step);
  const double w = static_cast<double>(cfg.warmup_steps);
  return cfg.learning_rate * std::min(t / w, std::sqrt(w / t));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

/// Per-parameter first and second moments plus the shared step count.
struct AdamState {
  long step = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

/// One bias-corrected Adam update. grads[i] belongs to params[i].
inline void adam_step(const ParamList& params, const std::vector<Tensor>& grads, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
  if (grads.size() != params.size()) throw std::invalid_argument("adam_step: one gradient per parameter required");
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (double g : grads[i].data()) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient for '" + params[i].name + "' at step " + std::to_string(state.step + 1));
      }
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i].tensor;
    auto [mit, mnew] = state.m.try_emplace(params[i].name, p.shape());
    auto [vit, vnew] = state.v.try_emplace(params[i].name, p.shape());
    auto& m = mit->second;
    auto& v = vit->second;
    if (m.shape() != p.shape() || v.shape() != p.shape()) {
      throw ShapeError("adam_step: optimizer state for '" + params[i].name + "' has the wrong shape");
    }
    const auto g = grads[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
    }
  }
}

/// Scales grads in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_gradients(std::vector<Tensor>& grads, double max_norm) {
  double ss = 0;
  for (const auto& g : grads) {
    for (double x : g.data()) ss += x * x;
  }
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) {
      for (auto& x : g.values()) x *= s;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Batching

/// Shuffled epochs over [0, n). The batch for a step depends only on
/// (seed, step), so resuming at any step replays the same data order.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {
    if (n == 0) throw std::invalid_argument("EpochSampler: empty dataset");
  }

  std::vector<std::size_t> batch(long step, long batch_size) {
    std::vector<std::size_t> out;
    out.reserve(static_cast<std::size_t>(batch_size));
    for (long j = 0; j < batch_size; ++j) {
      const auto pos = static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(batch_size) + static_cast<std::uint64_t>(j);
      const auto epoch = pos / n_;
      if (!perm_ || epoch != epoch_) {
        perm_.emplace(n_);
        std::iota(perm_->begin(), perm_->end(), std::size_t{0});
        Rng rng(derive_seed(seed_, "epoch", epoch));
        rng.shuffle(perm_->begin(), perm_->end());
        epoch_ = epoch;
      }
      out.push_back((*perm_)[pos % n_]);
    }
    return out;
  }

 private:
  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::optional<std::vector<std::size_t>> perm_;
};

// ---------------------------------------------------------------------------
// Metric log

struct MetricRecord {
  long step;
  std::string name;
  double value;
};

/// Append-only JSON-lines log. Records are buffered and written on flush().
class MetricLog {
 public:
  MetricLog() = default;
  explicit MetricLog(std::filesystem::path path) : path_(std::move(path)) {}

  /// Keeps only records with step <= last_step, e.g. when resuming.
  void truncate_after(long last_step) {
    if (path_.empty() || !std::filesystem::exists(path_)) return;
    std::ifstream in(path_);
    std::string line, kept;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (nlohmann::json::parse(line).at("step").get<long>() <= last_step) kept += line + "\n";
    }
    in.close();
    write_atomic(path_, kept);
  }

  void append(long step, const std::string& name, double value) {
    if (auto it = last_step_.find(name); it != last_step_.end() && step < it->second) {
      throw std::logic_error("MetricLog: step for '" + name + "' went backwards");
    }
    last_step_[name] = step;
    records_.push_back({step, name, value});
    pending_.push_back(records_.back());
  }

  void flush() {
    if (path_.empty() || pending_.empty()) {
      pending_.clear();
      return;
    }
    std::ofstream out(path_, std::ios::app);
    for (const auto& r : pending_) out << line(r) << '\n';
    out.flush();
    if (!out) throw std::runtime_error("failed to write " + path_.string());
    pending_.clear();
  }

  const std::vector<MetricRecord>& records() const { return records_; }

  std::vector<double> series(const std::string& name) const {
    std::vector<double> out;
    for (const auto& r : records_) {
      if (r.name == name) out.push_back(r.value);
    }
    return out;
  }

  static std::string line(const MetricRecord& r) {
    return nlohmann::json{{"step", r.step}, {"name", r.name}, {"value", r.value}}.dump();
  }

 private:
  std::filesystem::path path_;
  std::vector<MetricRecord> records_;
  std::vector<MetricRecord> pending_;
  std::map<std::string, long> last_step_;
};

// ---------------------------------------------------------------------------
// Parameter checkpoints

inline void store_params(Checkpoint& ck, const ParamList& params) {
  for (const auto& p : params) ck.tensors[p.name] = *p.tensor;
}

inline void store_adam(Checkpoint& ck, const AdamState& state) {
  ck.config["adam_step"] = state.step;
  for (const auto& [name, t] : state.m) ck.tensors["adam/m/" + name] = t;
  for (const auto& [name, t] : state.v) ck.tensors["adam/v/" + name] = t;
}

/// Copies checkpoint tensors into params, keeping each tensor's
/// requires_grad flag. Every mismatch is listed before anything is written.
inline void restore_params(const Checkpoint& ck, const ParamList& params) {
  std::vector<std::string> problems;
  for (const auto& p : params) {
    auto it = ck.tensors.find(p.name);
    if (it == ck.tensors.end()) {
      problems.push_back(p.name + " (missing)");
    } else if (it->second.shape() != p.tensor->shape()) {
      problems.push_back(p.name + " (checkpoint " + to_string(it->second.shape()) + ", model " +
                         to_string(p.tensor->shape()) + ")");
    }
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match model:";
    for (const auto& s : problems) msg += "\n  " + s;
    throw ShapeError(msg);
  }
  for (const auto& p : params) {
    const bool grad = p.tensor->requires_grad();
    *p.tensor = ck.tensors.at(p.name);
    p.tensor->set_requires_grad(grad);
  }
}

inline AdamState restore_adam(const Checkpoint& ck) {
  AdamState s;
  s.step = ck.config.value("adam_step", 0L);
  for (const auto& [name, t] : ck.tensors) {
    if (name.rfind("adam/m/", 0) == 0) s.m[name.substr(7)] = t;
    if (name.rfind("adam/v/", 0) == 0) s.v[name.substr(7)] = t;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Training loop

struct StepOutput {
  Var loss;
  std::vector<std::pair<std::string, double>> metrics;
};

/// Runs optimizer steps adam.step .. cfg.steps-1. step_fn(tape, t) records
/// the loss of step t on a fresh tape. Metrics of the first step and of
/// every eval_every-th step are logged under the completed-step count;
/// checkpoint(count) is called every checkpoint_every steps and at the end.
template <class StepFn>
void train_loop(const ParamList& params, AdamState& adam, const TrainConfig& cfg, MetricLog& log,
                const std::function<void(long)>& checkpoint, StepFn&& step_fn) {
  cfg.validate();
  for (long t = adam.step; t < cfg.steps; ++t) {
    std::vector<Tensor> grads;
    StepOutput out;
    {
      Tape tape;
      out = step_fn(tape, t);
      const double loss = out.loss.value().item();
      if (!std::isfinite(loss)) throw NumericError("non-finite loss at step " + std::to_string(t + 1));
      tape.backward(out.loss);
      grads.reserve(params.size());
      for (const auto& p : params) grads.push_back(tape.grad_of(*p.tensor));
    }
    const double gnorm = clip_gradients(grads, cfg.clip_norm);
    adam_step(params, grads, adam, lr_schedule(t + 1, cfg));
    const long count = t + 1;
    if (count == 1 || count % cfg.eval_every == 0 || count == cfg.steps) {
      for (const auto& [name, value] : out.metrics) log.append(count, name, value);
      log.append(count, "grad_norm", gnorm);
      log.flush();
    }
    if (checkpoint && ((cfg.checkpoint_every > 0 && count % cfg.checkpoint_every == 0) || count == cfg.steps)) {
      checkpoint(count);
    }
  }
}

}  // namespace textless
