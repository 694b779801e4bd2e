#pragma once

// Stage runners (quantizer, encoder pretraining, S2ST), run manifests,
// resumable checkpoints, and ablation sweeps over whole pipelines.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "textless/eval.hpp"
#include "textless/harness.hpp"
#include "textless/io.hpp"
#include "textless/quantizer.hpp"
#include "textless/toy_corpus.hpp"
#include "textless/translator.hpp"

#ifndef TEXTLESS_GIT_DESCRIBE
#define TEXTLESS_GIT_DESCRIBE "unknown"
#endif

namespace textless {

namespace fs = std::filesystem;

/// Everything a pipeline run needs. Stored as one JSON file; absent fields
/// keep their defaults.
struct PipelineConfig {
  VqConfig quantizer;
  TrainConfig quantizer_train{2000, 16, 3e-3, 100, 1, 500, 50, "float64", 1.0};
  MaskConfig mask;
  std::size_t pretrain_codebook_size = 512;
  TrainConfig pretrain_train{3000, 16, 1e-3, 200, 1, 500, 50, "float64", 1.0};
  ModelConfig model;
  TrainConfig s2st_train{6000, 16, 1e-3, 200, 1, 500, 100, "float64", 1.0};
  bool init_synth_from_vqvae = true;
  TranscriberConfig transcriber;

  void validate() const {
    quantizer.validate();
    quantizer_train.validate();
    mask.validate();
    pretrain_train.validate();
    model.validate();
    s2st_train.validate();
    if (pretrain_codebook_size < 2) throw ConfigError("pretrain.codebook_size must be >= 2");
  }
};

inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = {{"quantizer", {{"vq", c.quantizer}, {"train", c.quantizer_train}}},
       {"pretrain", {{"mask", c.mask}, {"codebook_size", c.pretrain_codebook_size}, {"train", c.pretrain_train}}},
       {"s2st", {{"model", c.model}, {"train", c.s2st_train}, {"init_synth_from_vqvae", c.init_synth_from_vqvae}}},
       {"transcriber", c.transcriber}};
}

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where, const std::vector<std::string>& known) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError(where + ": unknown field '" + k + "'");
  }
}

template <class T>
T parse_section(const nlohmann::json& j, const std::string& where) {
  try {
    return j.get<T>();
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

}  // namespace detail

/// Parses a (possibly partial) config by patching it onto the defaults.
inline PipelineConfig parse_pipeline_config(const nlohmann::json& j) {
  detail::check_keys(j, "config", {"quantizer", "pretrain", "s2st", "transcriber"});
  if (j.contains("quantizer")) detail::check_keys(j["quantizer"], "quantizer", {"vq", "train"});
  if (j.contains("pretrain")) detail::check_keys(j["pretrain"], "pretrain", {"mask", "codebook_size", "train"});
  if (j.contains("s2st")) detail::check_keys(j["s2st"], "s2st", {"model", "train", "init_synth_from_vqvae"});
  nlohmann::json merged = PipelineConfig{};
  merged.merge_patch(j);
  PipelineConfig c;
  c.quantizer = detail::parse_section<VqConfig>(merged["quantizer"]["vq"], "quantizer.vq");
  c.quantizer_train = detail::parse_section<TrainConfig>(merged["quantizer"]["train"], "quantizer.train");
  c.mask = detail::parse_section<MaskConfig>(merged["pretrain"]["mask"], "pretrain.mask");
  c.pretrain_codebook_size = detail::parse_section<std::size_t>(merged["pretrain"]["codebook_size"], "pretrain.codebook_size");
  c.pretrain_train = detail::parse_section<TrainConfig>(merged["pretrain"]["train"], "pretrain.train");
  c.model = detail::parse_section<ModelConfig>(merged["s2st"]["model"], "s2st.model");
  c.s2st_train = detail::parse_section<TrainConfig>(merged["s2st"]["train"], "s2st.train");
  c.init_synth_from_vqvae = detail::parse_section<bool>(merged["s2st"]["init_synth_from_vqvae"], "s2st.init_synth_from_vqvae");
  c.transcriber = detail::parse_section<TranscriberConfig>(merged["transcriber"], "transcriber");
  c.validate();
  return c;
}

inline void from_json(const nlohmann::json& j, PipelineConfig& c) { c = parse_pipeline_config(j); }

inline PipelineConfig load_pipeline_config(const fs::path& path) {
  nlohmann::json j;
  try {
    j = read_json_file(path);
  } catch (const std::exception& e) {
    throw ConfigError("cannot read config " + path.string() + ": " + e.what());
  }
  return parse_pipeline_config(j);
}

// ---------------------------------------------------------------------------
// Run manifest

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

struct RunManifest {
  std::string run_id;
  std::string command;
  nlohmann::json config;
  std::map<std::string, std::string> inputs;  // path -> content hash
  std::string git_describe = TEXTLESS_GIT_DESCRIBE;
  std::string started;
  std::string finished;
};

inline void to_json(nlohmann::json& j, const RunManifest& m) {
  j = {{"run_id", m.run_id},   {"command", m.command},   {"config", m.config},   {"inputs", m.inputs},
       {"git_describe", m.git_describe}, {"started", m.started}, {"finished", m.finished}};
}

inline void from_json(const nlohmann::json& j, RunManifest& m) {
  m.run_id = j.at("run_id").get<std::string>();
  m.command = j.at("command").get<std::string>();
  m.config = j.at("config");
  m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
  m.git_describe = j.at("git_describe").get<std::string>();
  m.started = j.at("started").get<std::string>();
  m.finished = j.at("finished").get<std::string>();
}

/// The run id is a hash of command, config and inputs, so identical runs
/// share it.
inline RunManifest begin_manifest(const std::string& command, const nlohmann::json& config,
                                  const std::map<std::string, std::string>& inputs) {
  RunManifest m;
  m.command = command;
  m.config = config;
  m.inputs = inputs;
  const auto key = command + "\n" + config.dump() + "\n" + nlohmann::json(inputs).dump();
  m.run_id = hex64(fnv1a(key.data(), key.size()));
  m.started = utc_timestamp();
  return m;
}

inline void write_manifest(const fs::path& dir, const RunManifest& m) {
  write_atomic(dir / "run.json", nlohmann::json(m).dump(2) + "\n");
}

inline std::map<std::string, std::string> corpus_inputs(const fs::path& data) {
  return {{(data / "manifest.jsonl").string(), file_hash(data / "manifest.jsonl")},
          {(data / "stats.json").string(), file_hash(data / "stats.json")}};
}

// ---------------------------------------------------------------------------
// Stages

inline constexpr const char* kQuantizerFile = "quantizer.tlck";
inline constexpr const char* kEncoderFile = "encoder.tlck";
inline constexpr const char* kModelFile = "model.tlck";
inline constexpr const char* kStateFile = "state.tlck";
inline constexpr const char* kMetricsFile = "metrics.jsonl";

namespace detail {

/// Restores model and optimizer from out/state.tlck when present; otherwise
/// clears a stale metric log. Returns true when resuming.
template <class Model>
bool resume_or_reset(const fs::path& out, Model& model, AdamState& adam, MetricLog& log) {
  const auto state = out / kStateFile;
  if (fs::exists(state)) {
    const auto ck = load_checkpoint(state);
    restore_params(ck, collect_params(model, ""));
    adam = restore_adam(ck);
    log.truncate_after(adam.step);
    return true;
  }
  fs::remove(out / kMetricsFile);
  return false;
}

template <class Model>
std::function<void(long)> state_writer(const fs::path& out, Model& model, AdamState& adam,
                                       const std::function<Checkpoint(Model&, const AdamState*)>& make) {
  return [&, out, make](long) { save_checkpoint(out / kStateFile, make(model, &adam)); };
}

}  // namespace detail

/// Trains the speech quantizer on the training split's target spectrograms.
inline QuantizerModel run_quantizer_stage(const PipelineConfig& cfg, const ToyCorpus& corpus, const fs::path& out) {
  fs::create_directories(out);
  const auto train = corpus.split("train");
  if (train.empty()) throw std::invalid_argument("corpus has no training utterances");
  std::vector<Spectrogram> targets;
  for (const auto* p : train) targets.push_back(channel_normalize(p->target, corpus.stats.target));
  const auto d = corpus.stats.target.dim();

  auto q = init_quantizer(cfg.quantizer, d, cfg.quantizer_train.seed);
  q.stats = corpus.stats.target;
  AdamState adam;
  MetricLog log(out / kMetricsFile);
  detail::resume_or_reset(out, q, adam, log);
  train_quantizer(q, stacked_items(targets, cfg.quantizer.stride), cfg.quantizer_train, adam, log,
                  detail::state_writer<QuantizerModel>(out, q, adam, [](QuantizerModel& m, const AdamState* a) {
                    return quantizer_checkpoint(m, a);
                  }));
  save_quantizer(out / kQuantizerFile, q);
  return q;
}

/// Random stride-4 quantizer whose codes are the pretraining labels.
inline QuantizerModel pretraining_quantizer(const PipelineConfig& cfg, std::size_t d) {
  VqConfig rq;
  rq.kind = QuantizerKind::random;
  rq.stride = kEncoderSubsample;
  rq.codebook_size = cfg.pretrain_codebook_size;
  return init_random_quantizer(rq, d, derive_seed(cfg.pretrain_train.seed, "pretrain/random_quantizer"));
}

/// Masked-prediction pretraining of the speech encoder on unlabeled source
/// and target speech from the training split.
inline PretrainModel run_pretrain_stage(const PipelineConfig& cfg, const ToyCorpus& corpus, const fs::path& out) {
  fs::create_directories(out);
  const auto train = corpus.split("train");
  if (train.empty()) throw std::invalid_argument("corpus has no training utterances");
  const auto d = corpus.stats.source.dim();
  const auto rq = pretraining_quantizer(cfg, d);
  const Tensor unit = rq.codebook.normalized();
  std::vector<PretrainExample> examples;
  for (const auto* p : train) {
    examples.push_back(make_pretrain_example(channel_normalize(p->source, corpus.stats.source), rq, unit));
    examples.push_back(make_pretrain_example(channel_normalize(p->target, corpus.stats.target), rq, unit));
  }
  auto mcfg = cfg.model;
  mcfg.feature_dim = d;
  auto p = init_pretrain_model(mcfg, cfg.pretrain_codebook_size, cfg.pretrain_train.seed);
  AdamState adam;
  MetricLog log(out / kMetricsFile);
  detail::resume_or_reset(out, p, adam, log);
  pretrain_encoder_masked(p, examples, cfg.mask, cfg.pretrain_train, adam, log,
                          detail::state_writer<PretrainModel>(out, p, adam, [mcfg](PretrainModel& m, const AdamState* a) {
                            return pretrain_checkpoint(m, mcfg, a);
                          }));
  save_checkpoint(out / kEncoderFile, pretrain_checkpoint(p, mcfg));
  return p;
}

/// Model config resolved against the quantizer: stride, vocabulary and
/// feature width always follow it.
inline ModelConfig resolve_model_config(const PipelineConfig& cfg, const QuantizerModel& q) {
  auto m = cfg.model;
  m.stride = q.cfg.stride;
  m.codebook_size = q.cfg.codebook_size;
  m.feature_dim = q.feature_dim;
  m.validate();
  return m;
}

/// Trains the translation model against the frozen quantizer's codes.
inline TextlessModel run_s2st_stage(const PipelineConfig& cfg, const ToyCorpus& corpus, QuantizerModel& q,
                                    const std::optional<Checkpoint>& encoder_init, const fs::path& out) {
  fs::create_directories(out);
  const auto train = corpus.split("train");
  if (train.empty()) throw std::invalid_argument("corpus has no training utterances");
  if (q.stats.dim() != corpus.stats.target.dim()) throw ShapeError("quantizer and corpus feature widths differ");
  auto m = init_model(resolve_model_config(cfg, q), cfg.s2st_train.seed);
  m.source_stats = corpus.stats.source;
  if (cfg.init_synth_from_vqvae) init_synthesizer_from_vqvae(m, q);
  if (encoder_init) load_encoder_weights(m, *encoder_init);

  std::vector<S2stExample> examples;
  for (const auto* p : train) {
    if (p->target.num_frames() < q.cfg.stride) continue;
    examples.push_back(make_example(p->source, p->target, corpus.stats.source, q.stats, q.cfg.stride));
  }
  AdamState adam;
  MetricLog log(out / kMetricsFile);
  detail::resume_or_reset(out, m, adam, log);
  train_s2st(m, q, examples, cfg.s2st_train, adam, log,
             detail::state_writer<TextlessModel>(out, m, adam, [](TextlessModel& mm, const AdamState* a) {
               return model_checkpoint(mm, a);
             }));
  save_model(out / kModelFile, m);
  return m;
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepSpec {
  std::string axis;                   // stride | codebook_size | quantizer_kind | encoder_init
  std::vector<nlohmann::json> values;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  PipelineConfig base;
  std::string split = "test";

  void validate() const {
    static const std::map<std::string, std::vector<nlohmann::json>> allowed{
        {"stride", {2, 4, 8, 16}},
        {"codebook_size", {128, 512, 1024, 8192}},
        {"quantizer_kind", {"random", "linear", "transformer"}},
        {"encoder_init", {"scratch", "pretrained"}}};
    const auto it = allowed.find(axis);
    if (it == allowed.end()) throw ConfigError("sweep axis must be stride, codebook_size, quantizer_kind or encoder_init");
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
    for (const auto& v : values) {
      if (std::find(it->second.begin(), it->second.end(), v) == it->second.end()) {
        throw ConfigError("sweep value " + v.dump() + " not supported on axis " + axis);
      }
    }
  }
};

inline void to_json(nlohmann::json& j, const SweepSpec& s) {
  j = {{"axis", s.axis}, {"values", s.values}, {"seeds", s.seeds}, {"base", s.base}, {"split", s.split}};
}

inline void from_json(const nlohmann::json& j, SweepSpec& s) {
  detail::check_keys(j, "sweep", {"axis", "values", "seeds", "base", "split"});
  try {
    s.axis = j.at("axis").get<std::string>();
    s.values = j.at("values").get<std::vector<nlohmann::json>>();
    s.seeds = j.value("seeds", s.seeds);
    s.split = j.value("split", s.split);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("sweep: ") + e.what());
  }
  s.base = j.contains("base") ? parse_pipeline_config(j.at("base")) : PipelineConfig{};
  s.validate();
}

struct SweepRow {
  std::string axis;
  std::string value;
  std::uint64_t seed = 0;
  std::string status;  // ok | failed
  EvalMetrics metrics;
  double wall_clock_s = 0;
  std::string error;
};

inline const char* kSweepHeader =
    "axis,value,seed,status,token_accuracy,sequence_exact_match,code_prediction_accuracy,spec_l1,codebook_entropy,"
    "truncation_rate,wall_clock_s,error";

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

inline std::string sweep_csv_line(const SweepRow& r) {
  auto num = [](double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
  };
  const bool ok = r.status == "ok";
  std::ostringstream os;
  os << csv_field(r.axis) << ',' << csv_field(r.value) << ',' << r.seed << ',' << r.status;
  for (double v : {r.metrics.token_accuracy, r.metrics.sequence_exact_match, r.metrics.code_prediction_accuracy,
                   r.metrics.spec_l1, r.metrics.codebook_entropy, r.metrics.truncation_rate}) {
    os << ',' << (ok ? num(v) : "");
  }
  os << ',' << num(r.wall_clock_s) << ',' << csv_field(r.error);
  return os.str();
}

/// Cell configuration for one (value, seed).
inline PipelineConfig sweep_cell_config(const SweepSpec& spec, const nlohmann::json& value, std::uint64_t seed) {
  auto c = spec.base;
  c.quantizer_train.seed = c.pretrain_train.seed = c.s2st_train.seed = seed;
  if (spec.axis == "stride") c.quantizer.stride = value.get<std::size_t>();
  if (spec.axis == "codebook_size") c.quantizer.codebook_size = value.get<std::size_t>();
  if (spec.axis == "quantizer_kind") c.quantizer.kind = parse_quantizer_kind(value.get<std::string>());
  c.validate();
  return c;
}

inline std::string value_label(const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

/// Runs every (value, seed) cell through quantizer, optional pretraining,
/// S2ST and evaluation. Failed cells are recorded and the sweep continues.
/// Stages whose config is shared across cells are trained once.
inline std::vector<SweepRow> run_sweep(const SweepSpec& spec, const ToyCorpus& corpus, const fs::path& out,
                                       const std::function<void(const SweepRow&)>& on_row = {}) {
  spec.validate();
  fs::create_directories(out);
  std::vector<SweepRow> rows;
  std::string csv = std::string(kSweepHeader) + "\n";
  for (const auto& value : spec.values) {
    for (auto seed : spec.seeds) {
      SweepRow row{spec.axis, value_label(value), seed, "ok", {}, 0.0, {}};
      const auto t0 = std::chrono::steady_clock::now();
      try {
        const auto cfg = sweep_cell_config(spec, value, seed);
        const auto qkey = hex64(fnv1a(nlohmann::json(cfg.quantizer).dump().data(), nlohmann::json(cfg.quantizer).dump().size(),
                                      derive_seed(seed, "sweep/quantizer")));
        const auto qdir = out / "quantizers" / qkey;
        auto q = fs::exists(qdir / kQuantizerFile) ? load_quantizer(qdir / kQuantizerFile) : run_quantizer_stage(cfg, corpus, qdir);
        std::optional<Checkpoint> enc;
        if (spec.axis == "encoder_init" && value == "pretrained") {
          const auto pdir = out / "pretrain" / ("seed" + std::to_string(seed));
          if (!fs::exists(pdir / kEncoderFile)) run_pretrain_stage(cfg, corpus, pdir);
          enc = load_checkpoint(pdir / kEncoderFile);
        }
        const auto cell = out / "cells" / (spec.axis + "=" + row.value) / ("seed" + std::to_string(seed));
        const auto m = fs::exists(cell / kModelFile) ? load_model(cell / kModelFile) : run_s2st_stage(cfg, corpus, q, enc, cell);
        const auto report = evaluate_model(m, q, corpus, spec.split, cfg.transcriber);
        write_atomic(cell / "report.json", nlohmann::json(report).dump(2) + "\n");
        row.metrics = report.metrics;
      } catch (const std::exception& e) {
        row.status = "failed";
        row.error = e.what();
      }
      row.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      rows.push_back(row);
      csv += sweep_csv_line(row) + "\n";
      write_atomic(out / "sweep.csv", csv);
      if (on_row) on_row(row);
    }
  }
  return rows;
}

}  // namespace textless
