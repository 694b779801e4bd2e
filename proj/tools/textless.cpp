// Command-line entry point: data generation, training stages, evaluation,
// sweeps and checkpoint inspection.
//
// Exit codes: 0 ok, 2 usage or configuration error, 3 numeric failure,
// 4 corrupt artifact.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "textless/pipeline.hpp"

using namespace textless;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitCorrupt = 4;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

bool verbose() {
  const char* v = std::getenv("TEXTLESS_VERBOSE");
  return v && std::string(v) != "0";
}

void progress(const std::string& msg) {
  if (verbose()) std::cerr << msg << "\n";
}

/// Training flags shared by the stage commands; unset flags defer to the
/// config file, then to built-in defaults.
struct TrainOverrides {
  std::optional<long> steps;
  std::optional<long> batch_size;
  std::optional<double> learning_rate;
  std::optional<long> warmup_steps;
  std::optional<std::uint64_t> seed;
  std::optional<long> checkpoint_every;
  std::optional<long> eval_every;

  void add(CLI::App* app) {
    app->add_option("--steps", steps, "Optimizer steps (default: from config)");
    app->add_option("--batch-size", batch_size, "Utterances per batch (default: from config)");
    app->add_option("--lr", learning_rate, "Peak learning rate (default: from config)");
    app->add_option("--warmup", warmup_steps, "Linear warmup steps (default: from config)");
    app->add_option("--seed", seed, "Stage seed (default: from config)");
    app->add_option("--checkpoint-every", checkpoint_every, "Steps between resumable checkpoints (default: from config)");
    app->add_option("--eval-every", eval_every, "Steps between metric log entries (default: from config)");
  }

  void apply(TrainConfig& c) const {
    if (steps) c.steps = *steps;
    if (batch_size) c.batch_size = *batch_size;
    if (learning_rate) c.learning_rate = *learning_rate;
    if (warmup_steps) c.warmup_steps = *warmup_steps;
    if (seed) c.seed = *seed;
    if (checkpoint_every) c.checkpoint_every = *checkpoint_every;
    if (eval_every) c.eval_every = *eval_every;
    if (warmup_steps || steps) {
      // an explicit --steps below the configured warmup shortens the warmup
      if (!warmup_steps && c.warmup_steps > c.steps) c.warmup_steps = c.steps;
    }
  }
};

PipelineConfig load_config(const std::string& path) {
  if (path.empty()) return PipelineConfig{};
  if (!fs::exists(path)) throw UsageError("config file not found: " + path);
  return load_pipeline_config(path);
}

void require_dir(const std::string& path, const std::string& what) {
  if (path.empty()) throw UsageError(what + " is required");
  if (!fs::is_directory(path)) throw UsageError(what + " not found: " + path);
}

void require_file(const std::string& path, const std::string& flag) {
  if (path.empty()) throw UsageError(flag + " is required");
  if (!fs::is_regular_file(path)) throw UsageError(flag + " not found: " + path);
}

std::string command_line(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

void finish(RunManifest& m, const fs::path& out) {
  m.finished = utc_timestamp();
  write_manifest(out, m);
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Textless speech-to-speech translation on a toy tone corpus", "textless"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");
  const auto cmd = command_line(argc, argv);

  // gen-data
  std::string grammar_path, out_dir;
  long count = 6000;
  std::uint64_t data_seed = 7;
  double test_fraction = 0.1;
  auto* gen = app.add_subcommand("gen-data", "Generate a toy parallel corpus");
  gen->add_option("--grammar", grammar_path, "Grammar JSON file (default: built-in 20-token grammar)");
  gen->add_option("--count", count, "Number of utterance pairs")->capture_default_str();
  gen->add_option("--seed", data_seed, "Corpus seed")->capture_default_str();
  gen->add_option("--test-fraction", test_fraction, "Fraction of pairs held out as the test split")->capture_default_str();
  gen->add_option("--out", out_dir, "Output corpus directory")->required();

  // training stages
  std::string config_path, data_dir, quantizer_path, encoder_init;
  TrainOverrides overrides;
  std::optional<std::string> kind;
  std::optional<std::size_t> stride, codebook_size;
  auto* tq = app.add_subcommand("train-quantizer", "Train the speech quantizer on target speech");
  tq->add_option("--config", config_path, "Pipeline config JSON (default: built-in)");
  tq->add_option("--data", data_dir, "Corpus directory")->required();
  tq->add_option("--out", out_dir, "Output run directory")->required();
  tq->add_option("--kind", kind, "Quantizer kind: random, linear or transformer (default: from config)");
  tq->add_option("--stride", stride, "Frames stacked per code: 1, 2, 4, 8 or 16 (default: from config)");
  tq->add_option("--codebook-size", codebook_size, "Number of codes (default: from config)");
  overrides.add(tq);

  std::optional<double> mask_fraction;
  auto* pe = app.add_subcommand("pretrain-encoder", "Masked-prediction pretraining of the speech encoder");
  pe->add_option("--config", config_path, "Pipeline config JSON (default: built-in)");
  pe->add_option("--data", data_dir, "Corpus directory")->required();
  pe->add_option("--out", out_dir, "Output run directory")->required();
  pe->add_option("--mask-fraction", mask_fraction, "Fraction of encoder positions masked (default: from config)");
  overrides.add(pe);

  std::optional<bool> init_synth;
  std::optional<double> lambda_spec;
  bool freeze_encoder = false;
  auto* ts = app.add_subcommand("train-s2st", "Train the translation model on frozen quantizer codes");
  ts->add_option("--config", config_path, "Pipeline config JSON (default: built-in)");
  ts->add_option("--data", data_dir, "Corpus directory")->required();
  ts->add_option("--out", out_dir, "Output run directory")->required();
  ts->add_option("--quantizer", quantizer_path, "Quantizer checkpoint (required)");
  ts->add_option("--encoder-init", encoder_init, "Pretrained encoder checkpoint (default: none)");
  ts->add_flag("--init-synth-from-vqvae,!--no-init-synth-from-vqvae", init_synth,
               "Initialize the synthesizer from the quantizer decoder (default: from config)");
  ts->add_option("--lambda-spec", lambda_spec, "Weight of the spectrogram loss (default: from config)");
  ts->add_flag("--freeze-encoder", freeze_encoder, "Keep encoder weights fixed");
  overrides.add(ts);

  // evaluate
  std::string model_path, split = "test", report_path;
  auto* ev = app.add_subcommand("evaluate", "Evaluate a translation model on a corpus split");
  ev->add_option("--model", model_path, "Model checkpoint")->required();
  ev->add_option("--quantizer", quantizer_path, "Quantizer checkpoint")->required();
  ev->add_option("--data", data_dir, "Corpus directory")->required();
  ev->add_option("--split", split, "Split to evaluate")->capture_default_str();
  ev->add_option("--report", report_path, "Output report JSON")->required();
  ev->add_option("--config", config_path, "Pipeline config JSON for transcriber settings (default: built-in)");

  // sweep
  std::string spec_path;
  auto* sw = app.add_subcommand("sweep", "Run an ablation sweep over full pipelines");
  sw->add_option("--spec", spec_path, "Sweep spec JSON")->required();
  sw->add_option("--data", data_dir, "Corpus directory")->required();
  sw->add_option("--out", out_dir, "Output sweep directory")->required();

  // inspect
  std::string ck_path;
  auto* in = app.add_subcommand("inspect", "Print a checkpoint's version, config and tensors");
  in->add_option("--checkpoint", ck_path, "Checkpoint file")->required();
  in->add_option("--data", data_dir, "Corpus directory for quantizer codebook utilization (optional)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  if (gen->parsed()) {
    if (count < 1) throw UsageError("--count must be at least 1");
    ToyGrammar g = default_grammar();
    if (!grammar_path.empty()) {
      if (!fs::exists(grammar_path)) throw UsageError("grammar file not found: " + grammar_path);
      g = read_json_file(grammar_path).get<ToyGrammar>();
    }
    g.validate();
    auto m = begin_manifest("gen-data", {{"grammar", g}, {"count", count}, {"seed", data_seed}, {"test_fraction", test_fraction}},
                            {});
    m.command = cmd;
    const auto corpus = make_toy_corpus(g, count, data_seed, test_fraction);
    save_corpus(out_dir, corpus);
    finish(m, out_dir);
    std::cout << "wrote " << corpus.pairs.size() << " pairs to " << out_dir << "\n";
    return kExitOk;
  }

  if (tq->parsed()) {
    require_dir(data_dir, "--data");
    auto cfg = load_config(config_path);
    if (kind) cfg.quantizer.kind = parse_quantizer_kind(*kind);
    if (stride) cfg.quantizer.stride = *stride;
    if (codebook_size) cfg.quantizer.codebook_size = *codebook_size;
    overrides.apply(cfg.quantizer_train);
    cfg.validate();
    fs::create_directories(out_dir);
    auto m = begin_manifest("train-quantizer", {{"quantizer", {{"vq", cfg.quantizer}, {"train", cfg.quantizer_train}}}},
                            corpus_inputs(data_dir));
    m.command = cmd;
    write_manifest(out_dir, m);
    progress("loading corpus");
    const auto corpus = load_corpus(data_dir, std::string("train"));
    auto q = run_quantizer_stage(cfg, corpus, out_dir);
    finish(m, out_dir);
    std::cout << "wrote " << (fs::path(out_dir) / kQuantizerFile).string() << "\n";
    return kExitOk;
  }

  if (pe->parsed()) {
    require_dir(data_dir, "--data");
    auto cfg = load_config(config_path);
    if (mask_fraction) cfg.mask.fraction = *mask_fraction;
    overrides.apply(cfg.pretrain_train);
    cfg.validate();
    fs::create_directories(out_dir);
    auto m = begin_manifest("pretrain-encoder",
                            {{"pretrain", {{"mask", cfg.mask}, {"codebook_size", cfg.pretrain_codebook_size}, {"train", cfg.pretrain_train}}},
                             {"encoder", cfg.model.encoder}},
                            corpus_inputs(data_dir));
    m.command = cmd;
    write_manifest(out_dir, m);
    const auto corpus = load_corpus(data_dir, std::string("train"));
    run_pretrain_stage(cfg, corpus, out_dir);
    finish(m, out_dir);
    std::cout << "wrote " << (fs::path(out_dir) / kEncoderFile).string() << "\n";
    return kExitOk;
  }

  if (ts->parsed()) {
    require_dir(data_dir, "--data");
    if (quantizer_path.empty()) throw UsageError("--quantizer is required: train-s2st needs a trained quantizer checkpoint");
    require_file(quantizer_path, "--quantizer");
    if (!encoder_init.empty()) require_file(encoder_init, "--encoder-init");
    auto cfg = load_config(config_path);
    if (init_synth) cfg.init_synth_from_vqvae = *init_synth;
    if (lambda_spec) cfg.model.lambda_spec = *lambda_spec;
    if (freeze_encoder) cfg.model.freeze_encoder = true;
    overrides.apply(cfg.s2st_train);
    cfg.validate();
    auto q = load_quantizer(quantizer_path);
    std::optional<Checkpoint> enc;
    auto inputs = corpus_inputs(data_dir);
    inputs[quantizer_path] = file_hash(quantizer_path);
    if (!encoder_init.empty()) {
      enc = load_checkpoint(encoder_init);
      inputs[encoder_init] = file_hash(encoder_init);
    }
    fs::create_directories(out_dir);
    auto m = begin_manifest("train-s2st",
                            {{"s2st", {{"model", resolve_model_config(cfg, q)},
                                       {"train", cfg.s2st_train},
                                       {"init_synth_from_vqvae", cfg.init_synth_from_vqvae}}}},
                            inputs);
    m.command = cmd;
    write_manifest(out_dir, m);
    const auto corpus = load_corpus(data_dir, std::string("train"));
    run_s2st_stage(cfg, corpus, q, enc, out_dir);
    finish(m, out_dir);
    std::cout << "wrote " << (fs::path(out_dir) / kModelFile).string() << "\n";
    return kExitOk;
  }

  if (ev->parsed()) {
    require_file(model_path, "--model");
    require_file(quantizer_path, "--quantizer");
    require_dir(data_dir, "--data");
    const auto cfg = load_config(config_path);
    const auto model = load_model(model_path);
    const auto q = load_quantizer(quantizer_path);
    if (model.cfg.stride != q.cfg.stride) {
      throw UsageError("stride mismatch: model " + std::to_string(model.cfg.stride) + ", quantizer " +
                       std::to_string(q.cfg.stride));
    }
    const auto corpus = load_corpus(data_dir, split);
    if (corpus.pairs.empty()) throw UsageError("split '" + split + "' not found in " + data_dir);
    const auto report = evaluate_model(model, q, corpus, split, cfg.transcriber);
    const auto parent = fs::path(report_path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    write_atomic(report_path, nlohmann::json(report).dump(2) + "\n");
    std::cout << nlohmann::json(report.metrics).dump() << "\n";
    return kExitOk;
  }

  if (sw->parsed()) {
    require_file(spec_path, "--spec");
    require_dir(data_dir, "--data");
    const auto spec = read_json_file(spec_path).get<SweepSpec>();
    fs::create_directories(out_dir);
    auto m = begin_manifest("sweep", spec, corpus_inputs(data_dir));
    m.command = cmd;
    write_manifest(out_dir, m);
    const auto corpus = load_corpus(data_dir);
    const auto rows = run_sweep(spec, corpus, out_dir, [](const SweepRow& r) {
      std::cout << r.axis << "=" << r.value << " seed " << r.seed << ": " << r.status;
      if (r.status == "ok") std::cout << " token_accuracy " << r.metrics.token_accuracy;
      std::cout << std::endl;
    });
    finish(m, out_dir);
    std::cout << "wrote " << (fs::path(out_dir) / "sweep.csv").string() << " (" << rows.size() << " rows)\n";
    return kExitOk;
  }

  if (in->parsed()) {
    if (!fs::is_regular_file(ck_path)) throw UsageError("--checkpoint not found: " + ck_path);
    const auto ck = load_checkpoint(ck_path);
    std::cout << "version " << ck.version << "\n";
    std::cout << "file_hash " << file_hash(ck_path) << "\n";
    std::cout << "config " << ck.config.dump(2) << "\n";
    std::cout << "tensors " << ck.tensors.size() << "\n";
    for (const auto& [name, t] : ck.tensors) {
      std::cout << "  " << name << " " << to_string(t.shape()) << " " << tensor_hash(t) << "\n";
    }
    if (ck.config.value("type", std::string()) == "quantizer") {
      const auto q = quantizer_from_checkpoint(ck);
      std::cout << "codebook_size " << q.cfg.codebook_size << "\n";
      std::cout << "latent_dim " << q.cfg.latent_dim << "\n";
      if (!data_dir.empty()) {
        require_dir(data_dir, "--data");
        const auto corpus = load_corpus(data_dir);
        const Tensor unit = q.codebook.normalized();
        std::vector<int> codes;
        for (const auto& p : corpus.pairs) {
          if (p.target.num_frames() < q.cfg.stride) continue;
          const auto ids = quantize_ids(q, channel_normalize(p.target, q.stats), &unit);
          codes.insert(codes.end(), ids.begin(), ids.end());
        }
        const auto u = codebook_utilization(codes, q.cfg.codebook_size);
        std::size_t used = 0;
        for (auto h : u.histogram) used += h > 0;
        std::cout << "utilization codes " << codes.size() << " used " << used << " entropy " << u.entropy << " perplexity "
                  << u.perplexity << "\n";
      }
    }
    return kExitOk;
  }
  return kExitUsage;
}

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const CorruptArtifact& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCorrupt;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}
