#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "test_util.hpp"
#include "textless/pipeline.hpp"

using namespace textless;
using textless::testing::scratch_dir;

namespace {

PipelineConfig tiny_pipeline() {
  PipelineConfig c;
  c.quantizer.codebook_size = 16;
  c.quantizer.latent_dim = 8;
  c.quantizer.encoder = c.quantizer.decoder = TransformerConfig{16, 1, 2, 32};
  c.quantizer_train = TrainConfig{12, 4, 3e-3, 3, 1, 4, 4, "float64", 1.0};
  c.pretrain_codebook_size = 16;
  c.pretrain_train = TrainConfig{6, 4, 1e-3, 2, 1, 0, 3, "float64", 1.0};
  c.model.encoder = c.model.decoder = TransformerConfig{16, 1, 2, 32};
  c.model.synthesizer = c.quantizer.decoder;
  c.model.max_decode_len = 10;
  c.s2st_train = TrainConfig{8, 4, 1e-3, 2, 1, 4, 4, "float64", 1.0};
  return c;
}

const ToyCorpus& corpus() {
  static const ToyCorpus c = make_toy_corpus(default_grammar(), 24, 5, 0.25);
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(PipelineConfig, DefaultsAndPartialFiles) {
  const auto d = parse_pipeline_config(nlohmann::json::object());
  EXPECT_EQ(d.quantizer.codebook_size, 512u);
  EXPECT_EQ(d.quantizer.latent_dim, 64u);
  EXPECT_EQ(d.s2st_train.learning_rate, PipelineConfig{}.s2st_train.learning_rate);

  const auto j = nlohmann::json::parse(R"({"quantizer": {"vq": {"stride": 8}, "train": {"steps": 7, "warmup_steps": 2}},
                                            "s2st": {"model": {"lambda_spec": 0.5}}})");
  const auto c = parse_pipeline_config(j);
  EXPECT_EQ(c.quantizer.stride, 8u);
  EXPECT_EQ(c.quantizer.codebook_size, 512u);
  EXPECT_EQ(c.quantizer_train.steps, 7);
  EXPECT_EQ(c.quantizer_train.learning_rate, PipelineConfig{}.quantizer_train.learning_rate);
  EXPECT_EQ(c.model.lambda_spec, 0.5);
  EXPECT_EQ(nlohmann::json(parse_pipeline_config(nlohmann::json(c))), nlohmann::json(c));
}

TEST(PipelineConfig, ErrorsNameTheField) {
  auto expect_error = [](const std::string& text, const std::string& needle) {
    try {
      parse_pipeline_config(nlohmann::json::parse(text));
      ADD_FAILURE() << "accepted " << text;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_error(R"({"quantiser": {}})", "quantiser");
  expect_error(R"({"quantizer": {"vq": {"stride": 3}}})", "quantizer.vq");
  expect_error(R"({"s2st": {"train": {"warmup_steps": 5000, "steps": 10}}})", "s2st.train");
  expect_error(R"({"s2st": {"model": {"lambda_spec": -1}}})", "lambda_spec");
  expect_error(R"({"pretrain": {"mask": {"fraction": 1.0}}})", "pretrain.mask");
  expect_error(R"({"s2st": {"train": {"steps": "many"}}})", "s2st.train");
}

TEST(Stages, RunsAreDeterministic) {
  const auto cfg = tiny_pipeline();
  const auto a = scratch_dir("stage_det_a"), b = scratch_dir("stage_det_b");
  auto qa = run_quantizer_stage(cfg, corpus(), a / "q");
  auto qb = run_quantizer_stage(cfg, corpus(), b / "q");
  EXPECT_EQ(slurp(a / "q" / kMetricsFile), slurp(b / "q" / kMetricsFile));
  EXPECT_EQ(slurp(a / "q" / kQuantizerFile), slurp(b / "q" / kQuantizerFile));
  run_s2st_stage(cfg, corpus(), qa, std::nullopt, a / "s");
  run_s2st_stage(cfg, corpus(), qb, std::nullopt, b / "s");
  EXPECT_EQ(slurp(a / "s" / kMetricsFile), slurp(b / "s" / kMetricsFile));
  EXPECT_EQ(slurp(a / "s" / kModelFile), slurp(b / "s" / kModelFile));
  EXPECT_FALSE(slurp(a / "s" / kMetricsFile).empty());
}

TEST(Stages, ResumeReproducesUninterruptedRun) {
  const auto cfg = tiny_pipeline();
  const auto full = scratch_dir("stage_resume_full"), cut = scratch_dir("stage_resume_cut");
  auto q = run_quantizer_stage(cfg, corpus(), full / "q");
  run_s2st_stage(cfg, corpus(), q, std::nullopt, full / "s");

  // interrupted after the step-4 checkpoint, then restarted with the full budget
  auto short_cfg = cfg;
  short_cfg.quantizer_train.steps = 4;
  short_cfg.quantizer_train.warmup_steps = 3;
  short_cfg.s2st_train.steps = 4;
  auto q_cut = run_quantizer_stage(short_cfg, corpus(), cut / "q");
  q_cut = run_quantizer_stage(cfg, corpus(), cut / "q");
  EXPECT_EQ(slurp(full / "q" / kMetricsFile), slurp(cut / "q" / kMetricsFile));
  EXPECT_EQ(slurp(full / "q" / kQuantizerFile), slurp(cut / "q" / kQuantizerFile));

  run_s2st_stage(short_cfg, corpus(), q_cut, std::nullopt, cut / "s");
  run_s2st_stage(cfg, corpus(), q_cut, std::nullopt, cut / "s");
  EXPECT_EQ(slurp(full / "s" / kMetricsFile), slurp(cut / "s" / kMetricsFile));
  EXPECT_EQ(slurp(full / "s" / kModelFile), slurp(cut / "s" / kModelFile));
}

TEST(Stages, S2stKeepsQuantizerBytes) {
  const auto cfg = tiny_pipeline();
  const auto dir = scratch_dir("stage_freeze");
  run_quantizer_stage(cfg, corpus(), dir / "q");
  const auto before = slurp(dir / "q" / kQuantizerFile);
  auto q = load_quantizer(dir / "q" / kQuantizerFile);
  run_s2st_stage(cfg, corpus(), q, std::nullopt, dir / "s");
  save_quantizer(dir / "q_after.tlck", q);
  // freezing clears requires_grad only; tensors are byte-identical
  const auto a = load_checkpoint(dir / "q" / kQuantizerFile), b = load_checkpoint(dir / "q_after.tlck");
  for (const auto& [name, t] : a.tensors) EXPECT_EQ(t.values(), b.at(name).values()) << name;
  EXPECT_EQ(before, slurp(dir / "q" / kQuantizerFile));
}

TEST(Stages, SynthesizerInitMismatchListsTensors) {
  auto cfg = tiny_pipeline();
  const auto dir = scratch_dir("stage_synth_mismatch");
  auto q = run_quantizer_stage(cfg, corpus(), dir / "q");
  cfg.model.synthesizer = TransformerConfig{32, 1, 2, 32};
  try {
    run_s2st_stage(cfg, corpus(), q, std::nullopt, dir / "s");
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("synthesizer/stack/layer0"), std::string::npos) << e.what();
  }
  cfg.init_synth_from_vqvae = false;
  EXPECT_NO_THROW(run_s2st_stage(cfg, corpus(), q, std::nullopt, dir / "s2"));
}

TEST(Stages, PretrainedEncoderIsLoaded) {
  const auto cfg = tiny_pipeline();
  const auto dir = scratch_dir("stage_pretrain");
  auto p = run_pretrain_stage(cfg, corpus(), dir / "p");
  const auto ck = load_checkpoint(dir / "p" / kEncoderFile);
  EXPECT_TRUE(ck.tensors.count("pretrain/head/weight"));
  auto frozen = cfg;
  frozen.model.freeze_encoder = true;
  auto q = run_quantizer_stage(cfg, corpus(), dir / "q");
  const auto m = run_s2st_stage(frozen, corpus(), q, ck, dir / "s");
  EXPECT_EQ(m.encoder.in.weight.values(), p.encoder.in.weight.values());
}

TEST(Manifest, RunIdDependsOnConfigAndInputs) {
  const auto a = begin_manifest("train", {{"x", 1}}, {{"f", "1"}});
  const auto b = begin_manifest("train", {{"x", 1}}, {{"f", "1"}});
  const auto c = begin_manifest("train", {{"x", 2}}, {{"f", "1"}});
  EXPECT_EQ(a.run_id, b.run_id);
  EXPECT_NE(a.run_id, c.run_id);
  const auto dir = scratch_dir("manifest");
  write_manifest(dir, a);
  const auto back = read_json_file(dir / "run.json").get<RunManifest>();
  EXPECT_EQ(back.run_id, a.run_id);
  EXPECT_EQ(back.config, a.config);
  EXPECT_FALSE(back.started.empty());
}

TEST(Sweep, SpecValidation) {
  auto parse = [](const std::string& s) { return nlohmann::json::parse(s).get<SweepSpec>(); };
  EXPECT_NO_THROW(parse(R"({"axis": "stride", "values": [2, 4, 8, 16]})"));
  EXPECT_NO_THROW(parse(R"({"axis": "encoder_init", "values": ["scratch", "pretrained"], "seeds": [4]})"));
  EXPECT_THROW(parse(R"({"axis": "stride", "values": [3]})"), ConfigError);
  EXPECT_THROW(parse(R"({"axis": "codebook_size", "values": [100]})"), ConfigError);
  EXPECT_THROW(parse(R"({"axis": "depth", "values": [1]})"), ConfigError);
  EXPECT_THROW(parse(R"({"axis": "stride", "values": []})"), ConfigError);
}

TEST(Sweep, CsvRowPerCellIncludingFailures) {
  SweepSpec spec;
  spec.axis = "stride";
  spec.values = {2, 16};
  spec.seeds = {1, 2};
  spec.base = tiny_pipeline();
  const auto dir = scratch_dir("sweep_rows");
  const auto rows = run_sweep(spec, corpus(), dir);
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& r : rows) EXPECT_EQ(r.status, "ok") << r.error;

  std::ifstream in(dir / "sweep.csv");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[0], kSweepHeader);
  EXPECT_EQ(lines[1].rfind("stride,2,1,ok,", 0), 0u) << lines[1];
  EXPECT_EQ(lines[4].rfind("stride,16,2,ok,", 0), 0u) << lines[4];

  spec.split = "dev";  // no such split: every cell fails, rows still emitted
  const auto failed = run_sweep(spec, corpus(), scratch_dir("sweep_fail"));
  ASSERT_EQ(failed.size(), 4u);
  for (const auto& r : failed) {
    EXPECT_EQ(r.status, "failed");
    EXPECT_NE(r.error.find("dev"), std::string::npos);
  }
}

TEST(Sweep, CsvQuoting) {
  SweepRow r{"stride", "4", 1, "failed", {}, 1.5, "bad, \"thing\""};
  EXPECT_EQ(sweep_csv_line(r), "stride,4,1,failed,,,,,,,1.5,\"bad, \"\"thing\"\"\"");
}
