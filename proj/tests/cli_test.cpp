#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <regex>
#include <sstream>

#include "test_util.hpp"
#include "textless/pipeline.hpp"

using namespace textless;
using textless::testing::scratch_dir;

namespace {

struct Result {
  int code;
  std::string output;  // stdout and stderr
};

Result run(const std::string& args) {
  const std::string cmd = std::string(TEXTLESS_CLI) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) throw std::runtime_error("popen failed");
  std::string out;
  std::array<char, 4096> buf{};
  while (auto n = std::fread(buf.data(), 1, buf.size(), pipe)) out.append(buf.data(), n);
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kTinyConfig = R"({
  "quantizer": {"vq": {"codebook_size": 16, "latent_dim": 8,
                       "encoder": {"width": 16, "layers": 1, "heads": 2, "ffn": 32},
                       "decoder": {"width": 16, "layers": 1, "heads": 2, "ffn": 32}},
                "train": {"steps": 10, "warmup_steps": 2, "eval_every": 5}},
  "pretrain": {"codebook_size": 16, "train": {"steps": 4, "warmup_steps": 2, "eval_every": 2}},
  "s2st": {"model": {"encoder": {"width": 16, "layers": 1, "heads": 2, "ffn": 32},
                     "decoder": {"width": 16, "layers": 1, "heads": 2, "ffn": 32},
                     "synthesizer": {"width": 16, "layers": 1, "heads": 2, "ffn": 32},
                     "max_decode_len": 8},
           "train": {"steps": 6, "warmup_steps": 2, "eval_every": 3}}
})";

/// Shared small corpus, tiny config and trained artifacts.
class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = scratch_dir("cli");
    std::ofstream(dir_ / "tiny.json") << kTinyConfig;
    ASSERT_EQ(run("gen-data --count 24 --seed 3 --test-fraction 0.25 --out " + (dir_ / "data").string()).code, 0);
    ASSERT_EQ(run(common("train-quantizer") + " --out " + (dir_ / "q").string()).code, 0);
    ASSERT_EQ(run(common("train-s2st") + " --out " + (dir_ / "s").string() + " --quantizer " + quantizer()).code, 0);
  }

  static std::string common(const std::string& cmd) {
    return cmd + " --config " + (dir_ / "tiny.json").string() + " --data " + (dir_ / "data").string();
  }
  static std::string quantizer() { return (dir_ / "q" / kQuantizerFile).string(); }
  static std::string model() { return (dir_ / "s" / kModelFile).string(); }

  static fs::path dir_;
};

fs::path CliPipeline::dir_;

}  // namespace

TEST(CliHelp, MatchesSnapshots) {
  const fs::path snaps = TEXTLESS_SNAPSHOTS;
  EXPECT_EQ(run("--help").output, slurp(snaps / "textless.txt"));
  for (const std::string cmd : {"gen-data", "train-quantizer", "pretrain-encoder", "train-s2st", "evaluate", "sweep", "inspect"}) {
    const auto r = run(cmd + " --help");
    EXPECT_EQ(r.code, 0) << cmd;
    EXPECT_EQ(r.output, slurp(snaps / (cmd + ".txt"))) << cmd;
  }
}

TEST(CliHelp, EveryOptionHasADescription) {
  const std::regex option_line(R"(^  --?[a-z]\S*.*)");
  const std::regex inline_text(R"(^  \S.*\S  +\S.*)");
  const std::regex continuation(R"(^ {10,}\S.*)");
  for (const std::string cmd : {"gen-data", "train-quantizer", "pretrain-encoder", "train-s2st", "evaluate", "sweep", "inspect"}) {
    const auto out = run(cmd + " --help").output;
    std::istringstream in(out);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (!std::regex_match(lines[i], option_line)) continue;
      // long option names push the description onto the next line
      const bool described = std::regex_match(lines[i], inline_text) ||
                             (i + 1 < lines.size() && std::regex_match(lines[i + 1], continuation));
      EXPECT_TRUE(described) << cmd << ": " << lines[i];
    }
  }
}

TEST(CliUsage, ExitCodes) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("no-such-command").code, 2);
  EXPECT_EQ(run("gen-data").code, 2);  // --out missing
  const auto dir = scratch_dir("cli_usage");
  const auto zero = run("gen-data --count 0 --out " + (dir / "d").string());
  EXPECT_EQ(zero.code, 2);
  EXPECT_NE(zero.output.find("--count"), std::string::npos);
  std::ofstream(dir / "bad_grammar.json") << R"({"source_vocab": 3})";
  EXPECT_EQ(run("gen-data --count 5 --grammar " + (dir / "bad_grammar.json").string() + " --out " + (dir / "g").string()).code,
            2);
  std::ofstream(dir / "bad.json") << R"({"s2st": {"train": {"stepz": 3}}})";
  const auto bad = run("train-quantizer --config " + (dir / "bad.json").string() + " --data " + dir.string() + " --out " +
                       (dir / "o").string());
  EXPECT_EQ(bad.code, 2);
}

TEST(CliGenData, ManifestAndReproducibility) {
  const auto dir = scratch_dir("cli_gen");
  ASSERT_EQ(run("gen-data --count 6 --seed 11 --out " + (dir / "a").string()).code, 0);
  ASSERT_EQ(run("gen-data --count 6 --seed 11 --out " + (dir / "b").string()).code, 0);
  const auto manifest = slurp(dir / "a" / "manifest.jsonl");
  EXPECT_EQ(std::count(manifest.begin(), manifest.end(), '\n'), 6);
  EXPECT_EQ(manifest, slurp(dir / "b" / "manifest.jsonl"));
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "a" / "utt")) {
    EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / "utt" / e.path().filename()));
    ++files;
  }
  EXPECT_EQ(files, 12u);
  EXPECT_TRUE(fs::exists(dir / "a" / "run.json"));
}

TEST_F(CliPipeline, S2stRequiresQuantizer) {
  const auto r = run(common("train-s2st") + " --out " + (dir_ / "noq").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("--quantizer"), std::string::npos);
}

TEST_F(CliPipeline, SynthesizerInitMismatchListsTensors) {
  std::ofstream(dir_ / "wide_synth.json") << R"({"s2st": {"model": {"synthesizer": {"width": 32, "layers": 1, "heads": 2, "ffn": 32}}}})";
  const auto r = run("train-s2st --config " + (dir_ / "wide_synth.json").string() + " --data " + (dir_ / "data").string() +
                     " --out " + (dir_ / "mismatch").string() + " --quantizer " + quantizer() + " --steps 1");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("synthesizer/stack/layer0"), std::string::npos) << r.output;
}

TEST_F(CliPipeline, TrainingWritesArtifactsAndIsDeterministic) {
  for (const char* f : {kQuantizerFile, kMetricsFile, "run.json"}) EXPECT_TRUE(fs::exists(dir_ / "q" / f)) << f;
  for (const char* f : {kModelFile, kMetricsFile, "run.json"}) EXPECT_TRUE(fs::exists(dir_ / "s" / f)) << f;
  ASSERT_EQ(run(common("train-quantizer") + " --out " + (dir_ / "q2").string()).code, 0);
  EXPECT_EQ(slurp(dir_ / "q" / kMetricsFile), slurp(dir_ / "q2" / kMetricsFile));
  ASSERT_EQ(run(common("train-s2st") + " --out " + (dir_ / "s2").string() + " --quantizer " + quantizer()).code, 0);
  EXPECT_EQ(slurp(dir_ / "s" / kMetricsFile), slurp(dir_ / "s2" / kMetricsFile));

  const auto manifest = nlohmann::json::parse(slurp(dir_ / "s" / "run.json"));
  EXPECT_TRUE(manifest.at("inputs").contains(quantizer()));
  EXPECT_EQ(manifest.at("config").at("s2st").at("train").at("steps"), 6);
}

TEST_F(CliPipeline, FlagOverridesConfigFile) {
  ASSERT_EQ(run(common("train-quantizer") + " --steps 3 --seed 9 --out " + (dir_ / "qflag").string()).code, 0);
  const auto manifest = nlohmann::json::parse(slurp(dir_ / "qflag" / "run.json"));
  const auto& train = manifest.at("config").at("quantizer").at("train");
  EXPECT_EQ(train.at("steps"), 3);             // flag
  EXPECT_EQ(train.at("seed"), 9);              // flag
  EXPECT_EQ(train.at("eval_every"), 5);        // file
  EXPECT_EQ(train.at("batch_size"), 16);       // default
  EXPECT_EQ(manifest.at("config").at("quantizer").at("vq").at("codebook_size"), 16);
}

TEST_F(CliPipeline, PretrainAndEncoderInit) {
  ASSERT_EQ(run(common("pretrain-encoder") + " --out " + (dir_ / "p").string()).code, 0);
  const auto enc = (dir_ / "p" / kEncoderFile).string();
  const auto r = run(common("train-s2st") + " --out " + (dir_ / "sp").string() + " --quantizer " + quantizer() +
                     " --encoder-init " + enc);
  EXPECT_EQ(r.code, 0) << r.output;
}

TEST_F(CliPipeline, EvaluateIsReproducibleAndReadOnly) {
  const auto q_hash = file_hash(quantizer()), m_hash = file_hash(model());
  const auto base = "evaluate --model " + model() + " --quantizer " + quantizer() + " --data " + (dir_ / "data").string();
  ASSERT_EQ(run(base + " --report " + (dir_ / "r1.json").string()).code, 0);
  ASSERT_EQ(run(base + " --report " + (dir_ / "r2.json").string()).code, 0);
  EXPECT_EQ(slurp(dir_ / "r1.json"), slurp(dir_ / "r2.json"));
  EXPECT_EQ(file_hash(quantizer()), q_hash);
  EXPECT_EQ(file_hash(model()), m_hash);

  const auto report = nlohmann::json::parse(slurp(dir_ / "r1.json"));
  for (const char* k : {"split", "utterances", "transcriber_recovery", "metrics"}) EXPECT_TRUE(report.contains(k)) << k;
  for (const char* k : {"token_accuracy", "sequence_exact_match", "code_prediction_accuracy", "spec_l1", "codebook_entropy",
                        "truncation_rate", "teacher_forced_token_accuracy"}) {
    ASSERT_TRUE(report.at("metrics").contains(k)) << k;
    EXPECT_TRUE(report.at("metrics").at(k).is_number()) << k;
  }
  EXPECT_EQ(run(base + " --split dev --report " + (dir_ / "r3.json").string()).code, 2);
}

TEST_F(CliPipeline, EvaluateRejectsStrideMismatch) {
  ASSERT_EQ(run(common("train-quantizer") + " --stride 8 --steps 2 --out " + (dir_ / "q8").string()).code, 0);
  const auto r = run("evaluate --model " + model() + " --quantizer " + (dir_ / "q8" / kQuantizerFile).string() + " --data " +
                     (dir_ / "data").string() + " --report " + (dir_ / "bad.json").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("stride"), std::string::npos);
}

TEST_F(CliPipeline, InspectListsTensorsAndDetectsCorruption) {
  const auto a = run("inspect --checkpoint " + quantizer() + " --data " + (dir_ / "data").string());
  ASSERT_EQ(a.code, 0) << a.output;
  EXPECT_NE(a.output.find("codebook_size 16"), std::string::npos);
  EXPECT_NE(a.output.find("latent_dim 8"), std::string::npos);
  EXPECT_NE(a.output.find("codebook [16, 8]"), std::string::npos) << a.output;
  EXPECT_NE(a.output.find("utilization"), std::string::npos);
  EXPECT_EQ(run("inspect --checkpoint " + quantizer() + " --data " + (dir_ / "data").string()).output, a.output);

  const auto bytes = slurp(quantizer());
  std::ofstream(dir_ / "truncated.tlck", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  const auto t = run("inspect --checkpoint " + (dir_ / "truncated.tlck").string());
  EXPECT_EQ(t.code, 4);
  EXPECT_NE(t.output.find("corrupt at byte"), std::string::npos) << t.output;
}

TEST(CliInspect, DefaultQuantizerHasFullSizeCodebook) {
  const auto dir = scratch_dir("cli_default_q");
  ASSERT_EQ(run("gen-data --count 4 --test-fraction 0.25 --out " + (dir / "data").string()).code, 0);
  ASSERT_EQ(run("train-quantizer --steps 1 --data " + (dir / "data").string() + " --out " + (dir / "q").string()).code, 0);
  const auto r = run("inspect --checkpoint " + (dir / "q" / kQuantizerFile).string());
  EXPECT_NE(r.output.find("codebook_size 512"), std::string::npos);
  EXPECT_NE(r.output.find("latent_dim 64"), std::string::npos);
}

TEST(CliSweep, RowsPerCell) {
  const auto dir = scratch_dir("cli_sweep");
  ASSERT_EQ(run("gen-data --count 16 --test-fraction 0.25 --out " + (dir / "data").string()).code, 0);
  auto spec = nlohmann::json::parse(R"({"axis": "codebook_size", "values": [128, 512], "seeds": [1, 2]})");
  spec["base"] = nlohmann::json::parse(kTinyConfig);
  spec["base"]["quantizer"]["vq"].erase("codebook_size");
  std::ofstream(dir / "spec.json") << spec.dump();
  const auto r = run("sweep --spec " + (dir / "spec.json").string() + " --data " + (dir / "data").string() + " --out " +
                     (dir / "out").string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto csv = slurp(dir / "out" / "sweep.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_EQ(csv.find("failed"), std::string::npos) << csv;
}
