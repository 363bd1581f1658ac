#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include <sys/wait.h>

#include <gtest/gtest.h>
#include <json.hpp>

#include "step/cli.hpp"
#include "step/config.hpp"
#include "support.hpp"

using namespace step;
using nlohmann::json;
using step::testing::TempDir;
using step::testing::tiny_spec;

namespace {

struct Result {
  int code;
  std::string out, err;
  json error() const { return json::parse(err.substr(0, err.find('\n'))); }
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

RunConfig tiny_run_config(const std::filesystem::path& data) {
  RunConfig c;
  c.dataset.path = data.string();
  c.dataset.resolution = 16;
  c.toy.n_train = 18;
  c.toy.n_val = 6;
  c.toy.image_size = 16;
  c.networks = tiny_spec(16);
  c.miner.k_close = 2;
  c.miner.k_far = 4;
  c.trainer.batch_size = 4;
  c.trainer.stage1_steps = 3;
  c.trainer.stage2_steps = 3;
  c.trainer.stage3_steps = 3;
  c.trainer.mapper_steps = 3;
  c.trainer.mapper_batch = 4;
  c.trainer.mapper_candidates = 8;
  c.trainer.log_every = 1;
  c.trainer.eval_every = 3;
  c.trainer.n_val_eval = 4;
  c.trainer.n_heldout_triplets = 4;
  c.eval.n_inputs = 4;
  c.eval.styles_per_input = 3;
  return c;
}

json read_json(const std::filesystem::path& p) {
  json j;
  std::ifstream(p) >> j;
  return j;
}

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

const std::vector<std::string> kSubcommands = {"make-toy",        "mine",     "pretrain-encoder", "train-generator",
                                               "finetune",        "train-mapper", "evaluate",     "transfer",
                                               "interpolate",     "sample",   "export-latents"};

}  // namespace

TEST(Cli, HelpForEverySubcommandListsFlagsWithDefaults) {
  for (const auto& sub : kSubcommands) {
    auto r = run({sub, "--help"});
    EXPECT_EQ(r.code, kExitOk) << sub;
    for (const char* flag : {"--config", "--seed", "--out TEXT [run]", "--device TEXT [cpu]"})
      EXPECT_NE(r.out.find(flag), std::string::npos) << sub << " " << flag;
  }
  for (const char* sub : {"pretrain-encoder", "train-generator", "finetune", "train-mapper"}) {
    auto r = run({sub, "--help"});
    EXPECT_NE(r.out.find("--resume"), std::string::npos) << sub;
    EXPECT_NE(r.out.find("--preset"), std::string::npos) << sub;
  }
  auto sample = run({"sample", "--help"}).out;
  for (const char* flag : {"[mapper]", "--count INT [16]", "[val]", "--checkpoint"})
    EXPECT_NE(sample.find(flag), std::string::npos) << flag;
  EXPECT_EQ(run({"--help"}).code, kExitOk);
}

TEST(Cli, UsageErrorsExitTwoWithStructuredError) {
  auto r = run({"train"});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_EQ(r.error()["error"], "usage");
  EXPECT_EQ(run({}).code, kExitConfig);
  EXPECT_EQ(run({"sample", "--mode", "prior"}).code, kExitConfig);
  EXPECT_EQ(run({"finetune", "--preset", "v7"}).code, kExitConfig);
}

TEST(Cli, InvalidConfigExitsTwoNamingTheKeyPath) {
  TempDir dir("cli");
  std::ofstream(dir / "c.json") << R"({"trainer": {"optimizer": {"beta22": 0.9}}})";
  auto r = run({"mine", "--config", (dir / "c.json").string(), "--out", (dir / "run").string()});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_EQ(r.error()["error"], "configuration");
  EXPECT_NE(r.error()["message"].get<std::string>().find("trainer.optimizer.beta22"), std::string::npos);

  std::ofstream(dir / "d.json") << R"({"miner": {"k_close": 9, "k_far": 3}})";
  EXPECT_EQ(run({"mine", "--config", (dir / "d.json").string()}).code, kExitConfig);
  EXPECT_EQ(run({"mine", "--config", (dir / "absent.json").string()}).code, kExitConfig);
  EXPECT_EQ(run({"mine", "--device", "cuda"}).code, kExitConfig);
}

TEST(Cli, MissingPrerequisitesExitThreeNamingTheArtifact) {
  TempDir dir("cli");
  const auto out = (dir / "run").string();
  auto r = run({"pretrain-encoder", "--out", out});
  EXPECT_EQ(r.code, kExitPrerequisite);
  EXPECT_NE(r.error()["missing"].get<std::string>().find("neighbors.tsv"), std::string::npos);

  r = run({"finetune", "--out", out});
  EXPECT_EQ(r.code, kExitPrerequisite);
  EXPECT_EQ(r.error()["error"], "prerequisite");
  EXPECT_NE(r.error()["missing"].get<std::string>().find("train_generator"), std::string::npos);
  EXPECT_NE(r.error()["message"].get<std::string>().find("train-generator"), std::string::npos);

  EXPECT_EQ(run({"train-generator", "--out", out}).code, kExitPrerequisite);
  EXPECT_EQ(run({"train-mapper", "--out", out}).code, kExitPrerequisite);
  EXPECT_EQ(run({"evaluate", "--out", out}).code, kExitPrerequisite);
  EXPECT_EQ(run({"finetune", "--out", out, "--resume", (dir / "nowhere").string()}).code, kExitPrerequisite);
}

TEST(Cli, BinaryReportsExitStatusAndJsonOnStderr) {
  TempDir dir("cli");
  const std::string cmd = std::string(STEP_CLI_PATH) + " finetune --out " + (dir / "run").string() + " > " +
                          (dir / "o.txt").string() + " 2> " + (dir / "e.txt").string();
  const int status = std::system(cmd.c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), kExitPrerequisite);
  std::ifstream err(dir / "e.txt");
  std::string line;
  std::getline(err, line);
  EXPECT_EQ(json::parse(line)["error"], "prerequisite");
}

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = std::make_unique<TempDir>("clipipe");
    config_ = tiny_run_config(dir_->path() / "data");
    std::ofstream(dir_->path() / "c.json") << config_.to_json().dump(2);
    ASSERT_EQ(run({"make-toy", "--config", cfg(), "--out", (dir_->path() / "data").string()}).code, kExitOk);
    for (const char* out : {"a", "b"}) full_pipeline(out, &logs_[out]);
  }
  static void TearDownTestSuite() { dir_.reset(); }

  static std::string cfg() { return (dir_->path() / "c.json").string(); }
  static std::string out(const std::string& name) { return (dir_->path() / name).string(); }

  static void full_pipeline(const std::string& name, std::vector<Result>* results) {
    for (const char* sub : {"mine", "mine", "pretrain-encoder", "train-generator", "finetune", "train-mapper",
                            "evaluate"}) {
      results->push_back(run({sub, "--config", cfg(), "--out", out(name)}));
      ASSERT_EQ(results->back().code, kExitOk) << sub << ": " << results->back().err;
    }
  }

  static std::unique_ptr<TempDir> dir_;
  static RunConfig config_;
  static std::map<std::string, std::vector<Result>> logs_;
};

std::unique_ptr<TempDir> CliPipeline::dir_;
RunConfig CliPipeline::config_;
std::map<std::string, std::vector<Result>> CliPipeline::logs_;

TEST_F(CliPipeline, ToyPipelineProducesAnEvalReport) {
  auto report = read_json(dir_->path() / "a/eval/val/report.json");
  EXPECT_EQ(report["n_samples"], 6);
  EXPECT_EQ(report["checkpoint_stage"], "mapper");
  EXPECT_TRUE(report.contains("psnr_mean"));
  EXPECT_TRUE(report.contains("diversity_sampling"));
  std::ifstream samples(dir_->path() / "a/eval/val/samples.jsonl");
  int n = 0;
  for (std::string line; std::getline(samples, line);) n += !line.empty();
  EXPECT_EQ(n, 6);
}

TEST_F(CliPipeline, TrainingSubcommandsPrintConfigHashFirst) {
  const auto expected = "config_hash " + config_.hash();
  for (const auto& r : logs_["a"]) EXPECT_EQ(first_line(r.out), expected);
  auto r = run({"pretrain-encoder", "--config", cfg(), "--out", out("seeded"), "--seed", "7"});
  auto seeded = config_;
  seeded.trainer.seed = 7;
  EXPECT_EQ(first_line(r.out), "config_hash " + seeded.hash());
  EXPECT_EQ(read_json(dir_->path() / "seeded/config.json"), seeded.to_json());
}

TEST_F(CliPipeline, SecondMineHitsTheDistanceCache) {
  EXPECT_NE(logs_["a"][0].out.find("cache miss"), std::string::npos);
  EXPECT_NE(logs_["a"][1].out.find("cache hit"), std::string::npos);

  TempDir cache("cache");
  setenv("STEP_CACHE_DIR", cache.path().c_str(), 1);
  auto first = run({"mine", "--config", cfg(), "--out", out("env")});
  auto second = run({"mine", "--config", cfg(), "--out", out("env2")});
  unsetenv("STEP_CACHE_DIR");
  EXPECT_NE(first.out.find("cache miss"), std::string::npos);
  EXPECT_NE(second.out.find("cache hit"), std::string::npos);
  EXPECT_FALSE(std::filesystem::is_empty(cache.path()));
}

TEST_F(CliPipeline, IdenticalConfigAndSeedGiveIdenticalArtifacts) {
  for (const char* stage : {"pretrain_encoder", "train_generator", "finetune", "mapper"}) {
    const auto latest = [&](const char* run_name) {
      std::ifstream in(dir_->path() / run_name / "checkpoints" / stage / "LATEST");
      std::string name;
      in >> name;
      return read_json(dir_->path() / run_name / "checkpoints" / stage / name / "manifest.json");
    };
    EXPECT_EQ(latest("a")["blobs"], latest("b")["blobs"]) << stage;
  }
  std::ifstream na(dir_->path() / "a/neighbors.tsv"), nb(dir_->path() / "b/neighbors.tsv");
  std::stringstream sa, sb;
  sa << na.rdbuf();
  sb << nb.rdbuf();
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(read_json(dir_->path() / "a/eval/val/report.json"), read_json(dir_->path() / "b/eval/val/report.json"));
}

TEST_F(CliPipeline, InferenceSubcommandsWriteTheirArtifacts) {
  const auto o = out("a");
  EXPECT_EQ(run({"transfer", "--config", cfg(), "--out", o, "--image", "t.png"}).code, kExitOk);
  EXPECT_TRUE(std::filesystem::exists(dir_->path() / "a/t.png"));
  EXPECT_EQ(run({"interpolate", "--config", cfg(), "--out", o, "--steps", "5", "--image", "i.png"}).code, kExitOk);
  EXPECT_TRUE(std::filesystem::exists(dir_->path() / "a/i.png"));
  EXPECT_EQ(run({"sample", "--config", cfg(), "--out", o, "--count", "5", "--seed", "3"}).code, kExitOk);
  EXPECT_TRUE(std::filesystem::exists(dir_->path() / "a/samples_mapper.csv"));
  EXPECT_EQ(run({"sample", "--config", cfg(), "--out", o, "--mode", "empirical", "--count", "4"}).code, kExitOk);
  EXPECT_TRUE(std::filesystem::exists(dir_->path() / "a/samples_empirical.csv"));
  EXPECT_EQ(run({"export-latents", "--config", cfg(), "--out", o, "--split", "train"}).code, kExitOk);
  EXPECT_TRUE(std::filesystem::exists(dir_->path() / "a/latents_train.csv"));

  auto bad = run({"transfer", "--config", cfg(), "--out", o, "--content", "no_such_id"});
  EXPECT_EQ(bad.code, kExitFailure);
  EXPECT_EQ(bad.error()["error"], "input");
  EXPECT_EQ(run({"sample", "--config", cfg(), "--out", o, "--count", "0"}).code, kExitConfig);
}

TEST_F(CliPipeline, SamplingIsSeeded) {
  const auto o = out("b");
  auto read = [&] {
    std::ifstream in(dir_->path() / "b/samples_mapper.csv");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  run({"sample", "--config", cfg(), "--out", o, "--count", "4", "--seed", "11"});
  const auto first = read();
  run({"sample", "--config", cfg(), "--out", o, "--count", "4", "--seed", "11"});
  EXPECT_EQ(read(), first);
  run({"sample", "--config", cfg(), "--out", o, "--count", "4", "--seed", "12"});
  EXPECT_NE(read(), first);
}

TEST_F(CliPipeline, ResumeContinuesFromAManifest) {
  std::ifstream in(dir_->path() / "a/checkpoints/pretrain_encoder/LATEST");
  std::string name;
  in >> name;
  const auto ckpt = (dir_->path() / "a/checkpoints/pretrain_encoder" / name).string();
  auto r = run({"train-generator", "--config", cfg(), "--out", out("resumed"), "--resume", ckpt});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("loaded " + ckpt), std::string::npos);
  std::ifstream la(dir_->path() / "a/checkpoints/train_generator/LATEST");
  std::string ga;
  la >> ga;
  auto ma = read_json(dir_->path() / "a/checkpoints/train_generator" / ga / "manifest.json");
  auto mr = read_json(dir_->path() / "resumed/checkpoints/train_generator" / ga / "manifest.json");
  EXPECT_EQ(ma["blobs"], mr["blobs"]);
}
