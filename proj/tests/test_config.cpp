#include <fstream>

#include <gtest/gtest.h>

#include "step/config.hpp"
#include "step/errors.hpp"
#include "support.hpp"

using namespace step;
using nlohmann::json;
using step::testing::TempDir;

namespace {

std::string config_error(const json& j) {
  try {
    RunConfig::from_json(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, DefaultsFollowTheTrainingRecipe) {
  RunConfig c;
  const auto& o = c.trainer.optimizer;
  EXPECT_EQ(o.encoder_generator_lr, 1e-3);
  EXPECT_EQ(o.discriminator_lr, 1e-3);
  EXPECT_EQ(o.generator_lr, 1e-4);
  EXPECT_EQ(o.beta1, 0.0);
  EXPECT_EQ(o.beta2, 0.99);
  EXPECT_EQ(o.mapper_lr, 0.01);
  EXPECT_EQ(o.mapper_beta1, 0.5);
  EXPECT_EQ(o.mapper_decay_rate, 0.7);
  EXPECT_EQ(o.mapper_decay_every, 50);
  EXPECT_EQ(c.losses.weights.lambda_cgan, 1.0);
  EXPECT_EQ(c.losses.weights.lambda_rec, 0.02);
  EXPECT_EQ(c.losses.weights.lambda_l2, 0.01);
  EXPECT_EQ(c.miner.k_close, 5);
  EXPECT_EQ(c.miner.k_far, 13);
  EXPECT_EQ(c.miner.subset_size, 8000);
  EXPECT_EQ(c.trainer.stage1_steps, 500);
  EXPECT_EQ(c.trainer.stage2_steps, 2000);
  EXPECT_EQ(c.trainer.stage3_steps, 1000);
  EXPECT_EQ(c.trainer.batch_size, 8);
  EXPECT_EQ(c.networks.latent_dim, 8);
  EXPECT_EQ(c.eval.n_inputs, 100);
  EXPECT_EQ(c.eval.styles_per_input, 16);
  EXPECT_FALSE(c.trainer.stage3_reuse_optimizer);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, JsonRoundTripPreservesHash) {
  RunConfig c;
  c.trainer.seed = 42;
  c.losses.z_l2_finetune = false;
  c.features.mining.layer_weights = {1, 2, 3, 4, 5};
  auto back = RunConfig::from_json(c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(RunConfig::from_json(json::object()).hash(), RunConfig{}.hash());
}

TEST(Config, HashChangesWithAnyField) {
  const auto base = RunConfig{}.hash();
  EXPECT_EQ(base.size(), 64u);
  RunConfig a;
  a.trainer.seed = 2;
  RunConfig b;
  b.losses.weights.lambda_rec = 0.03;
  RunConfig c;
  c.dataset.path = "elsewhere";
  EXPECT_NE(a.hash(), base);
  EXPECT_NE(b.hash(), base);
  EXPECT_NE(c.hash(), base);
}

TEST(Config, UnknownKeysNameTheirPath) {
  EXPECT_NE(config_error({{"trainer", {{"batch_sizee", 4}}}}).find("trainer.batch_sizee"), std::string::npos);
  EXPECT_NE(config_error({{"losses", {{"weights", {{"lambda", 1}}}}}}).find("losses.weights.lambda"),
            std::string::npos);
  EXPECT_NE(config_error({{"bogus", 1}}).find("bogus"), std::string::npos);
}

TEST(Config, WrongTypesNameTheirPath) {
  EXPECT_NE(config_error({{"trainer", {{"batch_size", "eight"}}}}).find("trainer.batch_size"), std::string::npos);
  EXPECT_NE(config_error({{"miner", {{"k_far", 1.5}}}}).find("miner.k_far"), std::string::npos);
  EXPECT_NE(config_error({{"trainer", {{"seed", -1}}}}).find("trainer.seed"), std::string::npos);
  EXPECT_NE(config_error({{"dataset", 3}}).find("dataset"), std::string::npos);
}

TEST(Config, InvalidValuesRejected) {
  EXPECT_FALSE(config_error({{"trainer", {{"optimizer", {{"generator_lr", 0.0}}}}}}).empty());
  EXPECT_FALSE(config_error({{"trainer", {{"optimizer", {{"mapper_decay_rate", 1.5}}}}}}).empty());
  EXPECT_FALSE(config_error({{"miner", {{"k_close", 13}, {"k_far", 13}}}}).empty());
  EXPECT_FALSE(config_error({{"dataset", {{"resolution", 32}}}}).empty());
  EXPECT_FALSE(config_error({{"dataset", {{"layout", "diagonal"}}}}).empty());
  EXPECT_FALSE(config_error({{"losses", {{"preset", "v9"}}}}).empty());
  EXPECT_FALSE(config_error({{"features", {{"mining", {{"layer_ids", {"conv9_9"}}}}}}}).empty());
}

TEST(Config, LatentPenaltyOverridesPerStage) {
  RunConfig c = RunConfig::from_json({{"losses", {{"preset", "v3"}, {"z_l2_finetune", false}}}});
  EXPECT_TRUE(c.losses.setup_for_stage2().z_l2);
  EXPECT_FALSE(c.losses.setup_for_stage3().z_l2);
  EXPECT_EQ(c.losses.setup_for_stage2(), LossSetup::preset("v3"));
}

TEST(Config, LoadReportsMissingAndMalformedFiles) {
  TempDir dir("cfg");
  EXPECT_THROW(RunConfig::load(dir / "absent.json"), ConfigError);
  std::ofstream(dir / "bad.json") << "{\"trainer\": ";
  EXPECT_THROW(RunConfig::load(dir / "bad.json"), ConfigError);
  std::ofstream(dir / "ok.json") << R"({"trainer": {"seed": 9}})";
  EXPECT_EQ(RunConfig::load(dir / "ok.json").trainer.seed, 9u);
}

TEST(Config, ShippedToyConfigLoads) {
  auto c = RunConfig::load(STEP_TOY_CONFIG);
  EXPECT_EQ(c.losses.weights.lambda_rec, 2.0);
  EXPECT_TRUE(c.trainer.stage3_reuse_optimizer);
  EXPECT_NO_THROW(c.validate());
}
