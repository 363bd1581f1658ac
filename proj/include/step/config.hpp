#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

#include "step/dataio.hpp"
#include "step/feature_backbone.hpp"
#include "step/losses.hpp"
#include "step/networks.hpp"
#include "step/triplet_miner.hpp"

namespace step {

struct OptimizerConfig {
  double encoder_generator_lr = 1e-3;  // (G+E) optimizer
  double discriminator_lr = 1e-3;
  double generator_lr = 1e-4;          // G alone, used while finetuning
  double beta1 = 0.0;
  double beta2 = 0.99;
  double mapper_lr = 0.01;
  double mapper_beta1 = 0.5;
  double mapper_beta2 = 0.99;
  double mapper_decay_rate = 0.7;
  std::int64_t mapper_decay_every = 50;

  void validate() const;
};

struct DatasetSection {
  std::string path;
  std::string layout = "side_by_side";
  int resolution = 64;
  bool hflip = false;
};

struct FeaturesSection {
  std::string backbone_id = "random-conv";
  std::string weights_registry;  // empty: built-in backbones only
  PerceptualConfig mining = PerceptualConfig::mining();
  PerceptualConfig reconstruction = PerceptualConfig::reconstruction();
  PerceptualConfig evaluation = PerceptualConfig::mining();
};

struct LossesSection {
  std::string preset = "v4";
  LossWeights weights;
  /// Per-stage override of the z_l2 flag; unset follows the preset.
  std::optional<bool> z_l2_train_generator;
  std::optional<bool> z_l2_finetune;

  LossSetup setup_for_stage2() const;
  LossSetup setup_for_stage3() const;
};

struct TrainerSection {
  std::int64_t stage1_steps = 500;
  std::int64_t stage2_steps = 2000;
  std::int64_t stage3_steps = 1000;
  std::int64_t mapper_steps = 500;
  int batch_size = 8;
  int mapper_batch = 64;
  int mapper_candidates = 512;
  std::uint64_t seed = 1;
  std::int64_t log_every = 10;
  std::int64_t eval_every = 250;
  std::int64_t checkpoint_every = 0;  // 0: only at the end of a stage
  int n_val_eval = 32;
  int n_heldout_triplets = 64;
  bool stage3_reuse_optimizer = false;
  OptimizerConfig optimizer;
};

struct EvalSection {
  std::string split = "val";
  int n_inputs = 100;
  int styles_per_input = 16;
  /// Resolution at which PSNR is computed; 0 keeps the native resolution.
  int psnr_resolution = 0;
};

struct RunConfig {
  DatasetSection dataset;
  ToySpec toy;
  MinerConfig miner;
  FeaturesSection features;
  NetworkSpec networks;
  LossesSection losses;
  TrainerSection trainer;
  EvalSection eval;

  /// Strict parse: unknown keys and wrongly typed values raise ConfigError
  /// naming the key path (e.g. "trainer.batch_sizee").
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  /// SHA-256 of the canonical JSON form.
  std::string hash() const;
  void validate() const;
};

nlohmann::json network_spec_to_json(const NetworkSpec& spec);
NetworkSpec network_spec_from_json(const nlohmann::json& j, const std::string& path = "networks");

}  // namespace step
