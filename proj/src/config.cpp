#include "step/config.hpp"

#include <fstream>
#include <functional>
#include <set>
#include <type_traits>

#include "step/errors.hpp"
#include "step/hashing.hpp"

namespace step {
using nlohmann::json;

void OptimizerConfig::validate() const {
  for (double lr : {encoder_generator_lr, discriminator_lr, generator_lr, mapper_lr})
    require<ConfigError>(lr > 0.0, "trainer.optimizer: learning rates must be positive");
  require<ConfigError>(mapper_decay_rate > 0.0 && mapper_decay_rate <= 1.0,
                       "trainer.optimizer.mapper_decay_rate must lie in (0, 1]");
  require<ConfigError>(mapper_decay_every >= 0, "trainer.optimizer.mapper_decay_every must be >= 0");
}

LossSetup LossesSection::setup_for_stage2() const {
  auto s = LossSetup::preset(preset);
  if (z_l2_train_generator) s.z_l2 = *z_l2_train_generator;
  return s;
}

LossSetup LossesSection::setup_for_stage3() const {
  auto s = LossSetup::preset(preset);
  if (z_l2_finetune) s.z_l2 = *z_l2_finetune;
  return s;
}

namespace {

/// Reads fields of one JSON object, recording which keys were consumed so
/// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
      if (!v.is_number_integer() || (std::is_unsigned_v<T> && !v.is_number_unsigned()))
        throw ConfigError(path_ + "." + key + ": expected " +
                          (std::is_unsigned_v<T> ? "a non-negative integer" : "an integer") + ", got " + v.dump());
    }
    try {
      out = v.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  template <class T>
  void read(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    T v{};
    read(key, v);
    out = v;
  }

  void sub(const char* key, const std::function<void(Section&)>& fn) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    Section s(j_.at(key), path_ + "." + key);
    fn(s);
    s.finish();
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.contains(k)) throw ConfigError("unknown configuration key '" + path_ + "." + k + "'");
  }

  const std::string& path() const { return path_; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_perceptual(Section& s, PerceptualConfig& c) {
  s.read("layer_ids", c.layer_ids);
  s.read("layer_weights", c.layer_weights);
}

json perceptual_json(const PerceptualConfig& c) {
  return {{"layer_ids", c.layer_ids}, {"layer_weights", c.layer_weights}};
}

void read_network_spec(Section& s, NetworkSpec& n) {
  s.read("latent_dim", n.latent_dim);
  s.read("image_size", n.image_size);
  s.read("in_channels", n.in_channels);
  s.read("out_channels", n.out_channels);
  s.read("encoder_widths", n.encoder_widths);
  s.read("generator_widths", n.generator_widths);
  s.read("n_scales", n.n_scales);
  s.read("discriminator_widths", n.discriminator_widths);
  s.read("mapper_hidden", n.mapper_hidden);
  s.read("mapper_output_tanh", n.mapper_output_tanh);
  s.read("mapper_zero_init_output", n.mapper_zero_init_output);
}

}  // namespace

json network_spec_to_json(const NetworkSpec& n) {
  return {{"latent_dim", n.latent_dim},
          {"image_size", n.image_size},
          {"in_channels", n.in_channels},
          {"out_channels", n.out_channels},
          {"encoder_widths", n.encoder_widths},
          {"generator_widths", n.generator_widths},
          {"n_scales", n.n_scales},
          {"discriminator_widths", n.discriminator_widths},
          {"mapper_hidden", n.mapper_hidden},
          {"mapper_output_tanh", n.mapper_output_tanh},
          {"mapper_zero_init_output", n.mapper_zero_init_output}};
}

NetworkSpec network_spec_from_json(const json& j, const std::string& path) {
  NetworkSpec n;
  Section s(j, path);
  read_network_spec(s, n);
  s.finish();
  return n;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  Section root(j, "config");
  root.sub("dataset", [&](Section& s) {
    s.read("path", c.dataset.path);
    s.read("layout", c.dataset.layout);
    s.read("resolution", c.dataset.resolution);
    s.read("hflip", c.dataset.hflip);
  });
  root.sub("toy", [&](Section& s) {
    s.read("n_train", c.toy.n_train);
    s.read("n_val", c.toy.n_val);
    s.read("image_size", c.toy.image_size);
    s.read("n_styles", c.toy.n_styles);
    s.read("shapes", c.toy.shapes);
    s.read("seed", c.toy.seed);
  });
  root.sub("miner", [&](Section& s) {
    s.read("k_close", c.miner.k_close);
    s.read("k_far", c.miner.k_far);
    s.read("subset_size", c.miner.subset_size);
    s.read("metric_id", c.miner.metric_id);
    s.read("seed", c.miner.seed);
  });
  root.sub("features", [&](Section& s) {
    s.read("backbone_id", c.features.backbone_id);
    s.read("weights_registry", c.features.weights_registry);
    s.sub("mining", [&](Section& t) { read_perceptual(t, c.features.mining); });
    s.sub("reconstruction", [&](Section& t) { read_perceptual(t, c.features.reconstruction); });
    s.sub("evaluation", [&](Section& t) { read_perceptual(t, c.features.evaluation); });
  });
  root.sub("networks", [&](Section& s) { read_network_spec(s, c.networks); });
  root.sub("losses", [&](Section& s) {
    s.read("preset", c.losses.preset);
    s.read("z_l2_train_generator", c.losses.z_l2_train_generator);
    s.read("z_l2_finetune", c.losses.z_l2_finetune);
    s.sub("weights", [&](Section& t) {
      auto& w = c.losses.weights;
      t.read("lambda_cgan", w.lambda_cgan);
      t.read("lambda_rec", w.lambda_rec);
      t.read("lambda_l2", w.lambda_l2);
      t.read("alpha_margin", w.alpha_margin);
      t.read("lambda_reg", w.lambda_reg);
      t.read("lambda_z_recon", w.lambda_z_recon);
    });
  });
  root.sub("trainer", [&](Section& s) {
    auto& t = c.trainer;
    s.read("stage1_steps", t.stage1_steps);
    s.read("stage2_steps", t.stage2_steps);
    s.read("stage3_steps", t.stage3_steps);
    s.read("mapper_steps", t.mapper_steps);
    s.read("batch_size", t.batch_size);
    s.read("mapper_batch", t.mapper_batch);
    s.read("mapper_candidates", t.mapper_candidates);
    s.read("seed", t.seed);
    s.read("log_every", t.log_every);
    s.read("eval_every", t.eval_every);
    s.read("checkpoint_every", t.checkpoint_every);
    s.read("n_val_eval", t.n_val_eval);
    s.read("n_heldout_triplets", t.n_heldout_triplets);
    s.read("stage3_reuse_optimizer", t.stage3_reuse_optimizer);
    s.sub("optimizer", [&](Section& o) {
      auto& p = t.optimizer;
      o.read("encoder_generator_lr", p.encoder_generator_lr);
      o.read("discriminator_lr", p.discriminator_lr);
      o.read("generator_lr", p.generator_lr);
      o.read("beta1", p.beta1);
      o.read("beta2", p.beta2);
      o.read("mapper_lr", p.mapper_lr);
      o.read("mapper_beta1", p.mapper_beta1);
      o.read("mapper_beta2", p.mapper_beta2);
      o.read("mapper_decay_rate", p.mapper_decay_rate);
      o.read("mapper_decay_every", p.mapper_decay_every);
    });
  });
  root.sub("eval", [&](Section& s) {
    s.read("split", c.eval.split);
    s.read("n_inputs", c.eval.n_inputs);
    s.read("styles_per_input", c.eval.styles_per_input);
    s.read("psnr_resolution", c.eval.psnr_resolution);
  });
  root.finish();
  for (auto* p : {&c.features.mining, &c.features.reconstruction, &c.features.evaluation})
    p->backbone_id = c.features.backbone_id;
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

json RunConfig::to_json() const {
  json j;
  j["dataset"] = {{"path", dataset.path}, {"layout", dataset.layout}, {"resolution", dataset.resolution},
                  {"hflip", dataset.hflip}};
  j["toy"] = {{"n_train", toy.n_train}, {"n_val", toy.n_val},       {"image_size", toy.image_size},
              {"n_styles", toy.n_styles}, {"shapes", toy.shapes}, {"seed", toy.seed}};
  j["miner"] = {{"k_close", miner.k_close},     {"k_far", miner.k_far}, {"subset_size", miner.subset_size},
                {"metric_id", miner.metric_id}, {"seed", miner.seed}};
  j["features"] = {{"backbone_id", features.backbone_id},
                   {"weights_registry", features.weights_registry},
                   {"mining", perceptual_json(features.mining)},
                   {"reconstruction", perceptual_json(features.reconstruction)},
                   {"evaluation", perceptual_json(features.evaluation)}};
  j["networks"] = network_spec_to_json(networks);
  const auto& w = losses.weights;
  j["losses"] = {{"preset", losses.preset},
                 {"z_l2_train_generator", losses.z_l2_train_generator ? json(*losses.z_l2_train_generator) : json()},
                 {"z_l2_finetune", losses.z_l2_finetune ? json(*losses.z_l2_finetune) : json()},
                 {"weights",
                  {{"lambda_cgan", w.lambda_cgan},
                   {"lambda_rec", w.lambda_rec},
                   {"lambda_l2", w.lambda_l2},
                   {"alpha_margin", w.alpha_margin},
                   {"lambda_reg", w.lambda_reg},
                   {"lambda_z_recon", w.lambda_z_recon}}}};
  const auto& t = trainer;
  const auto& o = t.optimizer;
  j["trainer"] = {{"stage1_steps", t.stage1_steps},
                  {"stage2_steps", t.stage2_steps},
                  {"stage3_steps", t.stage3_steps},
                  {"mapper_steps", t.mapper_steps},
                  {"batch_size", t.batch_size},
                  {"mapper_batch", t.mapper_batch},
                  {"mapper_candidates", t.mapper_candidates},
                  {"seed", t.seed},
                  {"log_every", t.log_every},
                  {"eval_every", t.eval_every},
                  {"checkpoint_every", t.checkpoint_every},
                  {"n_val_eval", t.n_val_eval},
                  {"n_heldout_triplets", t.n_heldout_triplets},
                  {"stage3_reuse_optimizer", t.stage3_reuse_optimizer},
                  {"optimizer",
                   {{"encoder_generator_lr", o.encoder_generator_lr},
                    {"discriminator_lr", o.discriminator_lr},
                    {"generator_lr", o.generator_lr},
                    {"beta1", o.beta1},
                    {"beta2", o.beta2},
                    {"mapper_lr", o.mapper_lr},
                    {"mapper_beta1", o.mapper_beta1},
                    {"mapper_beta2", o.mapper_beta2},
                    {"mapper_decay_rate", o.mapper_decay_rate},
                    {"mapper_decay_every", o.mapper_decay_every}}}};
  j["eval"] = {{"split", eval.split},
               {"n_inputs", eval.n_inputs},
               {"styles_per_input", eval.styles_per_input},
               {"psnr_resolution", eval.psnr_resolution}};
  return j;
}

std::string RunConfig::hash() const { return sha256_hex(to_json().dump()); }

void RunConfig::validate() const {
  parse_layout(dataset.layout);
  require<ConfigError>(dataset.resolution == networks.image_size,
                       "dataset.resolution must equal networks.image_size");
  miner.validate();
  networks.validate();
  features.mining.validate();
  features.reconstruction.validate();
  features.evaluation.validate();
  losses.weights.validate();
  LossSetup::preset(losses.preset);
  trainer.optimizer.validate();
  require<ConfigError>(trainer.batch_size >= 1, "trainer.batch_size must be positive");
  require<ConfigError>(trainer.mapper_batch >= 1 && trainer.mapper_candidates >= 1,
                       "trainer.mapper_batch and trainer.mapper_candidates must be positive");
  for (auto s : {trainer.stage1_steps, trainer.stage2_steps, trainer.stage3_steps, trainer.mapper_steps})
    require<ConfigError>(s >= 0, "trainer stage step counts must be non-negative");
  require<ConfigError>(trainer.log_every >= 1, "trainer.log_every must be positive");
  require<ConfigError>(eval.split == "train" || eval.split == "val", "eval.split must be train or val");
  require<ConfigError>(eval.styles_per_input >= 2, "eval.styles_per_input must be at least 2");
  require<ConfigError>(eval.n_inputs >= 1, "eval.n_inputs must be positive");
}

}  // namespace step
