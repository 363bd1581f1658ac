#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "step/checkpoint.hpp"
#include "step/config.hpp"
#include "step/dataio.hpp"
#include "step/evaluation.hpp"
#include "step/optim.hpp"
#include "step/triplet_miner.hpp"

namespace step {

/// Append-only newline-delimited JSON metrics. Without a path the records
/// are only kept in memory.
class MetricLog {
 public:
  MetricLog() = default;
  explicit MetricLog(const std::filesystem::path& path);

  void append(const nlohmann::json& record);
  const std::vector<std::string>& lines() const { return lines_; }

 private:
  std::optional<std::ofstream> file_;
  std::vector<std::string> lines_;
};

/// Read-only inputs shared by every stage.
struct TrainingContext {
  RunConfig config;
  PairedDataset train;
  PairedDataset val;
  std::shared_ptr<const FeatureExtractor> reconstruction;  // perceptual loss
  std::shared_ptr<const PerceptualDistance> metric;        // validation metric
  MetricLog* log = nullptr;
  /// When set, checkpoints go to <root>/<stage>/step_<n> and <root>/<stage>/LATEST.
  std::optional<std::filesystem::path> checkpoint_root;

  /// Preloads both splits and resolves the backbones named in `config`.
  static TrainingContext create(RunConfig config, PairedDataset train, PairedDataset val);

  std::size_t index_of(const std::string& id) const;

 private:
  std::map<std::string, std::size_t> id_index_;
};

/// Fresh state: networks initialized from trainer.seed, stage pretrain_encoder.
TrainState init_train_state(const TrainingContext& ctx);

// Each stage runs until state.step reaches `steps` (defaults come from the
// trainer section). Calling a stage on a state from the previous stage starts
// it; calling it on a state already in that stage resumes it. Stages only move
// forward.

void run_stage1(TrainingContext& ctx, TrainState& state, const NeighborIndex& index,
                std::optional<std::int64_t> steps = std::nullopt);
void run_stage2(TrainingContext& ctx, TrainState& state, std::optional<std::int64_t> steps = std::nullopt);
void run_stage3(TrainingContext& ctx, TrainState& state, std::optional<std::int64_t> steps = std::nullopt);

/// Codes E(target) for every sample of `data`, N x latent_dim.
torch::Tensor collect_codes(StyleEncoder& encoder, const NetworkSpec& spec, const PairedDataset& data);

/// IMLE training of the mapper on fixed codes.
void run_mapper(TrainingContext& ctx, TrainState& state, const torch::Tensor& codes,
                std::optional<std::int64_t> steps = std::nullopt);

struct MapperTrainOptions {
  std::int64_t steps = 500;
  int batch = 64;
  int candidates = 512;
  AdamOptions adam{0.01, 0.5, 0.99, 1e-8, 50, 0.7};
};

/// Core IMLE loop: each step draws a code minibatch and a fresh candidate
/// pool from `rng`, selects nearest mapped candidates and takes one Adam step
/// on the mean squared distance. Returns the per-step loss.
std::vector<double> train_mapper(Mapper& mapper, const NetworkSpec& spec, const torch::Tensor& codes,
                                 const MapperTrainOptions& options, std::mt19937_64& rng,
                                 Adam* optimizer = nullptr);

/// Validation PSNR / perceptual distance on the first `n` pairs of `data`.
/// `permute_codes` shuffles the codes across samples (seeded by state.seed).
struct QuickEval {
  double psnr = 0.0;
  double perceptual = 0.0;
};
QuickEval quick_eval(const TrainingContext& ctx, TrainState& state, const PairedDataset& data, int n,
                     bool permute_codes = false);

/// Mean triplet loss over the given triplets using the current encoder.
double mean_triplet_loss(const TrainingContext& ctx, TrainState& state, const std::vector<Triplet>& triplets);

}  // namespace step
