#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "step/blob_io.hpp"
#include "step/networks.hpp"

namespace step {

enum class Stage { pretrain_encoder, train_generator, finetune, mapper };

std::string to_string(Stage stage);
Stage parse_stage(const std::string& name);

/// Everything needed to continue a run bit-exactly: parameters of E, G, D and
/// M, optimizer moments, the data-sampling generator, and run identity.
struct TrainState {
  Stage stage = Stage::pretrain_encoder;
  std::int64_t step = 0;         // steps taken in the current stage
  std::int64_t global_step = 0;  // steps taken across all stages
  std::uint64_t seed = 0;
  std::string config_hash;
  Networks nets;
  std::map<std::string, NamedTensors> optimizer_state;
  std::string rng_state;  // serialized std::mt19937_64; empty until first use

  TrainState(const NetworkSpec& spec, std::uint64_t seed);
};

inline constexpr const char* kCheckpointFormatVersion = "1";

/// Writes `<dir>/manifest.json` plus one blob per network and optimizer.
/// The directory is staged under a temporary name and renamed into place.
void save_checkpoint(const std::filesystem::path& dir, const TrainState& state);

/// Loads a checkpoint, rebuilding the networks from the manifest's spec.
/// Raises MigrationError on a format-version mismatch and IntegrityError when
/// a blob fails its manifest hash.
TrainState load_checkpoint(const std::filesystem::path& dir);

/// Loads into an existing state whose architecture must match the manifest's
/// descriptor; on mismatch raises ShapeError and leaves `state` untouched.
void load_checkpoint_into(const std::filesystem::path& dir, TrainState& state);

/// save then load.
TrainState checkpoint_roundtrip(const TrainState& state, const std::filesystem::path& dir);

}  // namespace step
