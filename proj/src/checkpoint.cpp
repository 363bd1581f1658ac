#include "step/checkpoint.hpp"

#include <fstream>

#include <json.hpp>

#include "step/config.hpp"
#include "step/errors.hpp"
#include "step/hashing.hpp"

namespace step {
namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::pretrain_encoder: return "pretrain_encoder";
    case Stage::train_generator: return "train_generator";
    case Stage::finetune: return "finetune";
    case Stage::mapper: return "mapper";
  }
  return "unknown";
}

Stage parse_stage(const std::string& name) {
  for (auto s : {Stage::pretrain_encoder, Stage::train_generator, Stage::finetune, Stage::mapper})
    if (to_string(s) == name) return s;
  throw FormatError("unknown stage '" + name + "'");
}

TrainState::TrainState(const NetworkSpec& spec, std::uint64_t s) : seed(s), nets(spec, s) {}

namespace {

const std::array<std::string, 4> kNetworkNames = {"encoder", "generator", "discriminator", "mapper"};

torch::nn::Module& network(Networks& n, const std::string& name) {
  if (name == "encoder") return *n.encoder;
  if (name == "generator") return *n.generator;
  if (name == "discriminator") return *n.discriminator;
  return *n.mapper;
}

json read_manifest(const fs::path& dir) {
  const auto path = dir / "manifest.json";
  if (!fs::exists(path)) throw InputError("no checkpoint manifest at " + path.string());
  json m;
  try {
    std::ifstream(path) >> m;
  } catch (const json::exception& e) {
    throw FormatError("checkpoint manifest " + path.string() + ": " + e.what());
  }
  const auto version = m.value("format_version", std::string());
  if (version != kCheckpointFormatVersion)
    throw MigrationError("checkpoint " + dir.string() + " has format version '" + version +
                         "', this build reads version " + kCheckpointFormatVersion);
  return m;
}

std::map<std::string, NamedTensors> read_verified_blobs(const fs::path& dir, const json& manifest) {
  std::map<std::string, NamedTensors> blobs;
  for (const auto& [name, digest] : manifest.at("blobs").items()) {
    const auto path = dir / (name + ".bin");
    if (!fs::exists(path)) throw IntegrityError("checkpoint blob missing: " + path.string());
    if (sha256_file(path) != digest.get<std::string>())
      throw IntegrityError("checkpoint blob " + path.string() + " does not match its manifest hash");
    blobs.emplace(name, read_blob(path));
  }
  return blobs;
}

std::string describe_mismatch(const json& expected, const json& found) {
  for (const auto& section : {"encoder", "generator", "discriminator", "mapper"}) {
    const auto& e = expected.at(section);
    const auto& f = found.at(section);
    if (e == f) continue;
    if (e.size() != f.size())
      return std::string(section) + " has " + std::to_string(f.size()) + " layers in the checkpoint but " +
             std::to_string(e.size()) + " in the configured network";
    for (std::size_t i = 0; i < e.size(); ++i)
      if (e[i] != f[i])
        return std::string(section) + " layer " + e[i].value("name", "?") + ": checkpoint " + f[i].dump() +
               " vs configured " + e[i].dump();
  }
  return "descriptor fields differ: checkpoint " + found.dump() + " vs configured " + expected.dump();
}

void apply(const json& manifest, std::map<std::string, NamedTensors>& blobs, TrainState& state) {
  // Validate every network first so a failure leaves `state` unchanged.
  for (const auto& name : kNetworkNames) {
    if (!blobs.contains(name)) throw IntegrityError("checkpoint lacks the " + name + " blob");
    check_module_state(network(state.nets, name), blobs.at(name), name);
  }
  for (const auto& name : kNetworkNames) load_module_state(network(state.nets, name), blobs.at(name), name);
  state.stage = parse_stage(manifest.at("stage"));
  state.step = manifest.at("step");
  state.global_step = manifest.at("global_step");
  state.seed = manifest.at("seed");
  state.config_hash = manifest.at("config_hash");
  state.rng_state = manifest.at("rng_state");
  state.optimizer_state.clear();
  for (auto& [name, blob] : blobs)
    if (name.starts_with("optim_")) state.optimizer_state.emplace(name.substr(6), std::move(blob));
}

}  // namespace

void save_checkpoint(const fs::path& dir, const TrainState& state) {
  const auto tmp = fs::path(dir).concat(".tmp");
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  json blobs = json::object();
  auto put = [&](const std::string& name, const NamedTensors& tensors) {
    const auto path = tmp / (name + ".bin");
    write_blob(path, tensors);
    blobs[name] = sha256_file(path);
  };
  auto& nets = const_cast<Networks&>(state.nets);
  for (const auto& name : kNetworkNames) put(name, module_state(network(nets, name)));
  for (const auto& [name, tensors] : state.optimizer_state) put("optim_" + name, tensors);

  json manifest = {{"format_version", kCheckpointFormatVersion},
                   {"stage", to_string(state.stage)},
                   {"step", state.step},
                   {"global_step", state.global_step},
                   {"seed", state.seed},
                   {"config_hash", state.config_hash},
                   {"rng_state", state.rng_state},
                   {"network_spec", network_spec_to_json(state.nets.spec)},
                   {"architecture", state.nets.spec.descriptor()},
                   {"blobs", blobs}};
  std::ofstream(tmp / "manifest.json") << manifest.dump(2) << "\n";
  fs::remove_all(dir);
  if (dir.has_parent_path()) fs::create_directories(dir.parent_path());
  fs::rename(tmp, dir);
}

TrainState load_checkpoint(const fs::path& dir) {
  const auto manifest = read_manifest(dir);
  auto spec = network_spec_from_json(manifest.at("network_spec"), "manifest.network_spec");
  if (spec.descriptor() != manifest.at("architecture"))
    throw ShapeError("checkpoint " + dir.string() + ": " +
                     describe_mismatch(spec.descriptor(), manifest.at("architecture")));
  auto blobs = read_verified_blobs(dir, manifest);
  TrainState state(spec, manifest.at("seed").get<std::uint64_t>());
  apply(manifest, blobs, state);
  return state;
}

void load_checkpoint_into(const fs::path& dir, TrainState& state) {
  const auto manifest = read_manifest(dir);
  const auto expected = state.nets.spec.descriptor();
  if (manifest.at("architecture") != expected)
    throw ShapeError("checkpoint " + dir.string() + " does not fit the configured networks: " +
                     describe_mismatch(expected, manifest.at("architecture")));
  auto blobs = read_verified_blobs(dir, manifest);
  apply(manifest, blobs, state);
}

TrainState checkpoint_roundtrip(const TrainState& state, const fs::path& dir) {
  save_checkpoint(dir, state);
  return load_checkpoint(dir);
}

}  // namespace step
