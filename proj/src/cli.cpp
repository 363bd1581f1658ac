#include "step/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "step/checkpoint.hpp"
#include "step/config.hpp"
#include "step/errors.hpp"
#include "step/evaluation.hpp"
#include "step/hashing.hpp"
#include "step/latent_ops.hpp"
#include "step/staged_trainer.hpp"

namespace step {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  std::string resume;
  std::string preset;
  std::string device = "cpu";
  std::string split = "val";
  std::string checkpoint;
  std::string mode = "mapper";
  std::int64_t count = 16;
  std::vector<std::string> content_ids;
  std::vector<std::string> style_ids;
  std::string from_id;
  std::string to_id;
  int interp_steps = 8;
  std::string image = "grid.png";
};

/// Per-invocation state shared by the subcommand handlers.
struct Session {
  Options opt;
  std::ostream& out;
  RunConfig config;
  fs::path run;
};

RunConfig resolve_config(const Options& opt) {
  RunConfig cfg = opt.config.empty() ? RunConfig{} : RunConfig::load(opt.config);
  if (!opt.preset.empty()) cfg.losses.preset = opt.preset;
  if (opt.device != "cpu") throw ConfigError("device: '" + opt.device + "' is not available; this build runs on cpu");
  cfg.validate();
  return cfg;
}

void announce_config(Session& s) {
  s.out << "config_hash " << s.config.hash() << "\n";
  fs::create_directories(s.run);
  std::ofstream(s.run / "config.json") << s.config.to_json().dump(2) << "\n";
}

std::pair<PairedDataset, PairedDataset> open_splits(const RunConfig& cfg) {
  if (cfg.dataset.path.empty()) throw ConfigError("dataset.path: required");
  const auto layout = parse_layout(cfg.dataset.layout);
  return {PairedDataset::open(cfg.dataset.path, layout, "train"), PairedDataset::open(cfg.dataset.path, layout, "val")};
}

fs::path neighbors_path(const fs::path& run) { return run / "neighbors.tsv"; }
fs::path checkpoints_root(const fs::path& run) { return run / "checkpoints"; }

std::optional<fs::path> latest_checkpoint(const fs::path& run, Stage stage) {
  const auto dir = checkpoints_root(run) / to_string(stage);
  std::ifstream in(dir / "LATEST");
  std::string name;
  if (!(in >> name)) return std::nullopt;
  if (!fs::exists(dir / name / "manifest.json")) return std::nullopt;
  return dir / name;
}

fs::path require_checkpoint(const fs::path& run, Stage stage, const std::string& producer) {
  if (auto p = latest_checkpoint(run, stage)) return *p;
  const auto missing = (checkpoints_root(run) / to_string(stage)).string();
  throw PrerequisiteError("no " + to_string(stage) + " checkpoint under " + missing + "; run `" + producer + "` first",
                          missing);
}

/// Loads a checkpoint into a state built from the configured architecture,
/// so a mismatching checkpoint is reported as a shape error.
TrainState load_state(const RunConfig& cfg, const fs::path& dir, std::ostream& out) {
  TrainState state(cfg.networks, cfg.trainer.seed);
  load_checkpoint_into(dir, state);
  if (state.config_hash != cfg.hash()) out << "note: checkpoint was written under config " << state.config_hash << "\n";
  out << "loaded " << dir.string() << " (stage " << to_string(state.stage) << ", step " << state.step << ")\n";
  return state;
}

/// Checkpoint used by inference subcommands: --checkpoint, else the most
/// advanced stage present in the run directory.
TrainState inference_state(Session& s) {
  if (!s.opt.checkpoint.empty()) return load_state(s.config, s.opt.checkpoint, s.out);
  for (auto stage : {Stage::mapper, Stage::finetune, Stage::train_generator})
    if (auto p = latest_checkpoint(s.run, stage)) return load_state(s.config, *p, s.out);
  throw PrerequisiteError("no trained generator under " + checkpoints_root(s.run).string() +
                              "; run `train-generator` first",
                          (checkpoints_root(s.run) / to_string(Stage::train_generator)).string());
}

std::string subset_fingerprint(const RunConfig& cfg) {
  json j = cfg.to_json();
  return sha256_hex(j["features"].dump()).substr(0, 16);
}

// ---- subcommands ----------------------------------------------------------

int cmd_make_toy(Session& s) {
  ToySpec spec = s.config.toy;
  if (s.opt.seed) spec.seed = *s.opt.seed;
  auto toy = generate_toy_dataset(spec, s.run);
  s.out << "wrote " << toy.train.size() << " train / " << toy.val.size() << " val pairs to " << s.run.string()
        << "\n";
  return kExitOk;
}

int cmd_mine(Session& s) {
  auto cfg = s.config;
  if (s.opt.seed) cfg.miner.seed = *s.opt.seed;
  announce_config(s);
  auto train = open_splits(cfg).first;
  train.preload();
  std::vector<torch::Tensor> targets;
  for (std::size_t i = 0; i < train.size(); ++i) targets.push_back(train.target(i));

  BackboneRegistry registry;
  if (!cfg.features.weights_registry.empty()) registry = BackboneRegistry::load(cfg.features.weights_registry);
  FeatureExtractor extractor(cfg.features.mining, resolve_backbone(cfg.features.backbone_id, registry));
  auto metric = make_image_metric(cfg.miner.metric_id, targets, &extractor);

  const char* env = std::getenv("STEP_CACHE_DIR");
  const fs::path cache_dir = env && *env ? fs::path(env) : s.run / "cache";
  DistanceCacheKey key{train.content_hash(), cfg.miner.metric_id + "@" + subset_fingerprint(cfg), cfg.miner.seed,
                       cfg.miner.subset_size};
  auto dist = load_distance_cache(cache_dir, key);
  if (dist) {
    s.out << "cache hit " << key.digest() << "\n";
  } else {
    s.out << "cache miss " << key.digest() << "\n";
    dist = compute_distances(train.ids(), select_subset(train.size(), cfg.miner), metric);
    save_distance_cache(cache_dir, key, *dist);
  }
  auto index = index_from_distances(train.ids(), *dist, cfg.miner);
  write_neighbor_index(neighbors_path(s.run), index);
  s.out << "wrote " << neighbors_path(s.run).string() << " (" << index.anchor_ids.size() << " anchors)\n";
  return kExitOk;
}

/// Shared driver of the four training subcommands.
int cmd_train(Session& s, Stage stage) {
  auto cfg = s.config;
  if (s.opt.seed) cfg.trainer.seed = *s.opt.seed;
  s.config = cfg;
  announce_config(s);

  std::optional<NeighborIndex> index;
  std::optional<fs::path> start;
  if (!s.opt.resume.empty()) {
    if (!fs::exists(fs::path(s.opt.resume) / "manifest.json"))
      throw PrerequisiteError("no checkpoint manifest at " + s.opt.resume, s.opt.resume);
    start = s.opt.resume;
  }
  switch (stage) {
    case Stage::pretrain_encoder:
      if (!fs::exists(neighbors_path(s.run)))
        throw PrerequisiteError("no neighbor index at " + neighbors_path(s.run).string() + "; run `mine` first",
                                neighbors_path(s.run).string());
      index = read_neighbor_index(neighbors_path(s.run));
      break;
    case Stage::train_generator:
      if (!start) start = require_checkpoint(s.run, Stage::pretrain_encoder, "pretrain-encoder");
      break;
    case Stage::finetune:
      if (!start) start = require_checkpoint(s.run, Stage::train_generator, "train-generator");
      break;
    case Stage::mapper:
      if (!start) start = require_checkpoint(s.run, Stage::finetune, "finetune");
      break;
  }

  auto [train, val] = open_splits(cfg);
  auto ctx = TrainingContext::create(cfg, std::move(train), std::move(val));
  MetricLog log(s.run / "metrics.jsonl");
  ctx.log = &log;
  ctx.checkpoint_root = checkpoints_root(s.run);
  TrainState state = start ? load_state(cfg, *start, s.out) : init_train_state(ctx);
  state.config_hash = cfg.hash();

  switch (stage) {
    case Stage::pretrain_encoder: run_stage1(ctx, state, *index); break;
    case Stage::train_generator: run_stage2(ctx, state); break;
    case Stage::finetune: run_stage3(ctx, state); break;
    case Stage::mapper: run_mapper(ctx, state, collect_codes(state.nets.encoder, state.nets.spec, ctx.train)); break;
  }
  s.out << "finished " << to_string(stage) << " at step " << state.step << "; checkpoint "
        << latest_checkpoint(s.run, stage).value_or(fs::path{}).string() << "\n";
  return kExitOk;
}

PairedDataset open_split(const RunConfig& cfg, const std::string& split) {
  if (split != "train" && split != "val") throw ConfigError("split: expected train or val, got '" + split + "'");
  auto [train, val] = open_splits(cfg);
  auto& d = split == "train" ? train : val;
  d.preload();
  return std::move(d);
}

int cmd_evaluate(Session& s) {
  announce_config(s);
  const auto& cfg = s.config;
  auto state = inference_state(s);
  state.nets.eval();
  auto data = open_split(cfg, s.opt.split);
  BackboneRegistry registry;
  if (!cfg.features.weights_registry.empty()) registry = BackboneRegistry::load(cfg.features.weights_registry);
  PerceptualDistance metric(FeatureExtractor(cfg.features.evaluation,
                                             resolve_backbone(cfg.features.backbone_id, registry)));

  const auto dir = s.run / "eval" / s.opt.split;
  fs::create_directories(dir);
  std::ofstream samples(dir / "samples.jsonl");
  auto report = eval_reconstruction(
      data, state.nets.generator, state.nets.encoder, state.nets.spec, metric,
      [&](const SampleRecord& r) {
        json j = {{"id", r.id}, {"perceptual", r.perceptual}};
        j["psnr"] = std::isinf(r.psnr) ? json("inf") : json(r.psnr);
        samples << j.dump() << "\n";
      },
      cfg.eval.psnr_resolution);

  // Diversity: per input, styles taken from other samples of the split
  // (transfer) and drawn from the mapper (sampling).
  torch::NoGradGuard no_grad;
  std::mt19937_64 rng(cfg.trainer.seed ^ 0x4556414cULL);
  const int n = cfg.eval.n_inputs;
  const int k = cfg.eval.styles_per_input;
  if (static_cast<std::size_t>(n) > data.size())
    throw ConfigError("eval.n_inputs: " + std::to_string(n) + " exceeds the " + std::to_string(data.size()) +
                      " samples of split " + s.opt.split);
  std::vector<torch::Tensor> inputs, transfer_codes, sampled_codes;
  for (int i = 0; i < n; ++i) {
    inputs.push_back(data.input(static_cast<std::size_t>(i)));
    std::vector<torch::Tensor> styles;
    for (int j = 0; j < k; ++j) styles.push_back(data.target(rng() % data.size()));
    transfer_codes.push_back(encode_style(state.nets.encoder, state.nets.spec, torch::stack(styles)));
    if (state.stage == Stage::mapper)
      sampled_codes.push_back(sample_style(SampleMode::mapper, nullptr, &state.nets.mapper, state.nets.spec, rng, k));
  }
  report.diversity_transfer = diversity_score(state.nets.generator, state.nets.spec, inputs, transfer_codes, metric, n).score;
  if (!sampled_codes.empty())
    report.diversity_sampling =
        diversity_score(state.nets.generator, state.nets.spec, inputs, sampled_codes, metric, n).score;

  report.split = s.opt.split;
  auto j = report.to_json();
  j["checkpoint_stage"] = to_string(state.stage);
  j["checkpoint_step"] = state.step;
  std::ofstream(dir / "report.json") << j.dump(2) << "\n";
  s.out << j.dump() << "\n";
  return kExitOk;
}

std::vector<std::size_t> pick(const PairedDataset& data, const std::vector<std::string>& ids, std::size_t fallback) {
  std::vector<std::size_t> out;
  if (ids.empty()) {
    for (std::size_t i = 0; i < std::min(fallback, data.size()); ++i) out.push_back(i);
    return out;
  }
  for (const auto& id : ids) {
    auto it = std::find(data.ids().begin(), data.ids().end(), id);
    if (it == data.ids().end()) throw InputError("image id '" + id + "' is not in the split");
    out.push_back(static_cast<std::size_t>(it - data.ids().begin()));
  }
  return out;
}

fs::path output_image(const Session& s) {
  fs::path p = s.opt.image;
  if (p.is_relative()) p = s.run / p;
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  return p;
}

int cmd_transfer(Session& s) {
  auto state = inference_state(s);
  state.nets.eval();
  auto data = open_split(s.config, s.opt.split);
  auto contents = pick(data, s.opt.content_ids, 4);
  auto styles = pick(data, s.opt.style_ids, 4);
  torch::NoGradGuard no_grad;
  // Top row: style sources; left column: content inputs.
  const auto blank = torch::full_like(data.target(0), -1.0);
  std::vector<torch::Tensor> cells{blank};
  for (auto j : styles) cells.push_back(data.target(j));
  for (auto i : contents) {
    cells.push_back(data.input(i));
    for (auto j : styles)
      cells.push_back(transfer_style(state.nets.generator, state.nets.encoder, state.nets.spec, data.input(i),
                                     data.target(j))[0]);
  }
  const auto path = output_image(s);
  write_image(path, image_grid(cells, static_cast<std::int64_t>(styles.size()) + 1));
  s.out << "wrote " << path.string() << "\n";
  return kExitOk;
}

int cmd_interpolate(Session& s) {
  if (s.opt.interp_steps < 2) throw ConfigError("steps: need at least 2 interpolation points");
  auto state = inference_state(s);
  state.nets.eval();
  auto data = open_split(s.config, s.opt.split);
  auto contents = pick(data, s.opt.content_ids, 1);
  auto ends = pick(data, {s.opt.from_id.empty() ? data.ids().at(0) : s.opt.from_id,
                          s.opt.to_id.empty() ? data.ids().at(std::min<std::size_t>(1, data.size() - 1)) : s.opt.to_id},
                   2);
  torch::NoGradGuard no_grad;
  auto& nets = state.nets;
  auto z = encode_style(nets.encoder, nets.spec, torch::stack({data.target(ends[0]), data.target(ends[1])}));
  std::vector<torch::Tensor> cells;
  for (auto i : contents) {
    for (int k = 0; k < s.opt.interp_steps; ++k) {
      const double t = static_cast<double>(k) / (s.opt.interp_steps - 1);
      auto zt = interpolate(z[0], z[1], t).to(z.scalar_type()).unsqueeze(0);
      cells.push_back(generate(nets.generator, nets.spec, data.input(i).unsqueeze(0), zt)[0]);
    }
  }
  const auto path = output_image(s);
  write_image(path, image_grid(cells, s.opt.interp_steps));
  s.out << "wrote " << path.string() << "\n";
  return kExitOk;
}

int cmd_sample(Session& s) {
  if (s.opt.count < 1) throw ConfigError("count: must be positive");
  auto state = inference_state(s);
  state.nets.eval();
  const auto mode = parse_sample_mode(s.opt.mode);
  if (mode == SampleMode::mapper && state.stage != Stage::mapper)
    throw PrerequisiteError("sampling with --mode mapper needs a mapper checkpoint; run `train-mapper` first",
                            (checkpoints_root(s.run) / to_string(Stage::mapper)).string());
  std::optional<EmpiricalPrior> prior;
  if (mode == SampleMode::empirical) {
    auto train = open_split(s.config, "train");
    prior = EmpiricalPrior::fit(collect_codes(state.nets.encoder, state.nets.spec, train));
  }
  std::mt19937_64 rng(s.opt.seed.value_or(s.config.trainer.seed));
  auto codes = sample_style(mode, prior ? &*prior : nullptr, &state.nets.mapper, state.nets.spec, rng, s.opt.count);

  std::vector<std::string> ids;
  for (std::int64_t i = 0; i < s.opt.count; ++i) ids.push_back("sample_" + std::to_string(i));
  fs::create_directories(s.run);
  const auto table = s.run / ("samples_" + s.opt.mode + ".csv");
  export_latent_table(table, codes, ids, std::nullopt, state.nets.spec.latent_dim);
  s.out << "wrote " << table.string() << "\n";

  constexpr std::int64_t kMaxGrid = 64;
  if (s.opt.count <= kMaxGrid) {
    auto data = open_split(s.config, s.opt.split);
    auto contents = pick(data, s.opt.content_ids, 4);
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> cells;
    for (auto i : contents) {
      auto x = data.input(i).unsqueeze(0).expand({s.opt.count, -1, -1, -1});
      auto y = generate(state.nets.generator, state.nets.spec, x, codes.to(torch::kFloat32));
      for (std::int64_t k = 0; k < s.opt.count; ++k) cells.push_back(y[k]);
    }
    const auto path = output_image(s);
    write_image(path, image_grid(cells, s.opt.count));
    s.out << "wrote " << path.string() << "\n";
  }
  return kExitOk;
}

int cmd_export_latents(Session& s) {
  auto state = inference_state(s);
  state.nets.eval();
  auto data = open_split(s.config, s.opt.split);
  auto codes = collect_codes(state.nets.encoder, state.nets.spec, data);
  std::optional<std::vector<std::string>> labels;
  if (auto l = data.labels()) {
    labels.emplace();
    for (int v : *l) labels->push_back(std::to_string(v));
  }
  fs::create_directories(s.run);
  const auto path = s.run / ("latents_" + s.opt.split + ".csv");
  export_latent_table(path, codes, data.ids(), labels, state.nets.spec.latent_dim);
  s.out << "wrote " << path.string() << " (" << data.size() << " rows)\n";
  return kExitOk;
}

void add_common(CLI::App* app, Options& o) {
  app->add_option("--config", o.config, "run configuration (JSON); built-in defaults when omitted");
  app->add_option("--seed", o.seed, "seed override; unset keeps the config seed");
  app->add_option("--out", o.out, "run directory");
  app->add_option("--device", o.device, "compute device");
}

void add_inference(CLI::App* app, Options& o) {
  add_common(app, o);
  app->add_option("--checkpoint", o.checkpoint, "checkpoint directory (default: latest in the run)");
  app->add_option("--split", o.split, "dataset split")->check(CLI::IsMember({"train", "val"}));
}

void report_error(std::ostream& err, const std::string& kind, const std::string& message,
                  const std::string& missing = {}) {
  json j = {{"error", kind}, {"message", message}};
  if (!missing.empty()) j["missing"] = missing;
  err << j.dump() << std::endl;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Staged multimodal image-to-image translation", "step"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  auto* make_toy = app.add_subcommand("make-toy", "render the synthetic benchmark into --out");
  add_common(make_toy, o);
  auto* mine = app.add_subcommand("mine", "compute style distances and the neighbor index");
  add_common(mine, o);

  std::vector<std::pair<CLI::App*, Stage>> stages;
  const std::pair<const char*, Stage> stage_cmds[] = {
      {"pretrain-encoder", Stage::pretrain_encoder},
      {"train-generator", Stage::train_generator},
      {"finetune", Stage::finetune},
      {"train-mapper", Stage::mapper}};
  for (const auto& [name, stage] : stage_cmds) {
    auto* c = app.add_subcommand(name, "training stage " + to_string(stage));
    add_common(c, o);
    c->add_option("--resume", o.resume, "continue from this checkpoint directory; unset starts from the previous stage");
    c->add_option("--preset", o.preset, "loss preset override; unset keeps losses.preset")->check(CLI::IsMember({"v1", "v2", "v3", "v4"}));
    stages.emplace_back(c, stage);
  }

  auto* evaluate = app.add_subcommand("evaluate", "reconstruction and diversity report");
  add_inference(evaluate, o);
  auto* transfer = app.add_subcommand("transfer", "style transfer grid");
  add_inference(transfer, o);
  transfer->add_option("--content", o.content_ids, "content image ids (default: first 4)");
  transfer->add_option("--style", o.style_ids, "style source ids (default: first 4)");
  transfer->add_option("--image", o.image, "output image, relative to --out");
  auto* interp = app.add_subcommand("interpolate", "latent interpolation grid");
  add_inference(interp, o);
  interp->add_option("--content", o.content_ids, "content image ids (default: first)");
  interp->add_option("--from", o.from_id, "style source at t=0 (default: first id)");
  interp->add_option("--to", o.to_id, "style source at t=1 (default: second id)");
  interp->add_option("--steps", o.interp_steps, "interpolation points");
  interp->add_option("--image", o.image, "output image, relative to --out");
  auto* sample = app.add_subcommand("sample", "sample style codes");
  add_inference(sample, o);
  sample->add_option("--mode", o.mode, "sampler")->check(CLI::IsMember({"empirical", "mapper"}));
  sample->add_option("--count", o.count, "number of codes");
  sample->add_option("--content", o.content_ids, "content ids rendered with the samples (default: first 4)");
  sample->add_option("--image", o.image, "output image, relative to --out");
  auto* export_latents = app.add_subcommand("export-latents", "write E codes of a split as CSV");
  add_inference(export_latents, o);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    // Subcommand --help surfaces here with the subcommand as the parsed one.
    if (e.get_exit_code() == static_cast<int>(CLI::ExitCodes::Success)) {
      for (auto* sub : app.get_subcommands()) out << sub->help();
      if (app.get_subcommands().empty()) out << app.help();
      return kExitOk;
    }
    report_error(err, "usage", e.what());
    return kExitConfig;
  }

  try {
    Session s{o, out, resolve_config(o), fs::path(o.out)};
    if (make_toy->parsed()) return cmd_make_toy(s);
    if (mine->parsed()) return cmd_mine(s);
    for (const auto& [c, stage] : stages)
      if (c->parsed()) return cmd_train(s, stage);
    if (evaluate->parsed()) return cmd_evaluate(s);
    if (transfer->parsed()) return cmd_transfer(s);
    if (interp->parsed()) return cmd_interpolate(s);
    if (sample->parsed()) return cmd_sample(s);
    if (export_latents->parsed()) return cmd_export_latents(s);
    return kExitFailure;
  } catch (const ConfigError& e) {
    report_error(err, e.kind(), e.what());
    return kExitConfig;
  } catch (const PrerequisiteError& e) {
    report_error(err, e.kind(), e.what(), e.missing());
    return kExitPrerequisite;
  } catch (const Error& e) {
    report_error(err, e.kind(), e.what());
    return kExitFailure;
  } catch (const c10::Error& e) {
    report_error(err, "internal", e.what_without_backtrace());
    return kExitFailure;
  } catch (const std::exception& e) {
    report_error(err, "internal", e.what());
    return kExitFailure;
  }
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace step
