#include "step/staged_trainer.hpp"

#include <sstream>

#include "step/errors.hpp"
#include "step/latent_ops.hpp"
#include "step/losses.hpp"

namespace step {
namespace fs = std::filesystem;
using nlohmann::json;

MetricLog::MetricLog(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  file_.emplace(path, std::ios::app);
  if (!*file_) throw InputError("cannot open metrics log " + path.string());
}

void MetricLog::append(const json& record) {
  auto line = record.dump();
  if (file_) *file_ << line << '\n' << std::flush;
  lines_.push_back(std::move(line));
}

TrainingContext TrainingContext::create(RunConfig config, PairedDataset train, PairedDataset val) {
  TrainingContext ctx;
  BackboneRegistry registry;
  if (!config.features.weights_registry.empty())
    registry = BackboneRegistry::load(config.features.weights_registry);
  auto backbone = resolve_backbone(config.features.backbone_id, registry);
  ctx.reconstruction = std::make_shared<FeatureExtractor>(config.features.reconstruction, backbone);
  ctx.metric = std::make_shared<PerceptualDistance>(FeatureExtractor(config.features.evaluation, backbone));
  train.preload();
  val.preload();
  ctx.train = std::move(train);
  ctx.val = std::move(val);
  ctx.config = std::move(config);
  for (std::size_t i = 0; i < ctx.train.size(); ++i) ctx.id_index_.emplace(ctx.train.ids()[i], i);
  return ctx;
}

std::size_t TrainingContext::index_of(const std::string& id) const {
  auto it = id_index_.find(id);
  if (it == id_index_.end()) throw InputError("image id '" + id + "' is not in the training split");
  return it->second;
}

TrainState init_train_state(const TrainingContext& ctx) {
  TrainState state(ctx.config.networks, ctx.config.trainer.seed);
  state.config_hash = ctx.config.hash();
  return state;
}

namespace {

constexpr std::uint64_t kStageSalt[] = {0x5354414745310000ULL, 0x5354414745320000ULL, 0x5354414745330000ULL,
                                        0x4d41505045520000ULL};

std::mt19937_64 restore_rng(const TrainState& state, Stage stage) {
  std::mt19937_64 rng(state.seed ^ kStageSalt[static_cast<int>(stage)]);
  if (!state.rng_state.empty()) {
    std::istringstream is(state.rng_state);
    is >> rng;
  }
  return rng;
}

std::string save_rng(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

/// Moves `state` into `stage`, or verifies it is already there.
void enter_stage(TrainingContext& ctx, TrainState& state, Stage stage) {
  if (state.stage == stage) return;
  if (static_cast<int>(state.stage) + 1 != static_cast<int>(stage))
    throw ConfigError("cannot run stage " + to_string(stage) + " from a state in stage " + to_string(state.stage));
  const auto from = state.stage;
  state.stage = stage;
  state.step = 0;
  state.rng_state.clear();
  auto previous = std::move(state.optimizer_state);
  state.optimizer_state.clear();
  if (stage == Stage::finetune && ctx.config.trainer.stage3_reuse_optimizer) {
    if (previous.contains("generator")) state.optimizer_state["generator"] = previous["generator"];
    if (previous.contains("discriminator")) state.optimizer_state["discriminator"] = previous["discriminator"];
  }
  if (ctx.log)
    ctx.log->append({{"event", "stage_transition"},
                     {"from", to_string(from)},
                     {"to", to_string(stage)},
                     {"step", state.global_step}});
}

std::vector<torch::Tensor> params_of(torch::nn::Module& m) { return m.parameters(); }

Adam make_optimizer(TrainState& state, const std::string& name, std::vector<torch::Tensor> params,
                    AdamOptions options) {
  Adam opt(std::move(params), options);
  if (auto it = state.optimizer_state.find(name); it != state.optimizer_state.end()) opt.load_state(it->second);
  return opt;
}

void maybe_checkpoint(TrainingContext& ctx, TrainState& state, bool final) {
  if (!ctx.checkpoint_root) return;
  const auto every = ctx.config.trainer.checkpoint_every;
  if (!final && (every <= 0 || state.step % every != 0)) return;
  char name[32];
  std::snprintf(name, sizeof(name), "step_%08lld", static_cast<long long>(state.step));
  const auto stage_dir = *ctx.checkpoint_root / to_string(state.stage);
  save_checkpoint(stage_dir / name, state);
  std::ofstream(stage_dir / "LATEST") << name << "\n";
}

torch::Tensor stack_targets(const TrainingContext& ctx, const std::vector<std::size_t>& idx) {
  std::vector<torch::Tensor> t;
  for (auto i : idx) t.push_back(ctx.train.target(i));
  return torch::stack(t);
}

torch::Tensor stack_inputs(const TrainingContext& ctx, const std::vector<std::size_t>& idx) {
  std::vector<torch::Tensor> t;
  for (auto i : idx) t.push_back(ctx.train.input(i));
  return torch::stack(t);
}

std::vector<std::size_t> draw_indices(std::mt19937_64& rng, std::size_t n, int count) {
  std::vector<std::size_t> idx;
  for (int i = 0; i < count; ++i) idx.push_back(static_cast<std::size_t>(rng() % n));
  return idx;
}

json losses_record(const TrainState& state, const std::map<std::string, double>& values) {
  json r = {{"step", state.global_step}, {"stage", to_string(state.stage)}, {"stage_step", state.step}};
  for (const auto& [k, v] : values) r[k] = v;
  return r;
}

std::vector<Triplet> heldout_triplets(const TrainingContext& ctx, const TrainState& state, const NeighborIndex& index) {
  std::mt19937_64 rng(state.seed ^ 0x484f4c444f5554ULL);
  return sample_triplets(index, ctx.config.trainer.n_heldout_triplets, rng);
}

void set_requires_grad(torch::nn::Module& m, bool on) {
  for (auto& p : m.parameters()) p.set_requires_grad(on);
}

/// Alternating D / G(+E) updates shared by stages 2 and 3.
void adversarial_stage(TrainingContext& ctx, TrainState& state, Stage stage, std::int64_t target) {
  enter_stage(ctx, state, stage);
  const auto& cfg = ctx.config;
  const auto& oc = cfg.trainer.optimizer;
  auto& nets = state.nets;
  const bool train_encoder = stage == Stage::finetune;
  const auto setup = train_encoder ? cfg.losses.setup_for_stage3() : cfg.losses.setup_for_stage2();
  if (ctx.train.empty()) throw ConfigError("training split is empty");

  // Stage 2 drives G with the (G+E) optimizer; stage 3 gives E that optimizer
  // and moves G to the G-alone optimizer.
  std::optional<Adam> opt_e;
  auto opt_g = make_optimizer(state, "generator", params_of(*nets.generator),
                              {train_encoder ? oc.generator_lr : oc.encoder_generator_lr, oc.beta1, oc.beta2});
  auto opt_d = make_optimizer(state, "discriminator", params_of(*nets.discriminator),
                              {oc.discriminator_lr, oc.beta1, oc.beta2});
  if (train_encoder)
    opt_e.emplace(make_optimizer(state, "encoder", params_of(*nets.encoder),
                                 {oc.encoder_generator_lr, oc.beta1, oc.beta2}));

  set_requires_grad(*nets.encoder, train_encoder);
  nets.encoder->train(train_encoder);
  nets.generator->train();
  nets.discriminator->train();
  auto rng = restore_rng(state, stage);
  ObjectiveModels models{nets.spec, nets.generator, nets.discriminator, &nets.encoder, *ctx.reconstruction};

  while (state.step < target) {
    auto idx = draw_indices(rng, ctx.train.size(), cfg.trainer.batch_size);
    auto x = stack_inputs(ctx, idx);
    auto y = stack_targets(ctx, idx);
    if (cfg.dataset.hflip && (rng() & 1)) {
      x = x.flip({3});
      y = y.flip({3});
    }
    torch::Tensor random_z;
    if (setup.d_rand_z || setup.z_recon) {
      torch::NoGradGuard no_grad;
      random_z = encode_style(nets.encoder, nets.spec,
                              stack_targets(ctx, draw_indices(rng, ctx.train.size(), cfg.trainer.batch_size)));
    }

    // Discriminator step on detached fakes.
    double d_value = 0.0;
    {
      GeneratorObjective fakes;
      {
        torch::NoGradGuard no_grad;
        auto z = encode_style(nets.encoder, nets.spec, y);
        fakes.fake_direct = generate(nets.generator, nets.spec, x, z);
        if (setup.d_rand_z) fakes.fake_random = generate(nets.generator, nets.spec, x, random_z);
      }
      opt_d.zero_grad();
      auto d_loss = discriminator_objective(x, y, fakes, models, setup);
      d_loss.backward();
      opt_d.step();
      d_value = d_loss.item<double>();
    }

    // Generator (and encoder) step.
    torch::Tensor z;
    if (train_encoder) {
      z = encode_style(nets.encoder, nets.spec, y);
    } else {
      torch::NoGradGuard no_grad;
      z = encode_style(nets.encoder, nets.spec, y);
    }
    auto obj = generator_objective({x, y, z, random_z}, models, cfg.losses.weights, setup);
    opt_g.zero_grad();
    if (opt_e) opt_e->zero_grad();
    obj.total.backward();
    opt_g.step();
    if (opt_e) opt_e->step();

    ++state.step;
    ++state.global_step;
    if (ctx.log && (state.step % cfg.trainer.log_every == 0 || state.step == target)) {
      std::map<std::string, double> values{{loss_keys::kDisc, d_value}, {"loss/total", obj.total.item<double>()}};
      for (const auto& [k, v] : obj.terms) values[k] = v.item<double>();
      if (cfg.trainer.eval_every > 0 && (state.step % cfg.trainer.eval_every == 0 || state.step == target) &&
          !ctx.val.empty()) {
        auto q = quick_eval(ctx, state, ctx.val, cfg.trainer.n_val_eval);
        values["eval/psnr"] = q.psnr;
        values["eval/perceptual"] = q.perceptual;
      }
      ctx.log->append(losses_record(state, values));
    }
    if (state.step < target) {
      state.optimizer_state["generator"] = opt_g.state();
      state.optimizer_state["discriminator"] = opt_d.state();
      if (opt_e) state.optimizer_state["encoder"] = opt_e->state();
      state.rng_state = save_rng(rng);
      maybe_checkpoint(ctx, state, false);
    }
  }
  state.optimizer_state["generator"] = opt_g.state();
  state.optimizer_state["discriminator"] = opt_d.state();
  if (opt_e) state.optimizer_state["encoder"] = opt_e->state();
  state.rng_state = save_rng(rng);
  set_requires_grad(*nets.encoder, true);
  maybe_checkpoint(ctx, state, true);
}

}  // namespace

double mean_triplet_loss(const TrainingContext& ctx, TrainState& state, const std::vector<Triplet>& triplets) {
  if (triplets.empty()) return 0.0;
  torch::NoGradGuard no_grad;
  std::vector<std::size_t> a, p, n;
  for (const auto& t : triplets) {
    a.push_back(ctx.index_of(t.anchor_id));
    p.push_back(ctx.index_of(t.positive_id));
    n.push_back(ctx.index_of(t.negative_id));
  }
  auto& spec = state.nets.spec;
  auto za = encode_style(state.nets.encoder, spec, stack_targets(ctx, a));
  auto zp = encode_style(state.nets.encoder, spec, stack_targets(ctx, p));
  auto zn = encode_style(state.nets.encoder, spec, stack_targets(ctx, n));
  return triplet_loss(za, zp, zn, ctx.config.losses.weights).item<double>();
}

void run_stage1(TrainingContext& ctx, TrainState& state, const NeighborIndex& index,
                std::optional<std::int64_t> steps) {
  if (index.empty()) throw ConfigError("run_stage1: the neighbor index is empty; run mining first");
  if (state.stage != Stage::pretrain_encoder)
    throw ConfigError("run_stage1: state is already in stage " + to_string(state.stage));
  const auto target = steps.value_or(ctx.config.trainer.stage1_steps);
  const auto& oc = ctx.config.trainer.optimizer;
  auto& nets = state.nets;
  auto opt = make_optimizer(state, "encoder", params_of(*nets.encoder),
                            {oc.encoder_generator_lr, oc.beta1, oc.beta2});
  nets.encoder->train();
  auto rng = restore_rng(state, Stage::pretrain_encoder);
  const auto heldout = heldout_triplets(ctx, state, index);
  const int batch = ctx.config.trainer.batch_size;

  while (state.step < target) {
    auto triplets = sample_triplets(index, batch, rng);
    std::vector<std::size_t> idx;
    for (const auto& t : triplets) idx.push_back(ctx.index_of(t.anchor_id));
    for (const auto& t : triplets) idx.push_back(ctx.index_of(t.positive_id));
    for (const auto& t : triplets) idx.push_back(ctx.index_of(t.negative_id));
    auto z = encode_style(nets.encoder, nets.spec, stack_targets(ctx, idx));
    auto loss = triplet_loss(z.slice(0, 0, batch), z.slice(0, batch, 2 * batch), z.slice(0, 2 * batch, 3 * batch),
                             ctx.config.losses.weights);
    opt.zero_grad();
    loss.backward();
    opt.step();
    ++state.step;
    ++state.global_step;
    if (ctx.log && (state.step % ctx.config.trainer.log_every == 0 || state.step == target)) {
      std::map<std::string, double> values{{loss_keys::kTriplet, loss.item<double>()}};
      const auto every = ctx.config.trainer.eval_every;
      if (every > 0 && (state.step % every == 0 || state.step == target))
        values["eval/triplet_heldout"] = mean_triplet_loss(ctx, state, heldout);
      ctx.log->append(losses_record(state, values));
    }
    if (state.step < target) {
      state.optimizer_state["encoder"] = opt.state();
      state.rng_state = save_rng(rng);
      maybe_checkpoint(ctx, state, false);
    }
  }
  state.optimizer_state["encoder"] = opt.state();
  state.rng_state = save_rng(rng);
  maybe_checkpoint(ctx, state, true);
}

void run_stage2(TrainingContext& ctx, TrainState& state, std::optional<std::int64_t> steps) {
  if (state.stage != Stage::pretrain_encoder && state.stage != Stage::train_generator)
    throw ConfigError("run_stage2: needs a state from encoder pre-training, got stage " + to_string(state.stage));
  adversarial_stage(ctx, state, Stage::train_generator, steps.value_or(ctx.config.trainer.stage2_steps));
}

void run_stage3(TrainingContext& ctx, TrainState& state, std::optional<std::int64_t> steps) {
  if (state.stage != Stage::train_generator && state.stage != Stage::finetune)
    throw ConfigError("run_stage3: needs a state from generator training, got stage " + to_string(state.stage));
  adversarial_stage(ctx, state, Stage::finetune, steps.value_or(ctx.config.trainer.stage3_steps));
}

torch::Tensor collect_codes(StyleEncoder& encoder, const NetworkSpec& spec, const PairedDataset& data) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> out;
  constexpr std::size_t kChunk = 32;
  for (std::size_t s = 0; s < data.size(); s += kChunk) {
    std::vector<torch::Tensor> batch;
    for (std::size_t i = s; i < std::min(data.size(), s + kChunk); ++i) batch.push_back(data.target(i));
    out.push_back(encode_style(encoder, spec, torch::stack(batch)));
  }
  if (out.empty()) return torch::empty({0, spec.latent_dim});
  return torch::cat(out);
}

std::vector<double> train_mapper(Mapper& mapper, const NetworkSpec& spec, const torch::Tensor& codes,
                                 const MapperTrainOptions& options, std::mt19937_64& rng, Adam* optimizer) {
  if (codes.dim() != 2 || codes.size(0) < 2) throw ConfigError("train_mapper: needs at least 2 codes");
  if (codes.size(1) != spec.latent_dim) throw InputError("train_mapper: code length does not match latent_dim");
  std::optional<Adam> own;
  if (optimizer == nullptr) {
    own.emplace(mapper->parameters(), options.adam);
    optimizer = &*own;
  }
  const auto dtype = mapper->parameters().front().scalar_type();
  auto z_all = codes.detach().to(dtype);
  const auto n = z_all.size(0);
  mapper->train();
  std::vector<double> losses;
  for (std::int64_t s = 0; s < options.steps; ++s) {
    torch::Tensor z = z_all;
    if (n > options.batch) {
      std::vector<std::int64_t> idx;
      for (int i = 0; i < options.batch; ++i) idx.push_back(static_cast<std::int64_t>(rng() % n));
      z = z_all.index_select(0, torch::tensor(idx, torch::kInt64));
    }
    auto candidates = standard_normal(rng, options.candidates, spec.latent_dim).to(dtype);
    auto result = imle_loss(z, mapper, candidates);
    auto loss = result.loss / static_cast<double>(z.size(0));
    optimizer->zero_grad();
    loss.backward();
    optimizer->step();
    losses.push_back(loss.item<double>());
  }
  mapper->eval();
  return losses;
}

void run_mapper(TrainingContext& ctx, TrainState& state, const torch::Tensor& codes, std::optional<std::int64_t> steps) {
  if (state.stage != Stage::finetune && state.stage != Stage::mapper)
    throw ConfigError("run_mapper: needs a finetuned state, got stage " + to_string(state.stage));
  enter_stage(ctx, state, Stage::mapper);
  const auto& t = ctx.config.trainer;
  const auto target = steps.value_or(t.mapper_steps);
  MapperTrainOptions options;
  options.batch = t.mapper_batch;
  options.candidates = t.mapper_candidates;
  options.adam = {t.optimizer.mapper_lr, t.optimizer.mapper_beta1, t.optimizer.mapper_beta2, 1e-8,
                  t.optimizer.mapper_decay_every, t.optimizer.mapper_decay_rate};
  Adam opt = make_optimizer(state, "mapper", state.nets.mapper->parameters(), options.adam);
  auto rng = restore_rng(state, Stage::mapper);
  while (state.step < target) {
    options.steps = std::min<std::int64_t>(target - state.step, t.log_every - state.step % t.log_every);
    auto losses = train_mapper(state.nets.mapper, state.nets.spec, codes, options, rng, &opt);
    state.step += options.steps;
    state.global_step += options.steps;
    if (ctx.log)
      ctx.log->append(losses_record(state, {{loss_keys::kImle, losses.back()}, {"lr/mapper", opt.current_lr()}}));
    state.optimizer_state["mapper"] = opt.state();
    state.rng_state = save_rng(rng);
    maybe_checkpoint(ctx, state, state.step >= target);
  }
  if (target == 0) maybe_checkpoint(ctx, state, true);
}

QuickEval quick_eval(const TrainingContext& ctx, TrainState& state, const PairedDataset& data, int n,
                     bool permute_codes) {
  torch::NoGradGuard no_grad;
  const auto count = std::min<std::size_t>(data.size(), static_cast<std::size_t>(std::max(n, 1)));
  std::vector<torch::Tensor> xs, ys;
  for (std::size_t i = 0; i < count; ++i) {
    xs.push_back(data.input(i));
    ys.push_back(data.target(i));
  }
  auto x = torch::stack(xs), y = torch::stack(ys);
  auto z = encode_style(state.nets.encoder, state.nets.spec, y);
  if (permute_codes) {
    auto g = at::make_generator<at::CPUGeneratorImpl>(state.seed);
    z = z.index_select(0, torch::randperm(z.size(0), g, torch::kInt64));
  }
  auto fake = generate(state.nets.generator, state.nets.spec, x, z);
  std::vector<double> p;
  for (std::size_t i = 0; i < count; ++i) {
    const auto v = psnr(fake[static_cast<std::int64_t>(i)], y[static_cast<std::int64_t>(i)]);
    if (std::isfinite(v)) p.push_back(v);
  }
  QuickEval q;
  q.psnr = p.empty() ? kInfinitePsnr : stable_sum(p) / static_cast<double>(p.size());
  q.perceptual = ctx.metric->scalar(fake, y);
  return q;
}

}  // namespace step
