#include "step/losses.hpp"

#include "step/errors.hpp"

namespace step {

void LossWeights::validate() const {
  for (double v : {lambda_cgan, lambda_rec, lambda_l2, alpha_margin, lambda_reg, lambda_z_recon})
    require<ConfigError>(v >= 0.0 && std::isfinite(v), "loss weights must be finite and non-negative");
}

LossSetup LossSetup::preset(const std::string& name) {
  if (name == "v1" || name == "v2") return {true, true, true, true, true};
  if (name == "v3") return {true, true, false, false, true};
  if (name == "v4") return {true, true, false, false, false};
  throw ConfigError("unknown loss preset '" + name + "' (expected v1, v2, v3 or v4)");
}

namespace {

torch::Tensor rows(const torch::Tensor& z) { return z.dim() == 1 ? z.unsqueeze(0) : z; }

}  // namespace

torch::Tensor triplet_loss(const torch::Tensor& z_a, const torch::Tensor& z_p, const torch::Tensor& z_n,
                           const LossWeights& weights) {
  auto a = rows(z_a), p = rows(z_p), n = rows(z_n);
  if (a.sizes() != p.sizes() || a.sizes() != n.sizes())
    throw InputError("triplet_loss: code shapes differ " + c10::str(a.sizes()) + ", " + c10::str(p.sizes()) +
                     ", " + c10::str(n.sizes()));
  auto d_pos = (a - p).pow(2).sum(1);
  auto d_neg = (a - n).pow(2).sum(1);
  auto hinge = torch::clamp_min(d_pos - d_neg + weights.alpha_margin, 0.0);
  auto reg = (a.pow(2).sum(1) + p.pow(2).sum(1) + n.pow(2).sum(1)) / 3.0;
  return (hinge + weights.lambda_reg * reg).mean();
}

torch::Tensor lsgan_loss(const std::vector<torch::Tensor>& real_scores,
                         const std::vector<torch::Tensor>& fake_scores, GanRole role) {
  if (fake_scores.empty()) throw InputError("lsgan_loss: empty fake score list");
  if (role == GanRole::discriminator && real_scores.size() != fake_scores.size())
    throw InputError("lsgan_loss: discriminator role needs one real map per fake map");
  torch::Tensor total;
  for (std::size_t s = 0; s < fake_scores.size(); ++s) {
    torch::Tensor term;
    if (role == GanRole::generator) {
      term = (fake_scores[s] - 1.0).pow(2).mean();
    } else {
      term = 0.5 * ((real_scores[s] - 1.0).pow(2).mean() + fake_scores[s].pow(2).mean());
    }
    total = total.defined() ? total + term : term;
  }
  return total / static_cast<double>(fake_scores.size());
}

torch::Tensor perceptual_reconstruction(const torch::Tensor& a, const torch::Tensor& b,
                                        const FeatureExtractor& extractor) {
  if (a.sizes() != b.sizes())
    throw InputError("perceptual_reconstruction: shapes differ " + c10::str(a.sizes()) + " vs " +
                     c10::str(b.sizes()));
  const auto fa = extractor.extract(a);
  const auto fb = extractor.extract(b);
  const auto& w = extractor.config().layer_weights;
  torch::Tensor total;
  for (std::size_t i = 0; i < fa.layers.size(); ++i) {
    auto term = w[i] * (fa.layers[i].activation - fb.layers[i].activation).pow(2).mean();
    total = total.defined() ? total + term : term;
  }
  return total;
}

torch::Tensor latent_reconstruction(const torch::Tensor& z, const torch::Tensor& z_hat) {
  if (z.sizes() != z_hat.sizes())
    throw InputError("latent_reconstruction: code shapes differ " + c10::str(z.sizes()) + " vs " +
                     c10::str(z_hat.sizes()));
  return (z - z_hat).abs().mean();
}

ImleResult imle_select(const torch::Tensor& codes, const torch::Tensor& mapped) {
  auto z = rows(codes);
  auto m = rows(mapped);
  if (m.size(0) == 0 || mapped.numel() == 0) throw InputError("imle_loss: empty candidate pool");
  if (z.size(1) != m.size(1))
    throw InputError("imle_loss: code length " + std::to_string(z.size(1)) + " differs from mapped length " +
                     std::to_string(m.size(1)));
  ImleResult out;
  {
    torch::NoGradGuard no_grad;
    auto zc = z.detach().to(torch::kFloat64).contiguous();
    auto mc = m.detach().to(torch::kFloat64).contiguous();
    const auto n = zc.size(0), k = mc.size(0), d = zc.size(1);
    const double* zp = zc.data_ptr<double>();
    const double* mp = mc.data_ptr<double>();
    for (std::int64_t i = 0; i < n; ++i) {
      std::int64_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::int64_t j = 0; j < k; ++j) {
        double acc = 0.0;
        for (std::int64_t c = 0; c < d; ++c) {
          const double diff = zp[i * d + c] - mp[j * d + c];
          acc += diff * diff;
        }
        if (acc < best_d) {
          best_d = acc;
          best = j;
        }
      }
      out.selected.push_back(best);
    }
  }
  auto idx = torch::tensor(out.selected, torch::kInt64);
  out.loss = (z - m.index_select(0, idx)).pow(2).sum();
  return out;
}

ImleResult imle_loss(const torch::Tensor& codes, Mapper& mapper, const torch::Tensor& candidates) {
  auto z = rows(codes);
  auto r = rows(candidates);
  if (r.size(0) == 0 || candidates.numel() == 0) throw InputError("imle_loss: empty candidate pool");
  if (z.size(1) != r.size(1))
    throw InputError("imle_loss: code length " + std::to_string(z.size(1)) + " differs from noise length " +
                     std::to_string(r.size(1)));
  return imle_select(z, mapper->forward(r));
}

GeneratorObjective generator_objective(const ObjectiveInputs& in, ObjectiveModels m,
                                       const LossWeights& weights, const LossSetup& setup) {
  const bool need_random = setup.d_rand_z || setup.z_recon;
  if (need_random && !in.random_z.defined())
    throw ConfigError("loss setup needs randomly drawn style codes (d_rand_z / z_recon) but none were supplied");
  if (setup.z_recon && m.encoder == nullptr)
    throw ConfigError("loss setup z_recon needs the style encoder");
  if (!setup.dir_recon && !setup.d_dir && !need_random && !setup.z_l2)
    throw ConfigError("loss setup enables no terms");

  GeneratorObjective obj;
  obj.fake_direct = generate(m.generator, m.spec, in.input, in.z);
  if (setup.d_dir) {
    auto scores = discriminate(m.discriminator, m.spec, obj.fake_direct, in.input);
    obj.terms[loss_keys::kGanDir] = weights.lambda_cgan * lsgan_loss({}, scores, GanRole::generator);
  }
  if (setup.dir_recon)
    obj.terms[loss_keys::kRec] =
        weights.lambda_rec * perceptual_reconstruction(obj.fake_direct, in.target, m.perceptual);
  if (need_random) {
    obj.fake_random = generate(m.generator, m.spec, in.input, in.random_z);
    if (setup.d_rand_z) {
      auto scores = discriminate(m.discriminator, m.spec, obj.fake_random, in.input);
      obj.terms[loss_keys::kGanRandZ] = weights.lambda_cgan * lsgan_loss({}, scores, GanRole::generator);
    }
    if (setup.z_recon) {
      auto z_hat = encode_style(*m.encoder, m.spec, obj.fake_random);
      obj.terms[loss_keys::kZRecon] = weights.lambda_z_recon * latent_reconstruction(in.random_z, z_hat);
    }
  }
  if (setup.z_l2) obj.terms[loss_keys::kZL2] = weights.lambda_l2 * in.z.pow(2).sum(1).mean();

  for (const auto& [key, value] : obj.terms) obj.total = obj.total.defined() ? obj.total + value : value;
  return obj;
}

torch::Tensor discriminator_objective(const torch::Tensor& input, const torch::Tensor& target,
                                      const GeneratorObjective& fakes, ObjectiveModels m,
                                      const LossSetup& setup) {
  auto real = discriminate(m.discriminator, m.spec, target, input);
  auto loss = lsgan_loss(real, discriminate(m.discriminator, m.spec, fakes.fake_direct.detach(), input),
                         GanRole::discriminator);
  if (setup.d_rand_z && fakes.fake_random.defined()) {
    loss = loss + lsgan_loss(real, discriminate(m.discriminator, m.spec, fakes.fake_random.detach(), input),
                             GanRole::discriminator);
  }
  return loss;
}

}  // namespace step
