#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "step/feature_backbone.hpp"
#include "step/networks.hpp"

namespace step {

struct LossWeights {
  double lambda_cgan = 1.0;
  double lambda_rec = 0.02;
  double lambda_l2 = 0.01;
  double alpha_margin = 1.0;
  double lambda_reg = 0.01;
  double lambda_z_recon = 0.5;

  void validate() const;
};

/// Which generator-objective terms are active. Presets v1..v4 mirror the
/// ablation rows of the staged method; cyclic reconstruction is not part of
/// this library, so v1 and v2 coincide.
struct LossSetup {
  bool dir_recon = true;
  bool d_dir = true;
  bool d_rand_z = false;
  bool z_recon = false;
  bool z_l2 = false;

  static LossSetup preset(const std::string& name);
  bool operator==(const LossSetup&) const = default;
};

/// Stable metric-log keys for the per-term breakdown.
namespace loss_keys {
inline constexpr const char* kGanDir = "loss/gan_dir";
inline constexpr const char* kRec = "loss/rec";
inline constexpr const char* kGanRandZ = "loss/gan_rand_z";
inline constexpr const char* kZRecon = "loss/z_recon";
inline constexpr const char* kZL2 = "loss/z_l2";
inline constexpr const char* kTriplet = "loss/triplet";
inline constexpr const char* kImle = "loss/imle";
inline constexpr const char* kDisc = "loss/disc";
}  // namespace loss_keys

/// Per-row max(|za-zp|^2 - |za-zn|^2 + alpha, 0) + lambda_reg * (|za|^2+|zp|^2+|zn|^2)/3,
/// averaged over the batch. Accepts single codes or N x d batches.
torch::Tensor triplet_loss(const torch::Tensor& z_a, const torch::Tensor& z_p, const torch::Tensor& z_n,
                           const LossWeights& weights);

enum class GanRole { generator, discriminator };

/// Least-squares GAN loss averaged over scales (each scale averaged over its
/// patches). Discriminator: 1/2[(s_real-1)^2 + s_fake^2]; generator: (s_fake-1)^2.
torch::Tensor lsgan_loss(const std::vector<torch::Tensor>& real_scores,
                         const std::vector<torch::Tensor>& fake_scores, GanRole role);

/// sum_i w_i * mean((phi_i(a) - phi_i(b))^2) over the extractor's layers.
torch::Tensor perceptual_reconstruction(const torch::Tensor& a, const torch::Tensor& b,
                                        const FeatureExtractor& extractor);

/// Mean absolute difference between codes.
torch::Tensor latent_reconstruction(const torch::Tensor& z, const torch::Tensor& z_hat);

struct ImleResult {
  torch::Tensor loss;                  // sum_i |z_i - M(r_{e_i})|^2
  std::vector<std::int64_t> selected;  // e_i as candidate indices
};

/// Nearest-candidate IMLE objective. For each code the candidate whose
/// mapped value is closest wins; ties go to the lowest index.
ImleResult imle_loss(const torch::Tensor& codes, Mapper& mapper, const torch::Tensor& candidates);

/// Same selection and loss over candidates that are already mapped.
ImleResult imle_select(const torch::Tensor& codes, const torch::Tensor& mapped);

struct ObjectiveInputs {
  torch::Tensor input;     // N x Cin x H x W
  torch::Tensor target;    // N x Cout x H x W
  torch::Tensor z;         // E(target), N x d
  torch::Tensor random_z;  // codes of randomly drawn training images; needed by d_rand_z / z_recon
};

struct ObjectiveModels {
  const NetworkSpec& spec;
  Generator& generator;
  MultiscaleDiscriminator& discriminator;
  StyleEncoder* encoder = nullptr;  // needed by z_recon
  const FeatureExtractor& perceptual;
};

struct GeneratorObjective {
  torch::Tensor total;
  std::map<std::string, torch::Tensor> terms;  // weighted terms, keyed by loss_keys
  torch::Tensor fake_direct;                   // G(input, z)
  torch::Tensor fake_random;                   // G(input, random_z) when computed
};

/// lambda_cGAN * L_cGAN + lambda_rec * L_rec on the direct reconstruction,
/// plus the optional terms enabled in `setup`.
GeneratorObjective generator_objective(const ObjectiveInputs& in, ObjectiveModels models,
                                       const LossWeights& weights, const LossSetup& setup);

/// LSGAN discriminator loss on real pairs vs. the (detached) fakes produced
/// by generator_objective. Random-style fakes are included when present.
torch::Tensor discriminator_objective(const torch::Tensor& input, const torch::Tensor& target,
                                      const GeneratorObjective& fakes, ObjectiveModels models,
                                      const LossSetup& setup);

}  // namespace step
