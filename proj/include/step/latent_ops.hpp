#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "step/networks.hpp"

namespace step {

/// G(content, E(style_source)).
torch::Tensor transfer_style(Generator& generator, StyleEncoder& encoder, const NetworkSpec& spec,
                             const torch::Tensor& content_input, const torch::Tensor& style_source);

/// (1 - t) z1 + t z2 for t in [0, 1]; extrapolation is rejected.
torch::Tensor interpolate(const torch::Tensor& z1, const torch::Tensor& z2, double t);

/// Diagonal Gaussian fitted to training codes (n - 1 standard deviation).
struct EmpiricalPrior {
  torch::Tensor mu;     // d, float64
  torch::Tensor sigma;  // d, float64
  double max_train_norm = 0.0;

  static EmpiricalPrior fit(const torch::Tensor& codes);
};

enum class SampleMode { empirical, mapper };
SampleMode parse_sample_mode(const std::string& name);

/// `count` standard normal vectors of length `dim` from `rng`.
torch::Tensor standard_normal(std::mt19937_64& rng, std::int64_t count, std::int64_t dim);

/// Empirical: mu + sigma * n. Mapper: M(n). n ~ N(0, I) drawn from `rng`.
/// Empirical draws whose norm exceeds the largest training-code norm are
/// counted and reported with one warning on stderr.
torch::Tensor sample_style(SampleMode mode, const EmpiricalPrior* prior, Mapper* mapper, const NetworkSpec& spec,
                           std::mt19937_64& rng, std::int64_t count = 1);

struct LatentTable {
  std::vector<std::string> ids;
  torch::Tensor codes;  // N x d, float64
  std::optional<std::vector<std::string>> labels;
};

/// CSV with header "id,z0,...,z{d-1}[,label]" and one row per image; values
/// are written with round-trip precision.
void export_latent_table(const std::filesystem::path& path, const torch::Tensor& codes,
                         const std::vector<std::string>& ids,
                         const std::optional<std::vector<std::string>>& labels = std::nullopt,
                         std::int64_t latent_dim = 8);
LatentTable read_latent_table(const std::filesystem::path& path);

}  // namespace step
