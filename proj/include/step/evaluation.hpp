#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "step/dataio.hpp"
#include "step/feature_backbone.hpp"
#include "step/networks.hpp"

namespace step {

inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

/// PSNR in dB on the 8-bit grid (MAX = 255). Identical images return
/// kInfinitePsnr.
double psnr(const torch::Tensor& a, const torch::Tensor& b);

/// Uncalibrated perceptual distance: per layer, channel-wise unit-normalized
/// features are compared by squared difference summed over channels and
/// averaged over positions; layers combine by their normalized weights.
/// This is a stand-in for learned perceptual metrics, not LPIPS itself.
class PerceptualDistance {
 public:
  explicit PerceptualDistance(FeatureExtractor extractor);

  /// Normalized features of a batch, one tensor per layer (N x C x H x W).
  std::vector<torch::Tensor> features(const torch::Tensor& images) const;
  /// Distance between sample i of `a` and sample j of `b`.
  double between(const std::vector<torch::Tensor>& a, std::int64_t i, const std::vector<torch::Tensor>& b,
                 std::int64_t j) const;
  /// Per-sample distances of two equally sized batches.
  std::vector<double> operator()(const torch::Tensor& a, const torch::Tensor& b) const;
  double scalar(const torch::Tensor& a, const torch::Tensor& b) const;

  const FeatureExtractor& extractor() const { return extractor_; }

 private:
  FeatureExtractor extractor_;
  std::vector<double> weights_;  // normalized to sum 1
};

struct DiversityResult {
  double score = 0.0;
  std::int64_t pair_evaluations = 0;
  std::vector<double> per_input;
};

/// For each input, renders one output per style code (codes[i] is S x d) and
/// averages the pairwise perceptual distances inside that output set; the
/// score is the mean over inputs. `n_inputs` inputs are used; fewer available
/// inputs is a configuration error.
DiversityResult diversity_score(Generator& generator, const NetworkSpec& spec,
                                const std::vector<torch::Tensor>& inputs,
                                const std::vector<torch::Tensor>& codes, const PerceptualDistance& metric,
                                int n_inputs);

struct SampleRecord {
  std::string id;
  double psnr = 0.0;
  double perceptual = 0.0;
};

struct EvalReport {
  std::string split;
  double psnr_mean = 0.0;          // over finite values; kInfinitePsnr if every sample is exact
  std::int64_t psnr_infinite = 0;  // samples excluded from psnr_mean
  double perceptual_mean = 0.0;
  double diversity_transfer = 0.0;
  double diversity_sampling = 0.0;
  std::int64_t n_samples = 0;

  nlohmann::json to_json() const;
};

/// Reconstructs every pair with z = E(target) and aggregates PSNR and
/// perceptual distance. `record` receives each per-sample result.
EvalReport eval_reconstruction(const PairedDataset& split, Generator& generator, StyleEncoder& encoder,
                               const NetworkSpec& spec, const PerceptualDistance& metric,
                               const std::function<void(const SampleRecord&)>& record = {},
                               int psnr_resolution = 0);

/// Mean silhouette coefficient of rows of `codes` (N x d) under Euclidean
/// distance and integer cluster labels.
double silhouette_score(const torch::Tensor& codes, const std::vector<int>& labels);

/// Order-independent sum of the values (pairwise summation over sorted input).
double stable_sum(std::vector<double> values);

}  // namespace step
