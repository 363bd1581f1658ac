#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace step {

/// Activations of a frozen backbone at named layers, shallow to deep.
/// Activations are batched N x C x H x W.
struct FeatureStack {
  struct Layer {
    std::string id;
    torch::Tensor activation;
  };
  std::vector<Layer> layers;
};

/// Per-layer Gram matrices (N x C x C), same order as the FeatureStack.
struct GramDescriptor {
  struct Layer {
    std::string id;
    torch::Tensor gram;
  };
  std::vector<Layer> grams;
};

struct PerceptualConfig {
  std::vector<std::string> layer_ids;
  std::vector<double> layer_weights;
  std::string backbone_id = "random-conv";

  /// conv{i}_2 for i in 1..5 with w_i = 1/2^(6-i).
  static PerceptualConfig reconstruction(std::string backbone_id = "random-conv");
  /// Same layers, uniform unit weights; used for triplet mining.
  static PerceptualConfig mining(std::string backbone_id = "random-conv");

  void validate() const;
};

struct BackboneArch {
  std::vector<int> widths;           // output channels per block
  std::vector<int> convs_per_block;  // 3x3 convs per block
  bool bias = true;
  bool max_pool = true;              // pooling between blocks; avg pool otherwise
  bool imagenet_normalize = true;    // remap [-1,1] input to ImageNet statistics
};

/// VGG-layout convolutional backbone: blocks of 3x3 conv + ReLU separated by
/// 2x2 pooling. Layer ids follow the "conv{block}_{index}" naming and refer to
/// post-ReLU activations.
class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(BackboneArch arch);

  const BackboneArch& arch() const { return arch_; }
  std::vector<std::string> layer_ids() const;
  bool has_layer(const std::string& id) const;
  /// Smallest H (and W) for which the layer's activation is non-empty.
  std::int64_t min_input_size(const std::string& id) const;

  /// Runs the network up to the deepest requested layer and returns the
  /// requested activations in the order given.
  std::vector<torch::Tensor> forward(const torch::Tensor& images,
                                     const std::vector<std::string>& ids);

 private:
  BackboneArch arch_;
  std::vector<std::vector<torch::nn::Conv2d>> blocks_;
};
TORCH_MODULE(Backbone);

/// Maps backbone ids to weight files: {"backbones": {"<id>": {"path", "sha256", "arch"}}}.
/// Paths are relative to the registry file. "random-conv" is built in and
/// needs no entry.
class BackboneRegistry {
 public:
  BackboneRegistry() = default;
  static BackboneRegistry load(const std::filesystem::path& file);

  struct Entry {
    std::filesystem::path path;
    std::string sha256;
    std::string arch = "vgg16";
  };
  void add(const std::string& id, Entry entry) { entries_[id] = std::move(entry); }
  const Entry* find(const std::string& id) const;

 private:
  std::map<std::string, Entry> entries_;
};

BackboneArch random_conv_arch();
BackboneArch vgg16_arch();

/// Deterministic fixed-seed bias-free backbone for tests and CI.
Backbone make_random_conv_backbone(std::uint64_t seed = 20200601);

/// Resolves `id` to a frozen backbone in evaluation mode. Registry entries
/// are hash-checked before loading.
Backbone resolve_backbone(const std::string& id, const BackboneRegistry& registry = {});

/// Frozen feature extractor bound to one PerceptualConfig. Gradients flow to
/// the input images but never into the backbone weights. Images are
/// N x C x H x W (or C x H x W) in [-1, 1].
class FeatureExtractor {
 public:
  FeatureExtractor(PerceptualConfig config, Backbone backbone);
  FeatureExtractor(PerceptualConfig config, const BackboneRegistry& registry = {});

  const PerceptualConfig& config() const { return config_; }
  Backbone backbone() const { return backbone_; }

  /// Casts the backbone weights; double precision is used by gradient checks.
  void to(torch::Dtype dtype);

  FeatureStack extract(const torch::Tensor& images) const;
  GramDescriptor grams(const torch::Tensor& images) const;

  /// Per-sample style distance (size N), differentiable.
  torch::Tensor style_distance(const torch::Tensor& a, const torch::Tensor& b) const;
  double style_distance_scalar(const torch::Tensor& a, const torch::Tensor& b) const;

  /// Weighted Gram layers flattened to one row per image, scaled by sqrt(w_j),
  /// so the squared Euclidean distance between rows is the style distance.
  torch::Tensor style_signature(const torch::Tensor& images) const;

 private:
  PerceptualConfig config_;
  Backbone backbone_;
};

/// (F F^T) / (H W) for C x H x W or N x C x H x W activations.
torch::Tensor gram(const torch::Tensor& activation);

/// sum_j w_j ||G_a^j - G_b^j||_F^2 per sample.
torch::Tensor gram_distance(const GramDescriptor& a, const GramDescriptor& b,
                            const std::vector<double>& weights);

}  // namespace step
