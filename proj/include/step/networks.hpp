#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace step {

/// Concrete shapes of E, G, D and M. Channel widths of E and G are desk-scale
/// defaults; the discriminator scale count and mapper widths follow the
/// method's stated architecture.
struct NetworkSpec {
  int latent_dim = 8;
  int image_size = 64;
  int in_channels = 3;
  int out_channels = 3;

  std::vector<int> encoder_widths = {16, 32, 64, 64};        // 4x4 stride-2 convs
  std::vector<int> generator_widths = {32, 64, 128, 128};    // U-Net down path
  int n_scales = 3;
  std::vector<int> discriminator_widths = {32, 64, 64};
  std::vector<int> mapper_hidden = {128, 128, 128};
  bool mapper_output_tanh = false;
  bool mapper_zero_init_output = false;

  void validate() const;

  /// Self-describing layer table stored in every checkpoint manifest:
  /// {"encoder": [...], "generator": [...], "discriminator": [...], "mapper": [...]}
  /// with one {"name","type","in","out","kernel","stride","bias"} entry per
  /// parameterized layer.
  nlohmann::json descriptor() const;
};

/// Parameter count implied by a descriptor section (conv: out*in*k*k (+out),
/// linear: out*in (+out)).
std::int64_t descriptor_parameter_count(const nlohmann::json& layers);

/// Style encoder E: stride-2 conv stack, global average pool, linear head.
class StyleEncoderImpl : public torch::nn::Module {
 public:
  explicit StyleEncoderImpl(const NetworkSpec& spec);
  torch::Tensor forward(const torch::Tensor& images);

 private:
  std::vector<torch::nn::Conv2d> convs_;
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(StyleEncoder);

/// Generator G: U-Net with concatenating skips; z is broadcast over the
/// bottleneck and concatenated to it. Output bounded by tanh.
class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(const NetworkSpec& spec);
  torch::Tensor forward(const torch::Tensor& images, const torch::Tensor& z);

 private:
  std::vector<torch::nn::Conv2d> down_;
  std::vector<torch::nn::Conv2d> up_;
  int latent_dim_;
};
TORCH_MODULE(Generator);

/// One conditional patch discriminator on concat(image, condition).
class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  PatchDiscriminatorImpl(int in_channels, const std::vector<int>& widths);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  std::vector<torch::nn::Conv2d> convs_;
};
TORCH_MODULE(PatchDiscriminator);

/// Patch discriminator replicated over n_scales; scale k sees the input
/// average-pooled k times by a factor of 2.
class MultiscaleDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit MultiscaleDiscriminatorImpl(const NetworkSpec& spec);
  std::vector<torch::Tensor> forward(const torch::Tensor& image, const torch::Tensor& condition);
  int n_scales() const { return static_cast<int>(scales_.size()); }

 private:
  std::vector<PatchDiscriminator> scales_;
};
TORCH_MODULE(MultiscaleDiscriminator);

/// Mapper M: MLP from unit-Gaussian noise to style codes, tanh hidden layers.
class MapperImpl : public torch::nn::Module {
 public:
  explicit MapperImpl(const NetworkSpec& spec);
  torch::Tensor forward(const torch::Tensor& noise);
  std::vector<std::int64_t> hidden_widths() const;

 private:
  std::vector<torch::nn::Linear> layers_;
  bool output_tanh_;
};
TORCH_MODULE(Mapper);

/// The four networks of one run, initialized from a seed.
struct Networks {
  NetworkSpec spec;
  StyleEncoder encoder{nullptr};
  Generator generator{nullptr};
  MultiscaleDiscriminator discriminator{nullptr};
  Mapper mapper{nullptr};

  Networks(const NetworkSpec& spec, std::uint64_t seed);
  void to(torch::Dtype dtype);
  void eval();
};

// Checked entry points. Single images (C x H x W) and single codes are
// accepted and batched internally; outputs keep the batch dimension.

/// z = E(image); N x latent_dim.
torch::Tensor encode_style(StyleEncoder& encoder, const NetworkSpec& spec, const torch::Tensor& images);
torch::Tensor generate(Generator& generator, const NetworkSpec& spec, const torch::Tensor& input_images,
                       const torch::Tensor& z);
std::vector<torch::Tensor> discriminate(MultiscaleDiscriminator& discriminator, const NetworkSpec& spec,
                                        const torch::Tensor& image, const torch::Tensor& condition);
torch::Tensor map_noise(Mapper& mapper, const NetworkSpec& spec, const torch::Tensor& noise);

}  // namespace step
