#include "step/networks.hpp"

#include "step/errors.hpp"

namespace step {
namespace F = torch::nn::functional;

namespace {

nlohmann::json conv_entry(const std::string& name, int in, int out, int k, int stride) {
  return {{"name", name}, {"type", "conv2d"}, {"in", in}, {"out", out},
          {"kernel", k}, {"stride", stride}, {"bias", true}};
}

nlohmann::json linear_entry(const std::string& name, int in, int out) {
  return {{"name", name}, {"type", "linear"}, {"in", in}, {"out", out}, {"bias", true}};
}

torch::nn::Conv2d make_conv(int in, int out, int k, int stride, int pad) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(pad));
}

torch::Tensor instance_norm(const torch::Tensor& x) {
  return F::instance_norm(x, F::InstanceNormFuncOptions().eps(1e-5));
}

torch::Tensor as_batch(const torch::Tensor& t, std::int64_t dims) {
  return t.dim() == dims - 1 ? t.unsqueeze(0) : t;
}

void check_image(const torch::Tensor& x, int channels, const std::string& what) {
  if (x.dim() != 4 || x.size(1) != channels)
    throw InputError(what + ": expected N x " + std::to_string(channels) + " x H x W, got " +
                     c10::str(x.sizes()));
}

}  // namespace

void NetworkSpec::validate() const {
  require<ConfigError>(latent_dim > 0, "networks: latent_dim must be positive");
  require<ConfigError>(!encoder_widths.empty() && !generator_widths.empty() &&
                           !discriminator_widths.empty() && !mapper_hidden.empty(),
                       "networks: layer width lists must be non-empty");
  require<ConfigError>(generator_widths.size() >= 2, "networks: generator needs at least two levels");
  require<ConfigError>(n_scales >= 1, "networks: n_scales must be at least 1");
  const auto factor = 1 << generator_widths.size();
  require<ConfigError>(image_size % factor == 0,
                       "networks: image_size must be divisible by 2^(generator levels) = " +
                           std::to_string(factor));
  // Patch map size at the coarsest discriminator scale (4x4 convs, padding 1).
  int side = image_size >> (n_scales - 1);
  for (std::size_t i = 0; i < discriminator_widths.size(); ++i) side = i < 2 ? (side - 2) / 2 + 1 : side - 1;
  require<ConfigError>(side - 1 >= 1, "networks: image_size " + std::to_string(image_size) + " is too small for " +
                                          std::to_string(n_scales) + " discriminator scales of " +
                                          std::to_string(discriminator_widths.size()) + " layers");
}

nlohmann::json NetworkSpec::descriptor() const {
  nlohmann::json enc = nlohmann::json::array();
  int in = out_channels;
  for (std::size_t i = 0; i < encoder_widths.size(); ++i) {
    enc.push_back(conv_entry("conv" + std::to_string(i), in, encoder_widths[i], 4, 2));
    in = encoder_widths[i];
  }
  enc.push_back(linear_entry("head", in, latent_dim));

  nlohmann::json gen = nlohmann::json::array();
  const auto& g = generator_widths;
  const auto n = g.size();
  in = in_channels;
  for (std::size_t i = 0; i < n; ++i) {
    gen.push_back(conv_entry("down" + std::to_string(i), in, g[i], 4, 2));
    in = g[i];
  }
  // Decoder level i upsamples and emits g[i-1] channels, then concatenates
  // the matching skip.
  in = g[n - 1] + latent_dim;
  for (std::size_t i = n - 1; i >= 1; --i) {
    gen.push_back(conv_entry("up" + std::to_string(n - 1 - i), in, g[i - 1], 3, 1));
    in = 2 * g[i - 1];
  }
  gen.push_back(conv_entry("up" + std::to_string(n - 1), in, out_channels, 3, 1));

  nlohmann::json dis = nlohmann::json::array();
  for (int s = 0; s < n_scales; ++s) {
    in = out_channels + in_channels;
    const auto& w = discriminator_widths;
    for (std::size_t i = 0; i < w.size(); ++i) {
      dis.push_back(conv_entry("scale" + std::to_string(s) + ".conv" + std::to_string(i), in, w[i], 4,
                               i < 2 ? 2 : 1));
      in = w[i];
    }
    dis.push_back(conv_entry("scale" + std::to_string(s) + ".conv" + std::to_string(w.size()), in, 1, 4, 1));
  }

  nlohmann::json map = nlohmann::json::array();
  in = latent_dim;
  for (std::size_t i = 0; i < mapper_hidden.size(); ++i) {
    map.push_back(linear_entry("layer" + std::to_string(i), in, mapper_hidden[i]));
    in = mapper_hidden[i];
  }
  map.push_back(linear_entry("layer" + std::to_string(mapper_hidden.size()), in, latent_dim));

  return {{"latent_dim", latent_dim},
          {"image_size", image_size},
          {"in_channels", in_channels},
          {"out_channels", out_channels},
          {"mapper_output_tanh", mapper_output_tanh},
          {"encoder", enc},
          {"generator", gen},
          {"discriminator", dis},
          {"mapper", map}};
}

std::int64_t descriptor_parameter_count(const nlohmann::json& layers) {
  std::int64_t total = 0;
  for (const auto& l : layers) {
    const std::int64_t in = l.at("in"), out = l.at("out");
    const bool bias = l.value("bias", true);
    if (l.at("type") == "conv2d") {
      const std::int64_t k = l.at("kernel");
      total += out * in * k * k + (bias ? out : 0);
    } else {
      total += out * in + (bias ? out : 0);
    }
  }
  return total;
}

StyleEncoderImpl::StyleEncoderImpl(const NetworkSpec& spec) {
  int in = spec.out_channels;
  for (std::size_t i = 0; i < spec.encoder_widths.size(); ++i) {
    convs_.push_back(register_module("conv" + std::to_string(i), make_conv(in, spec.encoder_widths[i], 4, 2, 1)));
    in = spec.encoder_widths[i];
  }
  head_ = register_module("head", torch::nn::Linear(in, spec.latent_dim));
}

torch::Tensor StyleEncoderImpl::forward(const torch::Tensor& images) {
  auto x = images;
  for (auto& c : convs_) x = F::leaky_relu(c->forward(x), F::LeakyReLUFuncOptions().negative_slope(0.2));
  return head_->forward(x.mean({2, 3}));
}

GeneratorImpl::GeneratorImpl(const NetworkSpec& spec) : latent_dim_(spec.latent_dim) {
  const auto& g = spec.generator_widths;
  const auto n = g.size();
  int in = spec.in_channels;
  for (std::size_t i = 0; i < n; ++i) {
    down_.push_back(register_module("down" + std::to_string(i), make_conv(in, g[i], 4, 2, 1)));
    in = g[i];
  }
  in = g[n - 1] + spec.latent_dim;
  for (std::size_t i = n - 1; i >= 1; --i) {
    up_.push_back(register_module("up" + std::to_string(n - 1 - i), make_conv(in, g[i - 1], 3, 1, 1)));
    in = 2 * g[i - 1];
  }
  up_.push_back(register_module("up" + std::to_string(n - 1), make_conv(in, spec.out_channels, 3, 1, 1)));
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& images, const torch::Tensor& z) {
  const auto lrelu = F::LeakyReLUFuncOptions().negative_slope(0.2);
  std::vector<torch::Tensor> skips;
  auto x = images;
  for (std::size_t i = 0; i < down_.size(); ++i) {
    x = down_[i]->forward(x);
    // Instance norm on interior levels only: the first level keeps absolute
    // intensities and the bottleneck may be 1x1.
    if (i > 0 && i + 1 < down_.size()) x = instance_norm(x);
    x = F::leaky_relu(x, lrelu);
    skips.push_back(x);
  }
  auto zmap = z.view({z.size(0), latent_dim_, 1, 1}).expand({z.size(0), latent_dim_, x.size(2), x.size(3)});
  x = torch::cat({x, zmap}, 1);
  const auto up_opts = F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest);
  for (std::size_t i = 0; i + 1 < up_.size(); ++i) {
    x = torch::relu(up_[i]->forward(F::interpolate(x, up_opts)));
    x = torch::cat({x, skips[skips.size() - 2 - i]}, 1);
  }
  return torch::tanh(up_.back()->forward(F::interpolate(x, up_opts)));
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(int in_channels, const std::vector<int>& widths) {
  int in = in_channels;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    convs_.push_back(register_module("conv" + std::to_string(i), make_conv(in, widths[i], 4, i < 2 ? 2 : 1, 1)));
    in = widths[i];
  }
  convs_.push_back(register_module("conv" + std::to_string(widths.size()), make_conv(in, 1, 4, 1, 1)));
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& input) {
  const auto lrelu = F::LeakyReLUFuncOptions().negative_slope(0.2);
  auto x = input;
  for (std::size_t i = 0; i + 1 < convs_.size(); ++i) {
    x = convs_[i]->forward(x);
    if (i > 0) x = instance_norm(x);
    x = F::leaky_relu(x, lrelu);
  }
  return convs_.back()->forward(x);
}

MultiscaleDiscriminatorImpl::MultiscaleDiscriminatorImpl(const NetworkSpec& spec) {
  for (int s = 0; s < spec.n_scales; ++s)
    scales_.push_back(register_module("scale" + std::to_string(s),
                                      PatchDiscriminator(spec.in_channels + spec.out_channels,
                                                         spec.discriminator_widths)));
}

std::vector<torch::Tensor> MultiscaleDiscriminatorImpl::forward(const torch::Tensor& image,
                                                                const torch::Tensor& condition) {
  auto x = torch::cat({image, condition}, 1);
  std::vector<torch::Tensor> out;
  const auto pool = F::AvgPool2dFuncOptions(3).stride(2).padding(1).count_include_pad(false);
  for (std::size_t s = 0; s < scales_.size(); ++s) {
    if (s > 0) x = F::avg_pool2d(x, pool);
    out.push_back(scales_[s]->forward(x));
  }
  return out;
}

MapperImpl::MapperImpl(const NetworkSpec& spec) : output_tanh_(spec.mapper_output_tanh) {
  int in = spec.latent_dim;
  for (std::size_t i = 0; i < spec.mapper_hidden.size(); ++i) {
    layers_.push_back(register_module("layer" + std::to_string(i), torch::nn::Linear(in, spec.mapper_hidden[i])));
    in = spec.mapper_hidden[i];
  }
  layers_.push_back(register_module("layer" + std::to_string(spec.mapper_hidden.size()),
                                    torch::nn::Linear(in, spec.latent_dim)));
  if (spec.mapper_zero_init_output) {
    torch::NoGradGuard no_grad;
    layers_.back()->weight.zero_();
    layers_.back()->bias.zero_();
  }
}

torch::Tensor MapperImpl::forward(const torch::Tensor& noise) {
  auto x = noise;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) x = torch::tanh(layers_[i]->forward(x));
  x = layers_.back()->forward(x);
  return output_tanh_ ? torch::tanh(x) : x;
}

std::vector<std::int64_t> MapperImpl::hidden_widths() const {
  std::vector<std::int64_t> w;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) w.push_back(layers_[i]->options.out_features());
  return w;
}

Networks::Networks(const NetworkSpec& s, std::uint64_t seed) : spec(s) {
  spec.validate();
  torch::manual_seed(seed);
  encoder = StyleEncoder(spec);
  generator = Generator(spec);
  discriminator = MultiscaleDiscriminator(spec);
  mapper = Mapper(spec);
}

void Networks::to(torch::Dtype dtype) {
  encoder->to(dtype);
  generator->to(dtype);
  discriminator->to(dtype);
  mapper->to(dtype);
}

void Networks::eval() {
  encoder->eval();
  generator->eval();
  discriminator->eval();
  mapper->eval();
}

torch::Tensor encode_style(StyleEncoder& encoder, const NetworkSpec& spec, const torch::Tensor& images) {
  auto x = as_batch(images, 4);
  check_image(x, spec.out_channels, "encode_style");
  if (x.size(2) != spec.image_size || x.size(3) != spec.image_size)
    throw InputError("encode_style: image is " + std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)) +
                     " but the encoder was configured for " + std::to_string(spec.image_size));
  return encoder->forward(x);
}

torch::Tensor generate(Generator& generator, const NetworkSpec& spec, const torch::Tensor& input_images,
                       const torch::Tensor& z) {
  auto x = as_batch(input_images, 4);
  auto codes = as_batch(z, 2);
  check_image(x, spec.in_channels, "generate");
  if (codes.dim() != 2 || codes.size(1) != spec.latent_dim)
    throw InputError("generate: style code length " + std::to_string(codes.size(-1)) +
                     " does not match latent_dim " + std::to_string(spec.latent_dim));
  if (codes.size(0) != x.size(0)) throw InputError("generate: batch sizes of images and codes differ");
  const auto factor = std::int64_t{1} << spec.generator_widths.size();
  if (x.size(2) % factor != 0 || x.size(3) % factor != 0)
    throw InputError("generate: spatial size must be divisible by " + std::to_string(factor));
  return generator->forward(x, codes.to(x.scalar_type()));
}

std::vector<torch::Tensor> discriminate(MultiscaleDiscriminator& discriminator, const NetworkSpec& spec,
                                        const torch::Tensor& image, const torch::Tensor& condition) {
  auto x = as_batch(image, 4);
  auto c = as_batch(condition, 4);
  check_image(x, spec.out_channels, "discriminate");
  check_image(c, spec.in_channels, "discriminate");
  if (x.size(0) != c.size(0) || x.size(2) != c.size(2) || x.size(3) != c.size(3))
    throw InputError("discriminate: image " + c10::str(x.sizes()) + " and condition " + c10::str(c.sizes()) +
                     " are not aligned");
  return discriminator->forward(x, c);
}

torch::Tensor map_noise(Mapper& mapper, const NetworkSpec& spec, const torch::Tensor& noise) {
  auto r = as_batch(noise, 2);
  if (r.dim() != 2 || r.size(1) != spec.latent_dim)
    throw InputError("map_noise: noise length " + std::to_string(r.size(-1)) + " does not match latent_dim " +
                     std::to_string(spec.latent_dim));
  if (!torch::isfinite(r).all().item<bool>()) throw InputError("map_noise: non-finite noise");
  return mapper->forward(r);
}

}  // namespace step
