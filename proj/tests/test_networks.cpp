#include <gtest/gtest.h>

#include "step/errors.hpp"
#include "step/networks.hpp"
#include "support.hpp"

using namespace step;
using step::testing::random_images;
using step::testing::tiny_spec;

namespace {

std::map<std::string, torch::Tensor> params_by_name(torch::nn::Module& m) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& p : m.named_parameters()) out[p.key()] = p.value();
  return out;
}

void audit(torch::nn::Module& module, const nlohmann::json& layers) {
  auto params = params_by_name(module);
  std::int64_t numel = 0;
  for (const auto& [k, v] : params) numel += v.numel();
  EXPECT_EQ(descriptor_parameter_count(layers), numel);
  std::size_t matched = 0;
  for (const auto& l : layers) {
    const std::string name = l.at("name");
    ASSERT_TRUE(params.count(name + ".weight")) << name;
    const auto& w = params.at(name + ".weight");
    const std::int64_t in = l.at("in"), out = l.at("out");
    if (l.at("type") == "conv2d") {
      const std::int64_t k = l.at("kernel");
      EXPECT_EQ(w.sizes(), (std::vector<std::int64_t>{out, in, k, k})) << name;
    } else {
      EXPECT_EQ(w.sizes(), (std::vector<std::int64_t>{out, in})) << name;
    }
    ++matched;
    if (l.value("bias", true)) {
      ASSERT_TRUE(params.count(name + ".bias")) << name;
      EXPECT_EQ(params.at(name + ".bias").size(0), out);
      ++matched;
    }
  }
  EXPECT_EQ(matched, params.size());
}

}  // namespace

TEST(Networks, DescriptorAuditMatchesModules) {
  for (const auto& spec : {NetworkSpec{}, tiny_spec()}) {
    Networks nets(spec, 1);
    auto d = spec.descriptor();
    audit(*nets.encoder, d["encoder"]);
    audit(*nets.generator, d["generator"]);
    audit(*nets.discriminator, d["discriminator"]);
    audit(*nets.mapper, d["mapper"]);
  }
}

TEST(Networks, SameSeedSameParameters) {
  Networks a(tiny_spec(), 3), b(tiny_spec(), 3), c(tiny_spec(), 4);
  auto pa = a.generator->parameters(), pb = b.generator->parameters(), pc = c.generator->parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(torch::equal(pa[i], pb[i]));
  EXPECT_FALSE(torch::equal(pa[0], pc[0]));
}

TEST(Networks, InvalidSpecRejected) {
  NetworkSpec s;
  s.image_size = 60;
  EXPECT_THROW(s.validate(), ConfigError);
  s = NetworkSpec{};
  s.n_scales = 0;
  EXPECT_THROW(Networks(s, 0), ConfigError);
  s = tiny_spec(16);
  s.discriminator_widths = {8, 8, 8};
  EXPECT_THROW(s.validate(), ConfigError);
  s.n_scales = 1;
  EXPECT_NO_THROW(s.validate());
}

TEST(EncodeStyle, ShapeDeterminismAndRowIndependence) {
  NetworkSpec spec;
  Networks nets(spec, 1);
  nets.eval();
  auto imgs = random_images(4, 64, 2);
  auto z = encode_style(nets.encoder, spec, imgs);
  EXPECT_EQ(z.sizes(), (std::vector<std::int64_t>{4, 8}));
  EXPECT_TRUE(torch::equal(z, encode_style(nets.encoder, spec, imgs)));
  EXPECT_EQ(encode_style(nets.encoder, spec, imgs[0]).sizes(), (std::vector<std::int64_t>{1, 8}));
  // Swapping the other rows leaves row 0 unchanged.
  auto swapped = torch::stack({imgs[0], imgs[3], imgs[1], imgs[2]});
  EXPECT_TRUE(torch::allclose(encode_style(nets.encoder, spec, swapped)[0], z[0], 1e-6, 1e-6));
  EXPECT_THROW(encode_style(nets.encoder, spec, random_images(1, 32, 2)), InputError);
  EXPECT_THROW(encode_style(nets.encoder, spec, torch::zeros({1, 1, 64, 64})), InputError);
}

TEST(Generate, ShapeRangeAndStyleInjection) {
  NetworkSpec spec;
  Networks nets(spec, 1);
  nets.eval();
  auto x = random_images(1, 64, 4);
  auto z1 = torch::randn({1, 8}), z2 = torch::randn({1, 8});
  auto y1 = generate(nets.generator, spec, x, z1);
  EXPECT_EQ(y1.sizes(), (std::vector<std::int64_t>{1, 3, 64, 64}));
  EXPECT_LE(y1.abs().max().item<float>(), 1.0f);
  EXPECT_GT((y1 - generate(nets.generator, spec, x, z2)).abs().max().item<float>(), 0.0f);
  EXPECT_TRUE(torch::equal(y1, generate(nets.generator, spec, x, z1)));
  EXPECT_THROW(generate(nets.generator, spec, x, torch::zeros({1, 7})), InputError);
}

TEST(Generate, GradientWrtStyleMatchesFiniteDifferences) {
  auto spec = tiny_spec(16);
  Networks nets(spec, 5);
  nets.to(torch::kFloat64);
  nets.eval();
  auto x = random_images(1, 16, 6, torch::kFloat64);
  auto w = random_images(1, 16, 7, torch::kFloat64);
  auto f = [&](const torch::Tensor& z) { return (generate(nets.generator, spec, x, z) * w).sum(); };
  auto z = torch::randn({1, spec.latent_dim}, torch::kFloat64).requires_grad_();
  f(z).backward();
  auto g = z.grad().clone();
  torch::NoGradGuard no_grad;
  const double h = 1e-6;
  for (int i = 0; i < spec.latent_dim; ++i) {
    auto zp = z.detach().clone(), zm = z.detach().clone();
    zp[0][i] += h;
    zm[0][i] -= h;
    const double fd = (f(zp).item<double>() - f(zm).item<double>()) / (2 * h);
    const double ad = g[0][i].item<double>();
    EXPECT_NEAR(ad, fd, 1e-3 * std::max(std::abs(fd), 1e-6)) << "dim " << i;
  }
}

TEST(Discriminate, ScalesSeeHalvedInputs) {
  NetworkSpec spec;
  Networks nets(spec, 1);
  auto maps = discriminate(nets.discriminator, spec, random_images(2, 64, 1), random_images(2, 64, 2));
  ASSERT_EQ(maps.size(), 3u);
  for (int k = 0; k < 3; ++k) {
    PatchDiscriminator probe(spec.in_channels + spec.out_channels, spec.discriminator_widths);
    const auto s = 64 >> k;
    auto ref = probe->forward(torch::zeros({2, 6, s, s}));
    EXPECT_EQ(maps[k].sizes(), ref.sizes()) << "scale " << k;
  }
  EXPECT_THROW(discriminate(nets.discriminator, spec, random_images(1, 64, 1), random_images(1, 32, 1)),
               InputError);
}

TEST(Discriminate, SingleScaleAndZeroParameters) {
  NetworkSpec spec;
  spec.n_scales = 1;
  Networks nets(spec, 1);
  {
    torch::NoGradGuard no_grad;
    for (auto& p : nets.discriminator->parameters()) p.zero_();
  }
  auto maps = discriminate(nets.discriminator, spec, random_images(1, 64, 1), random_images(1, 64, 2));
  ASSERT_EQ(maps.size(), 1u);
  EXPECT_EQ(maps[0].abs().max().item<float>(), 0.0f);
}

TEST(MapNoise, HiddenWidthsZeroInitAndDeterminism) {
  NetworkSpec spec;
  spec.mapper_zero_init_output = true;
  Networks nets(spec, 1);
  EXPECT_EQ(nets.mapper->hidden_widths(), (std::vector<std::int64_t>{128, 128, 128}));
  auto zero = map_noise(nets.mapper, spec, torch::zeros({1, 8}));
  EXPECT_EQ(zero.abs().max().item<float>(), 0.0f);
  NetworkSpec plain;
  Networks other(plain, 2);
  auto r = torch::randn({3, 8});
  auto a = map_noise(other.mapper, plain, r);
  EXPECT_EQ(a.sizes(), (std::vector<std::int64_t>{3, 8}));
  EXPECT_TRUE(torch::equal(a, map_noise(other.mapper, plain, r)));
  EXPECT_THROW(map_noise(other.mapper, plain, torch::zeros({1, 4})), InputError);
  EXPECT_THROW(map_noise(other.mapper, plain, torch::full({1, 8}, NAN)), InputError);
}
