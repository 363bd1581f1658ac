#include <cmath>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "step/errors.hpp"
#include "step/latent_ops.hpp"
#include "support.hpp"

using namespace step;
using step::testing::random_images;
using step::testing::TempDir;
using step::testing::tiny_spec;

namespace {
torch::Tensor vec(std::initializer_list<double> v) { return torch::tensor(std::vector<double>(v), torch::kFloat64); }
}  // namespace

TEST(Interpolate, EndpointsMidpointAndAffinity) {
  auto z1 = vec({0, 0}), z2 = vec({2, 4});
  EXPECT_TRUE(torch::equal(interpolate(z1, z2, 0.0), z1));
  EXPECT_TRUE(torch::equal(interpolate(z1, z2, 1.0), z2));
  EXPECT_TRUE(torch::allclose(interpolate(z1, z2, 0.5), vec({1, 2})));

  auto g = at::make_generator<at::CPUGeneratorImpl>(1);
  for (int k = 0; k < 20; ++k) {
    auto a = torch::randn({8}, g, torch::kFloat64), b = torch::randn({8}, g, torch::kFloat64);
    const double t = (k + 0.5) / 20.0;
    EXPECT_TRUE(torch::allclose(interpolate(a, b, t) + interpolate(b, a, t), a + b, 1e-12, 1e-12));
    EXPECT_TRUE(torch::equal(interpolate(a, b, 0.0), a));
    EXPECT_TRUE(torch::equal(interpolate(a, b, 1.0), b));
  }
}

TEST(Interpolate, RejectsExtrapolationAndShapeMismatch) {
  auto z = vec({1, 2});
  EXPECT_THROW(interpolate(z, z, -0.01), InputError);
  EXPECT_THROW(interpolate(z, z, 1.01), InputError);
  EXPECT_THROW(interpolate(z, z, std::nan("")), InputError);
  EXPECT_THROW(interpolate(z, vec({1, 2, 3}), 0.5), InputError);
}

TEST(EmpiricalPrior, HandExample) {
  auto p = EmpiricalPrior::fit(torch::tensor({0.0, 0.0, 2.0, 2.0}, torch::kFloat64).reshape({2, 2}));
  EXPECT_TRUE(torch::allclose(p.mu, vec({1, 1})));
  EXPECT_TRUE(torch::allclose(p.sigma, vec({std::sqrt(2.0), std::sqrt(2.0)})));
  EXPECT_NEAR(p.max_train_norm, std::sqrt(8.0), 1e-12);
  EXPECT_THROW(EmpiricalPrior::fit(vec({1, 2}).reshape({1, 2})), ConfigError);
}

TEST(SampleStyle, ZeroSigmaReturnsMu) {
  auto p = EmpiricalPrior::fit(torch::tensor({1.0, -2.0, 1.0, -2.0}, torch::kFloat64).reshape({2, 2}));
  std::mt19937_64 rng(3);
  auto z = sample_style(SampleMode::empirical, &p, nullptr, tiny_spec(), rng, 10);
  for (int i = 0; i < 10; ++i) EXPECT_TRUE(torch::equal(z[i], p.mu));
}

TEST(SampleStyle, EmpiricalMomentsWithinThreeStandardErrors) {
  auto g = at::make_generator<at::CPUGeneratorImpl>(4);
  auto codes = torch::randn({200, 8}, g, torch::kFloat64) * torch::linspace(0.1, 2.0, 8, torch::kFloat64) +
               torch::linspace(-3, 3, 8, torch::kFloat64);
  auto p = EmpiricalPrior::fit(codes);
  std::mt19937_64 rng(5);
  const std::int64_t n = 100000;
  auto z = sample_style(SampleMode::empirical, &p, nullptr, tiny_spec(), rng, n);
  auto mean = z.mean(0), sd = z.std(0);
  for (int d = 0; d < 8; ++d) {
    const double s = p.sigma[d].item<double>();
    EXPECT_LE(std::abs(mean[d].item<double>() - p.mu[d].item<double>()), 3 * s / std::sqrt(double(n))) << d;
    EXPECT_LE(std::abs(sd[d].item<double>() - s), 3 * s / std::sqrt(2.0 * double(n))) << d;
  }
}

TEST(SampleStyle, SeededAndModeChecked) {
  auto p = EmpiricalPrior::fit(torch::randn({10, 8}, torch::kFloat64));
  std::mt19937_64 r1(9), r2(9);
  EXPECT_TRUE(torch::equal(sample_style(SampleMode::empirical, &p, nullptr, tiny_spec(), r1, 4),
                           sample_style(SampleMode::empirical, &p, nullptr, tiny_spec(), r2, 4)));
  EXPECT_THROW(sample_style(SampleMode::empirical, nullptr, nullptr, tiny_spec(), r1), ConfigError);
  EXPECT_THROW(sample_style(SampleMode::mapper, nullptr, nullptr, tiny_spec(), r1), ConfigError);
  EXPECT_EQ(parse_sample_mode("mapper"), SampleMode::mapper);
  EXPECT_THROW(parse_sample_mode("prior"), ConfigError);
}

TEST(SampleStyle, MapperModeAppliesTheMapper) {
  auto spec = tiny_spec();
  Networks nets(spec, 6);
  std::mt19937_64 r1(2), r2(2);
  auto z = sample_style(SampleMode::mapper, nullptr, &nets.mapper, spec, r1, 3);
  torch::NoGradGuard no_grad;
  auto expected = nets.mapper->forward(standard_normal(r2, 3, spec.latent_dim).to(torch::kFloat32));
  EXPECT_TRUE(torch::allclose(z, expected.to(torch::kFloat64)));
}

TEST(TransferStyle, EqualsDirectReconstructionPath) {
  auto spec = tiny_spec();
  Networks nets(spec, 7);
  nets.eval();
  torch::NoGradGuard no_grad;
  auto x = random_images(1, 16, 1)[0], y = random_images(1, 16, 2)[0];
  auto out = transfer_style(nets.generator, nets.encoder, spec, x, y);
  auto direct = generate(nets.generator, spec, x, encode_style(nets.encoder, spec, y));
  EXPECT_TRUE(torch::equal(out, direct));
  EXPECT_TRUE(torch::equal(out, transfer_style(nets.generator, nets.encoder, spec, x, y)));
  auto other = transfer_style(nets.generator, nets.encoder, spec, x, random_images(1, 16, 3)[0]);
  EXPECT_GT((out - other).abs().max().item<double>(), 0.0);
  EXPECT_THROW(transfer_style(nets.generator, nets.encoder, spec, random_images(1, 32, 1)[0], y), InputError);
}

TEST(LatentTable, RoundTripWithinTolerance) {
  TempDir dir("lat");
  auto codes = torch::randn({3, 8}, torch::kFloat64) * 1e3;
  std::vector<std::string> ids = {"a", "b", "c"};
  std::vector<std::string> labels = {"0", "1", "1"};
  export_latent_table(dir / "t.csv", codes, ids, labels);
  auto t = read_latent_table(dir / "t.csv");
  EXPECT_EQ(t.ids, ids);
  ASSERT_TRUE(t.labels.has_value());
  EXPECT_EQ(*t.labels, labels);
  EXPECT_LE((t.codes - codes).abs().max().item<double>(), 1e-9);

  std::ifstream in(dir / "t.csv");
  std::string header, row;
  std::getline(in, header);
  EXPECT_EQ(header, "id,z0,z1,z2,z3,z4,z5,z6,z7,label");
  int rows = 0;
  while (std::getline(in, row))
    if (!row.empty()) ++rows;
  EXPECT_EQ(rows, 3);
}

TEST(LatentTable, EmptyAndMismatched) {
  TempDir dir("lat");
  export_latent_table(dir / "e.csv", torch::empty({0, 8}, torch::kFloat64), {});
  std::ifstream in(dir / "e.csv");
  std::string all((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(all, "id,z0,z1,z2,z3,z4,z5,z6,z7\n");
  EXPECT_EQ(read_latent_table(dir / "e.csv").ids.size(), 0u);
  EXPECT_THROW(export_latent_table(dir / "m.csv", torch::zeros({2, 8}), {"a"}), InputError);
  EXPECT_THROW(export_latent_table(dir / "m.csv", torch::zeros({1, 8}), {"a"}, std::vector<std::string>{}),
               InputError);
}
