#include <cmath>

#include <gtest/gtest.h>

#include "step/optim.hpp"

using namespace step;

TEST(Adam, FirstStepMatchesHandComputedUpdate) {
  auto p = torch::tensor({1.0, -2.0}, torch::kFloat64).requires_grad_();
  Adam opt({p}, {0.1, 0.0, 0.99, 1e-8});
  (p * torch::tensor({3.0, 0.5}, torch::kFloat64)).sum().backward();
  opt.step();
  // beta1 = 0: m = g; v_hat = g^2, so each coordinate moves by lr * g / (|g| + eps).
  EXPECT_NEAR(p[0].item<double>(), 1.0 - 0.1 * 3.0 / (3.0 + 1e-8), 1e-12);
  EXPECT_NEAR(p[1].item<double>(), -2.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
}

TEST(Adam, MatchesReferenceOverSeveralSteps) {
  auto p = torch::tensor({0.5}, torch::kFloat64).requires_grad_();
  const double lr = 0.01, b1 = 0.5, b2 = 0.99, eps = 1e-8;
  Adam opt({p}, {lr, b1, b2, eps});
  double x = 0.5, m = 0, v = 0;
  for (int t = 1; t <= 5; ++t) {
    opt.zero_grad();
    (p * p).sum().backward();
    opt.step();
    const double g = 2 * x;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    x -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    EXPECT_NEAR(p.item<double>(), x, 1e-12);
  }
}

TEST(Adam, MapperLearningRateAtStep100) {
  auto p = torch::zeros({1}).requires_grad_();
  Adam opt({p}, {0.01, 0.5, 0.99, 1e-8, 50, 0.7});
  EXPECT_DOUBLE_EQ(opt.current_lr(), 0.01);
  for (int i = 0; i < 100; ++i) {
    opt.zero_grad();
    p.sum().backward();
    opt.step();
  }
  EXPECT_NEAR(opt.current_lr(), 0.0049, 1e-15);
}

TEST(Adam, StateRoundTripContinuesIdentically) {
  auto run = [](int split, bool reload) {
    auto p = torch::tensor({1.0, 2.0, 3.0}, torch::kFloat64).requires_grad_();
    Adam opt({p}, {0.05, 0.0, 0.99, 1e-8});
    for (int i = 0; i < 10; ++i) {
      if (reload && i == split) {
        auto saved = opt.state();
        Adam fresh({p}, {0.05, 0.0, 0.99, 1e-8});
        fresh.load_state(saved);
        opt = std::move(fresh);
      }
      opt.zero_grad();
      (p * p * p).sum().backward();
      opt.step();
    }
    return p.detach().clone();
  };
  EXPECT_TRUE(torch::equal(run(4, false), run(4, true)));
}

TEST(Adam, FrozenParametersWithoutGradientsStayPut) {
  auto a = torch::ones({2}).requires_grad_();
  auto b = torch::ones({2}).requires_grad_(false);
  Adam opt({a, b}, {0.1});
  a.sum().backward();
  opt.step();
  EXPECT_TRUE(torch::equal(b, torch::ones({2})));
  EXPECT_FALSE(torch::equal(a, torch::ones({2})));
}
