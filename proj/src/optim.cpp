#include "step/optim.hpp"

#include <cmath>

#include "step/errors.hpp"

namespace step {

Adam::Adam(std::vector<torch::Tensor> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  require<ConfigError>(options_.lr > 0.0, "Adam learning rate must be positive");
  require<ConfigError>(options_.decay_rate > 0.0 && options_.decay_rate <= 1.0,
                       "Adam decay rate must lie in (0, 1]");
  for (const auto& p : params_) {
    exp_avg_.push_back(torch::zeros_like(p));
    exp_avg_sq_.push_back(torch::zeros_like(p));
  }
}

void Adam::zero_grad() {
  for (auto& p : params_)
    if (p.grad().defined()) p.mutable_grad() = torch::Tensor();
}

double Adam::current_lr() const {
  if (options_.decay_every <= 0) return options_.lr;
  return options_.lr * std::pow(options_.decay_rate, static_cast<double>(step_ / options_.decay_every));
}

void Adam::step() {
  torch::NoGradGuard no_grad;
  const double lr = current_lr();
  ++step_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& g = params_[i].grad();
    if (!g.defined()) continue;
    exp_avg_[i].mul_(options_.beta1).add_(g, 1.0 - options_.beta1);
    exp_avg_sq_[i].mul_(options_.beta2).addcmul_(g, g, 1.0 - options_.beta2);
    auto denom = (exp_avg_sq_[i] / bc2).sqrt_().add_(options_.eps);
    params_[i].addcdiv_(exp_avg_[i], denom, -lr / bc1);
  }
}

NamedTensors Adam::state() const {
  NamedTensors out;
  out.emplace_back("step", torch::tensor(step_, torch::kInt64));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.emplace_back("exp_avg." + std::to_string(i), exp_avg_[i].clone());
    out.emplace_back("exp_avg_sq." + std::to_string(i), exp_avg_sq_[i].clone());
  }
  return out;
}

void Adam::load_state(const NamedTensors& state) {
  if (state.size() != 1 + 2 * params_.size())
    throw ShapeError("optimizer state holds " + std::to_string(state.size()) +
                     " tensors, expected " + std::to_string(1 + 2 * params_.size()));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& m = state[1 + 2 * i].second;
    const auto& v = state[2 + 2 * i].second;
    if (m.sizes() != params_[i].sizes() || v.sizes() != params_[i].sizes())
      throw ShapeError("optimizer state shape mismatch at parameter " + std::to_string(i));
  }
  step_ = state[0].second.item<std::int64_t>();
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    exp_avg_[i].copy_(state[1 + 2 * i].second);
    exp_avg_sq_[i].copy_(state[2 + 2 * i].second);
  }
}

}  // namespace step
