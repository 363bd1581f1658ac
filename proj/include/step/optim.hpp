#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "step/blob_io.hpp"

namespace step {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double eps = 1e-8;
  /// Multiply lr by `decay_rate` after every `decay_every` steps (0 disables).
  std::int64_t decay_every = 0;
  double decay_rate = 1.0;
};

/// Adam with optional step decay. State is explicit so checkpoints can store
/// it byte for byte.
class Adam {
 public:
  Adam(std::vector<torch::Tensor> params, AdamOptions options);

  void zero_grad();
  void step();

  /// Learning rate that the next call to step() will use.
  double current_lr() const;
  std::int64_t steps_taken() const { return step_; }
  const AdamOptions& options() const { return options_; }

  NamedTensors state() const;
  void load_state(const NamedTensors& state);

 private:
  std::vector<torch::Tensor> params_;
  std::vector<torch::Tensor> exp_avg_;
  std::vector<torch::Tensor> exp_avg_sq_;
  AdamOptions options_;
  std::int64_t step_ = 0;
};

}  // namespace step
