#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include <torch/torch.h>

#include "step/networks.hpp"

namespace step::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("step_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Uniform images in [-1, 1].
inline torch::Tensor random_images(std::int64_t n, std::int64_t size, std::uint64_t seed,
                                   torch::Dtype dtype = torch::kFloat32) {
  auto g = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::rand({n, 3, size, size}, g, torch::TensorOptions().dtype(dtype)) * 2 - 1;
}

/// Small architecture used by tests that need speed more than capacity.
inline NetworkSpec tiny_spec(int image_size = 16) {
  NetworkSpec spec;
  spec.image_size = image_size;
  spec.encoder_widths = {8, 8};
  spec.generator_widths = {8, 8};
  spec.discriminator_widths = {8, 8};
  spec.n_scales = 2;
  spec.mapper_hidden = {16, 16, 16};
  return spec;
}

}  // namespace step::testing
