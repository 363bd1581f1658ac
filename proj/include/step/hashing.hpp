#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include <torch/torch.h>

namespace step {

/// Incremental SHA-256; hex digests everywhere a content hash is stored.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(std::span<const std::byte> bytes);
  Sha256& update(std::string_view text);
  Sha256& update(const torch::Tensor& t);  // dtype, shape and raw bytes
  std::string hex_digest();

 private:
  void* ctx_;
};

std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);

/// Hash of a module's named parameters and buffers, in registration order.
std::string parameter_hash(const torch::nn::Module& module);

}  // namespace step
