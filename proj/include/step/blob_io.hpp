#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace step {

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

// Binary container of named tensors:
//   "STEPBLOB" | u32 version | u64 count | count x record
//   record = u32 name_len | name | i8 dtype | u32 ndim | i64 dims[ndim] | u64 nbytes | bytes
// Little-endian host order; raw element bytes are written untouched so a
// write/read cycle is bit-exact.
void write_blob(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors read_blob(const std::filesystem::path& path);

NamedTensors module_state(const torch::nn::Module& module);

/// Copies `tensors` into the module's parameters and buffers. Every name and
/// shape is validated before any copy happens, so a mismatch leaves the module
/// untouched and raises ShapeError.
/// Validates names, shapes and dtypes against the module without copying.
void check_module_state(const torch::nn::Module& module, const NamedTensors& tensors,
                        const std::string& what);

void load_module_state(torch::nn::Module& module, const NamedTensors& tensors,
                       const std::string& what);

}  // namespace step
