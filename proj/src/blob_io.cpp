#include "step/blob_io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

#include "step/errors.hpp"

namespace step {
namespace {

constexpr char kMagic[8] = {'S', 'T', 'E', 'P', 'B', 'L', 'O', 'B'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw FormatError("truncated blob " + path.string());
  return v;
}

}  // namespace

void write_blob(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw InputError("cannot write " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put(os, kVersion);
  put(os, static_cast<std::uint64_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    auto t = tensor.detach().cpu().contiguous();
    put(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(os, static_cast<std::int8_t>(t.scalar_type()));
    put(os, static_cast<std::uint32_t>(t.dim()));
    for (auto d : t.sizes()) put(os, static_cast<std::int64_t>(d));
    put(os, static_cast<std::uint64_t>(t.nbytes()));
    os.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
  }
  if (!os) throw InputError("short write to " + path.string());
}

NamedTensors read_blob(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open " + path.string());
  char magic[sizeof(kMagic)];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw FormatError("not a tensor blob: " + path.string());
  if (auto v = get<std::uint32_t>(is, path); v != kVersion)
    throw MigrationError("blob " + path.string() + " has format version " + std::to_string(v));
  const auto count = get<std::uint64_t>(is, path);
  NamedTensors out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is, path);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("truncated blob " + path.string());
    const auto dtype = static_cast<c10::ScalarType>(get<std::int8_t>(is, path));
    const auto ndim = get<std::uint32_t>(is, path);
    if (ndim > 16) throw FormatError("implausible rank in " + path.string());
    std::vector<std::int64_t> dims(ndim);
    for (auto& d : dims) d = get<std::int64_t>(is, path);
    const auto nbytes = get<std::uint64_t>(is, path);
    auto t = torch::empty(dims, torch::TensorOptions().dtype(dtype));
    if (t.nbytes() != nbytes) throw FormatError("size mismatch for '" + name + "' in " + path.string());
    if (!is.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes)))
      throw FormatError("truncated blob " + path.string());
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

NamedTensors module_state(const torch::nn::Module& module) {
  NamedTensors out;
  for (const auto& p : module.named_parameters()) out.emplace_back(p.key(), p.value().detach().clone());
  for (const auto& b : module.named_buffers()) out.emplace_back(b.key(), b.value().detach().clone());
  return out;
}

void check_module_state(const torch::nn::Module& module, const NamedTensors& tensors,
                        const std::string& what) {
  std::map<std::string, torch::Tensor> targets;
  for (const auto& p : module.named_parameters()) targets.emplace(p.key(), p.value());
  for (const auto& b : module.named_buffers()) targets.emplace(b.key(), b.value());

  std::map<std::string, const torch::Tensor*> source;
  for (const auto& [name, t] : tensors) source.emplace(name, &t);

  for (const auto& [name, target] : targets) {
    auto it = source.find(name);
    if (it == source.end()) throw ShapeError(what + ": checkpoint lacks tensor '" + name + "'");
    if (it->second->sizes() != target.sizes())
      throw ShapeError(what + ": tensor '" + name + "' has shape " + c10::str(it->second->sizes()) +
                       " but the network expects " + c10::str(target.sizes()));
    if (it->second->scalar_type() != target.scalar_type())
      throw ShapeError(what + ": tensor '" + name + "' has dtype " +
                       c10::toString(it->second->scalar_type()));
  }
  for (const auto& [name, t] : source)
    if (!targets.contains(name)) throw ShapeError(what + ": unexpected tensor '" + name + "'");
}

void load_module_state(torch::nn::Module& module, const NamedTensors& tensors,
                       const std::string& what) {
  check_module_state(module, tensors, what);
  std::map<std::string, const torch::Tensor*> source;
  for (const auto& [name, t] : tensors) source.emplace(name, &t);
  torch::NoGradGuard no_grad;
  for (auto& p : module.named_parameters()) p.value().copy_(*source.at(p.key()));
  for (auto& b : module.named_buffers()) b.value().copy_(*source.at(b.key()));
}

}  // namespace step
