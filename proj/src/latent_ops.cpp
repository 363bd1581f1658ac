#include "step/latent_ops.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "step/errors.hpp"

namespace step {

torch::Tensor transfer_style(Generator& generator, StyleEncoder& encoder, const NetworkSpec& spec,
                             const torch::Tensor& content_input, const torch::Tensor& style_source) {
  const auto c = content_input.dim() == 3 ? content_input.unsqueeze(0) : content_input;
  const auto s = style_source.dim() == 3 ? style_source.unsqueeze(0) : style_source;
  if (c.size(-1) != spec.image_size || c.size(-2) != spec.image_size)
    throw InputError("transfer_style: content is " + c10::str(c.sizes()) + ", the model was trained at " +
                     std::to_string(spec.image_size));
  return generate(generator, spec, c, encode_style(encoder, spec, s));
}

torch::Tensor interpolate(const torch::Tensor& z1, const torch::Tensor& z2, double t) {
  if (z1.sizes() != z2.sizes())
    throw InputError("interpolate: code shapes differ " + c10::str(z1.sizes()) + " vs " + c10::str(z2.sizes()));
  if (!(t >= 0.0 && t <= 1.0)) throw InputError("interpolate: t = " + std::to_string(t) + " lies outside [0, 1]");
  if (t == 0.0) return z1.clone();
  if (t == 1.0) return z2.clone();
  return (1.0 - t) * z1 + t * z2;
}

EmpiricalPrior EmpiricalPrior::fit(const torch::Tensor& codes) {
  if (codes.dim() != 2 || codes.size(0) < 2)
    throw ConfigError("empirical prior needs at least 2 codes");
  auto z = codes.detach().to(torch::kFloat64);
  EmpiricalPrior p;
  p.mu = z.mean(0);
  p.sigma = z.std(0, /*unbiased=*/true);
  p.max_train_norm = z.norm(2, 1).max().item<double>();
  return p;
}

SampleMode parse_sample_mode(const std::string& name) {
  if (name == "empirical") return SampleMode::empirical;
  if (name == "mapper") return SampleMode::mapper;
  throw ConfigError("unknown sampling mode '" + name + "' (expected empirical or mapper)");
}

torch::Tensor standard_normal(std::mt19937_64& rng, std::int64_t count, std::int64_t dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  auto out = torch::empty({count, dim}, torch::kFloat64);
  auto* p = out.data_ptr<double>();
  for (std::int64_t i = 0; i < count * dim; ++i) p[i] = normal(rng);
  return out;
}

torch::Tensor sample_style(SampleMode mode, const EmpiricalPrior* prior, Mapper* mapper, const NetworkSpec& spec,
                           std::mt19937_64& rng, std::int64_t count) {
  if (mode == SampleMode::empirical) {
    if (prior == nullptr || !prior->mu.defined())
      throw ConfigError("empirical sampling needs a fitted empirical prior");
    auto n = standard_normal(rng, count, prior->mu.size(0));
    auto z = prior->mu.unsqueeze(0) + prior->sigma.unsqueeze(0) * n;
    const auto outside = (z.norm(2, 1) > prior->max_train_norm).sum().item<std::int64_t>();
    if (outside > 0)
      std::cerr << "warning: " << outside << " of " << count
                << " sampled style codes exceed the largest training-code norm (" << prior->max_train_norm
                << ") and may fall outside the learned style distribution\n";
    return z;
  }
  if (mapper == nullptr || mapper->is_empty()) throw ConfigError("mapper sampling needs a trained mapper");
  torch::NoGradGuard no_grad;
  const auto dtype = (*mapper)->parameters().front().scalar_type();
  auto n = standard_normal(rng, count, spec.latent_dim).to(dtype);
  return map_noise(*mapper, spec, n).to(torch::kFloat64);
}

void export_latent_table(const std::filesystem::path& path, const torch::Tensor& codes,
                         const std::vector<std::string>& ids, const std::optional<std::vector<std::string>>& labels,
                         std::int64_t latent_dim) {
  const auto n = static_cast<std::int64_t>(ids.size());
  auto z = codes.defined() && codes.numel() > 0 ? codes.detach().to(torch::kFloat64).contiguous()
                                                 : torch::empty({0, latent_dim}, torch::kFloat64);
  if (z.dim() != 2 || z.size(0) != n)
    throw InputError("export_latent_table: " + std::to_string(z.size(0)) + " codes for " + std::to_string(n) + " ids");
  if (labels && static_cast<std::int64_t>(labels->size()) != n)
    throw InputError("export_latent_table: label count does not match id count");
  const auto d = z.size(0) > 0 ? z.size(1) : latent_dim;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path.string());
  os << "id";
  for (std::int64_t k = 0; k < d; ++k) os << ",z" << k;
  if (labels) os << ",label";
  os << "\n";
  char buf[32];
  for (std::int64_t i = 0; i < n; ++i) {
    os << ids[static_cast<std::size_t>(i)];
    for (std::int64_t k = 0; k < d; ++k) {
      std::snprintf(buf, sizeof(buf), "%.17g", z[i][k].item<double>());
      os << "," << buf;
    }
    if (labels) os << "," << (*labels)[static_cast<std::size_t>(i)];
    os << "\n";
  }
}

LatentTable read_latent_table(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open latent table " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw FormatError("latent table " + path.string() + " has no header");
  std::vector<std::string> header;
  {
    std::istringstream hs(line);
    std::string col;
    while (std::getline(hs, col, ',')) header.push_back(col);
  }
  if (header.empty() || header[0] != "id") throw FormatError("latent table header must start with 'id'");
  const bool has_label = header.back() == "label";
  const auto d = static_cast<std::int64_t>(header.size()) - 1 - (has_label ? 1 : 0);
  LatentTable t;
  if (has_label) t.labels.emplace();
  std::vector<double> values;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');
    t.ids.push_back(cell);
    for (std::int64_t k = 0; k < d; ++k) {
      if (!std::getline(ls, cell, ',')) throw FormatError("short row in latent table " + path.string());
      values.push_back(std::stod(cell));
    }
    if (has_label) {
      std::getline(ls, cell, ',');
      t.labels->push_back(cell);
    }
  }
  t.codes = torch::tensor(values, torch::kFloat64).reshape({static_cast<std::int64_t>(t.ids.size()), d});
  return t;
}

}  // namespace step
