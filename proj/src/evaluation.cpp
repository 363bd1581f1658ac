#include "step/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "step/errors.hpp"

namespace step {
namespace F = torch::nn::functional;

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes())
    throw InputError("psnr: shapes differ " + c10::str(a.sizes()) + " vs " + c10::str(b.sizes()));
  const double mse = (to_8bit(a) - to_8bit(b)).pow(2).mean().item<double>();
  if (mse == 0.0) return kInfinitePsnr;
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

double stable_sum(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  while (values.size() > 1) {
    std::vector<double> next;
    next.reserve((values.size() + 1) / 2);
    for (std::size_t i = 0; i + 1 < values.size(); i += 2) next.push_back(values[i] + values[i + 1]);
    if (values.size() % 2) next.push_back(values.back());
    values = std::move(next);
  }
  return values.empty() ? 0.0 : values.front();
}

PerceptualDistance::PerceptualDistance(FeatureExtractor extractor) : extractor_(std::move(extractor)) {
  const auto& w = extractor_.config().layer_weights;
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  require<ConfigError>(total > 0.0, "perceptual distance needs a positive layer weight");
  for (double x : w) weights_.push_back(x / total);
}

std::vector<torch::Tensor> PerceptualDistance::features(const torch::Tensor& images) const {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> out;
  for (auto& layer : extractor_.extract(images).layers) {
    auto f = layer.activation.to(torch::kFloat64);
    auto norm = f.pow(2).sum(1, true).sqrt();
    out.push_back(f / (norm + 1e-10));
  }
  return out;
}

double PerceptualDistance::between(const std::vector<torch::Tensor>& a, std::int64_t i,
                                   const std::vector<torch::Tensor>& b, std::int64_t j) const {
  double total = 0.0;
  for (std::size_t l = 0; l < a.size(); ++l)
    total += weights_[l] * (a[l][i] - b[l][j]).pow(2).sum(0).mean().item<double>();
  return total;
}

std::vector<double> PerceptualDistance::operator()(const torch::Tensor& a, const torch::Tensor& b) const {
  if (a.sizes() != b.sizes())
    throw InputError("perceptual_distance: shapes differ " + c10::str(a.sizes()) + " vs " + c10::str(b.sizes()));
  const auto fa = features(a), fb = features(b);
  std::vector<double> out;
  for (std::int64_t i = 0; i < fa[0].size(0); ++i) out.push_back(between(fa, i, fb, i));
  return out;
}

double PerceptualDistance::scalar(const torch::Tensor& a, const torch::Tensor& b) const {
  const auto d = (*this)(a, b);
  return stable_sum(d) / static_cast<double>(d.size());
}

DiversityResult diversity_score(Generator& generator, const NetworkSpec& spec,
                                const std::vector<torch::Tensor>& inputs,
                                const std::vector<torch::Tensor>& codes, const PerceptualDistance& metric,
                                int n_inputs) {
  if (n_inputs < 1 || inputs.size() < static_cast<std::size_t>(n_inputs))
    throw ConfigError("diversity_score: needs " + std::to_string(n_inputs) + " inputs, only " +
                      std::to_string(inputs.size()) + " available");
  if (codes.size() < static_cast<std::size_t>(n_inputs))
    throw ConfigError("diversity_score: one code set per input is required");
  torch::NoGradGuard no_grad;
  DiversityResult result;
  for (int i = 0; i < n_inputs; ++i) {
    const auto& z = codes[static_cast<std::size_t>(i)];
    const auto s = z.size(0);
    if (s < 2) throw ConfigError("diversity_score: styles_per_input must be at least 2");
    auto x = inputs[static_cast<std::size_t>(i)].unsqueeze(0).expand({s, -1, -1, -1}).contiguous();
    auto out = generate(generator, spec, x, z);
    const auto feats = metric.features(out);
    std::vector<double> pairs;
    for (std::int64_t a = 0; a < s; ++a)
      for (std::int64_t b = a + 1; b < s; ++b) pairs.push_back(metric.between(feats, a, feats, b));
    result.pair_evaluations += static_cast<std::int64_t>(pairs.size());
    result.per_input.push_back(stable_sum(pairs) / static_cast<double>(pairs.size()));
  }
  result.score = stable_sum(result.per_input) / static_cast<double>(result.per_input.size());
  return result;
}

nlohmann::json EvalReport::to_json() const {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json("inf"); };
  return {{"split", split},
          {"psnr_mean", num(psnr_mean)},
          {"psnr_infinite", psnr_infinite},
          {"perceptual_mean", perceptual_mean},
          {"diversity_transfer", diversity_transfer},
          {"diversity_sampling", diversity_sampling},
          {"n_samples", n_samples}};
}

EvalReport eval_reconstruction(const PairedDataset& split, Generator& generator, StyleEncoder& encoder,
                               const NetworkSpec& spec, const PerceptualDistance& metric,
                               const std::function<void(const SampleRecord&)>& record, int psnr_resolution) {
  if (split.empty()) throw InputError("eval_reconstruction: empty split");
  torch::NoGradGuard no_grad;
  std::vector<double> psnrs, percs;
  EvalReport report;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto s = split.get(i);
    auto z = encode_style(encoder, spec, s.target_image);
    auto fake = generate(generator, spec, s.input_image, z)[0];
    SampleRecord r;
    r.id = s.id;
    if (psnr_resolution > 0 && psnr_resolution != fake.size(-1)) {
      const auto opts = F::InterpolateFuncOptions()
                            .size(std::vector<std::int64_t>{psnr_resolution, psnr_resolution})
                            .mode(torch::kBilinear)
                            .align_corners(false);
      r.psnr = psnr(F::interpolate(fake.unsqueeze(0), opts), F::interpolate(s.target_image.unsqueeze(0), opts));
    } else {
      r.psnr = psnr(fake, s.target_image);
    }
    r.perceptual = metric.scalar(fake.unsqueeze(0), s.target_image.unsqueeze(0));
    if (std::isfinite(r.psnr)) psnrs.push_back(r.psnr);
    else ++report.psnr_infinite;
    percs.push_back(r.perceptual);
    if (record) record(r);
  }
  report.n_samples = static_cast<std::int64_t>(split.size());
  report.psnr_mean = psnrs.empty() ? kInfinitePsnr : stable_sum(psnrs) / static_cast<double>(psnrs.size());
  report.perceptual_mean = stable_sum(percs) / static_cast<double>(percs.size());
  return report;
}

double silhouette_score(const torch::Tensor& codes, const std::vector<int>& labels) {
  auto z = codes.detach().to(torch::kFloat64).contiguous();
  const auto n = z.size(0);
  if (static_cast<std::size_t>(n) != labels.size()) throw InputError("silhouette_score: label count mismatch");
  auto dist = torch::cdist(z, z).contiguous();
  const double* d = dist.data_ptr<double>();
  std::map<int, std::int64_t> sizes;
  for (int l : labels) ++sizes[l];
  if (sizes.size() < 2) throw InputError("silhouette_score: needs at least two clusters");
  std::vector<double> s(static_cast<std::size_t>(n), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    std::map<int, double> sum;
    for (std::int64_t j = 0; j < n; ++j)
      if (j != i) sum[labels[j]] += d[i * n + j];
    const int own = labels[i];
    if (sizes[own] < 2) continue;  // singleton clusters score 0
    const double a = sum[own] / static_cast<double>(sizes[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [label, count] : sizes)
      if (label != own) b = std::min(b, sum[label] / static_cast<double>(count));
    const double m = std::max(a, b);
    s[i] = m > 0.0 ? (b - a) / m : 0.0;
  }
  return stable_sum(s) / static_cast<double>(n);
}

}  // namespace step
