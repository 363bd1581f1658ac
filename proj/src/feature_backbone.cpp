#include "step/feature_backbone.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "step/blob_io.hpp"
#include "step/errors.hpp"
#include "step/hashing.hpp"

namespace step {
namespace F = torch::nn::functional;

PerceptualConfig PerceptualConfig::reconstruction(std::string backbone_id) {
  PerceptualConfig c;
  for (int i = 1; i <= 5; ++i) {
    c.layer_ids.push_back("conv" + std::to_string(i) + "_2");
    c.layer_weights.push_back(1.0 / std::pow(2.0, 6 - i));
  }
  c.backbone_id = std::move(backbone_id);
  return c;
}

PerceptualConfig PerceptualConfig::mining(std::string backbone_id) {
  auto c = reconstruction(std::move(backbone_id));
  std::fill(c.layer_weights.begin(), c.layer_weights.end(), 1.0);
  return c;
}

void PerceptualConfig::validate() const {
  require<ConfigError>(!layer_ids.empty(), "perceptual config needs at least one layer");
  require<ConfigError>(layer_ids.size() == layer_weights.size(),
                       "perceptual config: layer_weights must match layer_ids in length");
  for (double w : layer_weights)
    require<ConfigError>(w >= 0.0 && std::isfinite(w), "perceptual layer weights must be non-negative");
}

BackboneArch random_conv_arch() {
  return BackboneArch{{16, 32, 48, 64, 64}, {2, 2, 2, 2, 2}, false, false, false};
}

BackboneArch vgg16_arch() {
  return BackboneArch{{64, 128, 256, 512, 512}, {2, 2, 3, 3, 3}, true, true, true};
}

BackboneImpl::BackboneImpl(BackboneArch arch) : arch_(std::move(arch)) {
  require<ConfigError>(arch_.widths.size() == arch_.convs_per_block.size() && !arch_.widths.empty(),
                       "backbone: widths and convs_per_block must be non-empty and aligned");
  int in = 3;
  for (std::size_t b = 0; b < arch_.widths.size(); ++b) {
    std::vector<torch::nn::Conv2d> block;
    for (int c = 0; c < arch_.convs_per_block[b]; ++c) {
      auto conv = torch::nn::Conv2d(
          torch::nn::Conv2dOptions(in, arch_.widths[b], 3).padding(1).bias(arch_.bias));
      register_module("conv" + std::to_string(b + 1) + "_" + std::to_string(c + 1), conv);
      block.push_back(conv);
      in = arch_.widths[b];
    }
    blocks_.push_back(std::move(block));
  }
}

std::vector<std::string> BackboneImpl::layer_ids() const {
  std::vector<std::string> ids;
  for (std::size_t b = 0; b < blocks_.size(); ++b)
    for (std::size_t c = 0; c < blocks_[b].size(); ++c)
      ids.push_back("conv" + std::to_string(b + 1) + "_" + std::to_string(c + 1));
  return ids;
}

bool BackboneImpl::has_layer(const std::string& id) const {
  const auto ids = layer_ids();
  return std::find(ids.begin(), ids.end(), id) != ids.end();
}

std::int64_t BackboneImpl::min_input_size(const std::string& id) const {
  // Block b (1-based) sees the input after b-1 halvings.
  const auto block = std::stoi(id.substr(4, id.find('_') - 4));
  return std::int64_t{1} << (block - 1);
}

std::vector<torch::Tensor> BackboneImpl::forward(const torch::Tensor& images,
                                                 const std::vector<std::string>& ids) {
  std::map<std::string, std::size_t> wanted;
  for (std::size_t i = 0; i < ids.size(); ++i) wanted.emplace(ids[i], i);
  std::vector<torch::Tensor> out(ids.size());
  std::size_t remaining = wanted.size();

  auto x = images;
  if (arch_.imagenet_normalize) {
    auto opts = images.options();
    auto mean = torch::tensor({0.485, 0.456, 0.406}, opts).view({1, 3, 1, 1});
    auto stdev = torch::tensor({0.229, 0.224, 0.225}, opts).view({1, 3, 1, 1});
    x = ((x + 1.0) * 0.5 - mean) / stdev;
  }
  for (std::size_t b = 0; b < blocks_.size() && remaining > 0; ++b) {
    if (b > 0) {
      x = arch_.max_pool ? F::max_pool2d(x, F::MaxPool2dFuncOptions(2))
                         : F::avg_pool2d(x, F::AvgPool2dFuncOptions(2));
    }
    for (std::size_t c = 0; c < blocks_[b].size() && remaining > 0; ++c) {
      x = torch::relu(blocks_[b][c]->forward(x));
      auto it = wanted.find("conv" + std::to_string(b + 1) + "_" + std::to_string(c + 1));
      if (it != wanted.end()) {
        out[it->second] = x;
        --remaining;
      }
    }
  }
  return out;
}

BackboneRegistry BackboneRegistry::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open weights registry " + file.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("weights registry " + file.string() + ": " + e.what());
  }
  BackboneRegistry reg;
  if (!j.contains("backbones") || !j["backbones"].is_object())
    throw ConfigError("weights registry " + file.string() + " lacks a 'backbones' object");
  for (const auto& [id, entry] : j["backbones"].items()) {
    Entry e;
    e.path = file.parent_path() / entry.at("path").get<std::string>();
    e.sha256 = entry.at("sha256").get<std::string>();
    e.arch = entry.value("arch", std::string("vgg16"));
    reg.add(id, std::move(e));
  }
  return reg;
}

const BackboneRegistry::Entry* BackboneRegistry::find(const std::string& id) const {
  auto it = entries_.find(id);
  return it == entries_.end() ? nullptr : &it->second;
}

Backbone make_random_conv_backbone(std::uint64_t seed) {
  Backbone net(random_conv_arch());
  std::mt19937_64 rng(seed);
  torch::NoGradGuard no_grad;
  for (auto& p : net->parameters()) {
    const auto fan_in = p.numel() / p.size(0);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    auto acc = p.data_ptr<float>();
    for (std::int64_t i = 0; i < p.numel(); ++i) acc[i] = static_cast<float>(dist(rng));
  }
  for (auto& p : net->parameters()) p.set_requires_grad(false);
  net->eval();
  return net;
}

Backbone resolve_backbone(const std::string& id, const BackboneRegistry& registry) {
  if (id == "random-conv") return make_random_conv_backbone();
  const auto* entry = registry.find(id);
  if (entry == nullptr)
    throw ConfigError("unknown backbone_id '" + id + "' (not built in and not in the weights registry)");
  if (!std::filesystem::exists(entry->path))
    throw ConfigError("backbone '" + id + "' weights not found at " + entry->path.string());
  if (auto h = sha256_file(entry->path); h != entry->sha256)
    throw IntegrityError("backbone '" + id + "' weights hash " + h + " does not match registry " +
                         entry->sha256);
  BackboneArch arch;
  if (entry->arch == "vgg16") arch = vgg16_arch();
  else if (entry->arch == "random-conv") arch = random_conv_arch();
  else throw ConfigError("backbone '" + id + "': unknown arch '" + entry->arch + "'");
  Backbone net(arch);
  load_module_state(*net, read_blob(entry->path), "backbone '" + id + "'");
  for (auto& p : net->parameters()) p.set_requires_grad(false);
  net->eval();
  return net;
}

FeatureExtractor::FeatureExtractor(PerceptualConfig config, Backbone backbone)
    : config_(std::move(config)), backbone_(std::move(backbone)) {
  config_.validate();
  for (const auto& id : config_.layer_ids)
    if (!backbone_->has_layer(id))
      throw ConfigError("unknown layer_id '" + id + "' for backbone '" + config_.backbone_id + "'");
}

FeatureExtractor::FeatureExtractor(PerceptualConfig config, const BackboneRegistry& registry)
    : FeatureExtractor(config, resolve_backbone(config.backbone_id, registry)) {}

void FeatureExtractor::to(torch::Dtype dtype) { backbone_->to(dtype); }

FeatureStack FeatureExtractor::extract(const torch::Tensor& images) const {
  auto x = images.dim() == 3 ? images.unsqueeze(0) : images;
  if (x.dim() != 4 || x.size(1) != 3)
    throw InputError("extract_features expects 3 x H x W images, got " + c10::str(images.sizes()));
  for (const auto& id : config_.layer_ids) {
    const auto min = backbone_->min_input_size(id);
    if (x.size(2) < min || x.size(3) < min)
      throw InputError("image " + c10::str(x.sizes()) + " is smaller than layer " + id +
                       " requires (" + std::to_string(min) + ")");
  }
  if (!torch::isfinite(x).all().item<bool>()) throw InputError("non-finite values in input image");
  auto acts = backbone_.ptr()->forward(x, config_.layer_ids);
  FeatureStack stack;
  for (std::size_t i = 0; i < acts.size(); ++i) stack.layers.push_back({config_.layer_ids[i], acts[i]});
  return stack;
}

GramDescriptor FeatureExtractor::grams(const torch::Tensor& images) const {
  GramDescriptor g;
  for (auto& layer : extract(images).layers) g.grams.push_back({layer.id, gram(layer.activation)});
  return g;
}

torch::Tensor FeatureExtractor::style_distance(const torch::Tensor& a, const torch::Tensor& b) const {
  if (a.sizes() != b.sizes())
    throw InputError("style_distance: image shapes differ " + c10::str(a.sizes()) + " vs " +
                     c10::str(b.sizes()));
  return gram_distance(grams(a), grams(b), config_.layer_weights);
}

double FeatureExtractor::style_distance_scalar(const torch::Tensor& a, const torch::Tensor& b) const {
  torch::NoGradGuard no_grad;
  return style_distance(a, b).sum().item<double>();
}

torch::Tensor FeatureExtractor::style_signature(const torch::Tensor& images) const {
  auto g = grams(images);
  std::vector<torch::Tensor> parts;
  for (std::size_t j = 0; j < g.grams.size(); ++j) {
    const auto& m = g.grams[j].gram;
    parts.push_back(m.reshape({m.size(0), -1}) * std::sqrt(config_.layer_weights[j]));
  }
  return torch::cat(parts, 1);
}

torch::Tensor gram(const torch::Tensor& activation) {
  auto a = activation.dim() == 3 ? activation.unsqueeze(0) : activation;
  if (a.dim() != 4) throw InputError("gram expects C x H x W or N x C x H x W activations");
  const auto hw = a.size(2) * a.size(3);
  if (hw < 1) throw InputError("gram of an activation with empty spatial extent");
  auto f = a.reshape({a.size(0), a.size(1), hw});
  auto g = torch::bmm(f, f.transpose(1, 2)) / static_cast<double>(hw);
  return activation.dim() == 3 ? g.squeeze(0) : g;
}

torch::Tensor gram_distance(const GramDescriptor& a, const GramDescriptor& b,
                            const std::vector<double>& weights) {
  if (a.grams.size() != b.grams.size() || a.grams.size() != weights.size())
    throw InputError("gram_distance: descriptors and weights disagree in layer count");
  torch::Tensor total;
  for (std::size_t j = 0; j < a.grams.size(); ++j) {
    auto d = (a.grams[j].gram - b.grams[j].gram);
    if (d.dim() == 2) d = d.unsqueeze(0);
    auto term = d.pow(2).sum({1, 2}) * weights[j];
    total = total.defined() ? total + term : term;
  }
  return total;
}

}  // namespace step
