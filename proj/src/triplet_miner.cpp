#include "step/triplet_miner.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "step/blob_io.hpp"
#include "step/errors.hpp"
#include "step/feature_backbone.hpp"
#include "step/hashing.hpp"

namespace step {

void MinerConfig::validate() const {
  require<ConfigError>(k_close > 0 && k_far > 0, "miner: k_close and k_far must be positive");
  require<ConfigError>(k_close < k_far, "miner: k_close (" + std::to_string(k_close) +
                                            ") must be smaller than k_far (" +
                                            std::to_string(k_far) + ")");
  require<ConfigError>(subset_size >= k_far + 1, "miner: subset_size must be at least k_far + 1");
  require<ConfigError>(!metric_id.empty(), "miner: metric_id must be set");
}

std::vector<std::size_t> select_subset(std::size_t corpus_size, const MinerConfig& config) {
  std::vector<std::size_t> all(corpus_size);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto m = std::min<std::size_t>(corpus_size, static_cast<std::size_t>(config.subset_size));
  if (m == corpus_size) return all;
  std::mt19937_64 rng(config.seed);
  // Partial Fisher-Yates with an explicit draw so the subset does not depend
  // on the standard library's shuffle implementation.
  for (std::size_t i = 0; i < m; ++i) {
    const auto j = i + static_cast<std::size_t>(rng() % (corpus_size - i));
    std::swap(all[i], all[j]);
  }
  all.resize(m);
  std::sort(all.begin(), all.end());
  return all;
}

DistanceMatrix compute_distances(const std::vector<std::string>& ids,
                                 std::vector<std::size_t> members, const DistanceFn& metric) {
  DistanceMatrix out;
  out.members = std::move(members);
  const auto m = out.members.size();
  out.values.assign(m * m, 0.0);
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = a + 1; b < m; ++b) {
      const double d = metric(out.members[a], out.members[b]);
      if (std::isnan(d))
        throw MetricError("metric returned NaN for pair (" + ids[out.members[a]] + ", " +
                          ids[out.members[b]] + ")");
      if (d < 0.0)
        throw MetricError("metric returned a negative distance for pair (" + ids[out.members[a]] +
                          ", " + ids[out.members[b]] + ")");
      out.values[a * m + b] = d;
      out.values[b * m + a] = d;
    }
  }
  return out;
}

NeighborIndex index_from_distances(const std::vector<std::string>& ids, const DistanceMatrix& dist,
                                   const MinerConfig& config) {
  config.validate();
  const auto m = dist.size();
  if (m < static_cast<std::size_t>(config.k_far) + 1)
    throw ConfigError("corpus too small for mining: " + std::to_string(m) +
                      " images after subsetting, need at least k_far + 1 = " +
                      std::to_string(config.k_far + 1));
  NeighborIndex index;
  index.k_close = config.k_close;
  index.k_far = config.k_far;
  std::vector<std::size_t> order(m - 1);
  auto id_less = [&](std::size_t x, std::size_t y) { return ids[dist.members[x]] < ids[dist.members[y]]; };
  for (std::size_t a = 0; a < m; ++a) {
    order.clear();
    for (std::size_t b = 0; b < m; ++b)
      if (b != a) order.push_back(b);
    std::partial_sort(order.begin(), order.begin() + config.k_close, order.end(),
                      [&](std::size_t x, std::size_t y) {
                        const double dx = dist.at(a, x), dy = dist.at(a, y);
                        return dx != dy ? dx < dy : id_less(x, y);
                      });
    std::vector<std::string> close;
    for (int k = 0; k < config.k_close; ++k) close.push_back(ids[dist.members[order[k]]]);
    std::partial_sort(order.begin(), order.begin() + config.k_far, order.end(),
                      [&](std::size_t x, std::size_t y) {
                        const double dx = dist.at(a, x), dy = dist.at(a, y);
                        return dx != dy ? dx > dy : id_less(x, y);
                      });
    std::vector<std::string> far;
    for (int k = 0; k < config.k_far; ++k) far.push_back(ids[dist.members[order[k]]]);
    const auto& anchor = ids[dist.members[a]];
    index.anchor_ids.push_back(anchor);
    index.closest.emplace(anchor, std::move(close));
    index.furthest.emplace(anchor, std::move(far));
  }
  return index;
}

NeighborIndex build_neighbor_index(const std::vector<std::string>& ids, const MinerConfig& config,
                                   const DistanceFn& metric) {
  config.validate();
  auto members = select_subset(ids.size(), config);
  if (members.size() < static_cast<std::size_t>(config.k_far) + 1)
    throw ConfigError("corpus too small for mining: " + std::to_string(members.size()) +
                      " images, need at least k_far + 1 = " + std::to_string(config.k_far + 1));
  return index_from_distances(ids, compute_distances(ids, std::move(members), metric), config);
}

std::vector<Triplet> sample_triplets(const NeighborIndex& index, std::int64_t count,
                                     std::mt19937_64& rng) {
  if (count < 0) throw InputError("sample_triplets: count must be non-negative");
  if (count == 0) return {};
  if (index.empty()) throw ConfigError("sample_triplets: neighbor index is empty");
  std::vector<Triplet> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    const auto& anchor = index.anchor_ids[rng() % index.anchor_ids.size()];
    const auto& close = index.closest.at(anchor);
    const auto& far = index.furthest.at(anchor);
    const auto& pos = close[rng() % close.size()];
    const auto& neg = far[rng() % far.size()];
    out.push_back({anchor, pos, neg});
  }
  return out;
}

DistanceFn make_image_metric(const std::string& metric_id, const std::vector<torch::Tensor>& images,
                             const FeatureExtractor* extractor) {
  std::vector<torch::Tensor> rows;
  if (metric_id == "style_distance") {
    if (extractor == nullptr) throw ConfigError("style_distance metric needs a feature extractor");
    torch::NoGradGuard no_grad;
    constexpr std::size_t kChunk = 32;
    for (std::size_t s = 0; s < images.size(); s += kChunk) {
      const auto e = std::min(images.size(), s + kChunk);
      auto batch = torch::stack(std::vector<torch::Tensor>(images.begin() + s, images.begin() + e));
      auto sig = extractor->style_signature(batch).to(torch::kFloat64).contiguous();
      for (std::int64_t r = 0; r < sig.size(0); ++r) rows.push_back(sig[r].contiguous());
    }
  } else if (metric_id == "pixel_l2") {
    for (const auto& img : images) rows.push_back(img.to(torch::kFloat64).reshape({-1}).contiguous());
  } else {
    throw ConfigError("unknown metric_id '" + metric_id + "' (known: style_distance, pixel_l2)");
  }
  const bool mean = metric_id == "pixel_l2";
  return [rows = std::move(rows), mean](std::size_t i, std::size_t j) {
    const auto* a = rows[i].data_ptr<double>();
    const auto* b = rows[j].data_ptr<double>();
    const auto n = rows[i].numel();
    double acc = 0.0;
    for (std::int64_t k = 0; k < n; ++k) acc += (a[k] - b[k]) * (a[k] - b[k]);
    return mean ? acc / static_cast<double>(n) : acc;
  };
}

std::string DistanceCacheKey::digest() const {
  return sha256_hex(corpus_hash + "|" + metric_id + "|" + std::to_string(subset_seed) + "|" +
                    std::to_string(subset_size))
      .substr(0, 24);
}

void save_distance_cache(const std::filesystem::path& dir, const DistanceCacheKey& key,
                         const DistanceMatrix& dist) {
  std::filesystem::create_directories(dir);
  const auto stem = dir / key.digest();
  std::vector<std::int64_t> members(dist.members.begin(), dist.members.end());
  const auto m = static_cast<std::int64_t>(dist.size());
  NamedTensors blob;
  blob.emplace_back("members", torch::tensor(members, torch::kInt64));
  blob.emplace_back("distances", torch::from_blob(const_cast<double*>(dist.values.data()), {m, m},
                                                  torch::kFloat64).clone());
  auto tmp = stem;
  tmp += ".bin.tmp";
  write_blob(tmp, blob);
  std::filesystem::rename(tmp, std::filesystem::path(stem).concat(".bin"));
  nlohmann::json manifest = {{"corpus_hash", key.corpus_hash},
                             {"metric_id", key.metric_id},
                             {"subset_seed", key.subset_seed},
                             {"subset_size", key.subset_size},
                             {"blob_sha256", sha256_file(std::filesystem::path(stem).concat(".bin"))}};
  std::ofstream(std::filesystem::path(stem).concat(".json")) << manifest.dump(2) << "\n";
}

std::optional<DistanceMatrix> load_distance_cache(const std::filesystem::path& dir,
                                                  const DistanceCacheKey& key) {
  const auto stem = dir / key.digest();
  const auto manifest_path = std::filesystem::path(stem).concat(".json");
  const auto blob_path = std::filesystem::path(stem).concat(".bin");
  if (!std::filesystem::exists(manifest_path) || !std::filesystem::exists(blob_path)) return std::nullopt;
  nlohmann::json manifest;
  try {
    std::ifstream(manifest_path) >> manifest;
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
  if (manifest.value("corpus_hash", "") != key.corpus_hash ||
      manifest.value("metric_id", "") != key.metric_id ||
      manifest.value("subset_seed", std::uint64_t{0}) != key.subset_seed ||
      manifest.value("subset_size", std::int64_t{0}) != key.subset_size)
    return std::nullopt;
  if (manifest.value("blob_sha256", "") != sha256_file(blob_path))
    throw IntegrityError("distance cache blob " + blob_path.string() + " fails its manifest hash");
  auto blob = read_blob(blob_path);
  DistanceMatrix dist;
  auto members = blob.at(0).second.contiguous();
  for (std::int64_t i = 0; i < members.numel(); ++i)
    dist.members.push_back(static_cast<std::size_t>(members.data_ptr<std::int64_t>()[i]));
  auto values = blob.at(1).second.contiguous();
  dist.values.assign(values.data_ptr<double>(), values.data_ptr<double>() + values.numel());
  return dist;
}

namespace {

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) out.push_back(item);
  return out;
}

}  // namespace

void write_neighbor_index(const std::filesystem::path& path, const NeighborIndex& index) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path.string());
  os << "# neighbor-index v1\n";
  os << "# k_close=" << index.k_close << " k_far=" << index.k_far << "\n";
  os << "# anchor\tclosest (ascending distance)\tfurthest (descending distance)\n";
  for (const auto& a : index.anchor_ids) {
    for (const auto* list : {&index.closest.at(a), &index.furthest.at(a)})
      for (const auto& id : *list)
        if (id.find_first_of(",\t\n") != std::string::npos)
          throw InputError("image id '" + id + "' contains a separator character");
    os << a << '\t' << join(index.closest.at(a)) << '\t' << join(index.furthest.at(a)) << '\n';
  }
}

NeighborIndex read_neighbor_index(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open neighbor index " + path.string());
  NeighborIndex index;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (auto p = line.find("k_close="); p != std::string::npos) {
        index.k_close = std::stoi(line.substr(p + 8));
        index.k_far = std::stoi(line.substr(line.find("k_far=") + 6));
      }
      continue;
    }
    auto cols = split(line, '\t');
    if (cols.size() != 3)
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 3 tab-separated columns");
    index.anchor_ids.push_back(cols[0]);
    index.closest[cols[0]] = split(cols[1], ',');
    index.furthest[cols[0]] = split(cols[2], ',');
  }
  return index;
}

}  // namespace step
