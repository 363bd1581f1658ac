#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace step {

class FeatureExtractor;

struct MinerConfig {
  int k_close = 5;
  int k_far = 13;
  std::int64_t subset_size = 8000;
  std::string metric_id = "style_distance";
  std::uint64_t seed = 0;

  /// Rejects k_close >= k_far and subsets too small to hold k_far neighbors.
  void validate() const;
};

/// Closest/furthest neighbor lists per anchor. Ids are corpus image ids.
struct NeighborIndex {
  int k_close = 0;
  int k_far = 0;
  std::vector<std::string> anchor_ids;
  std::map<std::string, std::vector<std::string>> closest;   // ascending distance
  std::map<std::string, std::vector<std::string>> furthest;  // descending distance

  bool empty() const { return anchor_ids.empty(); }
  bool operator==(const NeighborIndex&) const = default;
};

struct Triplet {
  std::string anchor_id;
  std::string positive_id;
  std::string negative_id;
  bool operator==(const Triplet&) const = default;
};

/// Distance between corpus positions i and j; must be symmetric and >= 0.
using DistanceFn = std::function<double(std::size_t, std::size_t)>;

/// Pairwise distances over a subset of the corpus, row-major m x m.
struct DistanceMatrix {
  std::vector<std::size_t> members;  // corpus positions, ascending
  std::vector<double> values;

  std::size_t size() const { return members.size(); }
  double at(std::size_t a, std::size_t b) const { return values[a * members.size() + b]; }
};

/// Seeded random subset of min(subset_size, corpus_size) positions, sorted.
std::vector<std::size_t> select_subset(std::size_t corpus_size, const MinerConfig& config);

/// Evaluates every unordered pair once. A NaN raises MetricError naming the
/// offending ids.
DistanceMatrix compute_distances(const std::vector<std::string>& ids,
                                 std::vector<std::size_t> members, const DistanceFn& metric);

/// Exact k-closest / k-furthest lists from a distance matrix. Ties are broken
/// by ascending image id.
NeighborIndex index_from_distances(const std::vector<std::string>& ids, const DistanceMatrix& dist,
                                   const MinerConfig& config);

NeighborIndex build_neighbor_index(const std::vector<std::string>& ids, const MinerConfig& config,
                                   const DistanceFn& metric);

/// `count` triplets: anchor uniform over anchors, positive uniform over its
/// closest list, negative uniform over its furthest list. count == 0 yields
/// an empty list; a negative count is an input error.
std::vector<Triplet> sample_triplets(const NeighborIndex& index, std::int64_t count,
                                     std::mt19937_64& rng);

/// Named image metrics for mining. "style_distance" uses the extractor's
/// Gram signatures; "pixel_l2" is the mean squared pixel difference (a
/// non-style metric). Images are 3 x H x W in [-1, 1].
DistanceFn make_image_metric(const std::string& metric_id, const std::vector<torch::Tensor>& images,
                             const FeatureExtractor* extractor);

// ---- persistence --------------------------------------------------------

struct DistanceCacheKey {
  std::string corpus_hash;
  std::string metric_id;
  std::uint64_t subset_seed = 0;
  std::int64_t subset_size = 0;

  std::string digest() const;
};

/// Writes `<dir>/<digest>.bin` (matrix blob) and `<dir>/<digest>.json` (manifest).
void save_distance_cache(const std::filesystem::path& dir, const DistanceCacheKey& key,
                         const DistanceMatrix& dist);
/// Returns nullopt when no cache entry exists or its manifest disagrees with `key`.
std::optional<DistanceMatrix> load_distance_cache(const std::filesystem::path& dir,
                                                  const DistanceCacheKey& key);

void write_neighbor_index(const std::filesystem::path& path, const NeighborIndex& index);
NeighborIndex read_neighbor_index(const std::filesystem::path& path);

}  // namespace step
