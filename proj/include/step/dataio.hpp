#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace step {

/// Reads an 8-bit PNG as a float 3 x H x W tensor in [-1, 1] (RGB order).
torch::Tensor read_image(const std::filesystem::path& path);
/// Writes a 3 x H x W tensor in [-1, 1] as a lossless 8-bit RGB PNG.
void write_image(const std::filesystem::path& path, const torch::Tensor& image);
/// Maps [-1, 1] to 8-bit levels: round((x + 1) * 127.5) after clamping.
torch::Tensor to_8bit(const torch::Tensor& image);

/// Tiles images (each 3 x H x W) into a rows x cols grid.
torch::Tensor image_grid(const std::vector<torch::Tensor>& images, std::int64_t cols);

enum class DatasetLayout { side_by_side, two_dirs };
DatasetLayout parse_layout(const std::string& name);

struct PairedSample {
  std::string id;
  torch::Tensor input_image;
  torch::Tensor target_image;
};

/// Paired image dataset with lexicographic id order. Side-by-side files hold
/// input (left half) and target (right half); two_dirs holds A/<name> and
/// B/<name>. Images load lazily unless preload() was called. A `train` or
/// `val` subdirectory is used when the split is requested and exists.
class PairedDataset {
 public:
  PairedDataset() = default;
  static PairedDataset open(const std::filesystem::path& root, DatasetLayout layout,
                            const std::string& split = "");

  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  const std::vector<std::string>& ids() const { return ids_; }
  const std::filesystem::path& root() const { return root_; }

  PairedSample get(std::size_t i) const;
  torch::Tensor input(std::size_t i) const { return get(i).input_image; }
  torch::Tensor target(std::size_t i) const { return get(i).target_image; }

  /// Loads every sample into memory; later get() calls are copies-free reads.
  void preload();

  /// Per-sample style labels from `labels.csv` (id,label) if present.
  std::optional<std::vector<int>> labels() const;

  /// Hash of ids and file contents, used to key distance caches.
  std::string content_hash() const;

 private:
  std::filesystem::path root_;
  DatasetLayout layout_ = DatasetLayout::side_by_side;
  std::vector<std::string> ids_;
  std::vector<std::filesystem::path> files_a_;  // side_by_side: the pair file
  std::vector<std::filesystem::path> files_b_;
  std::vector<PairedSample> cache_;
};

struct ToyStyle {
  std::array<float, 3> fill;
  std::array<float, 3> background;
  std::string texture;  // "smooth", "grain" or "stripes"
  bool operator==(const ToyStyle&) const = default;
};

struct ToySpec {
  std::int64_t n_train = 300;
  std::int64_t n_val = 100;
  int image_size = 64;
  int n_styles = 6;
  std::vector<ToyStyle> palette = default_palette();
  std::vector<std::string> shapes = {"circle", "square", "triangle", "diamond", "cross", "ring"};
  std::uint64_t seed = 7;

  static std::vector<ToyStyle> default_palette();
  void validate() const;
};

/// Renders the toy benchmark into `<out>/train` and `<out>/val` (side-by-side
/// PNGs plus labels.csv). Inputs are grayscale silhouettes; targets are the
/// same silhouette rendered in style (i mod n_styles).
struct ToyDataset {
  PairedDataset train;
  PairedDataset val;
  std::vector<int> train_labels;
  std::vector<int> val_labels;
};
ToyDataset generate_toy_dataset(const ToySpec& spec, const std::filesystem::path& out);

/// Renders one toy pair in memory (used by the generator and by tests).
PairedSample render_toy_sample(const ToySpec& spec, int style, std::uint64_t sample_seed);

}  // namespace step
