#include "step/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "step/errors.hpp"
#include "step/hashing.hpp"

namespace step {
namespace fs = std::filesystem;

torch::Tensor to_8bit(const torch::Tensor& image) {
  return ((image.detach().to(torch::kFloat64).clamp(-1.0, 1.0) + 1.0) * 127.5).round();
}

torch::Tensor read_image(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw FormatError("cannot decode image " + path.string());
  const int h = bgr.rows, w = bgr.cols;
  auto out = torch::empty({3, h, w}, torch::kFloat32);
  auto acc = out.accessor<float, 3>();
  for (int y = 0; y < h; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) acc[c][y][x] = static_cast<float>(row[x][2 - c]) / 127.5f - 1.0f;
  }
  return out;
}

void write_image(const fs::path& path, const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3) throw InputError("write_image expects 3 x H x W");
  auto q = to_8bit(image).to(torch::kUInt8).contiguous();
  const int h = static_cast<int>(q.size(1)), w = static_cast<int>(q.size(2));
  cv::Mat bgr(h, w, CV_8UC3);
  auto acc = q.accessor<std::uint8_t, 3>();
  for (int y = 0; y < h; ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) row[x][2 - c] = acc[c][y][x];
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw InputError("cannot write image " + path.string());
}

torch::Tensor image_grid(const std::vector<torch::Tensor>& images, std::int64_t cols) {
  if (images.empty()) throw InputError("image_grid: no images");
  cols = std::max<std::int64_t>(1, std::min<std::int64_t>(cols, static_cast<std::int64_t>(images.size())));
  const auto rows = (static_cast<std::int64_t>(images.size()) + cols - 1) / cols;
  const auto h = images[0].size(1), w = images[0].size(2);
  auto grid = torch::full({3, rows * h, cols * w}, -1.0f);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto r = static_cast<std::int64_t>(i) / cols, c = static_cast<std::int64_t>(i) % cols;
    grid.slice(1, r * h, (r + 1) * h).slice(2, c * w, (c + 1) * w).copy_(images[i].detach().to(torch::kFloat32));
  }
  return grid;
}

DatasetLayout parse_layout(const std::string& name) {
  if (name == "side_by_side") return DatasetLayout::side_by_side;
  if (name == "two_dirs") return DatasetLayout::two_dirs;
  throw ConfigError("unknown dataset layout '" + name + "' (expected side_by_side or two_dirs)");
}

namespace {

bool is_image(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

std::vector<fs::path> list_images(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

PairedDataset PairedDataset::open(const fs::path& root_in, DatasetLayout layout, const std::string& split) {
  if (!fs::exists(root_in)) throw InputError("dataset root does not exist: " + root_in.string());
  PairedDataset ds;
  ds.root_ = (!split.empty() && fs::is_directory(root_in / split)) ? root_in / split : root_in;
  ds.layout_ = layout;
  if (layout == DatasetLayout::side_by_side) {
    for (const auto& p : list_images(ds.root_)) {
      ds.ids_.push_back(p.stem().string());
      ds.files_a_.push_back(p);
    }
    return ds;
  }
  auto a = list_images(ds.root_ / "A");
  auto b = list_images(ds.root_ / "B");
  std::map<std::string, fs::path> by_name_b;
  for (const auto& p : b) by_name_b.emplace(p.filename().string(), p);
  std::set<std::string> names_a;
  std::vector<std::string> orphans;
  for (const auto& p : a) {
    names_a.insert(p.filename().string());
    if (!by_name_b.contains(p.filename().string())) orphans.push_back("A/" + p.filename().string());
  }
  for (const auto& p : b)
    if (!names_a.contains(p.filename().string())) orphans.push_back("B/" + p.filename().string());
  if (!orphans.empty()) {
    std::string list;
    for (const auto& o : orphans) list += (list.empty() ? "" : ", ") + o;
    throw ListingError("unmatched files in " + ds.root_.string() + ": " + list);
  }
  for (const auto& p : a) {
    ds.ids_.push_back(p.stem().string());
    ds.files_a_.push_back(p);
    ds.files_b_.push_back(by_name_b.at(p.filename().string()));
  }
  return ds;
}

PairedSample PairedDataset::get(std::size_t i) const {
  if (i >= ids_.size()) throw InputError("dataset index out of range");
  if (!cache_.empty()) return cache_[i];
  PairedSample s;
  s.id = ids_[i];
  if (layout_ == DatasetLayout::side_by_side) {
    auto img = read_image(files_a_[i]);
    const auto w = img.size(2);
    if (w % 2 != 0)
      throw FormatError("side-by-side image " + files_a_[i].string() + " has odd width " + std::to_string(w));
    s.input_image = img.slice(2, 0, w / 2).contiguous();
    s.target_image = img.slice(2, w / 2, w).contiguous();
  } else {
    s.input_image = read_image(files_a_[i]);
    s.target_image = read_image(files_b_[i]);
    if (s.input_image.sizes() != s.target_image.sizes())
      throw FormatError("pair " + ids_[i] + " has mismatched image sizes");
  }
  return s;
}

void PairedDataset::preload() {
  std::vector<PairedSample> loaded;
  loaded.reserve(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) loaded.push_back(get(i));
  cache_ = std::move(loaded);
}

std::optional<std::vector<int>> PairedDataset::labels() const {
  const auto path = root_ / "labels.csv";
  if (!fs::exists(path)) return std::nullopt;
  std::ifstream in(path);
  std::map<std::string, int> by_id;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    by_id[line.substr(0, comma)] = std::stoi(line.substr(comma + 1));
  }
  std::vector<int> out;
  for (const auto& id : ids_) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw FormatError("labels.csv lacks id " + id);
    out.push_back(it->second);
  }
  return out;
}

std::string PairedDataset::content_hash() const {
  Sha256 h;
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    h.update(ids_[i]).update(sha256_file(files_a_[i]));
    if (!files_b_.empty()) h.update(sha256_file(files_b_[i]));
  }
  return h.hex_digest();
}

// ---- toy benchmark -------------------------------------------------------

std::vector<ToyStyle> ToySpec::default_palette() {
  // Tuned so the six default styles sit roughly equidistant under the
  // random-conv Gram distance; otherwise one style dominates every
  // furthest-neighbor list.
  return {
      {{0.75f, 0.62f, 0.13f}, {0.05f, 0.18f, 0.85f}, "smooth"},
      {{0.51f, 0.57f, 0.43f}, {0.24f, 0.36f, 0.33f}, "grain"},
      {{0.29f, 0.56f, 0.95f}, {0.68f, 0.95f, 0.22f}, "stripes"},
      {{0.61f, 0.95f, 0.06f}, {0.05f, 0.23f, 0.27f}, "grain"},
      {{0.69f, 0.35f, 0.79f}, {0.11f, 0.62f, 0.08f}, "smooth"},
      {{0.37f, 0.71f, 0.81f}, {0.64f, 0.05f, 0.23f}, "stripes"},
      {{0.95f, 0.55f, 0.10f}, {0.05f, 0.05f, 0.05f}, "grain"},
      {{0.60f, 0.60f, 0.60f}, {0.20f, 0.05f, 0.35f}, "smooth"},
  };
}

void ToySpec::validate() const {
  require<ConfigError>(n_styles >= 2, "toy: n_styles must be at least 2");
  require<ConfigError>(static_cast<std::size_t>(n_styles) <= palette.size(),
                       "toy: n_styles (" + std::to_string(n_styles) + ") exceeds the palette size (" +
                           std::to_string(palette.size()) + ")");
  for (std::size_t i = 0; i < palette.size(); ++i)
    for (std::size_t j = i + 1; j < palette.size(); ++j)
      require<ConfigError>(!(palette[i] == palette[j]), "toy: palette entries must be distinct");
  require<ConfigError>(image_size >= 16, "toy: image_size must be at least 16");
  require<ConfigError>(n_train >= 0 && n_val >= 0, "toy: sample counts must be non-negative");
  require<ConfigError>(!shapes.empty(), "toy: shape vocabulary is empty");
  for (const auto& s : palette)
    require<ConfigError>(s.texture == "smooth" || s.texture == "grain" || s.texture == "stripes",
                         "toy: unknown texture '" + s.texture + "'");
}

namespace {

bool inside(const std::string& shape, double u, double v) {
  // (u, v) are coordinates relative to the shape center, scaled to radius 1.
  const double r = std::hypot(u, v);
  if (shape == "circle") return r <= 1.0;
  if (shape == "square") return std::abs(u) <= 0.85 && std::abs(v) <= 0.85;
  if (shape == "diamond") return std::abs(u) + std::abs(v) <= 1.1;
  if (shape == "cross") return (std::abs(u) <= 0.35 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.35 && std::abs(u) <= 1.0);
  if (shape == "ring") return r <= 1.0 && r >= 0.5;
  if (shape == "triangle") return v <= 0.8 && v >= -1.0 + 0.0 && std::abs(u) <= (0.8 - v) * 0.6;
  throw ConfigError("toy: unknown shape '" + shape + "'");
}

}  // namespace

PairedSample render_toy_sample(const ToySpec& spec, int style, std::uint64_t sample_seed) {
  const auto& st = spec.palette.at(static_cast<std::size_t>(style));
  std::mt19937_64 rng(sample_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int n = spec.image_size;
  const auto& shape = spec.shapes[rng() % spec.shapes.size()];
  const double radius = n * (0.22 + 0.12 * unit(rng));
  const double cx = n * 0.5 + (unit(rng) - 0.5) * (n - 2.2 * radius);
  const double cy = n * 0.5 + (unit(rng) - 0.5) * (n - 2.2 * radius);
  const double angle = unit(rng) * std::numbers::pi;
  const double ca = std::cos(angle), sa = std::sin(angle);

  auto input = torch::empty({3, n, n});
  auto target = torch::empty({3, n, n});
  auto in = input.accessor<float, 3>();
  auto out = target.accessor<float, 3>();
  std::normal_distribution<double> grain(0.0, 0.12);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double dx = (x + 0.5 - cx) / radius, dy = (y + 0.5 - cy) / radius;
      const double u = ca * dx - sa * dy, v = sa * dx + ca * dy;
      const bool on = inside(shape, u, v);
      double shade = 0.0;
      if (st.texture == "smooth") shade = 0.12 * (static_cast<double>(y) / n - 0.5);
      else if (st.texture == "grain") shade = grain(rng);
      else shade = ((x + y) / 4) % 2 == 0 ? 0.12 : -0.12;
      for (int c = 0; c < 3; ++c) {
        in[c][y][x] = on ? 1.0f : -1.0f;
        const double base = on ? st.fill[c] + shade : st.background[c] + 0.5 * shade;
        out[c][y][x] = static_cast<float>(std::clamp(base, 0.0, 1.0) * 2.0 - 1.0);
      }
    }
  }
  return {"", input, target};
}

namespace {

PairedDataset write_split(const ToySpec& spec, const fs::path& dir, std::int64_t count, std::uint64_t split_salt,
                          std::vector<int>& labels) {
  fs::create_directories(dir);
  std::ofstream csv(dir / "labels.csv");
  csv << "id,style\n";
  std::mt19937_64 seeds(spec.seed ^ split_salt);
  for (std::int64_t i = 0; i < count; ++i) {
    const int style = static_cast<int>(i % spec.n_styles);
    auto s = render_toy_sample(spec, style, seeds());
    char id[16];
    std::snprintf(id, sizeof(id), "%06lld", static_cast<long long>(i));
    write_image(dir / (std::string(id) + ".png"), torch::cat({s.input_image, s.target_image}, 2));
    csv << id << "," << style << "\n";
    labels.push_back(style);
  }
  csv.close();
  return PairedDataset::open(dir, DatasetLayout::side_by_side);
}

}  // namespace

ToyDataset generate_toy_dataset(const ToySpec& spec, const fs::path& out) {
  spec.validate();
  ToyDataset ds;
  ds.train = write_split(spec, out / "train", spec.n_train, 0x7261696eULL, ds.train_labels);
  ds.val = write_split(spec, out / "val", spec.n_val, 0x76616cULL, ds.val_labels);
  return ds;
}

}  // namespace step
