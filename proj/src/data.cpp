#include "hgd/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

#include "hgd/errors.hpp"
#include "hgd/npy.hpp"
#include "json.hpp"

namespace hgd {

using nlohmann::json;

const std::vector<std::string>& phantom_class_names() {
  static const std::vector<std::string> names = {"background", "CSF", "GM", "WM"};
  return names;
}

const std::vector<std::vector<double>>& phantom_base_intensities() {
  // T1-like ordering for modality 0, fully reversed for modality 1.
  static const std::vector<std::vector<double>> base = {
      {0.05, 0.30, 0.58, 0.88},
      {0.92, 0.70, 0.42, 0.14},
  };
  return base;
}

namespace {

std::string split_name(Split s) { return s == Split::kTrain ? "train" : "test"; }

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw ValidationError("manifest split must be 'train' or 'test', got '" + s + "'");
}

std::filesystem::path resolve(const DatasetManifest& m, const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_relative() && !m.base_dir.empty()) return m.base_dir / path;
  return path;
}

}  // namespace

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open manifest: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw LoadError("malformed manifest " + path.string() + ": " + e.what());
  }
  static const std::set<std::string> known = {"entries", "split", "resolution", "class_names"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ValidationError("unknown manifest key '" + key + "'");

  DatasetManifest m;
  try {
    m.split = parse_split(j.at("split").get<std::string>());
    m.resolution = j.at("resolution").get<int>();
    m.class_names = j.value("class_names", phantom_class_names());
    for (const auto& e : j.at("entries")) {
      ManifestEntry entry;
      entry.image_path = e.at("image_path").get<std::string>();
      entry.label_path = e.at("label_path").get<std::string>();
      entry.subject_id = e.at("subject_id").get<std::string>();
      entry.modality_id = e.at("modality_id").get<int>();
      entry.slice_index = e.value("slice_index", 0);
      m.entries.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    throw ValidationError("invalid manifest " + path.string() + ": " + e.what());
  }
  if (m.resolution <= 0) throw ValidationError("manifest resolution must be positive");
  m.base_dir = path.parent_path();
  return m;
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  json entries = json::array();
  for (const auto& e : manifest.entries) {
    entries.push_back({{"image_path", e.image_path},
                       {"label_path", e.label_path},
                       {"subject_id", e.subject_id},
                       {"modality_id", e.modality_id},
                       {"slice_index", e.slice_index}});
  }
  json j = {{"entries", entries},
            {"split", split_name(manifest.split)},
            {"resolution", manifest.resolution},
            {"class_names", manifest.class_names}};
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write manifest: " + path.string());
  out << j.dump(2) << "\n";
}

void check_disjoint_subjects(const DatasetManifest& a, const DatasetManifest& b) {
  std::set<std::string> subjects;
  for (const auto& e : a.entries) subjects.insert(e.subject_id);
  for (const auto& e : b.entries)
    if (subjects.count(e.subject_id))
      throw ValidationError("subject '" + e.subject_id + "' appears in both splits");
}

torch::Tensor load_image_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw LoadError("missing image file: " + path.string());
  auto arr = npy::load_f32(path);
  return torch::from_blob(arr.data.data(), {arr.rows, arr.cols}, torch::kFloat32).clone();
}

torch::Tensor load_label_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw LoadError("missing label file: " + path.string());
  auto arr = npy::load_u8(path);
  return torch::from_blob(arr.data.data(), {arr.rows, arr.cols}, torch::kUInt8)
      .to(torch::kInt64);
}

void save_image_file(const std::filesystem::path& path, const torch::Tensor& pixels) {
  if (pixels.dim() != 2) throw ShapeError("image must be 2D");
  auto t = pixels.detach().to(torch::kFloat32).contiguous();
  npy::Array2D<float> arr{t.size(0), t.size(1), {}};
  arr.data.assign(t.data_ptr<float>(), t.data_ptr<float>() + t.numel());
  npy::save_f32(path, arr);
}

void save_label_file(const std::filesystem::path& path, const torch::Tensor& classes) {
  if (classes.dim() != 2) throw ShapeError("label map must be 2D");
  auto t = classes.detach().to(torch::kUInt8).contiguous();
  npy::Array2D<uint8_t> arr{t.size(0), t.size(1), {}};
  arr.data.assign(t.data_ptr<uint8_t>(), t.data_ptr<uint8_t>() + t.numel());
  npy::save_u8(path, arr);
}

torch::Tensor minmax_to_unit_range(const torch::Tensor& pixels) {
  auto d = pixels.to(torch::kFloat64);
  const double lo = d.min().item<double>();
  const double hi = d.max().item<double>();
  if (!(hi > lo)) return torch::zeros_like(pixels, torch::kFloat32);
  return ((d - lo) / (hi - lo) * 2.0 - 1.0).clamp(-1.0, 1.0).to(torch::kFloat32);
}

torch::Tensor resize_image(const torch::Tensor& pixels, int64_t height, int64_t width) {
  if (pixels.size(0) == height && pixels.size(1) == width) return pixels;
  namespace F = torch::nn::functional;
  auto x = pixels.to(torch::kFloat32).unsqueeze(0).unsqueeze(0);
  auto y = F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{height, width})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
  return y.squeeze(0).squeeze(0);
}

LabelMap downsample_labels(const LabelMap& labels, int64_t target_h, int64_t target_w) {
  if (target_h <= 0 || target_w <= 0)
    throw ArgumentError("downsample target dimensions must be positive");
  const int64_t h = labels.height();
  const int64_t w = labels.width();
  if (target_h > h || target_w > w)
    throw ArgumentError("downsample target exceeds source dimensions");
  auto src = labels.classes.to(torch::kInt64).contiguous();
  auto out = torch::empty({target_h, target_w}, torch::kInt64);
  auto s = src.accessor<int64_t, 2>();
  auto o = out.accessor<int64_t, 2>();
  for (int64_t i = 0; i < target_h; ++i) {
    const int64_t si = std::min(h - 1, static_cast<int64_t>((i + 0.5) * h / target_h));
    for (int64_t j = 0; j < target_w; ++j) {
      const int64_t sj = std::min(w - 1, static_cast<int64_t>((j + 0.5) * w / target_w));
      o[i][j] = s[si][sj];
    }
  }
  return LabelMap{out, labels.num_classes, labels.class_names};
}

std::vector<Sample> load_corpus(const DatasetManifest& manifest) {
  const int num_classes = manifest.class_names.empty()
                              ? static_cast<int>(phantom_class_names().size())
                              : static_cast<int>(manifest.class_names.size());
  const auto names = manifest.class_names.empty() ? phantom_class_names() : manifest.class_names;

  std::vector<Sample> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) {
    const auto image_path = resolve(manifest, e.image_path);
    const auto label_path = resolve(manifest, e.label_path);
    auto raw = load_image_file(image_path);
    auto cls = load_label_file(label_path);
    if (raw.sizes() != cls.sizes()) {
      std::ostringstream msg;
      msg << "image/label shape mismatch: " << image_path << " " << raw.sizes() << " vs "
          << label_path << " " << cls.sizes();
      throw ValidationError(msg.str());
    }
    if (cls.max().item<int64_t>() >= num_classes)
      throw ValidationError("label value out of range in " + label_path.string());

    LabelMap labels{cls, num_classes, names};
    const int r = manifest.resolution;
    auto pixels = resize_image(raw, r, r);
    if (labels.height() != r || labels.width() != r) {
      if (labels.height() >= r && labels.width() >= r) {
        labels = downsample_labels(labels, r, r);
      } else {
        // Upsampling: nearest-neighbour through interpolate.
        namespace F = torch::nn::functional;
        auto up = F::interpolate(
            labels.classes.to(torch::kFloat32).unsqueeze(0).unsqueeze(0),
            F::InterpolateFuncOptions().size(std::vector<int64_t>{r, r}).mode(torch::kNearest));
        labels.classes = up.squeeze(0).squeeze(0).to(torch::kInt64);
      }
    }
    ImageSlice slice{minmax_to_unit_range(pixels), e.subject_id, e.modality_id, e.slice_index};
    out.push_back(Sample{std::move(slice), std::move(labels)});
  }
  std::stable_sort(out.begin(), out.end(), [](const Sample& a, const Sample& b) {
    return std::tie(a.image.subject_id, a.image.modality_id, a.image.slice_index) <
           std::tie(b.image.subject_id, b.image.modality_id, b.image.slice_index);
  });
  return out;
}

namespace {

struct Ellipse {
  double cx, cy, ax, ay, theta;
  bool contains(double x, double y) const {
    const double c = std::cos(theta), s = std::sin(theta);
    const double dx = x - cx, dy = y - cy;
    const double u = (c * dx + s * dy) / ax;
    const double v = (-s * dx + c * dy) / ay;
    return u * u + v * v <= 1.0;
  }
};

std::string subject_name(int k) {
  std::ostringstream s;
  s << "subj" << std::setw(3) << std::setfill('0') << k;
  return s.str();
}

}  // namespace

PhantomCorpus make_phantom_corpus(uint64_t seed, int n_subjects, int resolution,
                                  const std::filesystem::path& out_dir) {
  if (n_subjects < 2) throw ValidationError("phantom corpus needs at least 2 subjects");
  if (resolution < 32) throw ValidationError("phantom resolution must be at least 32");

  std::filesystem::create_directories(out_dir / "images");
  std::filesystem::create_directories(out_dir / "labels");

  const int n_test = std::max(1, n_subjects / 5);
  const int n_train = n_subjects - n_test;
  const auto& base = phantom_base_intensities();

  PhantomCorpus corpus;
  corpus.train.split = Split::kTrain;
  corpus.test.split = Split::kTest;
  corpus.train.resolution = corpus.test.resolution = resolution;
  corpus.train.class_names = corpus.test.class_names = phantom_class_names();
  corpus.train.base_dir = corpus.test.base_dir = out_dir;

  for (int k = 0; k < n_subjects; ++k) {
    std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                      static_cast<uint32_t>(k), 0x9e3779b9u};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    auto range = [&](double lo, double hi) { return lo + (hi - lo) * unif(rng); };

    const double cx = range(-0.05, 0.05), cy = range(-0.05, 0.05);
    const double theta = range(-0.25, 0.25);
    const double ax = range(0.70, 0.86), ay = range(0.80, 0.92);
    const Ellipse csf{cx, cy, ax, ay, theta};
    const double gm_scale = range(0.84, 0.90);
    const Ellipse gm{cx, cy, ax * gm_scale, ay * gm_scale, theta};
    const double wm_scale = range(0.55, 0.68);
    const Ellipse wm{cx + range(-0.03, 0.03), cy + range(-0.03, 0.03), ax * wm_scale,
                     ay * wm_scale, theta + range(-0.1, 0.1)};
    const double vx = range(0.08, 0.14), vr = range(0.05, 0.08), vl = range(0.14, 0.22);
    const Ellipse vent_l{cx - vx, cy - 0.05, vr, vl, theta + 0.25};
    const Ellipse vent_r{cx + vx, cy - 0.05, vr, vl, theta - 0.25};

    auto labels = torch::zeros({resolution, resolution}, torch::kInt64);
    auto lab = labels.accessor<int64_t, 2>();
    for (int i = 0; i < resolution; ++i) {
      for (int j = 0; j < resolution; ++j) {
        const double y = (i + 0.5) / resolution * 2.0 - 1.0;
        const double x = (j + 0.5) / resolution * 2.0 - 1.0;
        int c = 0;
        if (csf.contains(x, y)) c = 1;
        if (gm.contains(x, y)) c = 2;
        if (wm.contains(x, y)) c = 3;
        if (vent_l.contains(x, y) || vent_r.contains(x, y)) c = 1;
        lab[i][j] = c;
      }
    }

    const std::string sid = subject_name(k);
    const std::string label_rel = "labels/" + sid + ".npy";
    save_label_file(out_dir / label_rel, labels);

    auto& manifest = k < n_train ? corpus.train : corpus.test;
    for (int m = 0; m < 2; ++m) {
      std::vector<double> level(4);
      for (int c = 0; c < 4; ++c) level[c] = base[m][c] + range(-0.03, 0.03);
      const double bx = range(-0.08, 0.08), by = range(-0.08, 0.08), bxy = range(-0.05, 0.05);
      std::normal_distribution<double> noise(0.0, 0.02);

      auto img = torch::empty({resolution, resolution}, torch::kFloat32);
      auto px = img.accessor<float, 2>();
      for (int i = 0; i < resolution; ++i) {
        for (int j = 0; j < resolution; ++j) {
          const double y = (i + 0.5) / resolution * 2.0 - 1.0;
          const double x = (j + 0.5) / resolution * 2.0 - 1.0;
          const double bias = 1.0 + bx * x + by * y + bxy * x * y;
          px[i][j] = static_cast<float>(level[lab[i][j]] * bias + noise(rng));
        }
      }
      const std::string image_rel = "images/" + sid + "_mod" + std::to_string(m) + ".npy";
      save_image_file(out_dir / image_rel, img);
      manifest.entries.push_back(ManifestEntry{image_rel, label_rel, sid, m, 0});
    }
  }

  corpus.train_manifest_path = out_dir / "train_manifest.json";
  corpus.test_manifest_path = out_dir / "test_manifest.json";
  write_manifest(corpus.train, corpus.train_manifest_path);
  write_manifest(corpus.test, corpus.test_manifest_path);
  return corpus;
}

}  // namespace hgd
