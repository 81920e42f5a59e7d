#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

#include "doctest.h"
#include "hgd/data.hpp"
#include "hgd/errors.hpp"
#include "hgd/npy.hpp"
#include "test_util.hpp"

using namespace hgd;
using hgd::testing::TempDir;

namespace {

// Reference bilinear resize with half-pixel centres, written per pixel.
std::vector<double> bilinear_oracle(const std::vector<double>& src, int h, int w, int th, int tw) {
  auto coord = [](int i, int in, int out) {
    double s = (i + 0.5) * in / out - 0.5;
    if (s < 0) s = 0;
    int i0 = static_cast<int>(std::floor(s));
    int i1 = std::min(i0 + 1, in - 1);
    return std::tuple<int, int, double>{i0, i1, s - i0};
  };
  std::vector<double> out(th * tw);
  for (int y = 0; y < th; ++y) {
    auto [y0, y1, ly] = coord(y, h, th);
    for (int x = 0; x < tw; ++x) {
      auto [x0, x1, lx] = coord(x, w, tw);
      double top = src[y0 * w + x0] * (1 - lx) + src[y0 * w + x1] * lx;
      double bot = src[y1 * w + x0] * (1 - lx) + src[y1 * w + x1] * lx;
      out[y * tw + x] = top * (1 - ly) + bot * ly;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("npy float32 round-trip is bit-exact") {
  TempDir dir("npy");
  npy::Array2D<float> a{3, 5, {}};
  for (int i = 0; i < 15; ++i) a.data.push_back(std::nextafter(0.1f * i, 2.0f) - 0.7f);
  a.data[4] = -0.0f;
  npy::save_f32(dir.path() / "a.npy", a);
  const auto b = npy::load_f32(dir.path() / "a.npy");
  CHECK(b.rows == 3);
  CHECK(b.cols == 5);
  REQUIRE(b.data.size() == 15);
  CHECK(std::memcmp(a.data.data(), b.data.data(), 15 * sizeof(float)) == 0);
}

TEST_CASE("npy header is 64-byte aligned and readable by numpy conventions") {
  TempDir dir("npy");
  npy::save_u8(dir.path() / "l.npy", {2, 2, {0, 1, 2, 3}});
  std::ifstream in(dir.path() / "l.npy", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  CHECK(bytes.substr(1, 5) == "NUMPY");
  CHECK((bytes.size() - 4) % 64 == 0);
  CHECK(bytes.find("'descr': '|u1'") != std::string::npos);
  CHECK(npy::load_u8(dir.path() / "l.npy").data == std::vector<uint8_t>{0, 1, 2, 3});
}

TEST_CASE("label loader rejects float files") {
  TempDir dir("npy");
  npy::save_f32(dir.path() / "f.npy", {1, 2, {0.0f, 1.0f}});
  CHECK_THROWS_AS(npy::load_u8(dir.path() / "f.npy"), LoadError);
  CHECK_THROWS_AS(npy::load_f32(dir.path() / "missing.npy"), LoadError);
}

TEST_CASE("min-max rescale") {
  auto t = torch::tensor({0.0f, 1.0f, 2.0f, 4.0f}).reshape({2, 2});
  auto r = minmax_to_unit_range(t);
  CHECK(r[0][0].item<float>() == doctest::Approx(-1.0));
  CHECK(r[0][1].item<float>() == doctest::Approx(-0.5));
  CHECK(r[1][1].item<float>() == doctest::Approx(1.0));
  auto c = minmax_to_unit_range(torch::full({3, 3}, 7.0f));
  CHECK(c.abs().max().item<float>() == 0.0f);
}

TEST_CASE("bilinear resize matches a per-pixel oracle") {
  torch::manual_seed(3);
  for (auto [h, w, th, tw] : std::vector<std::array<int, 4>>{{8, 8, 4, 4}, {7, 5, 12, 9}, {16, 16, 16, 16}}) {
    auto img = torch::rand({h, w});
    std::vector<double> src(img.data_ptr<float>(), img.data_ptr<float>() + h * w);
    const auto want = bilinear_oracle(src, h, w, th, tw);
    auto got = resize_image(img, th, tw).contiguous();
    REQUIRE(got.size(0) == th);
    REQUIRE(got.size(1) == tw);
    for (int i = 0; i < th * tw; ++i) CHECK(got.data_ptr<float>()[i] == doctest::Approx(want[i]).epsilon(1e-5));
  }
}

TEST_CASE("nearest label downsampling picks pixel-centre sources") {
  std::mt19937 rng(11);
  for (auto [h, th] : std::vector<std::pair<int, int>>{{64, 16}, {64, 54}, {10, 3}, {9, 9}}) {
    LabelMap lm;
    lm.num_classes = 4;
    lm.classes = torch::randint(0, 4, {h, h}, torch::kInt64);
    const auto down = downsample_labels(lm, th, th);
    REQUIRE(down.classes.size(0) == th);
    bool all = true;
    for (int i = 0; i < th; ++i)
      for (int j = 0; j < th; ++j) {
        const int si = static_cast<int>(std::floor((i + 0.5) * h / th));
        const int sj = static_cast<int>(std::floor((j + 0.5) * h / th));
        all = all && down.classes[i][j].item<int64_t>() == lm.classes[si][sj].item<int64_t>();
      }
    CHECK(all);
    CHECK(down.num_classes == 4);
  }
}

TEST_CASE("label downsampling rejects invalid targets") {
  LabelMap lm{torch::zeros({8, 8}, torch::kInt64), 2, {}};
  CHECK_THROWS_AS(downsample_labels(lm, 0, 4), ArgumentError);
  CHECK_THROWS_AS(downsample_labels(lm, 16, 16), ArgumentError);
}

TEST_CASE("manifest round-trip and strict keys") {
  TempDir dir("manifest");
  DatasetManifest m;
  m.split = Split::kTest;
  m.resolution = 32;
  m.class_names = {"a", "b"};
  m.entries.push_back({"images/x.npy", "labels/x.npy", "s1", 1, 3});
  write_manifest(m, dir.path() / "m.json");
  const auto r = read_manifest(dir.path() / "m.json");
  CHECK(r.split == Split::kTest);
  CHECK(r.resolution == 32);
  CHECK(r.class_names == m.class_names);
  REQUIRE(r.entries.size() == 1);
  CHECK(r.entries[0].subject_id == "s1");
  CHECK(r.entries[0].modality_id == 1);
  CHECK(r.entries[0].slice_index == 3);
  CHECK(r.base_dir == dir.path());

  std::ofstream(dir.path() / "bad.json") << R"({"entries": [], "split": "train", "resolution": 8, "extra": 1})";
  CHECK_THROWS_AS(read_manifest(dir.path() / "bad.json"), ValidationError);
  std::ofstream(dir.path() / "broken.json") << "{ not json";
  CHECK_THROWS_AS(read_manifest(dir.path() / "broken.json"), LoadError);
}

TEST_CASE("phantom corpus is deterministic, disjoint and contrast-inverted") {
  TempDir a("ph"), b("ph");
  const auto ca = make_phantom_corpus(5, 10, 32, a.path());
  const auto cb = make_phantom_corpus(5, 10, 32, b.path());
  CHECK(ca.train.entries.size() == 16);
  CHECK(ca.test.entries.size() == 4);
  CHECK_NOTHROW(check_disjoint_subjects(ca.train, ca.test));
  CHECK_THROWS_AS(check_disjoint_subjects(ca.train, ca.train), ValidationError);

  for (const auto& e : ca.train.entries) {
    std::ifstream fa(a.path() / e.image_path, std::ios::binary), fb(b.path() / e.image_path, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
    CHECK(sa == sb);
  }

  const auto samples = load_corpus(ca.train);
  REQUIRE(samples.size() == 16);
  // Sorted by subject then modality; both modalities share one label map.
  CHECK(samples[0].image.subject_id == samples[1].image.subject_id);
  CHECK(samples[0].image.modality_id == 0);
  CHECK(samples[1].image.modality_id == 1);
  CHECK(torch::equal(samples[0].labels.classes, samples[1].labels.classes));
  const auto& labels = samples[0].labels.classes;
  for (int c = 0; c < 4; ++c) CHECK((labels == c).sum().item<int64_t>() > 0);

  auto class_mean = [&](const Sample& s, int c) {
    return s.image.pixels.index({labels == c}).mean().item<double>();
  };
  CHECK(class_mean(samples[0], 3) > class_mean(samples[0], 2));
  CHECK(class_mean(samples[0], 2) > class_mean(samples[0], 1));
  CHECK(class_mean(samples[1], 3) < class_mean(samples[1], 2));
  CHECK(class_mean(samples[1], 2) < class_mean(samples[1], 1));
  CHECK(samples[0].image.pixels.min().item<float>() >= -1.0f);
  CHECK(samples[0].image.pixels.max().item<float>() <= 1.0f);
}

TEST_CASE("phantom and corpus errors") {
  TempDir dir("ph");
  CHECK_THROWS_AS(make_phantom_corpus(0, 1, 64, dir.path()), ValidationError);
  CHECK_THROWS_AS(make_phantom_corpus(0, 4, 16, dir.path()), ValidationError);

  auto corpus = make_phantom_corpus(0, 2, 32, dir.path());
  auto missing = corpus.train;
  missing.entries[0].image_path = "images/nope.npy";
  CHECK_THROWS_AS(load_corpus(missing), LoadError);

  save_label_file(dir.path() / "small.npy", torch::zeros({8, 8}, torch::kInt64));
  auto mismatched = corpus.train;
  mismatched.entries[0].label_path = "small.npy";
  CHECK_THROWS_AS(load_corpus(mismatched), ValidationError);
}

TEST_CASE("load_corpus resizes to the manifest resolution") {
  TempDir dir("ph");
  auto corpus = make_phantom_corpus(2, 2, 64, dir.path());
  corpus.train.resolution = 32;
  const auto samples = load_corpus(corpus.train);
  CHECK(samples[0].image.height() == 32);
  CHECK(samples[0].labels.width() == 32);
}

TEST_CASE("load_corpus: empty manifest and 0..255 endpoints") {
  TempDir dir("corpus");
  DatasetManifest empty;
  empty.base_dir = dir.path();
  CHECK(load_corpus(empty).empty());

  auto img = torch::arange(64 * 64, torch::kFloat32).reshape({64, 64}).remainder(256);
  save_image_file(dir.path() / "img.npy", img);
  save_label_file(dir.path() / "lab.npy", torch::zeros({64, 64}, torch::kInt64));
  DatasetManifest m;
  m.base_dir = dir.path();
  m.class_names = {"background", "tissue"};
  m.entries.push_back({"img.npy", "lab.npy", "s", 0, 0});
  const auto samples = load_corpus(m);
  REQUIRE(samples.size() == 1);
  CHECK(samples[0].image.pixels.min().item<float>() == -1.0f);
  CHECK(samples[0].image.pixels.max().item<float>() == 1.0f);
  CHECK(samples[0].labels.num_classes == 2);
}
