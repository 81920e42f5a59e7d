#include <cmath>
#include <fstream>

#include "doctest.h"
#include "hgd/data.hpp"
#include "hgd/errors.hpp"
#include "hgd/evaluator.hpp"
#include "test_util.hpp"

using namespace hgd;

namespace {

torch::Tensor analytic_pair(bool second) {
  auto y = torch::arange(24, torch::kFloat64).unsqueeze(1).expand({24, 20});
  auto x = torch::arange(20, torch::kFloat64).unsqueeze(0).expand({24, 20});
  auto a = torch::sin(0.3 * x) * torch::cos(0.2 * y);
  if (!second) return a;
  return (a + 0.1 * torch::cos(0.7 * x + 0.5 * y)).clamp(-1, 1);
}

// Direct 2D-window SSIM with an explicit Gaussian kernel per window.
double ssim_bruteforce(const torch::Tensor& a, const torch::Tensor& b) {
  const int win = 11;
  const double sigma = 1.5, c1 = 0.0004, c2 = 0.0036;
  double kernel[win][win], ks = 0;
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) {
      kernel[i][j] = std::exp(-((i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0)) / (2 * sigma * sigma));
      ks += kernel[i][j];
    }
  auto pa = a.to(torch::kFloat64).contiguous(), pb = b.to(torch::kFloat64).contiguous();
  const double* A = pa.data_ptr<double>();
  const double* B = pb.data_ptr<double>();
  const int h = a.size(0), w = a.size(1);
  double total = 0;
  int count = 0;
  for (int y = 0; y + win <= h; ++y)
    for (int x = 0; x + win <= w; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          const double k = kernel[i][j] / ks, va = A[(y + i) * w + x + j], vb = B[(y + i) * w + x + j];
          ma += k * va;
          mb += k * vb;
          saa += k * va * va;
          sbb += k * vb * vb;
          sab += k * va * vb;
        }
      const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
      total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return total / count;
}

}  // namespace

TEST_CASE("PSNR and SSIM frozen reference values") {
  const auto a = analytic_pair(false), b = analytic_pair(true);
  // Reference values from scikit-image (gaussian_weights, sigma 1.5, data_range 2).
  CHECK(std::abs(psnr(a, b) - 29.126868365985963) < 1e-9);
  CHECK(std::abs(ssim(a, b) - 0.9065691670337116) < 1e-6);
  CHECK(psnr(a, a) == kPsnrSentinel);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("metric oracles on random pairs") {
  torch::manual_seed(21);
  double worst_psnr = 0, worst_ssim = 0;
  bool overlaps_exact = true;
  for (int t = 0; t < 100; ++t) {
    const auto a = torch::rand({16, 16}, torch::kFloat64) * 2 - 1;
    const auto b = (a + 0.3 * torch::randn({16, 16}, torch::kFloat64)).clamp(-1, 1);
    double mse = 0;
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j) {
        const double d = a[i][j].item<double>() - b[i][j].item<double>();
        mse += d * d;
      }
    mse /= 256;
    worst_psnr = std::max(worst_psnr, std::abs(psnr(a, b) - 10 * std::log10(4.0 / mse)));
    worst_ssim = std::max(worst_ssim, std::abs(ssim(a, b) - ssim_bruteforce(a, b)));

    const auto ma = torch::rand({12, 12}) < 0.3, mb = torch::rand({12, 12}) < 0.4;
    int64_t na = 0, nb = 0, both = 0;
    for (int i = 0; i < 12; ++i)
      for (int j = 0; j < 12; ++j) {
        const bool x = ma[i][j].item<bool>(), y = mb[i][j].item<bool>();
        na += x;
        nb += y;
        both += x && y;
      }
    const double want_dice = na + nb == 0 ? 1.0 : 2.0 * both / static_cast<double>(na + nb);
    const double want_vs =
        na + nb == 0 ? 1.0 : 1.0 - std::abs(static_cast<double>(na - nb)) / static_cast<double>(na + nb);
    overlaps_exact = overlaps_exact && dice(ma, mb) == want_dice && vol_similarity(ma, mb) == want_vs;
  }
  CHECK(worst_psnr < 1e-9);
  CHECK(worst_ssim < 1e-4);
  CHECK(overlaps_exact);
}

TEST_CASE("Dice and volumetric similarity closed forms") {
  auto a = torch::zeros({10, 10}, torch::kBool), b = torch::zeros({10, 10}, torch::kBool);
  a.index_put_({0}, true);                                  // |A| = 10
  b.index_put_({torch::indexing::Slice(0, 3)}, true);       // |B| = 30, overlap 10
  CHECK(dice(a, b) == 0.5);
  CHECK(vol_similarity(a, b) == 0.5);
  const auto empty = torch::zeros({4, 4}, torch::kBool);
  CHECK(dice(empty, empty) == 1.0);
  CHECK(vol_similarity(empty, empty) == 1.0);
  CHECK_THROWS_AS(dice(a, empty), ShapeError);
}

TEST_CASE("metric errors") {
  CHECK_THROWS_AS(ssim(torch::zeros({8, 8}), torch::zeros({8, 8})), ShapeError);
  CHECK_THROWS_AS(psnr(torch::zeros({8, 8}), torch::zeros({8, 9})), ShapeError);
}

TEST_CASE("threshold segmenter recovers phantom anatomy") {
  hgd::testing::TempDir dir("seg");
  const auto corpus = make_phantom_corpus(4, 6, 64, dir.path());
  const auto train = load_corpus(corpus.train);
  const auto test = load_corpus(corpus.test);
  for (int m = 0; m < 2; ++m) {
    ThresholdSegmenter seg(train, m, 4);
    CHECK(seg.class_means().size() == 4);
    for (const auto& s : test) {
      if (s.image.modality_id != m) continue;
      const auto report = voxel_analysis(s.image, s.labels, seg);
      CHECK(report.per_class.size() == 4);
      CHECK(report.mean_dice() > 0.8);
    }
  }
  // A blank image is segmented as one class; the absent classes score zero.
  ThresholdSegmenter seg(train, 0, 4);
  ImageSlice blank{torch::full({64, 64}, -1.0f), "blank", 0, 0};
  const auto report = voxel_analysis(blank, test.front().labels, seg);
  CHECK(report.per_class.at(3).dice == 0.0);
  CHECK_FALSE(report.per_class.at(3).absent_in_both);
  CHECK_THROWS_AS(ThresholdSegmenter(train, 5, 4), ValidationError);
}

TEST_CASE("absent structures are flagged") {
  LabelMap labels{torch::zeros({4, 4}, torch::kInt64), 3, {"a", "b", "c"}};
  Segmenter all_zero = [](const ImageSlice& s) { return torch::zeros(s.pixels.sizes(), torch::kInt64); };
  const auto r = voxel_analysis({torch::zeros({4, 4}), "s", 0, 0}, labels, all_zero);
  CHECK(r.per_class.at(0).dice == 1.0);
  CHECK(r.per_class.at(2).absent_in_both);
  CHECK(r.to_json()["per_class"]["c"]["absent_in_both"] == true);
  CHECK(r.to_json()["psnr_db"].is_null());
}

TEST_CASE("CSV exports") {
  hgd::testing::TempDir dir("csv");
  const std::vector<std::string> names = {"background", "CSF"};
  MetricReport rep;
  rep.psnr_db = 20.5;
  rep.ssim = 0.75;
  rep.per_class[0] = {0.9, 0.95, false};
  rep.per_class[1] = {0.5, 0.6, false};
  write_evaluation_csv({{"subj001", 0, 1, rep}}, names, dir.path() / "e.csv");
  std::ifstream f(dir.path() / "e.csv");
  std::string header, line;
  std::getline(f, header);
  std::getline(f, line);
  CHECK(header == "subject,direction,psnr_db,ssim,dice_frac_background,dice_frac_CSF,"
                  "vs_frac_background,vs_frac_CSF,mean_dice_frac");
  CHECK(line == "subj001,0->1,20.5,0.75,0.9,0.5,0.95,0.6,0.7");

  auto labels = torch::tensor({{0, 0}, {1, 1}}, torch::kInt64);
  auto z = torch::arange(8, torch::kFloat32).reshape({2, 2, 2});
  export_embeddings({z}, {labels}, {"s0"}, names, dir.path() / "emb.csv");
  std::ifstream g(dir.path() / "emb.csv");
  std::getline(g, header);
  std::getline(g, line);
  CHECK(header == "sample_id,class_id,class_name,f0,f1");
  CHECK(line == "s0,0,background,0.5,4.5");
}
