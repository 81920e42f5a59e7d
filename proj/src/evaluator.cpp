#include "hgd/evaluator.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

#include "hgd/errors.hpp"

namespace hgd {

double MetricReport::mean_dice() const {
  if (per_class.empty()) return 0.0;
  double s = 0.0;
  for (const auto& [_, c] : per_class) s += c.dice;
  return s / static_cast<double>(per_class.size());
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json classes = nlohmann::json::object();
  for (const auto& [cls, c] : per_class) {
    const std::string name =
        cls < static_cast<int>(class_names.size()) ? class_names[cls] : std::to_string(cls);
    classes[name] = {{"dice", c.dice},
                     {"vol_similarity", c.vol_similarity},
                     {"absent_in_both", c.absent_in_both}};
  }
  nlohmann::json j = {{"per_class", classes}, {"n_samples", n_samples}, {"units", "fraction"}};
  j["psnr_db"] = psnr_db ? nlohmann::json(*psnr_db) : nlohmann::json(nullptr);
  j["ssim"] = ssim ? nlohmann::json(*ssim) : nlohmann::json(nullptr);
  return j;
}

namespace {

torch::Tensor as_image(const torch::Tensor& t) {
  auto x = t.detach().to(torch::kFloat64);
  while (x.dim() > 2 && x.size(0) == 1) x = x.squeeze(0);
  if (x.dim() != 2) throw ShapeError("expected a 2D image");
  return x.contiguous();
}

}  // namespace

double psnr(const torch::Tensor& ref, const torch::Tensor& test, double range) {
  const auto a = as_image(ref);
  const auto b = as_image(test);
  if (a.sizes() != b.sizes()) throw ShapeError("psnr: shape mismatch");
  const double mse = (a - b).pow(2).mean().item<double>();
  if (mse == 0.0) return kPsnrSentinel;
  return 10.0 * std::log10(range * range / mse);
}

double ssim(const torch::Tensor& ref, const torch::Tensor& test, int window, double sigma,
            double range) {
  const auto a = as_image(ref);
  const auto b = as_image(test);
  if (a.sizes() != b.sizes()) throw ShapeError("ssim: shape mismatch");
  if (window < 1 || a.size(0) < window || a.size(1) < window)
    throw ShapeError("ssim: image smaller than the window");

  std::vector<double> g(window);
  double gs = 0.0;
  const double mid = (window - 1) / 2.0;
  for (int k = 0; k < window; ++k) {
    g[k] = std::exp(-((k - mid) * (k - mid)) / (2.0 * sigma * sigma));
    gs += g[k];
  }
  for (auto& v : g) v /= gs;

  const int64_t h = a.size(0), w = a.size(1);
  const int64_t oh = h - window + 1, ow = w - window + 1;
  // Separable valid-mode filtering: rows first, then columns.
  auto filter = [&](const std::vector<double>& src) {
    std::vector<double> tmp(static_cast<size_t>(h * ow)), out(static_cast<size_t>(oh * ow));
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < ow; ++x) {
        double s = 0.0;
        for (int k = 0; k < window; ++k) s += g[k] * src[y * w + x + k];
        tmp[y * ow + x] = s;
      }
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t x = 0; x < ow; ++x) {
        double s = 0.0;
        for (int k = 0; k < window; ++k) s += g[k] * tmp[(y + k) * ow + x];
        out[y * ow + x] = s;
      }
    return out;
  };
  const double* pa = a.data_ptr<double>();
  const double* pb = b.data_ptr<double>();
  const size_t n = static_cast<size_t>(h * w);
  std::vector<double> va(pa, pa + n), vb(pb, pb + n), aa(n), bb(n), ab(n);
  for (size_t k = 0; k < n; ++k) {
    aa[k] = va[k] * va[k];
    bb[k] = vb[k] * vb[k];
    ab[k] = va[k] * vb[k];
  }
  const auto mu_a = filter(va), mu_b = filter(vb);
  const auto s_aa = filter(aa), s_bb = filter(bb), s_ab = filter(ab);
  const double c1 = std::pow(0.01 * range, 2), c2 = std::pow(0.03 * range, 2);
  double total = 0.0;
  for (size_t k = 0; k < mu_a.size(); ++k) {
    const double ma = mu_a[k], mb = mu_b[k];
    const double var_a = s_aa[k] - ma * ma, var_b = s_bb[k] - mb * mb, cov = s_ab[k] - ma * mb;
    total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
             ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

namespace {

struct Counts {
  int64_t a = 0, b = 0, both = 0;
};

Counts mask_counts(const torch::Tensor& ref_mask, const torch::Tensor& test_mask) {
  if (ref_mask.sizes() != test_mask.sizes()) throw ShapeError("mask shape mismatch");
  const auto a = ref_mask.to(torch::kBool);
  const auto b = test_mask.to(torch::kBool);
  return {a.sum().item<int64_t>(), b.sum().item<int64_t>(), (a & b).sum().item<int64_t>()};
}

}  // namespace

double dice(const torch::Tensor& ref_mask, const torch::Tensor& test_mask) {
  const auto c = mask_counts(ref_mask, test_mask);
  if (c.a + c.b == 0) return 1.0;
  return 2.0 * static_cast<double>(c.both) / static_cast<double>(c.a + c.b);
}

double vol_similarity(const torch::Tensor& ref_mask, const torch::Tensor& test_mask) {
  const auto c = mask_counts(ref_mask, test_mask);
  if (c.a + c.b == 0) return 1.0;
  return 1.0 - static_cast<double>(std::llabs(c.a - c.b)) / static_cast<double>(c.a + c.b);
}

ThresholdSegmenter::ThresholdSegmenter(const std::vector<Sample>& calibration, int modality,
                                       int num_classes) {
  std::vector<double> sum(num_classes, 0.0);
  std::vector<int64_t> count(num_classes, 0);
  for (const auto& s : calibration) {
    if (s.image.modality_id != modality) continue;
    const auto px = s.image.pixels.to(torch::kFloat64).reshape({-1});
    const auto lab = s.labels.classes.reshape({-1});
    for (int c = 0; c < num_classes; ++c) {
      const auto mask = lab == c;
      sum[c] += px.masked_select(mask).sum().item<double>();
      count[c] += mask.sum().item<int64_t>();
    }
  }
  means_.resize(num_classes);
  for (int c = 0; c < num_classes; ++c) {
    if (count[c] == 0)
      throw ValidationError("segmenter calibration has no pixels of class " + std::to_string(c));
    means_[c] = sum[c] / static_cast<double>(count[c]);
  }
}

torch::Tensor ThresholdSegmenter::operator()(const ImageSlice& slice) const {
  if (means_.empty()) throw ValidationError("segmenter is not calibrated");
  const auto px = slice.pixels.to(torch::kFloat64);
  auto best = torch::zeros(px.sizes(), torch::kInt64);
  auto best_dist = torch::full(px.sizes(), std::numeric_limits<double>::infinity(), torch::kFloat64);
  for (size_t c = 0; c < means_.size(); ++c) {
    const auto d = (px - means_[c]).abs();
    const auto closer = d < best_dist;
    best = torch::where(closer, torch::full_like(best, static_cast<int64_t>(c)), best);
    best_dist = torch::where(closer, d, best_dist);
  }
  return best;
}

MetricReport voxel_analysis(const ImageSlice& translated, const LabelMap& labels,
                            const Segmenter& segmenter) {
  torch::Tensor predicted;
  try {
    predicted = segmenter(translated);
  } catch (const std::exception& e) {
    throw Error(std::string("segmentation of subject '") + translated.subject_id +
                "' failed: " + e.what());
  }
  if (predicted.sizes() != labels.classes.sizes())
    throw ShapeError("voxel_analysis: segmentation does not match the label grid");
  MetricReport report;
  report.class_names = labels.class_names;
  report.n_samples = 1;
  for (int c = 0; c < labels.num_classes; ++c) {
    const auto ref = labels.classes == c;
    const auto test = predicted == c;
    ClassOverlap o;
    o.absent_in_both = !ref.any().item<bool>() && !test.any().item<bool>();
    o.dice = dice(ref, test);
    o.vol_similarity = vol_similarity(ref, test);
    report.per_class[c] = o;
  }
  return report;
}

void export_embeddings(const std::vector<torch::Tensor>& contents,
                       const std::vector<torch::Tensor>& labels,
                       const std::vector<std::string>& sample_ids,
                       const std::vector<std::string>& class_names,
                       const std::filesystem::path& path) {
  if (contents.size() != labels.size() || contents.size() != sample_ids.size())
    throw ShapeError("export_embeddings: contents, labels and ids must align");
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  const int64_t channels = contents.empty() ? 0 : contents.front().size(0);
  out << "sample_id,class_id,class_name";
  for (int64_t c = 0; c < channels; ++c) out << ",f" << c;
  out << "\n" << std::setprecision(9);
  for (size_t k = 0; k < contents.size(); ++k) {
    const auto z = contents[k].detach().to(torch::kFloat64);
    const auto& lab = labels[k];
    if (z.dim() != 3 || z.size(0) != channels || z.size(1) != lab.size(0) || z.size(2) != lab.size(1))
      throw ShapeError("export_embeddings: content map does not match its labels");
    for (int cls = 0; cls < static_cast<int>(class_names.size()); ++cls) {
      const auto mask = (lab == cls).to(torch::kFloat64);
      const double n = mask.sum().item<double>();
      if (n == 0.0) continue;
      const auto pooled = (z * mask).sum({1, 2}) / n;
      out << sample_ids[k] << "," << cls << "," << class_names[cls];
      for (int64_t c = 0; c < channels; ++c) out << "," << pooled[c].item<double>();
      out << "\n";
    }
  }
}

std::string evaluation_csv_header(const std::vector<std::string>& class_names) {
  std::string h = "subject,direction,psnr_db,ssim";
  for (const auto& n : class_names) h += ",dice_frac_" + n;
  for (const auto& n : class_names) h += ",vs_frac_" + n;
  return h + ",mean_dice_frac";
}

void write_evaluation_csv(const std::vector<EvaluationRow>& rows,
                          const std::vector<std::string>& class_names,
                          const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << evaluation_csv_header(class_names) << "\n" << std::setprecision(9);
  for (const auto& r : rows) {
    out << r.subject << "," << r.source << "->" << r.target << ","
        << r.report.psnr_db.value_or(std::nan("")) << "," << r.report.ssim.value_or(std::nan(""));
    for (size_t c = 0; c < class_names.size(); ++c) {
      const auto it = r.report.per_class.find(static_cast<int>(c));
      out << "," << (it == r.report.per_class.end() ? std::nan("") : it->second.dice);
    }
    for (size_t c = 0; c < class_names.size(); ++c) {
      const auto it = r.report.per_class.find(static_cast<int>(c));
      out << "," << (it == r.report.per_class.end() ? std::nan("") : it->second.vol_similarity);
    }
    out << "," << r.report.mean_dice() << "\n";
  }
}

}  // namespace hgd
