#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hgd/data.hpp"
#include "json.hpp"

namespace hgd {

/// Dynamic range of [-1, 1] images.
inline constexpr double kUnitRange = 2.0;
/// Reported instead of +∞ when two images are identical.
inline constexpr double kPsnrSentinel = 99.0;

struct ClassOverlap {
  double dice = 0.0;
  double vol_similarity = 0.0;
  bool absent_in_both = false;
};

struct MetricReport {
  std::optional<double> psnr_db;
  std::optional<double> ssim;
  std::map<int, ClassOverlap> per_class;
  std::vector<std::string> class_names;
  int n_samples = 0;

  double mean_dice() const;
  nlohmann::json to_json() const;
};

double psnr(const torch::Tensor& ref, const torch::Tensor& test, double range = kUnitRange);

/// Mean Gaussian-windowed SSIM over all fully contained windows
/// (k1 = 0.01, k2 = 0.03).
double ssim(const torch::Tensor& ref, const torch::Tensor& test, int window = 11,
            double sigma = 1.5, double range = kUnitRange);

/// 2|A∩B| / (|A| + |B|); 1.0 when both masks are empty.
double dice(const torch::Tensor& ref_mask, const torch::Tensor& test_mask);
/// 1 − ||A| − |B|| / (|A| + |B|); 1.0 when both masks are empty.
double vol_similarity(const torch::Tensor& ref_mask, const torch::Tensor& test_mask);

/// Maps an image to an H×W int64 class map.
using Segmenter = std::function<torch::Tensor(const ImageSlice&)>;

/// Assigns each pixel to the class whose mean intensity (measured on
/// labelled calibration slices of one modality) is closest.
class ThresholdSegmenter {
 public:
  ThresholdSegmenter() = default;
  ThresholdSegmenter(const std::vector<Sample>& calibration, int modality, int num_classes);

  torch::Tensor operator()(const ImageSlice& slice) const;
  const std::vector<double>& class_means() const { return means_; }

 private:
  std::vector<double> means_;
};

/// Segments `translated` and scores each class of `labels` against it.
MetricReport voxel_analysis(const ImageSlice& translated, const LabelMap& labels,
                            const Segmenter& segmenter);

/// Writes one row per (sample, present structure) holding the structure's
/// mean content vector. `contents` are C×H'×W' maps, `labels` H'×W'.
void export_embeddings(const std::vector<torch::Tensor>& contents,
                       const std::vector<torch::Tensor>& labels,
                       const std::vector<std::string>& sample_ids,
                       const std::vector<std::string>& class_names,
                       const std::filesystem::path& path);

/// One evaluated translation: subject, direction "i->j" and its metrics.
struct EvaluationRow {
  std::string subject;
  int source = 0;
  int target = 1;
  MetricReport report;
};

std::string evaluation_csv_header(const std::vector<std::string>& class_names);
void write_evaluation_csv(const std::vector<EvaluationRow>& rows,
                          const std::vector<std::string>& class_names,
                          const std::filesystem::path& path);

}  // namespace hgd
