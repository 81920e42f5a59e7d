#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "hgd/config.hpp"
#include "hgd/data.hpp"
#include "hgd/evaluator.hpp"
#include "hgd/trainer.hpp"

namespace hgd {

/// Translates every test subject `source` → `target` and scores it against
/// that subject's real target-modality slice. The segmenter is calibrated
/// on `calibration` slices of the target modality. Uses up to
/// HGD_NUM_WORKERS threads.
std::vector<EvaluationRow> evaluate_translations(Trainer& trainer,
                                                 const std::vector<Sample>& test,
                                                 const std::vector<Sample>& calibration,
                                                 int source, int target);

/// Worker count from HGD_NUM_WORKERS (default 1).
int evaluation_workers();

struct DirectionSummary {
  int source = 0;
  int target = 1;
  double psnr_db = 0.0;
  double ssim = 0.0;
  double mean_dice = 0.0;
};

struct VariantResult {
  std::string variant;
  uint64_t seed = 0;
  double initial_self_recon = 0.0;
  double final_self_recon = 0.0;
  std::vector<DirectionSummary> directions;
  std::filesystem::path log_path;

  double mean_psnr() const;
  double mean_ssim() const;
  double mean_dice() const;
};

struct AblationVariant {
  std::string name;
  AblationFlags flags;
};

/// Filesystem-friendly variant name: "+PGD+SGD" becomes "pgd_sgd".
std::string variant_slug(const std::string& name);

/// baseline, +PGD, +PGD+SGD and full, in table order.
const std::vector<AblationVariant>& ablation_variants();

/// Trains one variant from scratch and evaluates both directions of the
/// first modality pair on `test`.
VariantResult run_variant(const RunConfig& base, const AblationVariant& variant, uint64_t seed,
                          const std::vector<Sample>& train, const std::vector<Sample>& test,
                          const std::filesystem::path& out_dir);

/// One row per (variant, direction), sorted by variant order then direction.
void write_ablation_table(const std::vector<VariantResult>& results,
                          const std::filesystem::path& path);

}  // namespace hgd
