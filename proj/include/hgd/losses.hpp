#pragma once

#include <torch/torch.h>

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace hgd {

enum class StructureFeature {
  kFlattened,   // masked map flattened, zeros outside the structure
  kMeanPooled,  // masked map averaged over the structure's pixels
};

/// Scalar hyperparameters of the full objective.
struct LossConfig {
  double lambda_adv_content = 1.0;  // λ1
  double lambda_adv_domain = 1.0;   // λ2
  double lambda_cycle = 10.0;       // λ3
  double lambda_self_recon = 10.0;  // λ4
  double lambda_pgd = 1.0;          // λ5
  double lambda_sgd = 2.0;          // λ6
  double lambda_ggd = 1.0;          // λ7
  double tau1 = 0.5;
  double tau2 = 0.5;
  double alpha_s = 0.5;
  double alpha_p = 0.01;
  int pgd_max_anchors = 256;
  StructureFeature structure_feature = StructureFeature::kFlattened;

  void validate() const;
  nlohmann::json to_json() const;
  static LossConfig from_json(const nlohmann::json& j);
};

/// Names of the seven weighted terms, in objective order.
const std::array<std::string, 7>& loss_term_names();

/// Contrastive loss for one anchor. `pool` is the candidate set with the
/// anchor removed and must include the positives. Returns nullopt when the
/// pool is empty.
std::optional<torch::Tensor> info_nce(const torch::Tensor& anchor, const torch::Tensor& positives,
                                      const torch::Tensor& pool, double tau,
                                      const torch::Tensor& weights = {});

/// One candidate feature in a contrastive batch. Positives of an anchor are
/// the other entries with the same subject and group; everything else in
/// the batch is a negative.
struct ContrastEntry {
  torch::Tensor feature;   // 1-D
  std::string subject;
  int group = 0;
  bool is_anchor = false;
  double positive_weight = 1.0;
};

struct ContrastBatch {
  std::vector<ContrastEntry> entries;
};

struct ContrastResult {
  torch::Tensor loss;     // mean over included anchors; 0 when none
  int anchors_used = 0;
  int anchors_excluded = 0;
};

ContrastResult contrast_loss(const ContrastBatch& batch, double tau);

/// Pre/post translation content maps of one subject (C×H'×W') and its label
/// map at content resolution (H'×W').
struct SubjectContent {
  std::string subject;
  torch::Tensor original;
  torch::Tensor translated;
  torch::Tensor labels;
};

/// Pixel-level contrast. Anchors are pixels of `original`; each positive is
/// the same pixel in `translated`; negatives are the anchor map's other
/// pixels and every pixel of `cross_subject`. At most `max_anchors` pixels
/// are drawn (without replacement) when the map is larger.
torch::Tensor pgd_loss(const torch::Tensor& original, const torch::Tensor& translated,
                       const std::vector<torch::Tensor>& cross_subject, double tau,
                       int max_anchors = 0,
                       std::optional<at::Generator> generator = std::nullopt);

/// z ⊙ 1[labels == s], broadcast over channels.
torch::Tensor mask_structure(const torch::Tensor& z, const torch::Tensor& labels, int s,
                             int num_classes);

/// Σ |a − b| over every position and channel.
torch::Tensor deformation(const torch::Tensor& a, const torch::Tensor& b);

/// exp(−α_s · rank) with rank 0 for the largest deformation; ties share the
/// smaller rank.
std::vector<double> rank_weights(const std::vector<double>& deformations, double alpha_s);

struct StructureLossResult {
  torch::Tensor loss;
  int anchors_used = 0;
  int structures_skipped = 0;
  std::vector<std::map<int, double>> weights;  // per subject: class → w
};

StructureLossResult sgd_loss(const std::vector<SubjectContent>& subjects, int num_classes,
                             double tau, double alpha_s,
                             StructureFeature feature = StructureFeature::kFlattened);

struct GlobalLossResult {
  torch::Tensor loss;
  int anchors_used = 0;
  int anchors_excluded = 0;
};

GlobalLossResult ggd_loss(const std::vector<SubjectContent>& subjects, double tau);

/// Mean absolute error.
torch::Tensor cycle_loss(const torch::Tensor& image, const torch::Tensor& reconstructed);
torch::Tensor self_recon_loss(const torch::Tensor& image, const torch::Tensor& self_recon);

/// Least-squares adversarial terms over multi-scale score grids.
torch::Tensor lsgan_discriminator_loss(const std::vector<torch::Tensor>& real,
                                       const std::vector<torch::Tensor>& fake);
torch::Tensor lsgan_generator_loss(const std::vector<torch::Tensor>& fake);

/// Content discriminator terms. `scores` is B×K, `modalities` the true origin
/// of each row. The encoder side targets the uniform 1/K vector.
torch::Tensor content_discriminator_loss(const torch::Tensor& scores,
                                         const std::vector<int>& modalities);
torch::Tensor content_encoder_loss(const torch::Tensor& scores);

struct LossTerms {
  torch::Tensor adv_content, adv_domain, cycle, self_recon, pgd, sgd, ggd;
};

struct LossBreakdown {
  torch::Tensor total;
  std::map<std::string, double> weighted;  // λ-weighted term values
  double total_value = 0.0;
};

/// Σ λ_k · term_k. Undefined terms count as zero.
LossBreakdown total_loss(const LossTerms& terms, const LossConfig& config);

}  // namespace hgd
