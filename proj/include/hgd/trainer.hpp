#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hgd/data.hpp"
#include "hgd/losses.hpp"
#include "hgd/memory_bank.hpp"
#include "hgd/networks.hpp"
#include "json.hpp"

namespace hgd {

/// Switches for the ablation variants. `use_bank == false` removes the
/// memory bank entirely (the enhanced attribute is all zeros);
/// `structural_slots == false` keeps only the global half of the bank.
struct AblationFlags {
  bool use_pgd = true;
  bool use_sgd = true;
  bool use_ggd = true;
  bool structural_slots = true;
  bool use_bank = true;

  static AblationFlags baseline();
  nlohmann::json to_json() const;
  static AblationFlags from_json(const nlohmann::json& j);
  std::string describe() const;
};

/// Source of the attribute code at inference time, when no target-domain
/// image is available.
enum class TestAttribute { kZero, kSample };

/// What the bank writes into a domain's values for each query pixel.
enum class ValueSource {
  kAttributeMap,  // that domain's attribute features at the pixel
  kEnhanced,      // the enhanced attribute just read from the bank
};

struct TrainConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  int batch_size = 2;
  int steps = 3000;
  uint64_t seed = 0;
  AblationFlags ablation;
  ReadMode read_mode = ReadMode::kMemoryValues;
  UpdateWeighting update_weighting = UpdateWeighting::kAssignedQueries;
  TestAttribute test_attribute = TestAttribute::kZero;
  ValueSource value_source = ValueSource::kAttributeMap;
  int checkpoint_every = 0;  // 0: only the final checkpoint

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// One optimisation example: a slice from modality i and one from modality j
/// (different subjects), each with its aligned label map.
struct TrainBatch {
  const Sample* source = nullptr;  // m_i
  const Sample* target = nullptr;  // m_j
};

struct StepResult {
  int step = 0;
  LossBreakdown breakdown;         // encoder/generator objective
  double discriminator_loss = 0.0;
  std::map<std::string, double> raw;  // unweighted term values
};

/// Everything produced by one two-stage forward pass.
struct ForwardPass {
  FeatureMap content_i, content_j, attr_i, attr_j;
  torch::Tensor enhanced_ij, enhanced_ii, enhanced_ji, enhanced_jj;  // B×C_a×H'×W'
  torch::Tensor fake_j, fake_i, self_i, self_j;  // m_{i→j}, m_{j→i}, self-reconstructions
  FeatureMap content_fake_j, content_fake_i, attr_fake_j, attr_fake_i;
  torch::Tensor recon_i, recon_j;  // m̂_i, m̂_j
};

class Trainer {
 public:
  Trainer(NetConfig net, LossConfig loss, TrainConfig train, BankLayout layout,
          std::vector<std::string> class_names);

  /// One discriminator step, one encoder/generator step, then one bank update.
  StepResult train_step(const TrainBatch& batch);

  /// Inference-time translation, deterministic given the state. Does not
  /// touch the train/eval flag, so concurrent calls are safe.
  ImageSlice translate(const ImageSlice& slice, int source_modality, int target_modality);

  /// Mean L1 between each slice and its self-reconstruction (eval mode).
  double self_recon_error(const std::vector<Sample>& samples);

  /// Two-stage forward pass on a batch; labels are not needed for it.
  ForwardPass forward(const torch::Tensor& x_i, int i, const torch::Tensor& x_j, int j);

  /// Picks the batch for `step` from `samples` (deterministic per state RNG).
  TrainBatch next_batch(const std::vector<Sample>& samples);

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);
  static std::unique_ptr<Trainer> from_checkpoint(const std::filesystem::path& path);

  int step() const { return step_; }
  ModelBundle& models() { return models_; }
  const std::optional<MemoryBank>& bank() const { return bank_; }
  const LossConfig& loss_config() const { return loss_cfg_; }
  const TrainConfig& train_config() const { return train_cfg_; }
  const NetConfig& net_config() const { return models_.config(); }
  const BankLayout& layout() const { return layout_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  nlohmann::json config_json() const;

  /// Observes the order of "discriminator_step", "generator_step" and
  /// "bank_update" inside train_step.
  std::function<void(std::string_view)> on_event;

 private:
  torch::Tensor read_enhanced(const FeatureMap& content, int domain, const FeatureMap& attr);
  void emit(std::string_view what) const {
    if (on_event) on_event(what);
  }

  LossConfig loss_cfg_;
  TrainConfig train_cfg_;
  BankLayout layout_;
  std::vector<std::string> class_names_;
  ModelBundle models_;
  std::optional<MemoryBank> bank_;
  std::unique_ptr<torch::optim::Adam> gen_opt_;
  std::unique_ptr<torch::optim::Adam> disc_opt_;
  at::Generator rng_;
  int step_ = 0;
};

/// Appends one row per step: step, the seven λ-weighted terms, total and the
/// discriminator loss.
class TrainingLog {
 public:
  explicit TrainingLog(const std::filesystem::path& path, bool append = false);
  void write(const StepResult& r);
  static std::string header();

 private:
  std::ofstream out_;
};

struct FitResult {
  std::vector<StepResult> steps;
  double initial_self_recon = 0.0;
  double final_self_recon = 0.0;
};

/// Runs `trainer` until it reaches `train.steps`, logging every step to
/// `out_dir`/train_log.csv and checkpointing to `out_dir`/checkpoint.pt.
FitResult fit(Trainer& trainer, const std::vector<Sample>& train_samples,
              const std::filesystem::path& out_dir);

}  // namespace hgd
