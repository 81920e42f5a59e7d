#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace hgd {

/// Category tag for slots that are not tied to a structure class.
inline constexpr int kGlobalSlot = -1;

/// Number of memory slots per structure class plus the global slot count.
struct BankLayout {
  std::vector<std::pair<int, int>> structural;  // (class id, slot count)
  int global_slots = 0;

  int structural_total() const;
  int total() const { return structural_total() + global_slots; }

  /// 2 background, 2 CSF, 3 GM, 3 WM and 10 global slots (N = 20).
  static BankLayout brain_four_class();
  /// Seven structure classes (healthy tissue plus three tumour
  /// sub-regions) and a matching global half, N = 38.
  static BankLayout brain_with_tumour();
  /// The global half of `layout` only, without structure-assigned slots.
  static BankLayout global_only(const BankLayout& layout);
};

/// How the enhanced attribute is formed from the affinities.
enum class ReadMode {
  kMemoryValues,     // Σ_i w_i · value_i of the target domain
  kInputAttribute,   // Σ_i w_i · z^a, the literal printed form
};

/// How per-slot update weights are normalised.
enum class UpdateWeighting {
  kAssignedQueries,  // softmax over the queries assigned to the slot
  kSlotSoftmax,      // the slot's own affinity, softmax taken over slots
};

/// Shared unit-norm keys plus one unit-norm value matrix per domain.
/// Slot categories are fixed at construction.
struct MemoryBank {
  torch::Tensor keys;                  // N×C
  std::vector<torch::Tensor> values;   // K entries of N×C_a
  std::vector<int> slot_categories;    // length N, class id or kGlobalSlot
  double alpha_p = 0.01;
  UpdateWeighting weighting = UpdateWeighting::kAssignedQueries;

  int64_t num_slots() const { return keys.size(0); }
  int64_t key_dim() const { return keys.size(1); }
  int64_t value_dim() const { return values.front().size(1); }
  int num_domains() const { return static_cast<int>(values.size()); }
  bool has_structural_slots() const;

  MemoryBank clone() const;
  void save(torch::serialize::OutputArchive& archive) const;
  static MemoryBank load(torch::serialize::InputArchive& archive);
};

/// Builds a bank whose structure-assigned and global halves are the same
/// size. Keys and values are seeded Gaussians, row-normalised.
MemoryBank build_bank(const BankLayout& layout, int key_dim, int value_dim, int num_domains,
                      double alpha_p, uint64_t seed);

/// Like build_bank but accepts a layout without structural slots.
MemoryBank build_global_bank(int global_slots, int key_dim, int value_dim, int num_domains,
                             double alpha_p, uint64_t seed);

/// Cosine similarity; a zero-norm argument yields 0 and a warning.
double cosine_sim(const std::vector<double>& a, const std::vector<double>& b);

/// Row-wise cosine similarity matrix between A (n×C) and B (m×C).
/// Zero rows produce zero similarities. Differentiable.
torch::Tensor cosine_matrix(const torch::Tensor& a, const torch::Tensor& b);

/// Softmax over slots of cosine(query, key): N_q×N, rows sum to 1.
torch::Tensor affinities(const torch::Tensor& queries, const MemoryBank& bank);

struct ReadResult {
  torch::Tensor enhanced;    // N_q×C_a
  torch::Tensor affinity;    // N_q×N
};

/// Retrieves the enhanced attribute for each query from `target_domain`'s
/// values. With ReadMode::kInputAttribute, `attribute` (C_a, or N_q×C_a)
/// replaces the stored values.
ReadResult read(const torch::Tensor& queries, const MemoryBank& bank, int target_domain,
                ReadMode mode = ReadMode::kMemoryValues,
                const torch::Tensor& attribute = {});

/// Flattens a B×C×H×W content map into (B·H·W)×C queries.
torch::Tensor content_to_queries(const torch::Tensor& content);
/// Inverse of content_to_queries for a per-query N_q×D tensor.
torch::Tensor queries_to_map(const torch::Tensor& per_query, int64_t batch, int64_t height,
                             int64_t width);

/// Channel concatenation (attribute first, enhanced second). `z_a` is a
/// B×C_a vector broadcast over the spatial grid of `z_tilde` (B×C_a×H×W).
torch::Tensor combine(const torch::Tensor& z_a, const torch::Tensor& z_tilde);

/// Momentum write. `enhanced[d]` carries N_q×C_a enhanced attributes read
/// from domain d (an undefined tensor leaves that domain's values alone).
/// `labels` is an optional length-N_q class vector gating structural slots.
MemoryBank update(const MemoryBank& bank, const torch::Tensor& queries_i,
                  const torch::Tensor& queries_j, const std::vector<torch::Tensor>& enhanced,
                  const torch::Tensor& labels = {});

std::string slot_tag(int category, const std::vector<std::string>& class_names);

/// One row per query: query_id, label_class, then one score per slot.
void export_affinity_csv(const torch::Tensor& affinity, const torch::Tensor& labels,
                         const MemoryBank& bank, const std::vector<std::string>& class_names,
                         const std::filesystem::path& path);

}  // namespace hgd
