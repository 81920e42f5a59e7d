#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

#include "hgd/data.hpp"
#include "json.hpp"

namespace hgd {

/// Architecture hyperparameters. The defaults are the 64×64 toy scale;
/// `paper_scale()` gives the 256×256 input / 54×54×256 content configuration.
struct NetConfig {
  int num_modalities = 2;
  int resolution = 64;
  int content_size = 16;
  int content_channels = 64;
  int attr_dim = 8;
  int attr_base = 8;
  int content_res_blocks = 4;
  int generator_res_blocks = 4;
  int disc_base = 16;
  int disc_scales = 2;
  int content_disc_channels = 64;
  bool share_content_encoder = false;
  bool contrast_head = false;  // 1×1 MLP on content before the contrastive losses
  double init_std = 0.02;

  static NetConfig paper_scale();
  nlohmann::json to_json() const;
  static NetConfig from_json(const nlohmann::json& j);
  void validate() const;
};

enum class FeatureKind { kContent, kAttribute, kEnhancedAttribute, kCombined };

/// Batched feature tensor tagged with what produced it. Content maps are
/// B×C×H'×W', attribute codes are B×C_a, enhanced attribute maps are
/// B×C_a×H'×W' and combined maps are B×2C_a×H'×W'.
struct FeatureMap {
  torch::Tensor values;
  FeatureKind kind = FeatureKind::kContent;
};

struct ResBlockImpl : torch::nn::Module {
  explicit ResBlockImpl(int channels);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  torch::nn::InstanceNorm2d norm1{nullptr}, norm2{nullptr};
};
TORCH_MODULE(ResBlock);

/// Three downsampling blocks (one stride-1 stem, two stride-2) followed by
/// residual blocks; the result is pooled to the configured content size
/// when the input resolution does not divide evenly.
struct ContentEncoderImpl : torch::nn::Module {
  explicit ContentEncoderImpl(const NetConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Sequential down{nullptr};
  torch::nn::ModuleList blocks{nullptr};
  int content_size;
};
TORCH_MODULE(ContentEncoder);

/// Four stride-2 blocks, global average pooling and a 1×1 projection to C_a.
struct AttributeEncoderImpl : torch::nn::Module {
  explicit AttributeEncoderImpl(const NetConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);
  /// The projection before pooling: B×C_a×(H/16)×(W/16). Its spatial mean
  /// equals forward(x).
  torch::Tensor forward_map(const torch::Tensor& x);
  torch::nn::Sequential body{nullptr};
  torch::nn::Conv2d project{nullptr};
};
TORCH_MODULE(AttributeEncoder);

/// Residual block that re-injects the combined attribute map at its input.
struct InjectedResBlockImpl : torch::nn::Module {
  InjectedResBlockImpl(int channels, int attr_channels);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& attr);
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  torch::nn::InstanceNorm2d norm1{nullptr}, norm2{nullptr};
};
TORCH_MODULE(InjectedResBlock);

struct GeneratorImpl : torch::nn::Module {
  explicit GeneratorImpl(const NetConfig& cfg);
  torch::Tensor forward(const torch::Tensor& content, const torch::Tensor& attr);
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::Conv2d up1{nullptr}, up2{nullptr}, out{nullptr};
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  int resolution;
};
TORCH_MODULE(Generator);

/// Multi-scale patch discriminator; one score grid per scale.
struct DomainDiscriminatorImpl : torch::nn::Module {
  explicit DomainDiscriminatorImpl(const NetConfig& cfg);
  std::vector<torch::Tensor> forward(const torch::Tensor& x);
  torch::nn::ModuleList scales{nullptr};
};
TORCH_MODULE(DomainDiscriminator);

/// Predicts which modality a content map came from: B×K scores.
struct ContentDiscriminatorImpl : torch::nn::Module {
  explicit ContentDiscriminatorImpl(const NetConfig& cfg);
  torch::Tensor forward(const torch::Tensor& z);
  torch::nn::Sequential body{nullptr};
  torch::nn::Linear head{nullptr};
};
TORCH_MODULE(ContentDiscriminator);

/// Per-pixel two-layer projection used only by the contrastive losses.
struct ContrastHeadImpl : torch::nn::Module {
  explicit ContrastHeadImpl(const NetConfig& cfg);
  torch::Tensor forward(const torch::Tensor& z);
  torch::nn::Sequential body{nullptr};
};
TORCH_MODULE(ContrastHead);

/// All trainable components: per-modality encoders, generators and domain
/// discriminators plus the shared content discriminator.
class ModelBundle {
 public:
  ModelBundle(const NetConfig& cfg, uint64_t seed);

  const NetConfig& config() const { return cfg_; }

  FeatureMap encode_content(const torch::Tensor& images, int modality);
  FeatureMap encode_attribute(const torch::Tensor& images, int modality);
  /// Per-location attribute features resized to the content grid, B×C_a×H'×W'.
  torch::Tensor attribute_map(const torch::Tensor& images, int modality);
  torch::Tensor generate(const FeatureMap& content, const FeatureMap& combined,
                         int target_modality);
  std::vector<torch::Tensor> discriminate_domain(const torch::Tensor& images, int modality);
  torch::Tensor discriminate_content(const FeatureMap& content);
  /// Content features as the contrastive losses see them: the projection
  /// head's output when enabled, the content map itself otherwise.
  torch::Tensor contrast_features(const torch::Tensor& content);

  // Single-slice conveniences; the slice becomes a batch of one.
  FeatureMap encode_content(const ImageSlice& slice, int modality);
  FeatureMap encode_attribute(const ImageSlice& slice, int modality);

  std::vector<torch::Tensor> generator_parameters() const;      // E^c, E^a, G, contrast head
  std::vector<torch::Tensor> discriminator_parameters() const;  // D, D^c
  int64_t parameter_count() const;
  bool parameters_finite() const;

  void train(bool on = true);
  void eval() { train(false); }

  void save(torch::serialize::OutputArchive& archive) const;
  void load(torch::serialize::InputArchive& archive);

  std::vector<ContentEncoder> content_encoders;
  std::vector<AttributeEncoder> attribute_encoders;
  std::vector<Generator> generators;
  std::vector<DomainDiscriminator> domain_discriminators;
  ContentDiscriminator content_discriminator{nullptr};
  ContrastHead contrast_head{nullptr};

 private:
  void check_modality(int modality) const;
  void check_images(const torch::Tensor& images) const;
  std::vector<torch::nn::Module*> all_modules() const;
  std::vector<std::pair<std::string, torch::nn::Module*>> named_modules() const;

  NetConfig cfg_;
};

/// Turns an H×W slice (or a list of them) into a B×1×H×W batch.
torch::Tensor to_batch(const ImageSlice& slice);
torch::Tensor to_batch(const std::vector<const ImageSlice*>& slices);

}  // namespace hgd
