#include "hgd/networks.hpp"

#include <set>

#include "hgd/errors.hpp"

namespace hgd {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

NetConfig NetConfig::paper_scale() {
  NetConfig c;
  c.resolution = 256;
  c.content_size = 54;
  c.content_channels = 256;
  c.attr_base = 64;
  c.disc_base = 64;
  c.content_disc_channels = 256;
  return c;
}

nlohmann::json NetConfig::to_json() const {
  return {{"num_modalities", num_modalities},
          {"resolution", resolution},
          {"content_size", content_size},
          {"content_channels", content_channels},
          {"attr_dim", attr_dim},
          {"attr_base", attr_base},
          {"content_res_blocks", content_res_blocks},
          {"generator_res_blocks", generator_res_blocks},
          {"disc_base", disc_base},
          {"disc_scales", disc_scales},
          {"content_disc_channels", content_disc_channels},
          {"share_content_encoder", share_content_encoder},
          {"contrast_head", contrast_head},
          {"init_std", init_std}};
}

NetConfig NetConfig::from_json(const nlohmann::json& j) {
  NetConfig c;
  const auto defaults = c.to_json();
  for (const auto& [key, _] : j.items())
    if (!defaults.contains(key)) throw ConfigError("unknown network key '" + key + "'");
  c.num_modalities = j.value("num_modalities", c.num_modalities);
  c.resolution = j.value("resolution", c.resolution);
  c.content_size = j.value("content_size", c.content_size);
  c.content_channels = j.value("content_channels", c.content_channels);
  c.attr_dim = j.value("attr_dim", c.attr_dim);
  c.attr_base = j.value("attr_base", c.attr_base);
  c.content_res_blocks = j.value("content_res_blocks", c.content_res_blocks);
  c.generator_res_blocks = j.value("generator_res_blocks", c.generator_res_blocks);
  c.disc_base = j.value("disc_base", c.disc_base);
  c.disc_scales = j.value("disc_scales", c.disc_scales);
  c.content_disc_channels = j.value("content_disc_channels", c.content_disc_channels);
  c.share_content_encoder = j.value("share_content_encoder", c.share_content_encoder);
  c.contrast_head = j.value("contrast_head", c.contrast_head);
  c.init_std = j.value("init_std", c.init_std);
  c.validate();
  return c;
}

void NetConfig::validate() const {
  if (num_modalities < 2) throw ConfigError("need at least two modalities");
  if (resolution < 16) throw ConfigError("resolution must be at least 16");
  if (content_size < 1 || content_size > resolution / 4)
    throw ConfigError("content_size must lie in [1, resolution/4]");
  if (content_channels < 4 || content_channels % 4 != 0)
    throw ConfigError("content_channels must be a positive multiple of 4");
  if (attr_dim < 1 || attr_base < 1 || disc_base < 1 || content_disc_channels < 1)
    throw ConfigError("channel counts must be positive");
  if (disc_scales < 1) throw ConfigError("disc_scales must be positive");
  if (content_res_blocks < 0 || generator_res_blocks < 0)
    throw ConfigError("residual block counts must be nonnegative");
}

ResBlockImpl::ResBlockImpl(int c)
    : conv1(nn::Conv2dOptions(c, c, 3).padding(1)),
      conv2(nn::Conv2dOptions(c, c, 3).padding(1)),
      norm1(nn::InstanceNorm2dOptions(c)),
      norm2(nn::InstanceNorm2dOptions(c)) {
  register_module("conv1", conv1);
  register_module("conv2", conv2);
  register_module("norm1", norm1);
  register_module("norm2", norm2);
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x) {
  auto h = torch::relu(norm1(conv1(x)));
  return x + norm2(conv2(h));
}

ContentEncoderImpl::ContentEncoderImpl(const NetConfig& cfg) : content_size(cfg.content_size) {
  const int c = cfg.content_channels;
  down = nn::Sequential(
      nn::Conv2d(nn::Conv2dOptions(1, c / 4, 7).padding(3)),
      nn::InstanceNorm2d(nn::InstanceNorm2dOptions(c / 4)),
      nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
      nn::Conv2d(nn::Conv2dOptions(c / 4, c / 2, 4).stride(2).padding(1)),
      nn::InstanceNorm2d(nn::InstanceNorm2dOptions(c / 2)),
      nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
      nn::Conv2d(nn::Conv2dOptions(c / 2, c, 4).stride(2).padding(1)),
      nn::InstanceNorm2d(nn::InstanceNorm2dOptions(c)),
      nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
  blocks = nn::ModuleList();
  for (int i = 0; i < cfg.content_res_blocks; ++i) blocks->push_back(ResBlock(c));
  register_module("down", down);
  register_module("blocks", blocks);
}

torch::Tensor ContentEncoderImpl::forward(const torch::Tensor& x) {
  auto h = down->forward(x);
  for (const auto& b : *blocks) h = b->as<ResBlock>()->forward(h);
  if (h.size(2) != content_size || h.size(3) != content_size)
    h = F::adaptive_avg_pool2d(h, F::AdaptiveAvgPool2dFuncOptions({content_size, content_size}));
  return h;
}

AttributeEncoderImpl::AttributeEncoderImpl(const NetConfig& cfg) {
  const int a = cfg.attr_base;
  body = nn::Sequential(
      nn::Conv2d(nn::Conv2dOptions(1, a, 4).stride(2).padding(1)), nn::ReLU(),
      nn::Conv2d(nn::Conv2dOptions(a, 2 * a, 4).stride(2).padding(1)), nn::ReLU(),
      nn::Conv2d(nn::Conv2dOptions(2 * a, 4 * a, 4).stride(2).padding(1)), nn::ReLU(),
      nn::Conv2d(nn::Conv2dOptions(4 * a, 4 * a, 4).stride(2).padding(1)), nn::ReLU());
  project = nn::Conv2d(nn::Conv2dOptions(4 * a, cfg.attr_dim, 1));
  register_module("body", body);
  register_module("project", project);
}

torch::Tensor AttributeEncoderImpl::forward(const torch::Tensor& x) {
  auto h = body->forward(x);
  h = F::adaptive_avg_pool2d(h, F::AdaptiveAvgPool2dFuncOptions(1));
  return project(h).flatten(1);
}

torch::Tensor AttributeEncoderImpl::forward_map(const torch::Tensor& x) {
  return project(body->forward(x));
}

ContrastHeadImpl::ContrastHeadImpl(const NetConfig& cfg) {
  const int c = cfg.content_channels;
  body = nn::Sequential(nn::Conv2d(nn::Conv2dOptions(c, c, 1)), nn::ReLU(),
                        nn::Conv2d(nn::Conv2dOptions(c, c, 1)));
  register_module("body", body);
}

torch::Tensor ContrastHeadImpl::forward(const torch::Tensor& z) { return body->forward(z); }

InjectedResBlockImpl::InjectedResBlockImpl(int c, int attr_channels)
    : conv1(nn::Conv2dOptions(c + attr_channels, c, 3).padding(1)),
      conv2(nn::Conv2dOptions(c, c, 3).padding(1)),
      norm1(nn::InstanceNorm2dOptions(c)),
      norm2(nn::InstanceNorm2dOptions(c)) {
  register_module("conv1", conv1);
  register_module("conv2", conv2);
  register_module("norm1", norm1);
  register_module("norm2", norm2);
}

torch::Tensor InjectedResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& attr) {
  auto h = torch::relu(norm1(conv1(torch::cat({x, attr}, 1))));
  return x + norm2(conv2(h));
}

GeneratorImpl::GeneratorImpl(const NetConfig& cfg) : resolution(cfg.resolution) {
  const int c = cfg.content_channels;
  blocks = nn::ModuleList();
  for (int i = 0; i < cfg.generator_res_blocks; ++i)
    blocks->push_back(InjectedResBlock(c, 2 * cfg.attr_dim));
  up1 = nn::Conv2d(nn::Conv2dOptions(c + 2 * cfg.attr_dim, c / 2, 3).padding(1));
  up2 = nn::Conv2d(nn::Conv2dOptions(c / 2, c / 4, 3).padding(1));
  out = nn::Conv2d(nn::Conv2dOptions(c / 4, 1, 7).padding(3));
  norm1 = nn::GroupNorm(nn::GroupNormOptions(1, c / 2));
  norm2 = nn::GroupNorm(nn::GroupNormOptions(1, c / 4));
  register_module("blocks", blocks);
  register_module("up1", up1);
  register_module("up2", up2);
  register_module("out", out);
  register_module("norm1", norm1);
  register_module("norm2", norm2);
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& content, const torch::Tensor& attr) {
  auto h = content;
  for (const auto& b : *blocks) h = b->as<InjectedResBlock>()->forward(h, attr);
  auto upsample = [](const torch::Tensor& t, int64_t size) {
    return F::interpolate(t, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{size, size})
                                 .mode(torch::kNearest));
  };
  h = torch::relu(norm1(up1(upsample(torch::cat({h, attr}, 1), resolution / 2))));
  h = torch::relu(norm2(up2(upsample(h, resolution))));
  return torch::tanh(out(h));
}

DomainDiscriminatorImpl::DomainDiscriminatorImpl(const NetConfig& cfg) {
  const int d = cfg.disc_base;
  scales = nn::ModuleList();
  for (int s = 0; s < cfg.disc_scales; ++s) {
    scales->push_back(nn::Sequential(
        nn::Conv2d(nn::Conv2dOptions(1, d, 4).stride(2).padding(1)),
        nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
        nn::Conv2d(nn::Conv2dOptions(d, 2 * d, 4).stride(2).padding(1)),
        nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
        nn::Conv2d(nn::Conv2dOptions(2 * d, 4 * d, 4).stride(2).padding(1)),
        nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
        nn::Conv2d(nn::Conv2dOptions(4 * d, 1, 1))));
  }
  register_module("scales", scales);
}

std::vector<torch::Tensor> DomainDiscriminatorImpl::forward(const torch::Tensor& x) {
  std::vector<torch::Tensor> out;
  auto h = x;
  for (size_t s = 0; s < scales->size(); ++s) {
    if (s > 0)
      h = F::avg_pool2d(h, F::AvgPool2dFuncOptions(3).stride(2).padding(1).count_include_pad(false));
    out.push_back(scales[s]->as<nn::Sequential>()->forward(h));
  }
  return out;
}

ContentDiscriminatorImpl::ContentDiscriminatorImpl(const NetConfig& cfg) {
  const int d = cfg.content_disc_channels;
  body = nn::Sequential(
      nn::Conv2d(nn::Conv2dOptions(cfg.content_channels, d, 3).stride(2).padding(1)),
      nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
      nn::Conv2d(nn::Conv2dOptions(d, d, 3).stride(2).padding(1)),
      nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
      nn::AdaptiveAvgPool2d(nn::AdaptiveAvgPool2dOptions(1)));
  head = nn::Linear(d, cfg.num_modalities);
  register_module("body", body);
  register_module("head", head);
}

torch::Tensor ContentDiscriminatorImpl::forward(const torch::Tensor& z) {
  return head(body->forward(z).flatten(1));
}

namespace {

void init_weights(nn::Module& module, double std) {
  torch::NoGradGuard guard;
  for (auto& m : module.modules(/*include_self=*/true)) {
    if (auto* conv = m->as<nn::Conv2d>()) {
      conv->weight.normal_(0.0, std);
      if (conv->bias.defined()) conv->bias.zero_();
    } else if (auto* lin = m->as<nn::Linear>()) {
      lin->weight.normal_(0.0, std);
      if (lin->bias.defined()) lin->bias.zero_();
    }
  }
}

}  // namespace

ModelBundle::ModelBundle(const NetConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  torch::manual_seed(seed);
  const int k = cfg_.num_modalities;
  for (int m = 0; m < k; ++m) {
    if (cfg_.share_content_encoder && m > 0)
      content_encoders.push_back(content_encoders.front());
    else
      content_encoders.emplace_back(cfg_);
    attribute_encoders.emplace_back(cfg_);
    generators.emplace_back(cfg_);
    domain_discriminators.emplace_back(cfg_);
  }
  content_discriminator = ContentDiscriminator(cfg_);
  for (auto* m : all_modules()) init_weights(*m, cfg_.init_std);
  // Built last so that enabling it leaves every other module's draws unchanged.
  if (cfg_.contrast_head) {
    contrast_head = ContrastHead(cfg_);
    init_weights(*contrast_head, cfg_.init_std);
  }
}

std::vector<std::pair<std::string, torch::nn::Module*>> ModelBundle::named_modules() const {
  std::vector<std::pair<std::string, torch::nn::Module*>> out;
  for (int m = 0; m < cfg_.num_modalities; ++m) {
    const auto idx = std::to_string(m);
    if (!(cfg_.share_content_encoder && m > 0))
      out.emplace_back("content_encoder_" + idx, content_encoders[m].ptr().get());
    out.emplace_back("attribute_encoder_" + idx, attribute_encoders[m].ptr().get());
    out.emplace_back("generator_" + idx, generators[m].ptr().get());
    out.emplace_back("domain_discriminator_" + idx, domain_discriminators[m].ptr().get());
  }
  out.emplace_back("content_discriminator", content_discriminator.ptr().get());
  if (contrast_head) out.emplace_back("contrast_head", contrast_head.ptr().get());
  return out;
}

std::vector<torch::nn::Module*> ModelBundle::all_modules() const {
  std::vector<torch::nn::Module*> out;
  for (auto& [_, m] : named_modules()) out.push_back(m);
  return out;
}

void ModelBundle::check_modality(int modality) const {
  if (modality < 0 || modality >= cfg_.num_modalities)
    throw ArgumentError("unknown modality " + std::to_string(modality));
}

void ModelBundle::check_images(const torch::Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != 1 || images.size(2) != cfg_.resolution ||
      images.size(3) != cfg_.resolution) {
    std::ostringstream msg;
    msg << "expected B×1×" << cfg_.resolution << "×" << cfg_.resolution << " images, got "
        << images.sizes();
    throw ShapeError(msg.str());
  }
}

FeatureMap ModelBundle::encode_content(const torch::Tensor& images, int modality) {
  check_modality(modality);
  check_images(images);
  return {content_encoders[modality]->forward(images), FeatureKind::kContent};
}

FeatureMap ModelBundle::encode_attribute(const torch::Tensor& images, int modality) {
  check_modality(modality);
  check_images(images);
  return {attribute_encoders[modality]->forward(images), FeatureKind::kAttribute};
}

torch::Tensor ModelBundle::contrast_features(const torch::Tensor& content) {
  return contrast_head ? contrast_head->forward(content) : content;
}

torch::Tensor ModelBundle::attribute_map(const torch::Tensor& images, int modality) {
  check_modality(modality);
  check_images(images);
  const auto m = attribute_encoders[modality]->forward_map(images);
  return F::interpolate(m, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{cfg_.content_size, cfg_.content_size})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

FeatureMap ModelBundle::encode_content(const ImageSlice& slice, int modality) {
  return encode_content(to_batch(slice), modality);
}

FeatureMap ModelBundle::encode_attribute(const ImageSlice& slice, int modality) {
  return encode_attribute(to_batch(slice), modality);
}

torch::Tensor ModelBundle::generate(const FeatureMap& content, const FeatureMap& combined,
                                    int target_modality) {
  check_modality(target_modality);
  const auto& z = content.values;
  const auto& a = combined.values;
  if (z.dim() != 4 || z.size(1) != cfg_.content_channels || z.size(2) != cfg_.content_size ||
      z.size(3) != cfg_.content_size)
    throw ShapeError("generate: content map has the wrong shape");
  if (a.dim() != 4 || a.size(0) != z.size(0) || a.size(1) != 2 * cfg_.attr_dim ||
      a.size(2) != z.size(2) || a.size(3) != z.size(3))
    throw ShapeError("generate: combined attribute does not match the content map");
  return generators[target_modality]->forward(z, a);
}

std::vector<torch::Tensor> ModelBundle::discriminate_domain(const torch::Tensor& images,
                                                            int modality) {
  check_modality(modality);
  check_images(images);
  return domain_discriminators[modality]->forward(images);
}

torch::Tensor ModelBundle::discriminate_content(const FeatureMap& content) {
  const auto& z = content.values;
  if (z.dim() != 4 || z.size(1) != cfg_.content_channels)
    throw ShapeError("discriminate_content: content map has the wrong shape");
  return content_discriminator->forward(z);
}

std::vector<torch::Tensor> ModelBundle::generator_parameters() const {
  std::vector<torch::Tensor> out;
  for (int m = 0; m < cfg_.num_modalities; ++m) {
    if (!(cfg_.share_content_encoder && m > 0))
      for (auto& p : content_encoders[m]->parameters()) out.push_back(p);
    for (auto& p : attribute_encoders[m]->parameters()) out.push_back(p);
    for (auto& p : generators[m]->parameters()) out.push_back(p);
  }
  if (contrast_head)
    for (auto& p : contrast_head->parameters()) out.push_back(p);
  return out;
}

std::vector<torch::Tensor> ModelBundle::discriminator_parameters() const {
  std::vector<torch::Tensor> out;
  for (auto& d : domain_discriminators)
    for (auto& p : d->parameters()) out.push_back(p);
  for (auto& p : content_discriminator->parameters()) out.push_back(p);
  return out;
}

int64_t ModelBundle::parameter_count() const {
  int64_t n = 0;
  for (auto& p : generator_parameters()) n += p.numel();
  for (auto& p : discriminator_parameters()) n += p.numel();
  return n;
}

bool ModelBundle::parameters_finite() const {
  torch::NoGradGuard guard;
  for (auto& p : generator_parameters())
    if (!torch::isfinite(p).all().item<bool>()) return false;
  for (auto& p : discriminator_parameters())
    if (!torch::isfinite(p).all().item<bool>()) return false;
  return true;
}

void ModelBundle::train(bool on) {
  for (auto* m : all_modules()) m->train(on);
}

void ModelBundle::save(torch::serialize::OutputArchive& archive) const {
  archive.write("net_config", torch::IValue(cfg_.to_json().dump()));
  for (auto& [name, m] : named_modules()) {
    torch::serialize::OutputArchive sub;
    m->save(sub);
    archive.write(name, sub);
  }
}

void ModelBundle::load(torch::serialize::InputArchive& archive) {
  torch::IValue stored;
  archive.read("net_config", stored);
  const auto saved = nlohmann::json::parse(stored.toStringRef());
  if (saved != cfg_.to_json())
    throw ValidationError("checkpoint architecture does not match: " + saved.dump());
  for (auto& [name, m] : named_modules()) {
    torch::serialize::InputArchive sub;
    archive.read(name, sub);
    try {
      m->load(sub);
    } catch (const c10::Error& e) {
      throw ValidationError("checkpoint component '" + name + "' does not match: " +
                            e.what_without_backtrace());
    }
  }
}

torch::Tensor to_batch(const ImageSlice& slice) {
  if (slice.pixels.dim() != 2) throw ShapeError("image slice must be 2D");
  return slice.pixels.to(torch::kFloat32).unsqueeze(0).unsqueeze(0);
}

torch::Tensor to_batch(const std::vector<const ImageSlice*>& slices) {
  std::vector<torch::Tensor> parts;
  for (const auto* s : slices) parts.push_back(to_batch(*s));
  return torch::cat(parts, 0);
}

}  // namespace hgd
