#include "hgd/losses.hpp"

#include <algorithm>
#include <cmath>

#include "hgd/errors.hpp"
#include "hgd/memory_bank.hpp"

namespace hgd {

void LossConfig::validate() const {
  for (double l : {lambda_adv_content, lambda_adv_domain, lambda_cycle, lambda_self_recon,
                   lambda_pgd, lambda_sgd, lambda_ggd})
    if (!(l >= 0.0)) throw ConfigError("loss weights must be nonnegative");
  if (!(tau1 > 0.0) || !(tau2 > 0.0)) throw ConfigError("temperatures must be positive");
  if (!(alpha_s > 0.0)) throw ConfigError("alpha_s must be positive");
  if (!(alpha_p > 0.0 && alpha_p <= 1.0)) throw ConfigError("alpha_p must lie in (0, 1]");
  if (pgd_max_anchors < 0) throw ConfigError("pgd_max_anchors must be nonnegative");
}

nlohmann::json LossConfig::to_json() const {
  return {{"lambda_adv_content", lambda_adv_content},
          {"lambda_adv_domain", lambda_adv_domain},
          {"lambda_cycle", lambda_cycle},
          {"lambda_self_recon", lambda_self_recon},
          {"lambda_pgd", lambda_pgd},
          {"lambda_sgd", lambda_sgd},
          {"lambda_ggd", lambda_ggd},
          {"tau1", tau1},
          {"tau2", tau2},
          {"alpha_s", alpha_s},
          {"alpha_p", alpha_p},
          {"pgd_max_anchors", pgd_max_anchors},
          {"structure_feature",
           structure_feature == StructureFeature::kFlattened ? "flattened" : "mean_pooled"}};
}

LossConfig LossConfig::from_json(const nlohmann::json& j) {
  LossConfig c;
  const auto defaults = c.to_json();
  for (const auto& [key, _] : j.items())
    if (!defaults.contains(key)) throw ConfigError("unknown loss key '" + key + "'");
  c.lambda_adv_content = j.value("lambda_adv_content", c.lambda_adv_content);
  c.lambda_adv_domain = j.value("lambda_adv_domain", c.lambda_adv_domain);
  c.lambda_cycle = j.value("lambda_cycle", c.lambda_cycle);
  c.lambda_self_recon = j.value("lambda_self_recon", c.lambda_self_recon);
  c.lambda_pgd = j.value("lambda_pgd", c.lambda_pgd);
  c.lambda_sgd = j.value("lambda_sgd", c.lambda_sgd);
  c.lambda_ggd = j.value("lambda_ggd", c.lambda_ggd);
  c.tau1 = j.value("tau1", c.tau1);
  c.tau2 = j.value("tau2", c.tau2);
  c.alpha_s = j.value("alpha_s", c.alpha_s);
  c.alpha_p = j.value("alpha_p", c.alpha_p);
  c.pgd_max_anchors = j.value("pgd_max_anchors", c.pgd_max_anchors);
  const auto feature = j.value("structure_feature", std::string("flattened"));
  if (feature == "flattened") c.structure_feature = StructureFeature::kFlattened;
  else if (feature == "mean_pooled") c.structure_feature = StructureFeature::kMeanPooled;
  else throw ConfigError("structure_feature must be 'flattened' or 'mean_pooled'");
  c.validate();
  return c;
}

const std::array<std::string, 7>& loss_term_names() {
  static const std::array<std::string, 7> names = {"adv_content", "adv_domain", "cycle",
                                                   "self_recon",  "pgd",        "sgd",
                                                   "ggd"};
  return names;
}

std::optional<torch::Tensor> info_nce(const torch::Tensor& anchor, const torch::Tensor& positives,
                                      const torch::Tensor& pool, double tau,
                                      const torch::Tensor& weights) {
  if (!(tau > 0.0)) throw ArgumentError("info_nce: temperature must be positive");
  if (pool.size(0) == 0 || positives.size(0) == 0) return std::nullopt;
  const auto a = anchor.reshape({1, -1});
  const auto pos_sim = cosine_matrix(a, positives).squeeze(0);   // P
  const auto pool_sim = cosine_matrix(a, pool).squeeze(0);       // M
  const auto log_denominator = torch::logsumexp(pool_sim / tau, 0);
  auto w = weights.defined() ? weights.to(pos_sim.dtype()) : torch::ones_like(pos_sim);
  return (log_denominator - w * pos_sim / tau).mean();
}

ContrastResult contrast_loss(const ContrastBatch& batch, double tau) {
  if (!(tau > 0.0)) throw ArgumentError("contrast_loss: temperature must be positive");
  ContrastResult result;
  const auto n = static_cast<int64_t>(batch.entries.size());
  if (n == 0) {
    result.loss = torch::zeros({});
    return result;
  }
  std::vector<torch::Tensor> rows;
  for (const auto& e : batch.entries) rows.push_back(e.feature.reshape({-1}));
  const auto features = torch::stack(rows);
  const auto sims = cosine_matrix(features, features) / tau;

  std::vector<torch::Tensor> per_anchor;
  for (int64_t a = 0; a < n; ++a) {
    const auto& anchor = batch.entries[a];
    if (!anchor.is_anchor) continue;
    std::vector<int64_t> pool, positives;
    std::vector<double> weights;
    bool has_negative = false;
    for (int64_t b = 0; b < n; ++b) {
      if (b == a) continue;
      pool.push_back(b);
      const auto& other = batch.entries[b];
      if (other.subject == anchor.subject && other.group == anchor.group) {
        positives.push_back(b);
        weights.push_back(other.positive_weight);
      } else {
        has_negative = true;
      }
    }
    if (positives.empty() || !has_negative) {
      ++result.anchors_excluded;
      continue;
    }
    const auto row = sims[a];
    const auto log_den = torch::logsumexp(row.index_select(0, torch::tensor(pool)), 0);
    const auto pos = row.index_select(0, torch::tensor(positives));
    const auto w = torch::tensor(weights, row.options());
    per_anchor.push_back((log_den - w * pos).mean());
    ++result.anchors_used;
  }
  result.loss = per_anchor.empty() ? torch::zeros({}, features.options())
                                   : torch::stack(per_anchor).mean();
  return result;
}

namespace {

torch::Tensor as_chw(const torch::Tensor& z) {
  if (z.dim() == 4 && z.size(0) == 1) return z.squeeze(0);
  if (z.dim() != 3) throw ShapeError("expected a C×H×W feature map");
  return z;
}

torch::Tensor pixel_rows(const torch::Tensor& chw) {
  return chw.reshape({chw.size(0), -1}).t();  // (H·W)×C
}

torch::Tensor unit_rows(const torch::Tensor& x) {
  return x / x.norm(2, 1, true).clamp_min(1e-12);
}

}  // namespace

torch::Tensor pgd_loss(const torch::Tensor& original, const torch::Tensor& translated,
                       const std::vector<torch::Tensor>& cross_subject, double tau,
                       int max_anchors, std::optional<at::Generator> generator) {
  if (!(tau > 0.0)) throw ArgumentError("pgd_loss: temperature must be positive");
  const auto orig = as_chw(original);
  const auto trans = as_chw(translated);
  if (orig.sizes() != trans.sizes()) throw ShapeError("pgd_loss: content maps are misaligned");

  const auto q = unit_rows(pixel_rows(orig));
  const auto t = unit_rows(pixel_rows(trans));
  const int64_t n = q.size(0);

  auto anchors = torch::arange(n, torch::kInt64);
  if (max_anchors > 0 && n > max_anchors) {
    anchors = generator ? torch::randperm(n, *generator, torch::kInt64)
                        : torch::randperm(n, torch::kInt64);
    anchors = std::get<0>(anchors.slice(0, 0, max_anchors).sort());
  }
  const auto qa = q.index_select(0, anchors);
  const auto pos = (qa * t.index_select(0, anchors)).sum(1, true) / tau;   // A×1
  auto self = torch::matmul(qa, q.t()) / tau;                              // A×N
  // The anchor itself is not part of its own pool.
  auto exclude = torch::zeros({anchors.size(0), n}, torch::kBool);
  exclude.index_put_({torch::arange(anchors.size(0)), anchors}, true);
  self = self.masked_fill(exclude, -std::numeric_limits<double>::infinity());

  std::vector<torch::Tensor> logits = {pos, self};
  for (const auto& other : cross_subject) {
    const auto x = unit_rows(pixel_rows(as_chw(other)));
    if (x.size(1) != q.size(1)) throw ShapeError("pgd_loss: cross-subject channel mismatch");
    logits.push_back(torch::matmul(qa, x.t()) / tau);
  }
  const auto all = torch::cat(logits, 1);
  return (torch::logsumexp(all, 1) - pos.squeeze(1)).mean();
}

torch::Tensor mask_structure(const torch::Tensor& z, const torch::Tensor& labels, int s,
                             int num_classes) {
  if (s < 0 || s >= num_classes)
    throw ArgumentError("mask_structure: class id " + std::to_string(s) + " out of range");
  if (labels.dim() != 2 || z.size(-1) != labels.size(1) || z.size(-2) != labels.size(0))
    throw ShapeError("mask_structure: labels must match the feature grid");
  const auto mask = (labels == s).to(z.dtype());
  return z * mask;
}

torch::Tensor deformation(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw ShapeError("deformation: shape mismatch");
  return (a - b).abs().sum();
}

std::vector<double> rank_weights(const std::vector<double>& deformations, double alpha_s) {
  if (deformations.empty()) throw ArgumentError("rank_weights: empty input");
  for (double d : deformations)
    if (!(d >= 0.0)) throw ArgumentError("rank_weights: deformations must be nonnegative");
  std::vector<double> out;
  out.reserve(deformations.size());
  for (double d : deformations) {
    const auto rank = std::count_if(deformations.begin(), deformations.end(),
                                    [d](double other) { return other > d; });
    out.push_back(std::exp(-alpha_s * static_cast<double>(rank)));
  }
  return out;
}

namespace {

torch::Tensor structure_feature(const torch::Tensor& masked, const torch::Tensor& labels, int s,
                                StructureFeature mode) {
  if (mode == StructureFeature::kFlattened) return masked.reshape({-1});
  const auto count = (labels == s).sum().to(masked.dtype()).clamp_min(1.0);
  return masked.sum({1, 2}) / count;
}

}  // namespace

StructureLossResult sgd_loss(const std::vector<SubjectContent>& subjects, int num_classes,
                             double tau, double alpha_s, StructureFeature feature) {
  StructureLossResult result;
  ContrastBatch batch;
  for (const auto& subj : subjects) {
    const auto orig = as_chw(subj.original);
    const auto trans = as_chw(subj.translated);
    if (orig.sizes() != trans.sizes()) throw ShapeError("sgd_loss: content maps are misaligned");

    std::vector<int> present;
    std::vector<torch::Tensor> masked_orig, masked_trans;
    std::vector<double> deform;
    for (int s = 0; s < num_classes; ++s) {
      if (!(subj.labels == s).any().item<bool>()) {
        ++result.structures_skipped;
        continue;
      }
      present.push_back(s);
      masked_orig.push_back(mask_structure(orig, subj.labels, s, num_classes));
      masked_trans.push_back(mask_structure(trans, subj.labels, s, num_classes));
      deform.push_back(deformation(masked_orig.back(), masked_trans.back()).item<double>());
    }
    std::map<int, double> weights;
    if (!present.empty()) {
      const auto w = rank_weights(deform, alpha_s);
      for (size_t k = 0; k < present.size(); ++k) {
        weights[present[k]] = w[k];
        batch.entries.push_back(
            {structure_feature(masked_orig[k], subj.labels, present[k], feature), subj.subject,
             present[k], true, 1.0});
        batch.entries.push_back(
            {structure_feature(masked_trans[k], subj.labels, present[k], feature), subj.subject,
             present[k], false, w[k]});
      }
    }
    result.weights.push_back(std::move(weights));
  }
  const auto contrast = contrast_loss(batch, tau);
  result.loss = contrast.loss;
  result.anchors_used = contrast.anchors_used;
  return result;
}

GlobalLossResult ggd_loss(const std::vector<SubjectContent>& subjects, double tau) {
  ContrastBatch batch;
  for (const auto& subj : subjects) {
    if (subj.original.sizes() != subj.translated.sizes())
      throw ShapeError("ggd_loss: content maps are misaligned");
    batch.entries.push_back({subj.original.reshape({-1}), subj.subject, kGlobalSlot, true, 1.0});
    batch.entries.push_back({subj.translated.reshape({-1}), subj.subject, kGlobalSlot, false, 1.0});
  }
  const auto contrast = contrast_loss(batch, tau);
  return {contrast.loss, contrast.anchors_used, contrast.anchors_excluded};
}

torch::Tensor cycle_loss(const torch::Tensor& image, const torch::Tensor& reconstructed) {
  if (image.sizes() != reconstructed.sizes()) throw ShapeError("cycle_loss: shape mismatch");
  return (image - reconstructed).abs().mean();
}

torch::Tensor self_recon_loss(const torch::Tensor& image, const torch::Tensor& self_recon) {
  if (image.sizes() != self_recon.sizes()) throw ShapeError("self_recon_loss: shape mismatch");
  return (image - self_recon).abs().mean();
}

torch::Tensor lsgan_discriminator_loss(const std::vector<torch::Tensor>& real,
                                       const std::vector<torch::Tensor>& fake) {
  if (real.size() != fake.size() || real.empty())
    throw ShapeError("lsgan: real and fake score lists must match");
  auto loss = torch::zeros({}, real.front().options());
  for (size_t s = 0; s < real.size(); ++s)
    loss = loss + (real[s] - 1.0).pow(2).mean() + fake[s].pow(2).mean();
  return loss / static_cast<double>(real.size());
}

torch::Tensor lsgan_generator_loss(const std::vector<torch::Tensor>& fake) {
  if (fake.empty()) throw ShapeError("lsgan: empty score list");
  auto loss = torch::zeros({}, fake.front().options());
  for (const auto& f : fake) loss = loss + (f - 1.0).pow(2).mean();
  return loss / static_cast<double>(fake.size());
}

torch::Tensor content_discriminator_loss(const torch::Tensor& scores,
                                         const std::vector<int>& modalities) {
  if (scores.dim() != 2 || scores.size(0) != static_cast<int64_t>(modalities.size()))
    throw ShapeError("content discriminator: one modality per score row expected");
  auto target = torch::zeros_like(scores);
  for (size_t b = 0; b < modalities.size(); ++b) {
    if (modalities[b] < 0 || modalities[b] >= scores.size(1))
      throw ArgumentError("content discriminator: modality out of range");
    target[static_cast<int64_t>(b)][modalities[b]] = 1.0;
  }
  return (scores - target).pow(2).mean();
}

torch::Tensor content_encoder_loss(const torch::Tensor& scores) {
  if (scores.dim() != 2) throw ShapeError("content encoder loss: B×K scores expected");
  return (scores - 1.0 / static_cast<double>(scores.size(1))).pow(2).mean();
}

LossBreakdown total_loss(const LossTerms& terms, const LossConfig& config) {
  const std::array<std::pair<const torch::Tensor*, double>, 7> parts = {{
      {&terms.adv_content, config.lambda_adv_content},
      {&terms.adv_domain, config.lambda_adv_domain},
      {&terms.cycle, config.lambda_cycle},
      {&terms.self_recon, config.lambda_self_recon},
      {&terms.pgd, config.lambda_pgd},
      {&terms.sgd, config.lambda_sgd},
      {&terms.ggd, config.lambda_ggd},
  }};
  LossBreakdown out;
  const auto& names = loss_term_names();
  for (size_t k = 0; k < parts.size(); ++k) {
    const auto& [term, lambda] = parts[k];
    if (!term->defined()) {
      out.weighted[names[k]] = 0.0;
      continue;
    }
    auto weighted = *term * lambda;
    out.total = out.total.defined() ? out.total + weighted : weighted;
    out.weighted[names[k]] = weighted.item<double>();
  }
  if (!out.total.defined()) out.total = torch::zeros({});
  for (const auto& [_, v] : out.weighted) out.total_value += v;
  return out;
}

}  // namespace hgd
