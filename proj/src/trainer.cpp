#include "hgd/trainer.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <iomanip>
#include <sstream>

#include "hgd/config.hpp"
#include "hgd/errors.hpp"

namespace hgd {

AblationFlags AblationFlags::baseline() { return {false, false, false, false, false}; }

nlohmann::json AblationFlags::to_json() const {
  return {{"use_pgd", use_pgd},
          {"use_sgd", use_sgd},
          {"use_ggd", use_ggd},
          {"structural_slots", structural_slots},
          {"use_bank", use_bank}};
}

AblationFlags AblationFlags::from_json(const nlohmann::json& j) {
  AblationFlags f;
  const auto defaults = f.to_json();
  for (const auto& [key, _] : j.items())
    if (!defaults.contains(key)) throw ConfigError("unknown ablation key '" + key + "'");
  f.use_pgd = j.value("use_pgd", f.use_pgd);
  f.use_sgd = j.value("use_sgd", f.use_sgd);
  f.use_ggd = j.value("use_ggd", f.use_ggd);
  f.structural_slots = j.value("structural_slots", f.structural_slots);
  f.use_bank = j.value("use_bank", f.use_bank);
  return f;
}

std::string AblationFlags::describe() const {
  std::ostringstream s;
  s << "pgd=" << use_pgd << " sgd=" << use_sgd << " ggd=" << use_ggd
    << " structural_slots=" << structural_slots << " bank=" << use_bank;
  return s.str();
}

namespace {

const char* value_source_name(ValueSource v) {
  switch (v) {
    case ValueSource::kAttributeMap: return "attribute_map";
    case ValueSource::kEnhanced: return "enhanced";
  }
  return "attribute_map";
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("Adam betas must lie in [0, 1)");
  if (batch_size != 2)
    throw ConfigError("batch_size must be 2: one slice from each modality of a pair");
  if (steps < 0) throw ConfigError("steps must be nonnegative");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be nonnegative");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate},
          {"beta1", beta1},
          {"beta2", beta2},
          {"batch_size", batch_size},
          {"steps", steps},
          {"seed", seed},
          {"ablation", ablation.to_json()},
          {"read_mode", read_mode == ReadMode::kMemoryValues ? "memory_values" : "input_attribute"},
          {"update_weighting",
           update_weighting == UpdateWeighting::kAssignedQueries ? "assigned_queries"
                                                                 : "slot_softmax"},
          {"test_attribute", test_attribute == TestAttribute::kZero ? "zero" : "sample"},
          {"value_source", value_source_name(value_source)},
          {"checkpoint_every", checkpoint_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  const auto defaults = c.to_json();
  for (const auto& [key, _] : j.items())
    if (!defaults.contains(key)) throw ConfigError("unknown train key '" + key + "'");
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  c.seed = j.value("seed", c.seed);
  if (j.contains("ablation")) c.ablation = AblationFlags::from_json(j.at("ablation"));
  const auto read_mode = j.value("read_mode", std::string("memory_values"));
  if (read_mode == "memory_values") c.read_mode = ReadMode::kMemoryValues;
  else if (read_mode == "input_attribute") c.read_mode = ReadMode::kInputAttribute;
  else throw ConfigError("read_mode must be 'memory_values' or 'input_attribute'");
  const auto weighting = j.value("update_weighting", std::string("assigned_queries"));
  if (weighting == "assigned_queries") c.update_weighting = UpdateWeighting::kAssignedQueries;
  else if (weighting == "slot_softmax") c.update_weighting = UpdateWeighting::kSlotSoftmax;
  else throw ConfigError("update_weighting must be 'assigned_queries' or 'slot_softmax'");
  const auto attr = j.value("test_attribute", std::string("zero"));
  if (attr == "zero") c.test_attribute = TestAttribute::kZero;
  else if (attr == "sample") c.test_attribute = TestAttribute::kSample;
  else throw ConfigError("test_attribute must be 'zero' or 'sample'");
  const auto source = j.value("value_source", std::string("attribute_map"));
  if (source == "attribute_map") c.value_source = ValueSource::kAttributeMap;
  else if (source == "enhanced") c.value_source = ValueSource::kEnhanced;
  else
    throw ConfigError("value_source must be 'attribute_map' or 'enhanced'");
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.validate();
  return c;
}

Trainer::Trainer(NetConfig net, LossConfig loss, TrainConfig train, BankLayout layout,
                 std::vector<std::string> class_names)
    : loss_cfg_(std::move(loss)),
      train_cfg_(std::move(train)),
      layout_(std::move(layout)),
      class_names_(std::move(class_names)),
      models_(net, train_cfg_.seed),
      rng_(at::make_generator<at::CPUGeneratorImpl>(train_cfg_.seed + 0x5bd1e995ULL)) {
  loss_cfg_.validate();
  train_cfg_.validate();
  if (train_cfg_.ablation.use_bank) {
    const int c = net.content_channels;
    const int ca = net.attr_dim;
    const uint64_t bank_seed = train_cfg_.seed + 0x27d4eb2dULL;
    if (train_cfg_.ablation.structural_slots)
      bank_ = build_bank(layout_, c, ca, net.num_modalities, loss_cfg_.alpha_p, bank_seed);
    else
      bank_ = build_global_bank(layout_.global_slots, c, ca, net.num_modalities,
                                loss_cfg_.alpha_p, bank_seed);
    bank_->weighting = train_cfg_.update_weighting;
  }
  auto adam = torch::optim::AdamOptions(train_cfg_.learning_rate)
                  .betas({train_cfg_.beta1, train_cfg_.beta2});
  gen_opt_ = std::make_unique<torch::optim::Adam>(models_.generator_parameters(), adam);
  disc_opt_ = std::make_unique<torch::optim::Adam>(models_.discriminator_parameters(), adam);
}

nlohmann::json Trainer::config_json() const {
  return {{"net", models_.config().to_json()},
          {"loss", loss_cfg_.to_json()},
          {"train", train_cfg_.to_json()},
          {"bank_layout", layout_to_json(layout_)},
          {"class_names", class_names_}};
}

torch::Tensor Trainer::read_enhanced(const FeatureMap& content, int domain,
                                     const FeatureMap& attr) {
  const auto& z = content.values;
  const int64_t b = z.size(0), h = z.size(2), w = z.size(3);
  if (!bank_) return torch::zeros({b, models_.config().attr_dim, h, w}, z.options());
  const auto queries = content_to_queries(z);
  torch::Tensor per_query_attr;
  if (train_cfg_.read_mode == ReadMode::kInputAttribute)
    per_query_attr = attr.values.repeat_interleave(h * w, 0);
  const auto r = read(queries, *bank_, domain, train_cfg_.read_mode, per_query_attr);
  return queries_to_map(r.enhanced, b, h, w);
}

ForwardPass Trainer::forward(const torch::Tensor& x_i, int i, const torch::Tensor& x_j, int j) {
  ForwardPass f;
  f.content_i = models_.encode_content(x_i, i);
  f.content_j = models_.encode_content(x_j, j);
  f.attr_i = models_.encode_attribute(x_i, i);
  f.attr_j = models_.encode_attribute(x_j, j);

  f.enhanced_ij = read_enhanced(f.content_i, j, f.attr_j);
  f.enhanced_ii = read_enhanced(f.content_i, i, f.attr_i);
  f.enhanced_ji = read_enhanced(f.content_j, i, f.attr_i);
  f.enhanced_jj = read_enhanced(f.content_j, j, f.attr_j);

  // Each generator renders the translation and the self-reconstruction in
  // one batched call.
  const auto out_i = models_.generate(
      {torch::cat({f.content_j.values, f.content_i.values}, 0), FeatureKind::kContent},
      {torch::cat({combine(f.attr_i.values, f.enhanced_ji), combine(f.attr_i.values, f.enhanced_ii)},
                  0),
       FeatureKind::kCombined},
      i);
  const auto out_j = models_.generate(
      {torch::cat({f.content_i.values, f.content_j.values}, 0), FeatureKind::kContent},
      {torch::cat({combine(f.attr_j.values, f.enhanced_ij), combine(f.attr_j.values, f.enhanced_jj)},
                  0),
       FeatureKind::kCombined},
      j);
  const int64_t b = x_i.size(0);
  f.fake_i = out_i.slice(0, 0, b);
  f.self_i = out_i.slice(0, b);
  f.fake_j = out_j.slice(0, 0, b);
  f.self_j = out_j.slice(0, b);

  // Second translation back to the source domains.
  f.content_fake_j = models_.encode_content(f.fake_j, j);
  f.content_fake_i = models_.encode_content(f.fake_i, i);
  f.attr_fake_j = models_.encode_attribute(f.fake_j, j);
  f.attr_fake_i = models_.encode_attribute(f.fake_i, i);
  f.recon_i = models_.generate(
      f.content_fake_j,
      {combine(f.attr_fake_i.values, read_enhanced(f.content_fake_j, i, f.attr_fake_i)),
       FeatureKind::kCombined},
      i);
  f.recon_j = models_.generate(
      f.content_fake_i,
      {combine(f.attr_fake_j.values, read_enhanced(f.content_fake_i, j, f.attr_fake_j)),
       FeatureKind::kCombined},
      j);
  return f;
}

namespace {

std::string format_breakdown(const std::map<std::string, double>& terms) {
  std::ostringstream s;
  s << std::setprecision(9);
  for (const auto& [k, v] : terms) s << " " << k << "=" << v;
  return s.str();
}

}  // namespace

StepResult Trainer::train_step(const TrainBatch& batch) {
  if (!batch.source || !batch.target) throw ArgumentError("train_step: incomplete batch");
  const auto& a = *batch.source;
  const auto& b = *batch.target;
  const int i = a.image.modality_id;
  const int j = b.image.modality_id;
  if (i == j) throw ArgumentError("train_step: batch must pair two different modalities");
  if (a.image.subject_id == b.image.subject_id)
    throw ArgumentError("train_step: batch must pair two different subjects");

  const auto& net = models_.config();
  const int num_classes = static_cast<int>(class_names_.size());
  const auto labels_i = downsample_labels(a.labels, net.content_size, net.content_size).classes;
  const auto labels_j = downsample_labels(b.labels, net.content_size, net.content_size).classes;

  models_.train();
  const auto x_i = to_batch(a.image);
  const auto x_j = to_batch(b.image);
  auto f = forward(x_i, i, x_j, j);

  // Discriminators (D_i, D_j, D^c) on detached fakes.
  disc_opt_->zero_grad();
  auto d_loss =
      lsgan_discriminator_loss(models_.discriminate_domain(x_i, i),
                               models_.discriminate_domain(f.fake_i.detach(), i)) +
      lsgan_discriminator_loss(models_.discriminate_domain(x_j, j),
                               models_.discriminate_domain(f.fake_j.detach(), j)) +
      content_discriminator_loss(
          models_.discriminate_content(
              {torch::cat({f.content_i.values.detach(), f.content_j.values.detach()}, 0),
               FeatureKind::kContent}),
          {i, j});
  const double d_value = d_loss.item<double>();
  if (!std::isfinite(d_value))
    throw NonFiniteLossError("non-finite discriminator loss at step " + std::to_string(step_));
  d_loss.backward();
  disc_opt_->step();
  emit("discriminator_step");

  // Encoders and generators.
  gen_opt_->zero_grad();
  LossTerms terms;
  terms.adv_domain = 0.5 * (lsgan_generator_loss(models_.discriminate_domain(f.fake_i, i)) +
                            lsgan_generator_loss(models_.discriminate_domain(f.fake_j, j)));
  terms.adv_content = content_encoder_loss(models_.discriminate_content(
      {torch::cat({f.content_i.values, f.content_j.values}, 0), FeatureKind::kContent}));
  terms.cycle = 0.5 * (cycle_loss(x_i, f.recon_i) + cycle_loss(x_j, f.recon_j));
  terms.self_recon = 0.5 * (self_recon_loss(x_i, f.self_i) + self_recon_loss(x_j, f.self_j));

  auto features = [&](const FeatureMap& z) { return models_.contrast_features(z.values).squeeze(0); };
  const std::vector<SubjectContent> subjects = {
      {a.image.subject_id, features(f.content_i), features(f.content_fake_j), labels_i},
      {b.image.subject_id, features(f.content_j), features(f.content_fake_i), labels_j},
  };
  const auto& abl = train_cfg_.ablation;
  if (abl.use_pgd) {
    terms.pgd = 0.5 * (pgd_loss(subjects[0].original, subjects[0].translated,
                                {subjects[1].original}, loss_cfg_.tau1,
                                loss_cfg_.pgd_max_anchors, rng_) +
                       pgd_loss(subjects[1].original, subjects[1].translated,
                                {subjects[0].original}, loss_cfg_.tau1,
                                loss_cfg_.pgd_max_anchors, rng_));
  }
  if (abl.use_sgd)
    terms.sgd = sgd_loss(subjects, num_classes, loss_cfg_.tau2, loss_cfg_.alpha_s,
                         loss_cfg_.structure_feature)
                    .loss;
  if (abl.use_ggd) terms.ggd = ggd_loss(subjects, loss_cfg_.tau2).loss;

  StepResult result;
  result.step = step_;
  result.breakdown = total_loss(terms, loss_cfg_);
  result.discriminator_loss = d_value;
  const auto& names = loss_term_names();
  const std::array<const torch::Tensor*, 7> raw = {&terms.adv_content, &terms.adv_domain,
                                                   &terms.cycle,       &terms.self_recon,
                                                   &terms.pgd,         &terms.sgd,
                                                   &terms.ggd};
  for (size_t k = 0; k < raw.size(); ++k)
    result.raw[names[k]] = raw[k]->defined() ? raw[k]->item<double>() : 0.0;

  bool finite = std::isfinite(result.breakdown.total_value);
  for (const auto& [_, v] : result.breakdown.weighted) finite = finite && std::isfinite(v);
  if (!finite)
    throw NonFiniteLossError("non-finite loss at step " + std::to_string(step_) + ":" +
                             format_breakdown(result.breakdown.weighted));
  result.breakdown.total.backward();
  gen_opt_->step();
  emit("generator_step");

  if (bank_) {
    const auto q_orig = torch::cat({content_to_queries(f.content_i.values),
                                    content_to_queries(f.content_j.values)}, 0).detach();
    const auto q_trans = torch::cat({content_to_queries(f.content_fake_j.values),
                                     content_to_queries(f.content_fake_i.values)}, 0).detach();
    // Rows follow q_orig: pixels of x_i first, then pixels of x_j. A domain's
    // row is written from the image of that domain showing the same pixel.
    std::vector<torch::Tensor> enhanced(net.num_modalities);
    if (train_cfg_.value_source != ValueSource::kEnhanced) {
      torch::NoGradGuard no_grad;
      auto source = [&](const torch::Tensor& x, int d) {
        return content_to_queries(models_.attribute_map(x.detach(), d));
      };
      enhanced[i] = torch::cat({source(x_i, i), source(f.fake_i, i)}, 0);
      enhanced[j] = torch::cat({source(f.fake_j, j), source(x_j, j)}, 0);
    } else {
      enhanced[i] = torch::cat({content_to_queries(f.enhanced_ii), content_to_queries(f.enhanced_ji)}, 0)
                        .detach();
      enhanced[j] = torch::cat({content_to_queries(f.enhanced_ij), content_to_queries(f.enhanced_jj)}, 0)
                        .detach();
    }
    torch::Tensor labels;
    if (bank_->has_structural_slots())
      labels = torch::cat({labels_i.reshape({-1}), labels_j.reshape({-1})});
    bank_ = update(*bank_, q_orig, q_trans, enhanced, labels);
    emit("bank_update");
  }
  ++step_;
  return result;
}

ImageSlice Trainer::translate(const ImageSlice& slice, int source_modality, int target_modality) {
  const auto& net = models_.config();
  if (source_modality < 0 || source_modality >= net.num_modalities ||
      target_modality < 0 || target_modality >= net.num_modalities)
    throw ArgumentError("translate: unknown modality");
  torch::NoGradGuard guard;
  const auto x = to_batch(slice);
  const auto content = models_.encode_content(x, source_modality);
  torch::Tensor code = torch::zeros({1, net.attr_dim});
  if (train_cfg_.test_attribute == TestAttribute::kSample) {
    // Seeded from the configuration only, so repeated calls agree.
    auto gen = at::make_generator<at::CPUGeneratorImpl>(train_cfg_.seed + 0x1000193ULL);
    code = torch::randn({1, net.attr_dim}, gen);
  }
  const FeatureMap attr{code, FeatureKind::kAttribute};
  const auto enhanced = read_enhanced(content, target_modality, attr);
  auto out = models_.generate(content, {combine(code, enhanced), FeatureKind::kCombined},
                              target_modality);
  return ImageSlice{out.squeeze(0).squeeze(0).contiguous(), slice.subject_id, target_modality,
                    slice.slice_index};
}

double Trainer::self_recon_error(const std::vector<Sample>& samples) {
  if (samples.empty()) return 0.0;
  torch::NoGradGuard guard;
  models_.eval();
  double total = 0.0;
  for (const auto& s : samples) {
    const int m = s.image.modality_id;
    const auto x = to_batch(s.image);
    const auto content = models_.encode_content(x, m);
    const auto attr = models_.encode_attribute(x, m);
    const auto enhanced = read_enhanced(content, m, attr);
    const auto out =
        models_.generate(content, {combine(attr.values, enhanced), FeatureKind::kCombined}, m);
    total += self_recon_loss(x, out).item<double>();
  }
  models_.train();
  return total / static_cast<double>(samples.size());
}

TrainBatch Trainer::next_batch(const std::vector<Sample>& samples) {
  const int k = models_.config().num_modalities;
  std::vector<std::pair<int, int>> pairs;
  for (int a = 0; a < k; ++a)
    for (int b = a + 1; b < k; ++b) pairs.emplace_back(a, b);
  const auto [mi, mj] = pairs[static_cast<size_t>(step_) % pairs.size()];

  std::vector<const Sample*> pool_i, pool_j;
  for (const auto& s : samples) {
    if (s.image.modality_id == mi) pool_i.push_back(&s);
    if (s.image.modality_id == mj) pool_j.push_back(&s);
  }
  if (pool_i.empty() || pool_j.empty())
    throw ValidationError("training corpus lacks a modality of pair (" + std::to_string(mi) +
                          ", " + std::to_string(mj) + ")");
  auto draw = [this](size_t n) {
    return static_cast<size_t>(torch::randint(static_cast<int64_t>(n), {1}, rng_).item<int64_t>());
  };
  const Sample* source = pool_i[draw(pool_i.size())];
  std::vector<const Sample*> others;
  for (const auto* s : pool_j)
    if (s->image.subject_id != source->image.subject_id) others.push_back(s);
  if (others.empty()) throw ValidationError("training corpus needs at least two subjects");
  return {source, others[draw(others.size())]};
}

void Trainer::save(const std::filesystem::path& path) const {
  torch::serialize::OutputArchive archive;
  archive.write("config", torch::IValue(config_json().dump()));
  archive.write("step", torch::tensor(static_cast<int64_t>(step_)));
  torch::serialize::OutputArchive models;
  models_.save(models);
  archive.write("models", models);
  if (bank_) {
    torch::serialize::OutputArchive bank;
    bank_->save(bank);
    archive.write("bank", bank);
  }
  torch::serialize::OutputArchive gen, disc;
  gen_opt_->save(gen);
  disc_opt_->save(disc);
  archive.write("gen_optimizer", gen);
  archive.write("disc_optimizer", disc);
  archive.write("rng_state", rng_.get_state());
  archive.save_to(path.string());

  std::ofstream sidecar(path.string() + ".json");
  sidecar << config_json().dump(2) << "\n";
}

void Trainer::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw LoadError("missing checkpoint: " + path.string());
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
  } catch (const c10::Error& e) {
    throw LoadError("unreadable checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  torch::Tensor step;
  archive.read("step", step);
  step_ = static_cast<int>(step.item<int64_t>());
  torch::serialize::InputArchive models;
  archive.read("models", models);
  models_.load(models);
  if (bank_) {
    torch::serialize::InputArchive bank;
    archive.read("bank", bank);
    bank_ = MemoryBank::load(bank);
  }
  torch::serialize::InputArchive gen, disc;
  archive.read("gen_optimizer", gen);
  archive.read("disc_optimizer", disc);
  gen_opt_->load(gen);
  disc_opt_->load(disc);
  torch::Tensor rng_state;
  archive.read("rng_state", rng_state);
  rng_.set_state(rng_state);
}

std::unique_ptr<Trainer> Trainer::from_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw LoadError("missing checkpoint: " + path.string());
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
  } catch (const c10::Error& e) {
    throw LoadError("unreadable checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  torch::IValue stored;
  archive.read("config", stored);
  const auto j = nlohmann::json::parse(stored.toStringRef());
  auto trainer = std::make_unique<Trainer>(
      NetConfig::from_json(j.at("net")), LossConfig::from_json(j.at("loss")),
      TrainConfig::from_json(j.at("train")), layout_from_json(j.at("bank_layout")),
      j.at("class_names").get<std::vector<std::string>>());
  trainer->load(path);
  return trainer;
}

TrainingLog::TrainingLog(const std::filesystem::path& path, bool append)
    : out_(path, append ? std::ios::app : std::ios::trunc) {
  if (!out_) throw LoadError("cannot write training log " + path.string());
  if (!append) out_ << header() << "\n";
  out_ << std::setprecision(9);
}

std::string TrainingLog::header() {
  std::string h = "step";
  for (const auto& n : loss_term_names()) h += "," + n;
  return h + ",total,discriminator";
}

void TrainingLog::write(const StepResult& r) {
  out_ << r.step;
  for (const auto& n : loss_term_names()) out_ << "," << r.breakdown.weighted.at(n);
  out_ << "," << r.breakdown.total_value << "," << r.discriminator_loss << "\n";
  out_.flush();
}

FitResult fit(Trainer& trainer, const std::vector<Sample>& train_samples,
              const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  const auto log_path = out_dir / "train_log.csv";
  const auto ckpt_path = out_dir / "checkpoint.pt";
  const bool resumed = trainer.step() > 0;
  TrainingLog log(log_path, resumed && std::filesystem::exists(log_path));

  FitResult result;
  result.initial_self_recon = trainer.self_recon_error(train_samples);
  const auto& cfg = trainer.train_config();
  while (trainer.step() < cfg.steps) {
    const auto batch = trainer.next_batch(train_samples);
    auto r = trainer.train_step(batch);
    log.write(r);
    result.steps.push_back(std::move(r));
    if (cfg.checkpoint_every > 0 && trainer.step() % cfg.checkpoint_every == 0 &&
        trainer.step() < cfg.steps)
      trainer.save(ckpt_path);
  }
  trainer.save(ckpt_path);
  result.final_self_recon = trainer.self_recon_error(train_samples);
  return result;
}

}  // namespace hgd
