#include "hgd/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <future>
#include <iomanip>
#include <map>

#include "hgd/errors.hpp"

namespace hgd {

int evaluation_workers() {
  const char* env = std::getenv("HGD_NUM_WORKERS");
  if (!env) return 1;
  try {
    return std::max(1, std::stoi(env));
  } catch (const std::exception&) {
    throw ValidationError(std::string("HGD_NUM_WORKERS must be an integer, got '") + env + "'");
  }
}

std::vector<EvaluationRow> evaluate_translations(Trainer& trainer,
                                                 const std::vector<Sample>& test,
                                                 const std::vector<Sample>& calibration,
                                                 int source, int target) {
  const int num_classes = static_cast<int>(trainer.class_names().size());
  const ThresholdSegmenter segmenter(calibration, target, num_classes);

  // Pair each subject's source slice with its target-modality reference.
  std::map<std::pair<std::string, int>, std::pair<const Sample*, const Sample*>> pairs;
  for (const auto& s : test) {
    auto& p = pairs[{s.image.subject_id, s.image.slice_index}];
    if (s.image.modality_id == source) p.first = &s;
    if (s.image.modality_id == target) p.second = &s;
  }
  std::vector<std::pair<const Sample*, const Sample*>> jobs;
  for (const auto& [_, p] : pairs)
    if (p.first && p.second) jobs.push_back(p);

  trainer.models().eval();
  auto evaluate = [&](size_t k) {
    const auto& [src, ref] = jobs[k];
    const auto translated = trainer.translate(src->image, source, target);
    EvaluationRow row;
    row.subject = src->image.subject_id;
    row.source = source;
    row.target = target;
    row.report = voxel_analysis(
        translated, src->labels, [&](const ImageSlice& s) { return segmenter(s); });
    row.report.psnr_db = psnr(ref->image.pixels, translated.pixels);
    row.report.ssim = ssim(ref->image.pixels, translated.pixels);
    return row;
  };

  std::vector<EvaluationRow> rows(jobs.size());
  const size_t workers = std::min(jobs.size(), static_cast<size_t>(evaluation_workers()));
  if (workers <= 1) {
    for (size_t k = 0; k < jobs.size(); ++k) rows[k] = evaluate(k);
  } else {
    std::vector<std::future<void>> futures;
    for (size_t w = 0; w < workers; ++w) {
      futures.push_back(std::async(std::launch::async, [&, w] {
        torch::NoGradGuard guard;
        for (size_t k = w; k < jobs.size(); k += workers) rows[k] = evaluate(k);
      }));
    }
    for (auto& f : futures) f.get();
  }
  trainer.models().train();
  return rows;
}

double VariantResult::mean_psnr() const {
  double s = 0;
  for (const auto& d : directions) s += d.psnr_db;
  return directions.empty() ? 0.0 : s / directions.size();
}

double VariantResult::mean_ssim() const {
  double s = 0;
  for (const auto& d : directions) s += d.ssim;
  return directions.empty() ? 0.0 : s / directions.size();
}

double VariantResult::mean_dice() const {
  double s = 0;
  for (const auto& d : directions) s += d.mean_dice;
  return directions.empty() ? 0.0 : s / directions.size();
}

std::string variant_slug(const std::string& name) {
  std::string slug;
  for (char c : name) {
    if (c == '+') {
      if (!slug.empty()) slug += '_';
    } else {
      slug += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
  }
  return slug;
}

const std::vector<AblationVariant>& ablation_variants() {
  static const std::vector<AblationVariant> variants = {
      {"baseline", AblationFlags::baseline()},
      {"+PGD", {true, false, false, true, true}},
      {"+PGD+SGD", {true, true, false, true, true}},
      {"full", {true, true, true, true, true}},
  };
  return variants;
}

VariantResult run_variant(const RunConfig& base, const AblationVariant& variant, uint64_t seed,
                          const std::vector<Sample>& train, const std::vector<Sample>& test,
                          const std::filesystem::path& out_dir) {
  RunConfig cfg = base;
  cfg.train.seed = seed;
  cfg.train.ablation = variant.flags;
  const auto class_names =
      train.empty() ? phantom_class_names() : train.front().labels.class_names;
  Trainer trainer(cfg.net, cfg.loss, cfg.train, cfg.layout, class_names);
  const auto fitted = fit(trainer, train, out_dir);

  VariantResult result;
  result.variant = variant.name;
  result.seed = seed;
  result.initial_self_recon = fitted.initial_self_recon;
  result.final_self_recon = fitted.final_self_recon;
  result.log_path = out_dir / "train_log.csv";
  for (const auto& [src, dst] : std::vector<std::pair<int, int>>{{0, 1}, {1, 0}}) {
    const auto rows = evaluate_translations(trainer, test, train, src, dst);
    write_evaluation_csv(rows, class_names,
                         out_dir / ("eval_" + std::to_string(src) + "_to_" + std::to_string(dst) + ".csv"));
    DirectionSummary d{src, dst, 0.0, 0.0, 0.0};
    for (const auto& r : rows) {
      d.psnr_db += *r.report.psnr_db;
      d.ssim += *r.report.ssim;
      d.mean_dice += r.report.mean_dice();
    }
    if (!rows.empty()) {
      d.psnr_db /= rows.size();
      d.ssim /= rows.size();
      d.mean_dice /= rows.size();
    }
    result.directions.push_back(d);
  }
  return result;
}

void write_ablation_table(const std::vector<VariantResult>& results,
                          const std::filesystem::path& path) {
  const auto& variants = ablation_variants();
  auto order = [&](const std::string& name) {
    for (size_t k = 0; k < variants.size(); ++k)
      if (variants[k].name == name) return k;
    return variants.size();
  };
  struct Row {
    size_t variant_order;
    const VariantResult* result;
    const DirectionSummary* direction;
  };
  std::vector<Row> rows;
  for (const auto& r : results)
    for (const auto& d : r.directions) rows.push_back({order(r.variant), &r, &d});
  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    return std::tie(a.variant_order, a.result->seed, a.direction->source) <
           std::tie(b.variant_order, b.result->seed, b.direction->source);
  });
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << "variant,seed,direction,psnr_db,ssim,mean_dice_frac\n" << std::setprecision(9);
  for (const auto& row : rows)
    out << row.result->variant << "," << row.result->seed << "," << row.direction->source << "->"
        << row.direction->target << "," << row.direction->psnr_db << "," << row.direction->ssim
        << "," << row.direction->mean_dice << "\n";
}

}  // namespace hgd
