#include "hgd/cli.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "hgd/config.hpp"
#include "hgd/data.hpp"
#include "hgd/errors.hpp"
#include "hgd/evaluator.hpp"
#include "hgd/experiment.hpp"
#include "hgd/memory_bank.hpp"
#include "hgd/trainer.hpp"

namespace hgd {
namespace {

namespace fs = std::filesystem;

void apply_ablation_tokens(const std::string& tokens, AblationFlags& flags) {
  std::stringstream ss(tokens);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok == "pgd") flags.use_pgd = false;
    else if (tok == "sgd") flags.use_sgd = false;
    else if (tok == "ggd") flags.use_ggd = false;
    else if (tok == "bank") flags.use_bank = false, flags.structural_slots = false;
    else if (tok == "slots") flags.structural_slots = false;
    else if (!tok.empty())
      throw UsageError("unknown --ablate token '" + tok + "' (expected pgd, sgd, ggd, bank, slots)");
  }
}

void write_effective_config(const RunConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream(out_dir / "effective_config.json") << cfg.to_json().dump(2) << "\n";
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg = RunConfig::load(path);
  for (const auto& o : overrides) cfg.apply_override(o);
  return cfg;
}

std::vector<Sample> load_manifest_samples(const std::string& path, const NetConfig& net) {
  if (path.empty()) throw ConfigError("a manifest path is required");
  auto manifest = read_manifest(path);
  if (manifest.resolution != net.resolution)
    manifest.resolution = net.resolution;  // resample to the network's working size
  return load_corpus(manifest);
}

std::pair<int, int> parse_direction(const std::string& d) {
  const auto arrow = d.find("->");
  if (arrow == std::string::npos) throw UsageError("direction must look like 0->1");
  try {
    return {std::stoi(d.substr(0, arrow)), std::stoi(d.substr(arrow + 2))};
  } catch (const std::exception&) {
    throw UsageError("direction must look like 0->1");
  }
}

int cmd_make_phantoms(uint64_t seed, int subjects, int resolution, const std::string& out_dir,
                      std::ostream& out) {
  const auto corpus = make_phantom_corpus(seed, subjects, resolution, out_dir);
  out << "wrote " << corpus.train.entries.size() + corpus.test.entries.size() << " images to "
      << out_dir << "\n"
      << "train manifest: " << corpus.train_manifest_path.string() << "\n"
      << "test manifest: " << corpus.test_manifest_path.string() << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, std::string out_dir, const std::string& ablate,
              const std::vector<std::string>& overrides, bool resume, std::ostream& out) {
  RunConfig cfg = load_run_config(config_path, overrides);
  apply_ablation_tokens(ablate, cfg.train.ablation);
  if (out_dir.empty()) out_dir = cfg.output_dir;
  if (out_dir.empty()) throw UsageError("--out is required when the config has no output_dir");
  cfg.output_dir = out_dir;
  write_effective_config(cfg, out_dir);

  const auto train = load_manifest_samples(cfg.train_manifest, cfg.net);
  const auto class_names =
      train.empty() ? phantom_class_names() : train.front().labels.class_names;
  std::unique_ptr<Trainer> trainer;
  const auto ckpt = fs::path(out_dir) / "checkpoint.pt";
  if (resume && fs::exists(ckpt)) {
    trainer = Trainer::from_checkpoint(ckpt);
    out << "resuming from step " << trainer->step() << "\n";
  } else {
    trainer = std::make_unique<Trainer>(cfg.net, cfg.loss, cfg.train, cfg.layout, class_names);
  }
  out << "training " << cfg.train.steps << " steps (" << cfg.train.ablation.describe() << ")\n";
  const auto result = fit(*trainer, train, out_dir);
  out << "self-reconstruction L1: " << result.initial_self_recon << " -> "
      << result.final_self_recon << "\n";
  if (!cfg.test_manifest.empty()) {
    const auto test = load_manifest_samples(cfg.test_manifest, cfg.net);
    for (const auto& [s, t] : std::vector<std::pair<int, int>>{{0, 1}, {1, 0}}) {
      const auto rows = evaluate_translations(*trainer, test, train, s, t);
      write_evaluation_csv(rows, class_names,
                           fs::path(out_dir) /
                               ("eval_" + std::to_string(s) + "_to_" + std::to_string(t) + ".csv"));
    }
  }
  out << "checkpoint: " << ckpt.string() << "\n";
  return 0;
}

int cmd_translate(const std::string& checkpoint, const std::string& input, int source,
                  int target, const std::string& out_path, std::ostream& out) {
  auto trainer = Trainer::from_checkpoint(checkpoint);
  const auto& net = trainer->net_config();
  if (source < 0 || source >= net.num_modalities || target < 0 || target >= net.num_modalities)
    throw ValidationError("modality ids must lie in [0, " + std::to_string(net.num_modalities) + ")");
  std::vector<fs::path> inputs;
  if (fs::is_directory(input)) {
    for (const auto& e : fs::directory_iterator(input))
      if (e.path().extension() == ".npy") inputs.push_back(e.path());
    std::sort(inputs.begin(), inputs.end());
  } else {
    inputs.push_back(input);
  }
  const bool to_dir = inputs.size() > 1 || fs::is_directory(out_path) ||
                      fs::path(out_path).extension() != ".npy";
  if (to_dir) fs::create_directories(out_path);
  trainer->models().eval();
  for (const auto& in : inputs) {
    auto pixels = resize_image(load_image_file(in), net.resolution, net.resolution);
    ImageSlice slice{minmax_to_unit_range(pixels), in.stem().string(), source, 0};
    const auto translated = trainer->translate(slice, source, target);
    const fs::path dest = to_dir ? fs::path(out_path) / (in.stem().string() + "_to" +
                                                         std::to_string(target) + ".npy")
                                 : fs::path(out_path);
    save_image_file(dest, translated.pixels);
    out << dest.string() << "\n";
  }
  return 0;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& manifest_path,
                 const std::string& calibration_path, const std::string& direction,
                 const std::string& out_dir, std::ostream& out) {
  auto trainer = Trainer::from_checkpoint(checkpoint);
  const auto test = load_manifest_samples(manifest_path, trainer->net_config());
  const auto calibration = calibration_path.empty()
                               ? test
                               : load_manifest_samples(calibration_path, trainer->net_config());
  std::vector<std::pair<int, int>> directions;
  if (direction == "both") directions = {{0, 1}, {1, 0}};
  else directions = {parse_direction(direction)};
  const int k = trainer->net_config().num_modalities;
  for (const auto& [s, t] : directions)
    if (s < 0 || s >= k || t < 0 || t >= k || s == t)
      throw ValidationError("invalid direction " + std::to_string(s) + "->" + std::to_string(t));

  fs::create_directories(out_dir);
  std::vector<EvaluationRow> rows;
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& [s, t] : directions) {
    auto r = evaluate_translations(*trainer, test, calibration, s, t);
    MetricReport agg;
    agg.class_names = trainer->class_names();
    agg.n_samples = static_cast<int>(r.size());
    double p = 0, q = 0;
    for (const auto& row : r) {
      p += *row.report.psnr_db;
      q += *row.report.ssim;
      for (const auto& [cls, o] : row.report.per_class) {
        agg.per_class[cls].dice += o.dice / static_cast<double>(r.size());
        agg.per_class[cls].vol_similarity += o.vol_similarity / static_cast<double>(r.size());
      }
    }
    if (!r.empty()) {
      agg.psnr_db = p / r.size();
      agg.ssim = q / r.size();
    }
    auto j = agg.to_json();
    j["direction"] = std::to_string(s) + "->" + std::to_string(t);
    summary.push_back(j);
    out << s << "->" << t << ": PSNR " << agg.psnr_db.value_or(0.0) << " dB, SSIM "
        << agg.ssim.value_or(0.0) << ", mean Dice " << agg.mean_dice() << " (" << r.size()
        << " subjects)\n";
    rows.insert(rows.end(), r.begin(), r.end());
  }
  write_evaluation_csv(rows, trainer->class_names(), fs::path(out_dir) / "metrics.csv");
  std::ofstream(fs::path(out_dir) / "metrics.json") << summary.dump(2) << "\n";
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& out_dir,
               const std::vector<uint64_t>& seeds, const std::vector<std::string>& overrides,
               std::ostream& out) {
  RunConfig cfg = load_run_config(config_path, overrides);
  cfg.output_dir = out_dir;
  write_effective_config(cfg, out_dir);
  const auto train = load_manifest_samples(cfg.train_manifest, cfg.net);
  const auto test = load_manifest_samples(cfg.test_manifest, cfg.net);
  std::vector<VariantResult> results;
  for (const auto seed : seeds) {
    for (const auto& variant : ablation_variants()) {
      const auto dir_name = variant_slug(variant.name);
      const auto dir = fs::path(out_dir) / ("seed" + std::to_string(seed)) / dir_name;
      out << "training " << variant.name << " (seed " << seed << ")\n";
      results.push_back(run_variant(cfg, variant, seed, train, test, dir));
      out << "  PSNR " << results.back().mean_psnr() << " dB, SSIM " << results.back().mean_ssim()
          << ", mean Dice " << results.back().mean_dice() << "\n";
    }
  }
  write_ablation_table(results, fs::path(out_dir) / "ablation.csv");
  out << "table: " << (fs::path(out_dir) / "ablation.csv").string() << "\n";
  return 0;
}

int cmd_export(const std::string& checkpoint, const std::string& manifest_path,
               const std::string& out_dir, std::ostream& out) {
  auto trainer = Trainer::from_checkpoint(checkpoint);
  const auto samples = load_manifest_samples(manifest_path, trainer->net_config());
  const auto& net = trainer->net_config();
  fs::create_directories(out_dir);
  torch::NoGradGuard guard;
  trainer->models().eval();
  std::vector<torch::Tensor> contents, labels;
  std::vector<std::string> ids;
  for (const auto& s : samples) {
    const auto z = trainer->models().encode_content(s.image, s.image.modality_id);
    contents.push_back(z.values.squeeze(0));
    labels.push_back(downsample_labels(s.labels, net.content_size, net.content_size).classes);
    ids.push_back(s.image.subject_id + "_mod" + std::to_string(s.image.modality_id));
  }
  export_embeddings(contents, labels, ids, trainer->class_names(),
                    fs::path(out_dir) / "embeddings.csv");
  out << (fs::path(out_dir) / "embeddings.csv").string() << "\n";
  if (trainer->bank() && !samples.empty()) {
    const auto queries = content_to_queries(contents.front().unsqueeze(0));
    export_affinity_csv(affinities(queries, *trainer->bank()), labels.front().reshape({-1}),
                        *trainer->bank(), trainer->class_names(),
                        fs::path(out_dir) / "affinity.csv");
    out << (fs::path(out_dir) / "affinity.csv").string() << "\n";
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Structure-preserving unpaired image translation with a memory bank"};
  app.require_subcommand(1);

  uint64_t seed = 0;
  int subjects = 20, resolution = 64;
  std::string out_dir, config, ablate, checkpoint, input, manifest, calibration, direction = "both";
  std::string out_path;
  int source = 0, target = 1;
  bool resume = false;
  std::vector<std::string> overrides;
  std::vector<uint64_t> seeds = {0};

  auto* phantoms = app.add_subcommand("make-phantoms", "Write a synthetic two-modality corpus");
  phantoms->add_option("--seed", seed, "Random seed");
  phantoms->add_option("--subjects", subjects, "Number of subjects")->capture_default_str();
  phantoms->add_option("--resolution", resolution, "Slice size")->capture_default_str();
  phantoms->add_option("--out", out_dir, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config, "Run configuration (JSON)")->required();
  train->add_option("--out", out_dir, "Output directory");
  train->add_option("--ablate", ablate, "Comma-separated: pgd,sgd,ggd,bank,slots");
  train->add_option("--set", overrides, "Config override key.path=value (repeatable)");
  train->add_flag("--resume", resume, "Continue from <out>/checkpoint.pt if present");

  auto* translate = app.add_subcommand("translate", "Translate slices between modalities");
  translate->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  translate->add_option("--input", input, ".npy slice or a directory of them")->required();
  translate->add_option("--source", source, "Source modality id")->required();
  translate->add_option("--target", target, "Target modality id")->required();
  translate->add_option("--out", out_path, "Output .npy file or directory")->required();

  auto* evaluate = app.add_subcommand("evaluate", "Score translations against references");
  evaluate->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  evaluate->add_option("--manifest", manifest, "Test manifest")->required();
  evaluate->add_option("--calibration", calibration, "Manifest for segmenter calibration");
  evaluate->add_option("--direction", direction, "i->j or 'both'")->capture_default_str();
  evaluate->add_option("--out", out_dir, "Output directory")->required();

  auto* ablation = app.add_subcommand("ablate", "Train and compare the ablation variants");
  ablation->add_option("--config", config, "Run configuration (JSON)")->required();
  ablation->add_option("--out", out_dir, "Output directory")->required();
  ablation->add_option("--seeds", seeds, "Seeds, e.g. --seeds 0 1 2");
  ablation->add_option("--set", overrides, "Config override key.path=value (repeatable)");

  auto* exporter = app.add_subcommand("export", "Export embeddings and affinities as CSV");
  exporter->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  exporter->add_option("--manifest", manifest, "Manifest of slices to embed")->required();
  exporter->add_option("--out", out_dir, "Output directory")->required();

  std::vector<std::string> argv_store = {"hgd"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kUsage);
  }

  try {
    if (*phantoms) return cmd_make_phantoms(seed, subjects, resolution, out_dir, out);
    if (*train) return cmd_train(config, out_dir, ablate, overrides, resume, out);
    if (*translate) return cmd_translate(checkpoint, input, source, target, out_path, out);
    if (*evaluate) return cmd_evaluate(checkpoint, manifest, calibration, direction, out_dir, out);
    if (*ablation) return cmd_ablate(config, out_dir, seeds, overrides, out);
    if (*exporter) return cmd_export(checkpoint, manifest, out_dir, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const c10::Error& e) {
    err << "error: " << e.what_without_backtrace() << "\n";
    return static_cast<int>(ExitCode::kRuntime);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kRuntime);
  }
  return static_cast<int>(ExitCode::kUsage);
}

}  // namespace hgd
