#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "hgd/losses.hpp"
#include "hgd/memory_bank.hpp"
#include "hgd/networks.hpp"
#include "hgd/trainer.hpp"
#include "json.hpp"

namespace hgd {

nlohmann::json layout_to_json(const BankLayout& layout);
BankLayout layout_from_json(const nlohmann::json& j);

/// Everything a training run needs, loaded from a JSON document whose
/// top-level keys are exactly those written by to_json().
struct RunConfig {
  NetConfig net;
  LossConfig loss;
  TrainConfig train;
  BankLayout layout = BankLayout::brain_four_class();
  std::string train_manifest;
  std::string test_manifest;
  std::string output_dir;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);

  /// Applies "a.b=value" overrides, e.g. "train.steps=200" or
  /// "loss.tau1=0.2". Unknown keys are rejected.
  void apply_override(const std::string& assignment);
};

}  // namespace hgd
