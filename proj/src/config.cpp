#include "hgd/config.hpp"

#include <fstream>
#include <set>

#include "hgd/errors.hpp"

namespace hgd {

using nlohmann::json;

json layout_to_json(const BankLayout& layout) {
  json structural = json::array();
  for (const auto& [cls, count] : layout.structural) structural.push_back({cls, count});
  return {{"structural", structural}, {"global", layout.global_slots}};
}

BankLayout layout_from_json(const json& j) {
  for (const auto& [key, _] : j.items())
    if (key != "structural" && key != "global")
      throw ConfigError("unknown bank_layout key '" + key + "'");
  BankLayout layout;
  try {
    for (const auto& entry : j.at("structural"))
      layout.structural.emplace_back(entry.at(0).get<int>(), entry.at(1).get<int>());
    layout.global_slots = j.at("global").get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid bank_layout: ") + e.what());
  }
  return layout;
}

json RunConfig::to_json() const {
  return {{"net", net.to_json()},
          {"loss", loss.to_json()},
          {"train", train.to_json()},
          {"bank_layout", layout_to_json(layout)},
          {"train_manifest", train_manifest},
          {"test_manifest", test_manifest},
          {"output_dir", output_dir}};
}

RunConfig RunConfig::from_json(const json& j) {
  static const std::set<std::string> known = {"net",           "loss",           "train",
                                              "bank_layout",   "train_manifest", "test_manifest",
                                              "output_dir"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  RunConfig c;
  try {
    if (j.contains("net")) c.net = NetConfig::from_json(j.at("net"));
    if (j.contains("loss")) c.loss = LossConfig::from_json(j.at("loss"));
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    if (j.contains("bank_layout")) c.layout = layout_from_json(j.at("bank_layout"));
    c.train_manifest = j.value("train_manifest", std::string());
    c.test_manifest = j.value("test_manifest", std::string());
    c.output_dir = j.value("output_dir", std::string());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open config: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  auto c = from_json(j);
  // Manifest paths in a config file are relative to the file.
  const auto base = path.parent_path();
  auto rebase = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative() && !base.empty())
      p = (base / p).lexically_normal().string();
  };
  rebase(c.train_manifest);
  rebase(c.test_manifest);
  return c;
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw UsageError("override must look like key.path=value: '" + assignment + "'");
  const auto key = assignment.substr(0, eq);
  const auto raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;  // bare strings
  }
  json doc = to_json();
  json* node = &doc;
  size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part))
      throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = value;
  *this = from_json(doc);
}

}  // namespace hgd
