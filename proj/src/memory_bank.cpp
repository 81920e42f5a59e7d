#include "hgd/memory_bank.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>

#include "hgd/errors.hpp"

namespace hgd {

int BankLayout::structural_total() const {
  int n = 0;
  for (const auto& [_, count] : structural) n += count;
  return n;
}

BankLayout BankLayout::brain_four_class() { return {{{0, 2}, {1, 2}, {2, 3}, {3, 3}}, 10}; }

BankLayout BankLayout::brain_with_tumour() {
  return {{{0, 2}, {1, 2}, {2, 3}, {3, 3}, {4, 3}, {5, 3}, {6, 3}}, 19};
}

BankLayout BankLayout::global_only(const BankLayout& layout) { return {{}, layout.global_slots}; }

bool MemoryBank::has_structural_slots() const {
  for (int c : slot_categories)
    if (c != kGlobalSlot) return true;
  return false;
}

MemoryBank MemoryBank::clone() const {
  MemoryBank b = *this;
  b.keys = keys.clone();
  for (auto& v : b.values) v = v.clone();
  return b;
}

void MemoryBank::save(torch::serialize::OutputArchive& archive) const {
  archive.write("keys", keys);
  for (size_t d = 0; d < values.size(); ++d) archive.write("values_" + std::to_string(d), values[d]);
  archive.write("num_domains", torch::tensor(static_cast<int64_t>(values.size())));
  std::vector<int64_t> cats(slot_categories.begin(), slot_categories.end());
  archive.write("slot_categories", torch::tensor(cats));
  archive.write("alpha_p", torch::tensor(alpha_p, torch::kFloat64));
  archive.write("weighting", torch::tensor(static_cast<int64_t>(weighting)));
}

MemoryBank MemoryBank::load(torch::serialize::InputArchive& archive) {
  // Each read gets a fresh tensor: reading into a defined one keeps its dtype.
  auto read = [&](const std::string& key) {
    torch::Tensor t;
    archive.read(key, t);
    return t;
  };
  MemoryBank b;
  b.keys = read("keys");
  const auto k = read("num_domains").item<int64_t>();
  for (int64_t d = 0; d < k; ++d) b.values.push_back(read("values_" + std::to_string(d)));
  const auto cats = read("slot_categories");
  for (int64_t i = 0; i < cats.numel(); ++i) b.slot_categories.push_back(static_cast<int>(cats[i].item<int64_t>()));
  b.alpha_p = read("alpha_p").item<double>();
  b.weighting = static_cast<UpdateWeighting>(read("weighting").item<int64_t>());
  if (static_cast<int64_t>(b.slot_categories.size()) != b.keys.size(0))
    throw ValidationError("memory bank checkpoint: slot categories do not match keys");
  return b;
}

namespace {

torch::Tensor normalize_rows(const torch::Tensor& x) {
  return x / x.norm(2, 1, true).clamp_min(1e-12);
}

MemoryBank make_bank(std::vector<int> categories, int key_dim, int value_dim, int num_domains,
                     double alpha_p, uint64_t seed) {
  if (key_dim < 1 || value_dim < 1) throw ConfigError("bank dimensions must be positive");
  if (num_domains < 1) throw ConfigError("bank needs at least one domain");
  if (!(alpha_p > 0.0 && alpha_p <= 1.0)) throw ConfigError("alpha_p must lie in (0, 1]");
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  const auto n = static_cast<int64_t>(categories.size());
  MemoryBank bank;
  bank.keys = normalize_rows(torch::randn({n, key_dim}, gen, torch::kFloat32));
  for (int d = 0; d < num_domains; ++d)
    bank.values.push_back(normalize_rows(torch::randn({n, value_dim}, gen, torch::kFloat32)));
  bank.slot_categories = std::move(categories);
  bank.alpha_p = alpha_p;
  return bank;
}

}  // namespace

MemoryBank build_bank(const BankLayout& layout, int key_dim, int value_dim, int num_domains,
                      double alpha_p, uint64_t seed) {
  for (const auto& [cls, count] : layout.structural) {
    if (count < 1) throw ConfigError("every structure needs at least one slot");
    if (cls < 0) throw ConfigError("structure class ids must be nonnegative");
  }
  if (layout.global_slots < 1) throw ConfigError("layout needs at least one global slot");
  if (layout.structural_total() != layout.global_slots)
    throw ConfigError("structure-assigned slots (" + std::to_string(layout.structural_total()) +
                      ") must equal global slots (" + std::to_string(layout.global_slots) + ")");
  std::vector<int> categories;
  for (const auto& [cls, count] : layout.structural) categories.insert(categories.end(), count, cls);
  categories.insert(categories.end(), layout.global_slots, kGlobalSlot);
  return make_bank(std::move(categories), key_dim, value_dim, num_domains, alpha_p, seed);
}

MemoryBank build_global_bank(int global_slots, int key_dim, int value_dim, int num_domains,
                             double alpha_p, uint64_t seed) {
  if (global_slots < 1) throw ConfigError("global bank needs at least one slot");
  return make_bank(std::vector<int>(global_slots, kGlobalSlot), key_dim, value_dim, num_domains,
                   alpha_p, seed);
}

double cosine_sim(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("cosine_sim: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) {
    std::cerr << "warning: cosine similarity with a zero-norm vector, using 0\n";
    return 0.0;
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

torch::Tensor cosine_matrix(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(1))
    throw ShapeError("cosine_matrix: expected n×C and m×C with matching C");
  return torch::matmul(normalize_rows(a), normalize_rows(b).t());
}

torch::Tensor affinities(const torch::Tensor& queries, const MemoryBank& bank) {
  if (queries.dim() != 2 || queries.size(1) != bank.key_dim())
    throw ShapeError("affinities: query dimension does not match key dimension");
  return torch::softmax(cosine_matrix(queries, bank.keys.to(queries.dtype())), 1);
}

ReadResult read(const torch::Tensor& queries, const MemoryBank& bank, int target_domain,
                ReadMode mode, const torch::Tensor& attribute) {
  if (target_domain < 0 || target_domain >= bank.num_domains())
    throw ArgumentError("read: unknown domain " + std::to_string(target_domain));
  ReadResult r;
  r.affinity = affinities(queries, bank);
  if (mode == ReadMode::kMemoryValues) {
    r.enhanced = torch::matmul(r.affinity, bank.values[target_domain].to(queries.dtype()));
  } else {
    if (!attribute.defined() || attribute.dim() < 1 || attribute.dim() > 2 ||
        (attribute.dim() == 2 && attribute.size(0) != queries.size(0)))
      throw ArgumentError("read: literal mode needs a C_a vector or N_q×C_a attributes");
    // Σ_i w_i · z^a over the slot axis.
    const auto attr = attribute.dim() == 1 ? attribute.unsqueeze(0) : attribute;
    r.enhanced = r.affinity.sum(1, true) * attr.to(queries.dtype());
  }
  return r;
}

torch::Tensor content_to_queries(const torch::Tensor& content) {
  if (content.dim() != 4) throw ShapeError("content map must be B×C×H×W");
  return content.permute({0, 2, 3, 1}).reshape({-1, content.size(1)});
}

torch::Tensor queries_to_map(const torch::Tensor& per_query, int64_t batch, int64_t height,
                             int64_t width) {
  if (per_query.dim() != 2 || per_query.size(0) != batch * height * width)
    throw ShapeError("queries_to_map: query count does not match the grid");
  return per_query.reshape({batch, height, width, per_query.size(1)}).permute({0, 3, 1, 2});
}

torch::Tensor combine(const torch::Tensor& z_a, const torch::Tensor& z_tilde) {
  if (z_a.dim() != 2 || z_tilde.dim() != 4 || z_a.size(0) != z_tilde.size(0) ||
      z_a.size(1) != z_tilde.size(1))
    throw ShapeError("combine: attribute B×C_a and enhanced B×C_a×H×W must agree");
  auto broadcast = z_a.unsqueeze(2).unsqueeze(3).expand(
      {z_a.size(0), z_a.size(1), z_tilde.size(2), z_tilde.size(3)});
  return torch::cat({broadcast, z_tilde}, 1);
}

MemoryBank update(const MemoryBank& bank, const torch::Tensor& queries_i,
                  const torch::Tensor& queries_j, const std::vector<torch::Tensor>& enhanced,
                  const torch::Tensor& labels) {
  torch::NoGradGuard guard;
  if (queries_i.sizes() != queries_j.sizes())
    throw ShapeError("update: paired query sets differ in shape");
  if (queries_i.dim() != 2 || queries_i.size(1) != bank.key_dim())
    throw ShapeError("update: query dimension does not match key dimension");
  if (static_cast<int>(enhanced.size()) > bank.num_domains())
    throw ArgumentError("update: more enhanced sets than domains");
  const int64_t nq = queries_i.size(0);
  for (const auto& e : enhanced)
    if (e.defined() && (e.dim() != 2 || e.size(0) != nq || e.size(1) != bank.value_dim()))
      throw ShapeError("update: enhanced attributes must be N_q×C_a");
  if (labels.defined() && labels.numel() != nq)
    throw ShapeError("update: labels must hold one class per query");

  MemoryBank out = bank.clone();
  if (bank.alpha_p >= 1.0) return out;  // momentum endpoint: identity

  const auto q_i = queries_i.detach().to(torch::kFloat64);
  const auto q_j = queries_j.detach().to(torch::kFloat64);
  const auto keys = bank.keys.to(torch::kFloat64);
  const auto sim = cosine_matrix(q_i, keys);      // N_q×N
  const auto assigned = sim.argmax(1);            // closest slot per query
  const auto slot_softmax = torch::softmax(sim, 1);

  auto cats = torch::tensor(std::vector<int64_t>(bank.slot_categories.begin(),
                                                 bank.slot_categories.end()));
  auto eligible = torch::ones({nq}, torch::kBool);
  if (labels.defined()) {
    const auto slot_cat = cats.index_select(0, assigned);
    eligible = (slot_cat == kGlobalSlot) | (slot_cat == labels.reshape({-1}).to(torch::kInt64));
  }

  const double a = bank.alpha_p;
  for (int64_t s = 0; s < bank.num_slots(); ++s) {
    const auto members = torch::nonzero((assigned == s) & eligible).flatten();
    if (members.numel() == 0) continue;
    torch::Tensor u;
    if (bank.weighting == UpdateWeighting::kAssignedQueries)
      u = torch::softmax(sim.index({members, s}), 0);
    else
      u = slot_softmax.index({members, s});
    const auto pair_sum = q_i.index_select(0, members) + q_j.index_select(0, members);
    auto key = a * keys[s] + (1.0 - a) * torch::matmul(u, pair_sum);
    const double kn = key.norm().item<double>();
    if (kn > 1e-12) out.keys[s] = (key / kn).to(out.keys.dtype());

    for (size_t d = 0; d < enhanced.size(); ++d) {
      if (!enhanced[d].defined()) continue;
      const auto e = enhanced[d].detach().to(torch::kFloat64).index_select(0, members);
      auto value = a * bank.values[d][s].to(torch::kFloat64) + (1.0 - a) * torch::matmul(u, e);
      const double vn = value.norm().item<double>();
      if (vn > 1e-12) out.values[d][s] = (value / vn).to(out.values[d].dtype());
    }
  }
  return out;
}

std::string slot_tag(int category, const std::vector<std::string>& class_names) {
  if (category == kGlobalSlot) return "GLOBAL";
  if (category >= 0 && category < static_cast<int>(class_names.size())) return class_names[category];
  return "class" + std::to_string(category);
}

void export_affinity_csv(const torch::Tensor& affinity, const torch::Tensor& labels,
                         const MemoryBank& bank, const std::vector<std::string>& class_names,
                         const std::filesystem::path& path) {
  if (affinity.dim() != 2 || affinity.size(1) != bank.num_slots())
    throw ShapeError("export_affinity_csv: affinity must be N_q×N");
  if (labels.defined() && labels.numel() != affinity.size(0))
    throw ShapeError("export_affinity_csv: one label per query expected");
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << "query_id,label_class";
  std::map<int, int> seen;
  for (int c : bank.slot_categories) out << "," << slot_tag(c, class_names) << "_" << seen[c]++;
  out << "\n";
  const auto aff = affinity.detach().to(torch::kFloat64).contiguous();
  const auto acc = aff.accessor<double, 2>();
  const auto lab = labels.defined() ? labels.reshape({-1}).to(torch::kInt64) : torch::Tensor();
  out << std::setprecision(9);
  for (int64_t n = 0; n < aff.size(0); ++n) {
    out << n << ",";
    if (lab.defined()) out << lab[n].item<int64_t>();
    for (int64_t s = 0; s < aff.size(1); ++s) out << "," << acc[n][s];
    out << "\n";
  }
}

}  // namespace hgd
