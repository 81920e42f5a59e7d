#include <cmath>
#include <functional>

#include "doctest.h"
#include "hgd/errors.hpp"
#include "hgd/losses.hpp"

using namespace hgd;

namespace {

auto f64() { return torch::TensorOptions().dtype(torch::kFloat64); }

// ||analytic − central difference|| / ||central difference|| over every input.
double gradient_error(const std::function<torch::Tensor(const std::vector<torch::Tensor>&)>& f,
                      std::vector<torch::Tensor> inputs, double h = 1e-4) {
  for (auto& x : inputs) x = x.detach().clone().requires_grad_(true);
  f(inputs).backward();
  double diff = 0, ref = 0;
  for (auto& x : inputs) {
    const auto analytic = x.grad().clone().reshape({-1});
    auto flat = x.detach().reshape({-1});
    for (int64_t k = 0; k < flat.numel(); ++k) {
      std::vector<torch::Tensor> plus, minus;
      for (auto& y : inputs) {
        plus.push_back(y.detach().clone());
        minus.push_back(y.detach().clone());
      }
      const auto idx = &x - inputs.data();
      plus[idx].view({-1})[k] += h;
      minus[idx].view({-1})[k] -= h;
      const double num = (f(plus).item<double>() - f(minus).item<double>()) / (2 * h);
      const double ana = analytic[k].item<double>();
      diff += (ana - num) * (ana - num);
      ref += num * num;
    }
  }
  return std::sqrt(diff) / std::max(std::sqrt(ref), 1e-12);
}

}  // namespace

TEST_CASE("InfoNCE closed form with one positive and four orthogonal negatives") {
  const auto anchor = torch::tensor({1.0, 0.0, 0.0, 0.0, 0.0}, f64());
  const auto positive = torch::tensor({{2.0, 0.0, 0.0, 0.0, 0.0}}, f64());
  auto negatives = torch::zeros({4, 5}, f64());
  for (int k = 0; k < 4; ++k) negatives[k][k + 1] = 1.0;
  const auto pool = torch::cat({positive, negatives});
  const auto loss = info_nce(anchor, positive, pool, 1.0);
  REQUIRE(loss.has_value());
  // −log(e / (e + 4))
  CHECK(loss->item<double>() == doctest::Approx(0.904832441554448).epsilon(1e-12));

  // Large-τ limit: log 5 − 0.8/τ to first order.
  const double tau = 100.0;
  const double big = info_nce(anchor, positive, pool, tau)->item<double>();
  CHECK(std::abs(big - (std::log(5.0) - 0.8 / tau)) < 1e-4);

  // A positive weight scales only the numerator similarity.
  const double w = info_nce(anchor, positive, pool, 1.0, torch::tensor({0.5}, f64()))->item<double>();
  CHECK(w == doctest::Approx(std::log(std::exp(1.0) + 4) - 0.5).epsilon(1e-12));
}

TEST_CASE("uniform pool gives log of the pool size for any temperature") {
  const auto v = torch::tensor({0.3, -1.2, 0.7}, f64());
  for (int m : {1, 3, 7}) {
    const auto pool = v.unsqueeze(0).repeat({m, 1});
    for (double tau : {0.05, 0.5, 1.0, 20.0}) {
      const double l = info_nce(v, pool.slice(0, 0, 1), pool, tau)->item<double>();
      CHECK(std::abs(l - std::log(static_cast<double>(m))) < 1e-9);
    }
  }
}

TEST_CASE("InfoNCE edge cases") {
  const auto v = torch::ones({3}, f64());
  CHECK_FALSE(info_nce(v, torch::zeros({0, 3}, f64()), torch::zeros({0, 3}, f64()), 1.0).has_value());
  CHECK_THROWS_AS(info_nce(v, v.unsqueeze(0), v.unsqueeze(0), 0.0), ArgumentError);
  CHECK_THROWS_AS(info_nce(v, v.unsqueeze(0), v.unsqueeze(0), -1.0), ArgumentError);
}

TEST_CASE("contrast batch excludes anchors without positives or negatives") {
  ContrastBatch b;
  b.entries.push_back({torch::tensor({1.0, 0.0}, f64()), "a", 0, true, 1.0});
  b.entries.push_back({torch::tensor({0.9, 0.1}, f64()), "a", 0, false, 1.0});
  b.entries.push_back({torch::tensor({0.0, 1.0}, f64()), "b", 0, true, 1.0});  // no positive
  const auto r = contrast_loss(b, 0.5);
  CHECK(r.anchors_used == 1);
  CHECK(r.anchors_excluded == 1);
  const auto manual = info_nce(b.entries[0].feature, b.entries[1].feature.unsqueeze(0),
                               torch::stack({b.entries[1].feature, b.entries[2].feature}), 0.5);
  CHECK(r.loss.item<double>() == doctest::Approx(manual->item<double>()).epsilon(1e-12));

  ContrastBatch lonely;
  lonely.entries.push_back({torch::tensor({1.0, 0.0}, f64()), "a", 0, true, 1.0});
  lonely.entries.push_back({torch::tensor({1.0, 1.0}, f64()), "a", 0, false, 1.0});
  const auto r2 = contrast_loss(lonely, 0.5);
  CHECK(r2.anchors_used == 0);
  CHECK(r2.anchors_excluded == 1);
  CHECK(r2.loss.item<double>() == 0.0);
}

TEST_CASE("rank weights") {
  const auto w = rank_weights({5, 2, 1}, 0.5);
  CHECK(w[0] == 1.0);
  CHECK(w[1] == std::exp(-0.5));
  CHECK(w[2] == std::exp(-1.0));
  const auto shuffled = rank_weights({1, 5, 2}, 0.5);
  CHECK(shuffled == std::vector<double>{std::exp(-1.0), 1.0, std::exp(-0.5)});
  const auto ties = rank_weights({3, 3, 1}, 0.5);
  CHECK(ties == std::vector<double>{1.0, 1.0, std::exp(-1.0)});
  CHECK(rank_weights({0.7}, 0.5) == std::vector<double>{1.0});
  CHECK_THROWS_AS(rank_weights({}, 0.5), ArgumentError);
  CHECK_THROWS_AS(rank_weights({1, -2}, 0.5), ArgumentError);
}

TEST_CASE("structure masks partition the feature map bit-exactly") {
  torch::manual_seed(8);
  bool exact = true;
  for (int t = 0; t < 200; ++t) {
    const int k = 2 + t % 6;
    const auto z = torch::randn({3, 9, 7});
    const auto labels = torch::randint(0, k, {9, 7}, torch::kInt64);
    auto sum = torch::zeros_like(z);
    for (int s = 0; s < k; ++s) sum = sum + mask_structure(z, labels, s, k);
    exact = exact && torch::equal(sum, z);
  }
  CHECK(exact);
  CHECK_THROWS_AS(mask_structure(torch::zeros({1, 2, 2}), torch::zeros({2, 2}, torch::kInt64), 4, 4),
                  ArgumentError);
  CHECK_THROWS_AS(mask_structure(torch::zeros({1, 2, 2}), torch::zeros({3, 2}, torch::kInt64), 0, 4),
                  ShapeError);
}

TEST_CASE("deformation is the summed absolute difference") {
  const auto a = torch::tensor({{1.0, -2.0}, {0.5, 0.0}}, f64());
  const auto b = torch::tensor({{0.0, 1.0}, {0.5, -4.0}}, f64());
  CHECK(deformation(a, b).item<double>() == 8.0);
}

TEST_CASE("PGD: aligned content beats shuffled content") {
  torch::manual_seed(2);
  const auto orig = torch::randn({4, 4, 4}, f64());
  const auto other = torch::randn({4, 4, 4}, f64());
  const double aligned = pgd_loss(orig, orig + 0.01 * torch::randn_like(orig), {other}, 0.5).item<double>();
  const double shuffled = pgd_loss(orig, orig.flip({2}), {other}, 0.5).item<double>();
  CHECK(aligned < shuffled);
  CHECK_THROWS_AS(pgd_loss(orig, torch::randn({4, 4, 3}, f64()), {}, 0.5), ShapeError);
}

TEST_CASE("PGD anchor subsampling is reproducible under a fixed generator") {
  const auto orig = torch::randn({4, 8, 8}, f64());
  const auto trans = torch::randn({4, 8, 8}, f64());
  auto g1 = at::make_generator<at::CPUGeneratorImpl>(17);
  auto g2 = at::make_generator<at::CPUGeneratorImpl>(17);
  const double a = pgd_loss(orig, trans, {}, 0.5, 10, g1).item<double>();
  const double b = pgd_loss(orig, trans, {}, 0.5, 10, g2).item<double>();
  CHECK(a == b);
  // Without a cap every pixel is an anchor.
  const double all = pgd_loss(orig, trans, {}, 0.5, 0).item<double>();
  const double capped_all = pgd_loss(orig, trans, {}, 0.5, 64).item<double>();
  CHECK(all == doctest::Approx(capped_all).epsilon(1e-12));
}

TEST_CASE("SGD skips absent structures and reports rank weights") {
  torch::manual_seed(6);
  auto labels = torch::zeros({4, 4}, torch::kInt64);
  labels.index_put_({torch::indexing::Slice(0, 2)}, 1);  // classes 0 and 1 present, 2 absent
  std::vector<SubjectContent> subjects = {
      {"a", torch::randn({2, 4, 4}, f64()), torch::randn({2, 4, 4}, f64()), labels},
      {"b", torch::randn({2, 4, 4}, f64()), torch::randn({2, 4, 4}, f64()), labels}};
  const auto r = sgd_loss(subjects, 3, 0.5, 0.5);
  CHECK(r.structures_skipped == 2);
  CHECK(r.anchors_used == 4);
  REQUIRE(r.weights.size() == 2);
  CHECK(r.weights[0].size() == 2);
  double top = 0;
  for (const auto& [cls, w] : r.weights[0]) top = std::max(top, w);
  CHECK(top == 1.0);
  CHECK(std::isfinite(r.loss.item<double>()));
}

TEST_CASE("GGD needs a second subject for negatives") {
  const auto z = torch::randn({2, 3, 3}, f64());
  const auto one = ggd_loss({{"a", z, z, {}}}, 0.5);
  CHECK(one.anchors_used == 0);
  CHECK(one.anchors_excluded == 1);
  const auto two = ggd_loss({{"a", z, z, {}}, {"b", -z, z.flip({1}), {}}}, 0.5);
  CHECK(two.anchors_used == 2);
  CHECK(two.loss.item<double>() > 0);
}

TEST_CASE("finite-difference gradient checks") {
  torch::manual_seed(12);
  SUBCASE("pgd") {
    const double err = gradient_error(
        [](const std::vector<torch::Tensor>& x) { return pgd_loss(x[0], x[1], {x[2]}, 0.5); },
        {torch::randn({2, 2, 2}, f64()), torch::randn({2, 2, 2}, f64()), torch::randn({2, 2, 2}, f64())});
    CHECK(err < 1e-4);
  }
  SUBCASE("sgd") {
    const auto labels = torch::tensor({{0, 1}, {2, 2}}, torch::kInt64);
    const double err = gradient_error(
        [&](const std::vector<torch::Tensor>& x) {
          return sgd_loss({{"a", x[0], x[1], labels}, {"b", x[2], x[3], labels}}, 3, 0.5, 0.5).loss;
        },
        {torch::randn({2, 2, 2}, f64()), torch::randn({2, 2, 2}, f64()),
         torch::randn({2, 2, 2}, f64()), torch::randn({2, 2, 2}, f64())});
    CHECK(err < 1e-4);
  }
  SUBCASE("sgd mean-pooled") {
    const auto labels = torch::tensor({{0, 1}, {1, 1}}, torch::kInt64);
    const double err = gradient_error(
        [&](const std::vector<torch::Tensor>& x) {
          return sgd_loss({{"a", x[0], x[1], labels}, {"b", x[2], x[3], labels}}, 2, 0.5, 0.5,
                          StructureFeature::kMeanPooled)
              .loss;
        },
        {torch::randn({3, 2, 2}, f64()), torch::randn({3, 2, 2}, f64()),
         torch::randn({3, 2, 2}, f64()), torch::randn({3, 2, 2}, f64())});
    CHECK(err < 1e-4);
  }
  SUBCASE("ggd") {
    const double err = gradient_error(
        [](const std::vector<torch::Tensor>& x) {
          return ggd_loss({{"a", x[0], x[1], {}}, {"b", x[2], x[3], {}}}, 0.5).loss;
        },
        {torch::randn({2, 2, 3}, f64()), torch::randn({2, 2, 3}, f64()),
         torch::randn({2, 2, 3}, f64()), torch::randn({2, 2, 3}, f64())});
    CHECK(err < 1e-4);
  }
  SUBCASE("cycle") {
    const double err = gradient_error(
        [](const std::vector<torch::Tensor>& x) { return cycle_loss(x[0], x[1]); },
        {torch::randn({1, 1, 4, 4}, f64()), torch::randn({1, 1, 4, 4}, f64())});
    CHECK(err < 1e-4);
  }
}

TEST_CASE("least-squares adversarial probes") {
  const std::vector<torch::Tensor> ones = {torch::ones({2, 1, 4, 4}), torch::ones({2, 1, 2, 2})};
  const std::vector<torch::Tensor> zeros = {torch::zeros({2, 1, 4, 4}), torch::zeros({2, 1, 2, 2})};
  const std::vector<torch::Tensor> half = {torch::full({2, 1, 4, 4}, 0.5), torch::full({2, 1, 2, 2}, 0.5)};
  CHECK(lsgan_discriminator_loss(ones, zeros).item<float>() == 0.0f);
  CHECK(lsgan_discriminator_loss(zeros, ones).item<float>() == doctest::Approx(2.0));
  CHECK(lsgan_discriminator_loss(half, half).item<float>() == doctest::Approx(0.5));
  CHECK(lsgan_generator_loss(ones).item<float>() == 0.0f);
  CHECK(lsgan_generator_loss(half).item<float>() == doctest::Approx(0.25));
  CHECK_THROWS_AS(lsgan_discriminator_loss(ones, {zeros[0]}), ShapeError);
}

TEST_CASE("content discriminator targets") {
  const auto scores = torch::tensor({{1.0f, 0.0f}, {0.0f, 1.0f}});
  CHECK(content_discriminator_loss(scores, {0, 1}).item<float>() == 0.0f);
  CHECK(content_discriminator_loss(scores, {1, 0}).item<float>() == doctest::Approx(1.0));
  CHECK(content_encoder_loss(torch::full({3, 2}, 0.5f)).item<float>() == 0.0f);
  CHECK(content_encoder_loss(scores).item<float>() == doctest::Approx(0.25));
  CHECK_THROWS_AS(content_discriminator_loss(scores, {0, 2}), ArgumentError);
}

TEST_CASE("total loss weights and sums the seven terms") {
  LossConfig cfg;
  LossTerms t;
  t.adv_content = torch::tensor(0.5);
  t.adv_domain = torch::tensor(0.25);
  t.cycle = torch::tensor(0.1);
  t.self_recon = torch::tensor(0.2);
  t.pgd = torch::tensor(1.0);
  t.sgd = torch::tensor(2.0);
  // ggd left undefined: counts as zero.
  const auto b = total_loss(t, cfg);
  CHECK(b.weighted.size() == 7);
  CHECK(b.weighted.at("cycle") == doctest::Approx(1.0));
  CHECK(b.weighted.at("sgd") == doctest::Approx(4.0));
  CHECK(b.weighted.at("ggd") == 0.0);
  double sum = 0;
  for (const auto& [k, v] : b.weighted) sum += v;
  CHECK(std::abs(sum - b.total_value) < 1e-9);
  CHECK(b.total.item<float>() == doctest::Approx(0.5 + 0.25 + 1 + 2 + 1 + 4));
  CHECK(loss_term_names()[0] == "adv_content");
  CHECK(loss_term_names()[6] == "ggd");
}

TEST_CASE("loss config validation and JSON round-trip") {
  LossConfig cfg;
  cfg.tau1 = 0.2;
  cfg.structure_feature = StructureFeature::kMeanPooled;
  const auto back = LossConfig::from_json(cfg.to_json());
  CHECK(back.tau1 == 0.2);
  CHECK(back.lambda_sgd == 2.0);
  CHECK(back.structure_feature == StructureFeature::kMeanPooled);
  cfg.tau2 = 0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  auto j = LossConfig().to_json();
  j["bogus"] = 1;
  CHECK_THROWS_AS(LossConfig::from_json(j), ValidationError);
}
