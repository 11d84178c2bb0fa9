#include <doctest.h>

#include <cmath>

#include "alore/grad.hpp"

using namespace alore;

namespace {

struct Fixture {
  ViTModel<double> model;
  AloreBank<double> bank;
  ImageBatch<double> images;
  std::vector<int> labels;
};

Fixture make_fixture(double dropout_p) {
  ViTConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.channels = 3;
  cfg.d = 16;
  cfg.num_layers = 2;
  cfg.n_h = 2;
  cfg.classes = 3;

  Fixture f;
  Rng rng(21);
  f.model = random_vit<double>(cfg, rng, 0.25);

  AloreConfig acfg;
  acfg.d = cfg.d;
  acfg.n = 4;
  acfg.r = 2;
  acfg.sites = {Site::PreMHSA, Site::PreFFN};
  acfg.layers_adapted = 2;
  acfg.dropout_p = dropout_p;
  Rng brng(22);
  f.bank = init_alore<double>(acfg, cfg.num_layers, brng);
  randomize_bank(f.bank, brng, 0.3);

  f.images = ImageBatch<double>(2, cfg.channels, cfg.image_size, cfg.image_size);
  Rng irng(23);
  for (auto& v : f.images.data) v = irng.next_uniform();
  f.labels = {0, 2};
  return f;
}

}  // namespace

TEST_CASE("cross_entropy frozen values and gradient identity") {
  Matrix uniform(1, 10);
  for (int j = 0; j < 10; ++j) uniform(0, j) = 1.7;
  CHECK(cross_entropy(uniform, std::vector<int>{4}, nullptr) ==
        doctest::Approx(std::log(10.0)).epsilon(1e-9));

  Matrix hot(1, 4);
  hot(0, 2) = 1000.0;
  CHECK(cross_entropy(hot, std::vector<int>{2}, nullptr) == doctest::Approx(0.0));

  Rng rng(1);
  Matrix logits = randn<double>(5, 7, 2.0, rng);
  std::vector<int> labels{0, 1, 2, 3, 4};
  Matrix dlogits;
  cross_entropy(logits, labels, &dlogits);
  for (int i = 0; i < 5; ++i) {
    double sum = 0.0;
    for (int j = 0; j < 7; ++j) sum += dlogits(i, j);
    CHECK(std::abs(sum) < 1e-12);
  }

  CHECK_THROWS_AS(cross_entropy(logits, std::vector<int>{0, 1, 2, 3, 9}, nullptr), IndexError);
  CHECK_THROWS_AS(cross_entropy(logits, std::vector<int>{0}, nullptr), ShapeError);
}

TEST_CASE("analytic gradients match central differences in all regimes") {
  for (Regime regime : {Regime::Full, Regime::Alore, Regime::LinearProbe}) {
    CAPTURE(regime_name(regime));
    Fixture f = make_fixture(0.0);
    GradCheckResult res = gradient_check(f.model, &f.bank, f.images, f.labels, regime,
                                         /*train=*/false, /*seed=*/5, 1e-5);
    CAPTURE(res.worst_tensor);
    CAPTURE(res.analytic);
    CAPTURE(res.numeric);
    CHECK(res.max_rel_err <= 1e-4);
  }
}

TEST_CASE("gradients stay correct in train mode with dropout replayed") {
  Fixture f = make_fixture(0.2);
  GradCheckResult res = gradient_check(f.model, &f.bank, f.images, f.labels, Regime::Alore,
                                       /*train=*/true, /*seed=*/11, 1e-5);
  CAPTURE(res.worst_tensor);
  CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("cached training loss equals the evaluation forward loss") {
  Fixture f = make_fixture(0.1);
  Gradients grads = make_gradients(f.model, &f.bank);
  const double train_loss = loss_and_gradients(f.model, &f.bank, f.images, f.labels, nullptr,
                                               /*train=*/true, /*seed=*/3, Regime::Alore,
                                               grads, nullptr);
  Matrix logits = vit_forward(f.model, f.images, &f.bank, nullptr, /*train=*/true, 3);
  const double eval_path_loss = cross_entropy(logits, f.labels, nullptr);
  CHECK(train_loss == doctest::Approx(eval_path_loss).epsilon(1e-12));
}

TEST_CASE("dropout: eval deterministic, train-mode mean near eval loss") {
  Fixture f = make_fixture(0.3);
  Matrix l1 = vit_forward(f.model, f.images, &f.bank, nullptr, false, 1);
  Matrix l2 = vit_forward(f.model, f.images, &f.bank, nullptr, false, 2);
  double eval_loss1 = cross_entropy(l1, f.labels, nullptr);
  double eval_loss2 = cross_entropy(l2, f.labels, nullptr);
  CHECK(eval_loss1 == eval_loss2);  // seed only matters in train mode

  double mean = 0.0;
  double min_loss = 1e300, max_loss = -1e300;
  const int draws = 100;
  for (int i = 0; i < draws; ++i) {
    Matrix lt = vit_forward(f.model, f.images, &f.bank, nullptr, true, 1000 + i);
    const double loss = cross_entropy(lt, f.labels, nullptr);
    mean += loss;
    min_loss = std::min(min_loss, loss);
    max_loss = std::max(max_loss, loss);
  }
  mean /= draws;
  CHECK(max_loss > min_loss);  // rng actually varies the loss
  CHECK(std::abs(mean - eval_loss1) / eval_loss1 < 0.05);
}
