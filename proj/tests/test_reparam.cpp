#include <doctest.h>

#include <cmath>
#include <cstring>

#include "alore/reparam.hpp"

using namespace alore;

namespace {

ViTConfig small_config(int d = 16, int layers = 2) {
  ViTConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.channels = 3;
  cfg.d = d;
  cfg.num_layers = layers;
  cfg.n_h = 2;
  cfg.classes = 4;
  return cfg;
}

template <class T>
AloreBank<T> make_bank(const ViTConfig& cfg, std::vector<Site> sites, int n, int r,
                       uint64_t seed) {
  AloreConfig acfg;
  acfg.d = cfg.d;
  acfg.n = n;
  acfg.r = r;
  acfg.sites = std::move(sites);
  acfg.layers_adapted = cfg.num_layers;
  acfg.dropout_p = 0.0;
  Rng rng(seed);
  auto bank = init_alore<T>(acfg, cfg.num_layers, rng);
  randomize_bank(bank, rng, T(0.3));
  return bank;
}

bool models_bit_equal(const ViTModel<double>& a, const ViTModel<double>& b) {
  auto eq_mat = [](const Matrix& x, const Matrix& y) {
    return x.same_shape(y) &&
           std::memcmp(x.data.data(), y.data.data(), x.size() * sizeof(double)) == 0;
  };
  auto eq_vec = [](const std::vector<double>& x, const std::vector<double>& y) {
    return x.size() == y.size() &&
           std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
  };
  if (!eq_mat(a.patch_weight, b.patch_weight) || !eq_vec(a.patch_bias, b.patch_bias) ||
      !eq_mat(a.pos_embed, b.pos_embed) || !eq_mat(a.cls_token, b.cls_token) ||
      !eq_vec(a.lnf_gamma, b.lnf_gamma) || !eq_vec(a.lnf_beta, b.lnf_beta) ||
      !eq_mat(a.head_weight, b.head_weight) || !eq_vec(a.head_bias, b.head_bias)) {
    return false;
  }
  for (size_t i = 0; i < a.layers.size(); ++i) {
    const auto& x = a.layers[i];
    const auto& y = b.layers[i];
    if (!eq_mat(x.wq, y.wq) || !eq_mat(x.wk, y.wk) || !eq_mat(x.wv, y.wv) ||
        !eq_mat(x.wo, y.wo) || !eq_mat(x.w1, y.w1) || !eq_mat(x.w2, y.w2) ||
        !eq_vec(x.bq, y.bq) || !eq_vec(x.bk, y.bk) || !eq_vec(x.bv, y.bv) ||
        !eq_vec(x.bo, y.bo) || !eq_vec(x.b1, y.b1) || !eq_vec(x.b2, y.b2) ||
        !eq_vec(x.ln1_gamma, y.ln1_gamma) || !eq_vec(x.ln1_beta, y.ln1_beta) ||
        !eq_vec(x.ln2_gamma, y.ln2_gamma) || !eq_vec(x.ln2_beta, y.ln2_beta)) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("merge of fresh adapters leaves every tensor bit-identical") {
  Rng rng(1);
  ViTConfig cfg = small_config();
  ViTModel<double> model = random_vit<double>(cfg, rng, 0.3);
  AloreConfig acfg;
  acfg.d = cfg.d;
  acfg.n = 2;
  acfg.r = 2;
  acfg.sites = {Site::PreMHSA, Site::PostMHSA, Site::PreFFN, Site::PostFFN};
  acfg.layers_adapted = cfg.num_layers;
  Rng brng(2);
  auto bank = init_alore<double>(acfg, cfg.num_layers, brng);  // W_A = I exactly

  auto merged = merge(model, &bank);
  CHECK(models_bit_equal(merged.model, model));
  CHECK(merged.log.size() == static_cast<size_t>(4 * cfg.num_layers));
}

TEST_CASE("merge idempotence on a plain model") {
  Rng rng(3);
  ViTConfig cfg = small_config();
  ViTModel<double> model = random_vit<double>(cfg, rng, 0.3);
  auto merged = merge<double>(model, nullptr);
  CHECK(models_bit_equal(merged.model, model));
  CHECK(merged.log.empty());
  CHECK(merged.model.parameter_count() == model.parameter_count());
}

TEST_CASE("Eq-8 equivalence for every site singly and jointly, 64-bit") {
  Rng rng(4);
  const std::vector<std::vector<Site>> site_sets = {
      {Site::PreMHSA},
      {Site::PostMHSA},
      {Site::PreFFN},
      {Site::PostFFN},
      {Site::PreMHSA, Site::PreFFN},
      {Site::PreMHSA, Site::PostMHSA, Site::PreFFN, Site::PostFFN},
  };
  for (const auto& sites : site_sets) {
    ViTConfig cfg = small_config();
    ViTModel<double> model = random_vit<double>(cfg, rng, 0.3);
    auto bank = make_bank<double>(cfg, sites, 2, 2, rng.next_u64());
    auto merged = merge(model, &bank);
    MergeReport report = verify_equivalence<double>(model, &bank, merged.model, nullptr, 5,
                                            rng.next_u64(), 1e-10);
    CAPTURE(sites.size());
    CHECK(report.pass);
    CHECK(report.max_abs_logit_diff <= 1e-10);
    CHECK(report.inputs_tested == 5);
    CHECK(report.merged_param_count == model.parameter_count());
  }
}

TEST_CASE("Eq-8 equivalence in 32-bit mode") {
  Rng rng(5);
  ViTConfig cfg = small_config();
  ViTModel<float> model = random_vit<float>(cfg, rng, 0.3f);
  auto bank = make_bank<float>(cfg, {Site::PreMHSA, Site::PreFFN}, 4, 2, 99);
  auto merged = merge(model, &bank);
  MergeReport report = verify_equivalence<float>(model, &bank, merged.model, nullptr, 10, 7, 1e-4);
  CHECK(report.pass);
}

TEST_CASE("n=1 merge against materialized W_A times W^Q oracle") {
  Rng rng(6);
  ViTConfig cfg = small_config();
  ViTModel<double> model = random_vit<double>(cfg, rng, 0.3);
  auto bank = make_bank<double>(cfg, {Site::PreMHSA}, 1, 2, 17);

  auto merged = merge(model, &bank);
  // W_A = I + s*(down*up), materialized elementwise
  const double s = bank.scale[0](0, 0);
  for (int l = 0; l < cfg.num_layers; ++l) {
    const auto& pair = bank.experts[l][0][0];
    Matrix wa(cfg.d, cfg.d);
    for (int i = 0; i < cfg.d; ++i) {
      for (int j = 0; j < cfg.d; ++j) {
        double prod = 0.0;
        for (int k = 0; k < bank.cfg.r; ++k) prod += pair.down(i, k) * pair.up(k, j);
        wa(i, j) = s * prod + (i == j ? 1.0 : 0.0);
      }
    }
    Matrix expected = matmul(wa, model.layers[l].wq);
    for (size_t i = 0; i < expected.size(); ++i) {
      CHECK(merged.model.layers[l].wq.data[i] == doctest::Approx(expected.data[i]).epsilon(1e-12));
    }
    // biases untouched by the pre-site merge
    CHECK(merged.model.layers[l].bq == model.layers[l].bq);
  }
}

TEST_CASE("verify_equivalence: self comparison, sensitivity, config mismatch") {
  Rng rng(7);
  ViTConfig cfg = small_config();
  ViTModel<double> model = random_vit<double>(cfg, rng, 0.3);

  MergeReport self = verify_equivalence<double>(model, nullptr, model, nullptr, 3, 1, 1e-12);
  CHECK(self.pass);
  CHECK(self.max_abs_logit_diff == 0.0);

  ViTModel<double> perturbed = model;
  perturbed.layers[0].wq(0, 0) += 1e-3;
  MergeReport bad = verify_equivalence<double>(model, nullptr, perturbed, nullptr, 5, 1, 1e-10);
  CHECK_FALSE(bad.pass);
  CHECK(bad.max_abs_logit_diff > 1e-10);

  ViTConfig other = small_config(32, 2);
  Rng rng2(8);
  ViTModel<double> different = random_vit<double>(other, rng2, 0.3);
  CHECK_THROWS_AS(verify_equivalence<double>(model, nullptr, different, nullptr, 1, 1, 1e-10),
                  ConfigError);
}

TEST_CASE("bench_throughput smoke") {
  Rng rng(9);
  ViTConfig cfg = small_config();
  ViTModel<float> model = random_vit<float>(cfg, rng, 0.2f);
  ThroughputReport rep = bench_throughput<float>(model, nullptr, 2, 1, 2, 1);
  CHECK(rep.single_stream_ips > 0.0);
  CHECK(rep.all_stream_ips == rep.single_stream_ips);
  CHECK(rep.images_timed == 4);
  CHECK_THROWS_AS(bench_throughput<float>(model, nullptr, 2, 0, 0, 1), ConfigError);
}
