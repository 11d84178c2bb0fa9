#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "alore/checkpoint.hpp"

using namespace alore;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("round-trip is bit-exact for both dtypes and all ranks in use") {
  Checkpoint ckpt;
  Rng rng(1);
  Matrix m64 = randn<double>(5, 7, 2.0, rng);
  MatrixF m32 = randn<float>(3, 2, 1.5f, rng);
  std::vector<double> v64{1.0, -2.5, 3.25};
  std::vector<float> v32{0.5f, -0.125f};
  std::vector<float> r4(2 * 3 * 4 * 5);
  for (auto& v : r4) v = static_cast<float>(rng.next_normal());

  ckpt.put_matrix("w64", m64);
  ckpt.put_matrix("w32", m32);
  ckpt.put_vector<double>("b64", std::span<const double>(v64));
  ckpt.put_vector<float>("b32", std::span<const float>(v32));
  ckpt.put_raw<float>("images", {2, 3, 4, 5}, std::span<const float>(r4));

  const std::string path = temp_path("alore_test_roundtrip.alre");
  save_checkpoint(ckpt, path);
  Checkpoint loaded = load_checkpoint(path);

  REQUIRE(loaded.tensors.size() == ckpt.tensors.size());
  for (size_t i = 0; i < ckpt.tensors.size(); ++i) {
    CHECK(loaded.tensors[i].name == ckpt.tensors[i].name);
    CHECK(loaded.tensors[i].dtype == ckpt.tensors[i].dtype);
    CHECK(loaded.tensors[i].dims == ckpt.tensors[i].dims);
    REQUIRE(loaded.tensors[i].payload.size() == ckpt.tensors[i].payload.size());
    CHECK(std::memcmp(loaded.tensors[i].payload.data(), ckpt.tensors[i].payload.data(),
                      ckpt.tensors[i].payload.size()) == 0);
  }

  Matrix back = loaded.get_matrix<double>("w64");
  CHECK(std::memcmp(back.data.data(), m64.data.data(), m64.size() * sizeof(double)) == 0);
  std::remove(path.c_str());
}

TEST_CASE("unknown version and bad magic are rejected") {
  Checkpoint ckpt;
  std::vector<double> v{1.0};
  ckpt.put_vector<double>("x", std::span<const double>(v));
  const std::string path = temp_path("alore_test_version.alre");
  save_checkpoint(ckpt, path);

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const char version9[4] = {9, 0, 0, 0};
    f.write(version9, 4);
  }
  CHECK_THROWS_AS(load_checkpoint(path), IoError);

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("NOPE", 4);
  }
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  CHECK_THROWS_AS(load_checkpoint(temp_path("alore_missing_file.alre")), IoError);
  std::remove(path.c_str());
}

TEST_CASE("model and bank round-trip preserves the forward bit-exactly") {
  ViTConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.channels = 2;
  cfg.d = 16;
  cfg.num_layers = 2;
  cfg.n_h = 2;
  cfg.classes = 3;
  Rng rng(2);
  ViTModel<double> model = random_vit<double>(cfg, rng, 0.3);

  AloreConfig acfg;
  acfg.d = 16;
  acfg.n = 2;
  acfg.r = 2;
  acfg.sites = {Site::PreMHSA, Site::PostFFN};
  acfg.layers_adapted = 2;
  acfg.dropout_p = 0.1;
  auto bank = init_alore<double>(acfg, 2, rng);
  randomize_bank(bank, rng, 0.4);

  Checkpoint ckpt;
  model_to_checkpoint<double>(model, &bank, ckpt);
  const std::string path = temp_path("alore_test_model.alre");
  save_checkpoint(ckpt, path);

  Checkpoint loaded = load_checkpoint(path);
  ViTModel<double> model2 = model_from_checkpoint<double>(loaded);
  auto bank2 = bank_from_checkpoint<double>(loaded);
  REQUIRE(bank2.has_value());
  CHECK(bank2->cfg.n == 2);
  CHECK(bank2->cfg.r == 2);
  CHECK(bank2->cfg.dropout_p == doctest::Approx(0.1));
  REQUIRE(bank2->cfg.sites.size() == 2);
  CHECK(bank2->cfg.sites[0] == Site::PreMHSA);
  CHECK(bank2->cfg.sites[1] == Site::PostFFN);

  ImageBatch<double> images(2, cfg.channels, cfg.image_size, cfg.image_size);
  for (auto& v : images.data) v = rng.next_uniform();
  Matrix a = vit_forward(model, images, &bank, nullptr, false, 0);
  Matrix b = vit_forward(model2, images, &bank2.value(), nullptr, false, 0);
  CHECK(std::memcmp(a.data.data(), b.data.data(), a.size() * sizeof(double)) == 0);

  // plain checkpoint has no bank
  Checkpoint plain;
  model_to_checkpoint<double>(model, nullptr, plain);
  CHECK_FALSE(bank_from_checkpoint<double>(plain).has_value());
  std::remove(path.c_str());
}

TEST_CASE("non-finite parameters are rejected when a model is rebuilt") {
  ViTConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.channels = 1;
  cfg.d = 8;
  cfg.num_layers = 1;
  cfg.n_h = 2;
  cfg.classes = 2;
  Rng rng(3);
  ViTModel<double> model = random_vit<double>(cfg, rng, 0.3);
  model.head_weight(0, 0) = std::numeric_limits<double>::infinity();
  Checkpoint ckpt;
  model_to_checkpoint<double>(model, nullptr, ckpt);
  CHECK_THROWS_AS(model_from_checkpoint<double>(ckpt), DataError);
}

TEST_CASE("dataset export and import through the container") {
  TaskSpec spec;
  spec.classes = 3;
  spec.images_per_class = 4;
  spec.image_size = 8;
  spec.channels = 1;
  spec.noise_sigma = 0.02;
  spec.train_per_class = 2;
  spec.val_per_class = 1;
  spec.test_per_class = 1;
  Dataset data = gen_task(spec, 4);

  Checkpoint ckpt;
  dataset_to_checkpoint(data, spec, ckpt);
  CHECK(ckpt.has("images"));
  CHECK(ckpt.has("labels"));
  CHECK(ckpt.has("split_train"));
  CHECK(ckpt.has("split_val"));
  CHECK(ckpt.has("split_test"));

  const std::string path = temp_path("alore_test_data.alre");
  save_checkpoint(ckpt, path);
  TaskSpec spec2;
  Dataset data2 = dataset_from_checkpoint(load_checkpoint(path), &spec2);
  CHECK(data2.labels == data.labels);
  CHECK(data2.train_idx == data.train_idx);
  CHECK(data2.val_idx == data.val_idx);
  CHECK(data2.test_idx == data.test_idx);
  CHECK(std::memcmp(data2.images.data.data(), data.images.data.data(),
                    data.images.data.size() * sizeof(float)) == 0);
  CHECK(spec2.classes == spec.classes);
  CHECK(spec2.noise_sigma == doctest::Approx(spec.noise_sigma));
  std::remove(path.c_str());
}

TEST_CASE("float payloads widen and narrow consistently") {
  Checkpoint ckpt;
  Rng rng(5);
  MatrixF m32 = randn<float>(4, 4, 1.0f, rng);
  ckpt.put_matrix("w", m32);
  Matrix widened = ckpt.get_matrix<double>("w");
  for (size_t i = 0; i < m32.size(); ++i) {
    CHECK(widened.data[i] == static_cast<double>(m32.data[i]));
  }
}
