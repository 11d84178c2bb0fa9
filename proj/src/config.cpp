#include "alore/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace alore {

namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::string& path,
                const std::set<std::string>& allowed) {
  for (const auto& item : obj.items()) {
    if (!allowed.contains(item.key())) {
      throw ConfigError("unknown config key '" + (path.empty() ? item.key() : path + "." +
                        item.key()) + "'");
    }
  }
}

template <class T>
void read_field(const json& obj, const std::string& key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

void parse_model(const json& obj, ViTConfig& cfg) {
  check_keys(obj, "model", {"image_size", "patch_size", "channels", "d", "layers", "heads",
                            "mlp_ratio", "classes"});
  read_field(obj, "image_size", cfg.image_size);
  read_field(obj, "patch_size", cfg.patch_size);
  read_field(obj, "channels", cfg.channels);
  read_field(obj, "d", cfg.d);
  read_field(obj, "layers", cfg.num_layers);
  read_field(obj, "heads", cfg.n_h);
  read_field(obj, "mlp_ratio", cfg.mlp_ratio);
  read_field(obj, "classes", cfg.classes);
}

void parse_alore(const json& obj, AloreConfig& cfg) {
  check_keys(obj, "alore", {"n", "r", "sites", "layers_adapted", "dropout"});
  read_field(obj, "n", cfg.n);
  read_field(obj, "r", cfg.r);
  read_field(obj, "layers_adapted", cfg.layers_adapted);
  read_field(obj, "dropout", cfg.dropout_p);
  if (obj.contains("sites")) {
    cfg.sites.clear();
    for (const auto& s : obj.at("sites")) {
      auto site = site_from_name(s.get<std::string>());
      if (!site.has_value()) {
        throw ConfigError("alore.sites: unknown site '" + s.get<std::string>() + "'");
      }
      cfg.sites.push_back(*site);
    }
  }
}

void parse_train(const json& obj, TrainConfig& cfg) {
  check_keys(obj, "train", {"lr", "weight_decay", "batch_size", "epochs", "warmup_epochs",
                            "grid"});
  read_field(obj, "lr", cfg.lr);
  read_field(obj, "weight_decay", cfg.weight_decay);
  read_field(obj, "batch_size", cfg.batch_size);
  read_field(obj, "epochs", cfg.epochs);
  read_field(obj, "warmup_epochs", cfg.warmup_epochs);
  if (obj.contains("grid")) {
    const auto& g = obj.at("grid");
    check_keys(g, "train.grid", {"lr", "weight_decay", "dropout"});
    if (g.contains("lr")) cfg.grid.lr = g.at("lr").get<std::vector<double>>();
    if (g.contains("weight_decay")) {
      cfg.grid.weight_decay = g.at("weight_decay").get<std::vector<double>>();
    }
    if (g.contains("dropout")) cfg.grid.dropout = g.at("dropout").get<std::vector<double>>();
  }
}

void parse_data(const json& obj, TaskSpec& spec) {
  check_keys(obj, "data", {"classes", "images_per_class", "image_size", "channels",
                           "pattern_seed", "noise_sigma", "shift", "split"});
  read_field(obj, "classes", spec.classes);
  read_field(obj, "images_per_class", spec.images_per_class);
  read_field(obj, "image_size", spec.image_size);
  read_field(obj, "channels", spec.channels);
  read_field(obj, "pattern_seed", spec.pattern_seed);
  read_field(obj, "noise_sigma", spec.noise_sigma);
  read_field(obj, "shift", spec.shift);
  if (obj.contains("split")) {
    const auto split = obj.at("split").get<std::vector<int>>();
    if (split.size() != 3) throw ConfigError("data.split must be [train, val, test]");
    spec.train_per_class = split[0];
    spec.val_per_class = split[1];
    spec.test_per_class = split[2];
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  if (use_adapters()) alore.validate(model.num_layers);
  train.validate();
  data.validate();
  if (precision != "f64" && precision != "f32") {
    throw ConfigError("precision must be 'f64' or 'f32'");
  }
  if (data.classes != model.classes) {
    throw ConfigError("data.classes=" + std::to_string(data.classes) +
                      " differs from model.classes=" + std::to_string(model.classes));
  }
  if (data.image_size != model.image_size || data.channels != model.channels) {
    throw ConfigError("data image shape differs from model input shape");
  }
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config JSON parse error: ") + e.what());
  }
  check_keys(root, "", {"seed", "regime", "precision", "init_checkpoint", "model", "alore",
                        "train", "data"});
  ExperimentConfig cfg;
  read_field(root, "seed", cfg.seed);
  read_field(root, "precision", cfg.precision);
  read_field(root, "init_checkpoint", cfg.init_checkpoint);
  if (root.contains("regime")) {
    const std::string name = root.at("regime").get<std::string>();
    auto regime = regime_from_name(name);
    if (!regime.has_value()) throw ConfigError("unknown regime '" + name + "'");
    cfg.regime = *regime;
  }
  if (root.contains("model")) parse_model(root.at("model"), cfg.model);
  // defaults bound to the model before overrides
  cfg.alore.d = cfg.model.d;
  cfg.alore.layers_adapted = cfg.model.num_layers;
  cfg.data.image_size = cfg.model.image_size;
  cfg.data.channels = cfg.model.channels;
  cfg.data.classes = cfg.model.classes;
  if (root.contains("alore")) parse_alore(root.at("alore"), cfg.alore);
  if (root.contains("train")) parse_train(root.at("train"), cfg.train);
  if (root.contains("data")) parse_data(root.at("data"), cfg.data);
  cfg.alore.d = cfg.model.d;
  cfg.train.seed = cfg.seed;
  cfg.train.regime = cfg.regime;
  cfg.train.dropout_p = cfg.alore.dropout_p;
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_experiment_config(buf.str());
}

std::string experiment_config_to_json(const ExperimentConfig& cfg) {
  json root;
  root["seed"] = cfg.seed;
  root["regime"] = regime_name(cfg.regime);
  root["precision"] = cfg.precision;
  if (!cfg.init_checkpoint.empty()) root["init_checkpoint"] = cfg.init_checkpoint;
  root["model"] = {{"image_size", cfg.model.image_size}, {"patch_size", cfg.model.patch_size},
                   {"channels", cfg.model.channels},     {"d", cfg.model.d},
                   {"layers", cfg.model.num_layers},     {"heads", cfg.model.n_h},
                   {"mlp_ratio", cfg.model.mlp_ratio},   {"classes", cfg.model.classes}};
  json sites = json::array();
  for (Site s : cfg.alore.sites) sites.push_back(site_name(s));
  root["alore"] = {{"n", cfg.alore.n},
                   {"r", cfg.alore.r},
                   {"sites", sites},
                   {"layers_adapted", cfg.alore.layers_adapted},
                   {"dropout", cfg.alore.dropout_p}};
  root["train"] = {{"lr", cfg.train.lr},
                   {"weight_decay", cfg.train.weight_decay},
                   {"batch_size", cfg.train.batch_size},
                   {"epochs", cfg.train.epochs},
                   {"warmup_epochs", cfg.train.warmup_epochs},
                   {"grid",
                    {{"lr", cfg.train.grid.lr},
                     {"weight_decay", cfg.train.grid.weight_decay},
                     {"dropout", cfg.train.grid.dropout}}}};
  root["data"] = {{"classes", cfg.data.classes},
                  {"images_per_class", cfg.data.images_per_class},
                  {"image_size", cfg.data.image_size},
                  {"channels", cfg.data.channels},
                  {"pattern_seed", cfg.data.pattern_seed},
                  {"noise_sigma", cfg.data.noise_sigma},
                  {"shift", cfg.data.shift},
                  {"split",
                   {cfg.data.train_per_class, cfg.data.val_per_class, cfg.data.test_per_class}}};
  return root.dump(2);
}

}  // namespace alore
