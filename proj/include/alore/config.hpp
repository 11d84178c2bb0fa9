#pragma once

#include <string>

#include "alore/train.hpp"

namespace alore {

/// Parsed experiment description. Unknown JSON keys are rejected with the
/// offending field path.
struct ExperimentConfig {
  uint64_t seed = 42;
  Regime regime = Regime::Alore;
  std::string precision = "f64";  // checkpoint payload + eval precision
  std::string init_checkpoint;    // optional backbone warm start
  ViTConfig model;
  AloreConfig alore;
  TrainConfig train;
  TaskSpec data;

  bool use_adapters() const { return regime == Regime::Alore; }
  void validate() const;
};

ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);
std::string experiment_config_to_json(const ExperimentConfig& cfg);

}  // namespace alore
