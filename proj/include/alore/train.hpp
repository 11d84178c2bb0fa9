#pragma once

#include <functional>
#include <string>
#include <vector>

#include "alore/data.hpp"
#include "alore/grad.hpp"

namespace alore {

struct GridSpec {
  std::vector<double> lr{0.05, 0.01, 0.005, 0.001};
  std::vector<double> weight_decay{0.05, 0.01, 0.005, 0.001, 0.0};
  std::vector<double> dropout{0.1, 0.0};
};

struct TrainConfig {
  double lr = 0.001;
  double weight_decay = 0.01;
  int batch_size = 32;
  int epochs = 100;
  int warmup_epochs = 10;
  double dropout_p = 0.1;
  uint64_t seed = 42;
  Regime regime = Regime::Alore;
  GridSpec grid;

  void validate() const;
};

/// Linear warmup to the base lr, then cosine decay to 0.
double cosine_lr(int epoch, const TrainConfig& cfg);

/// AdamW accumulators, one slot per trainable tensor.
struct OptState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

OptState make_opt_state(const std::vector<ParamRef>& params);

/// Decoupled decay p *= (1 - lr*wd) first, then the bias-corrected Adam
/// delta. Tensors outside `params` are never touched.
void adamw_step(std::vector<ParamRef>& params, const std::vector<ParamRef>& grads,
                OptState& state, double lr, double wd);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0, train_top1 = 0;
  double val_loss = 0, val_top1 = 0;
  double test_loss = 0, test_top1 = 0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  double best_val_top1 = -1.0;
  double test_top1_at_best = 0.0;
};

/// Receives one JSON-lines record per (epoch, split).
using MetricsSink = std::function<void(const std::string& line)>;

struct EvalResult {
  double loss = 0;
  double top1 = 0;
};

EvalResult evaluate(const ViTModel<double>& model, const AloreBank<double>* bank,
                    const ExpertMask* mask, const Dataset& data,
                    std::span<const int> indices, int batch_size);

/// Deterministic frozen-backbone training loop; regime picks the trainables.
/// Stops after `cfg.epochs` epochs, or earlier when stop_at_val_top1 > 0 is
/// reached on the validation split.
TrainResult train_loop(ViTModel<double>& model, AloreBank<double>* bank, const Dataset& data,
                       const TrainConfig& cfg, const MetricsSink& sink,
                       double stop_at_val_top1 = -1.0);

struct GridPointResult {
  double lr = 0, weight_decay = 0, dropout = 0;
  TrainResult result;
};

struct GridResult {
  TrainConfig best_config;
  TrainResult best_result;
  int best_index = -1;
  std::vector<GridPointResult> points;
};

/// Per-point metrics sink factory (point index, lr, wd, dropout).
using GridSinkFactory = std::function<MetricsSink(int, double, double, double)>;

/// Trains every grid point from the same initial state, selects by best val
/// top-1 (ties: lower lr, then lower wd, then lower dropout), and reports the
/// selected point's test accuracy.
GridResult grid_search(const ViTModel<double>& model0, const AloreBank<double>* bank0,
                       const Dataset& data, const TrainConfig& base,
                       const GridSinkFactory& sink_factory);

/// Formats one metrics record: {"epoch":..,"split":"..","loss":..,"top1":..}
std::string metrics_line(int epoch, const std::string& split, double loss, double top1);

}  // namespace alore
