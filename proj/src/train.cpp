#include "alore/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace alore {

void TrainConfig::validate() const {
  if (lr < 0.0 || weight_decay < 0.0) throw ConfigError("train: rates must be >= 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs >= epochs) {
    throw ConfigError("train: warmup_epochs must satisfy 0 <= warmup < epochs");
  }
  if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("train: dropout in [0, 1)");
}

double cosine_lr(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs) {
    throw IndexError("cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " +
                     std::to_string(cfg.epochs) + ")");
  }
  if (epoch < cfg.warmup_epochs) {
    return cfg.lr * (epoch + 1) / cfg.warmup_epochs;
  }
  const double progress = static_cast<double>(epoch - cfg.warmup_epochs) /
                          (cfg.epochs - cfg.warmup_epochs);
  return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

OptState make_opt_state(const std::vector<ParamRef>& params) {
  OptState s;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const auto& p : params) {
    s.m.emplace_back(p.value.size(), 0.0);
    s.v.emplace_back(p.value.size(), 0.0);
  }
  return s;
}

void adamw_step(std::vector<ParamRef>& params, const std::vector<ParamRef>& grads,
                OptState& state, double lr, double wd) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw ShapeError("adamw: param/grad/state slot counts differ");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t t = 0; t < params.size(); ++t) {
    auto& p = params[t].value;
    const auto& g = grads[t].value;
    if (p.size() != g.size()) {
      throw ShapeError("adamw: tensor '" + params[t].name + "' param/grad sizes differ");
    }
    auto& m = state.m[t];
    auto& v = state.v[t];
    for (size_t i = 0; i < p.size(); ++i) {
      p[i] *= 1.0 - lr * wd;  // decoupled decay before the Adam delta
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

std::string metrics_line(int epoch, const std::string& split, double loss, double top1) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "{\"epoch\":%d,\"split\":\"%s\",\"loss\":%.10g,\"top1\":%.10g}",
                epoch, split.c_str(), loss, top1);
  return std::string(buf);
}

EvalResult evaluate(const ViTModel<double>& model, const AloreBank<double>* bank,
                    const ExpertMask* mask, const Dataset& data,
                    std::span<const int> indices, int batch_size) {
  if (indices.empty()) throw DataError("evaluate: empty split");
  double total_loss = 0.0;
  int correct = 0;
  const int n = static_cast<int>(indices.size());
  for (int start = 0; start < n; start += batch_size) {
    const int count = std::min(batch_size, n - start);
    std::span<const int> chunk = indices.subspan(start, count);
    ImageBatch<double> batch = gather_images<double>(data, chunk);
    std::vector<int> labels = gather_labels(data, chunk);
    Matrix logits = vit_forward(model, batch, bank, mask, /*train=*/false, /*seed=*/0);
    for (int i = 0; i < count; ++i) {
      const double* z = logits.row(i);
      int argmax = 0;
      for (int j = 1; j < logits.cols; ++j) {
        if (z[j] > z[argmax]) argmax = j;
      }
      if (argmax == labels[i]) ++correct;
    }
    total_loss += cross_entropy(logits, labels, nullptr) * count;
  }
  return {total_loss / n, static_cast<double>(correct) / n};
}

TrainResult train_loop(ViTModel<double>& model, AloreBank<double>* bank, const Dataset& data,
                       const TrainConfig& cfg, const MetricsSink& sink,
                       double stop_at_val_top1) {
  cfg.validate();
  if (data.train_idx.empty() || data.val_idx.empty() || data.test_idx.empty()) {
    throw DataError("train_loop: dataset has an empty split");
  }

  auto params = trainable_parameters(model, bank, cfg.regime);
  Gradients grads = make_gradients(model, bank);
  auto grefs = gradient_refs(grads, cfg.regime);
  OptState opt = make_opt_state(params);

  const bool train_mode_dropout = bank != nullptr && cfg.dropout_p > 0.0;
  double saved_dropout = 0.0;
  if (bank != nullptr) {
    // effective dropout comes from the train config (grid points override it)
    saved_dropout = bank->cfg.dropout_p;
    bank->cfg.dropout_p = cfg.dropout_p;
  }
  (void)train_mode_dropout;

  TrainResult result;
  Rng shuffle_rng = Rng(cfg.seed).fork(0x5175);
  std::vector<int> order(data.train_idx);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg);
    // deterministic Fisher-Yates reshuffle each epoch
    Rng erng = shuffle_rng.fork(static_cast<uint64_t>(epoch));
    order = data.train_idx;
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
      const int j = static_cast<int>(erng.next_below(static_cast<uint64_t>(i) + 1));
      std::swap(order[i], order[j]);
    }

    double epoch_loss = 0.0;
    double epoch_top1 = 0.0;
    int batches = 0;
    const int n = static_cast<int>(order.size());
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int count = std::min(cfg.batch_size, n - start);
      std::span<const int> chunk(order.data() + start, static_cast<size_t>(count));
      ImageBatch<double> batch = gather_images<double>(data, chunk);
      std::vector<int> labels = gather_labels(data, chunk);

      grads.zero();
      double top1 = 0.0;
      const uint64_t dropout_seed =
          Rng(cfg.seed).fork(0xD0 + static_cast<uint64_t>(epoch) * 100003 + batches).seed;
      const double loss = loss_and_gradients(model, bank, batch, labels, nullptr,
                                             /*train=*/true, dropout_seed, cfg.regime, grads,
                                             &top1);
      adamw_step(params, grefs, opt, lr, cfg.weight_decay);
      epoch_loss += loss;
      epoch_top1 += top1;
      ++batches;
    }
    epoch_loss /= batches;
    epoch_top1 /= batches;

    EvalResult val = evaluate(model, bank, nullptr, data, data.val_idx, 64);
    EvalResult test = evaluate(model, bank, nullptr, data, data.test_idx, 64);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss;
    rec.train_top1 = epoch_top1;
    rec.val_loss = val.loss;
    rec.val_top1 = val.top1;
    rec.test_loss = test.loss;
    rec.test_top1 = test.top1;
    result.history.push_back(rec);
    if (sink) {
      sink(metrics_line(epoch, "train", epoch_loss, epoch_top1));
      sink(metrics_line(epoch, "val", val.loss, val.top1));
      sink(metrics_line(epoch, "test", test.loss, test.top1));
    }

    if (val.top1 > result.best_val_top1) {
      result.best_val_top1 = val.top1;
      result.best_epoch = epoch;
      result.test_top1_at_best = test.top1;
    }
    if (stop_at_val_top1 > 0.0 && val.top1 >= stop_at_val_top1) break;
  }

  if (bank != nullptr) bank->cfg.dropout_p = saved_dropout;
  return result;
}

GridResult grid_search(const ViTModel<double>& model0, const AloreBank<double>* bank0,
                       const Dataset& data, const TrainConfig& base,
                       const GridSinkFactory& sink_factory) {
  if (base.grid.lr.empty() || base.grid.weight_decay.empty() || base.grid.dropout.empty()) {
    throw ConfigError("grid_search: empty grid axis");
  }
  GridResult out;
  int index = 0;
  for (double lr : base.grid.lr) {
    for (double wd : base.grid.weight_decay) {
      for (double dp : base.grid.dropout) {
        TrainConfig cfg = base;
        cfg.lr = lr;
        cfg.weight_decay = wd;
        cfg.dropout_p = dp;

        ViTModel<double> model = model0;
        std::optional<AloreBank<double>> bank;
        if (bank0 != nullptr) bank = *bank0;
        MetricsSink sink = sink_factory ? sink_factory(index, lr, wd, dp) : MetricsSink();
        TrainResult res = train_loop(model, bank.has_value() ? &bank.value() : nullptr, data,
                                     cfg, sink);

        GridPointResult point{lr, wd, dp, res};
        const bool better = [&]() {
          if (out.best_index < 0) return true;
          const auto& cur = out.points[out.best_index];
          if (res.best_val_top1 != cur.result.best_val_top1) {
            return res.best_val_top1 > cur.result.best_val_top1;
          }
          if (lr != cur.lr) return lr < cur.lr;  // ties: lower lr
          if (wd != cur.weight_decay) return wd < cur.weight_decay;  // then lower wd
          return dp < cur.dropout;
        }();
        out.points.push_back(std::move(point));
        if (better) {
          out.best_index = index;
          out.best_config = cfg;
          out.best_result = out.points.back().result;
        }
        ++index;
      }
    }
  }
  return out;
}

}  // namespace alore
