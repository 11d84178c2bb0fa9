#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "alore/accounting.hpp"
#include "alore/checkpoint.hpp"
#include "alore/config.hpp"
#include "alore/grad.hpp"
#include "alore/reparam.hpp"
#include "alore/train.hpp"

namespace fs = std::filesystem;
using namespace alore;

namespace {

constexpr int kExitPass = 0;
constexpr int kExitVerifyFail = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

struct LoadedModel {
  ViTModel<double> model;
  std::optional<AloreBank<double>> bank;
};

LoadedModel load_model(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  LoadedModel out{model_from_checkpoint<double>(ckpt), bank_from_checkpoint<double>(ckpt)};
  return out;
}

template <class T>
std::pair<ViTModel<T>, std::optional<AloreBank<T>>> load_model_as(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  return {model_from_checkpoint<T>(ckpt), bank_from_checkpoint<T>(ckpt)};
}

void save_model(const ViTModel<double>& model, const AloreBank<double>* bank,
                const std::string& precision, const std::string& path) {
  Checkpoint ckpt;
  if (precision == "f32") {
    // narrow the payload; the container keeps per-tensor dtype
    Checkpoint tmp;
    model_to_checkpoint<double>(model, bank, tmp);
    for (auto& t : tmp.tensors) {
      if (t.name.rfind("meta/", 0) == 0) {
        ckpt.tensors.push_back(t);
        continue;
      }
      TensorBlob narrow;
      narrow.name = t.name;
      narrow.dtype = 0;
      narrow.dims = t.dims;
      const size_t n = t.element_count();
      narrow.payload.resize(n * 4);
      for (size_t i = 0; i < n; ++i) {
        double d;
        std::memcpy(&d, t.payload.data() + i * 8, 8);
        const float f = static_cast<float>(d);
        std::memcpy(narrow.payload.data() + i * 4, &f, 4);
      }
      ckpt.tensors.push_back(std::move(narrow));
    }
  } else {
    model_to_checkpoint<double>(model, bank, ckpt);
  }
  save_checkpoint(ckpt, path);
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return out;
}

struct BuiltExperiment {
  ExperimentConfig cfg;
  Dataset data;
  ViTModel<double> model;
  std::optional<AloreBank<double>> bank;
};

BuiltExperiment build_experiment(const std::string& config_path) {
  BuiltExperiment exp;
  exp.cfg = load_experiment_config(config_path);
  exp.data = gen_task(exp.cfg.data, exp.cfg.seed);
  Rng rng(exp.cfg.seed);
  if (!exp.cfg.init_checkpoint.empty()) {
    exp.model = model_from_checkpoint<double>(load_checkpoint(exp.cfg.init_checkpoint));
    if (!(exp.model.cfg == exp.cfg.model)) {
      throw ConfigError("init_checkpoint model config differs from config.model");
    }
  } else {
    Rng mrng = rng.fork(0x300DE1);
    exp.model = init_vit<double>(exp.cfg.model, mrng);
  }
  if (exp.cfg.use_adapters()) {
    Rng brng = rng.fork(0xADA9);
    exp.bank = init_alore<double>(exp.cfg.alore, exp.cfg.model.num_layers, brng);
  }
  return exp;
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
  BuiltExperiment exp = build_experiment(config_path);
  fs::create_directories(out_dir);

  std::ofstream metrics = open_out(fs::path(out_dir) / "metrics.jsonl");
  TrainResult res = train_loop(exp.model, exp.bank ? &exp.bank.value() : nullptr, exp.data,
                               exp.cfg.train, [&](const std::string& l) { metrics << l << "\n"; });
  metrics.close();

  save_model(exp.model, exp.bank ? &exp.bank.value() : nullptr, exp.cfg.precision,
             (fs::path(out_dir) / "checkpoint.alre").string());
  Checkpoint dataset_ckpt;
  dataset_to_checkpoint(exp.data, exp.cfg.data, dataset_ckpt);
  save_checkpoint(dataset_ckpt, (fs::path(out_dir) / "data.alre").string());
  open_out(fs::path(out_dir) / "config.json") << experiment_config_to_json(exp.cfg) << "\n";

  std::printf("train: regime=%s epochs=%zu best_epoch=%d best_val_top1=%.4f test_top1=%.4f\n",
              regime_name(exp.cfg.regime), res.history.size(), res.best_epoch,
              res.best_val_top1, res.test_top1_at_best);
  return kExitPass;
}

int cmd_grid(const std::string& config_path, const std::string& out_dir) {
  BuiltExperiment exp = build_experiment(config_path);
  fs::create_directories(out_dir);

  std::vector<std::unique_ptr<std::ofstream>> files;
  GridResult res = grid_search(
      exp.model, exp.bank ? &exp.bank.value() : nullptr, exp.data, exp.cfg.train,
      [&](int index, double, double, double) -> MetricsSink {
        char name[64];
        std::snprintf(name, sizeof(name), "metrics_point_%02d.jsonl", index);
        files.push_back(std::make_unique<std::ofstream>(fs::path(out_dir) / name));
        std::ofstream* f = files.back().get();
        return [f](const std::string& l) { (*f) << l << "\n"; };
      });
  files.clear();  // flush

  // deterministic re-run of the selected point to materialize its weights
  ViTModel<double> best_model = exp.model;
  std::optional<AloreBank<double>> best_bank = exp.bank;
  train_loop(best_model, best_bank ? &best_bank.value() : nullptr, exp.data, res.best_config,
             MetricsSink());
  save_model(best_model, best_bank ? &best_bank.value() : nullptr, exp.cfg.precision,
             (fs::path(out_dir) / "checkpoint.alre").string());

  std::ofstream sel = open_out(fs::path(out_dir) / "selection.json");
  char line[256];
  std::snprintf(line, sizeof(line),
                "{\"lr\":%.10g,\"weight_decay\":%.10g,\"dropout\":%.10g,"
                "\"val_top1\":%.10g,\"test_top1\":%.10g}",
                res.best_config.lr, res.best_config.weight_decay, res.best_config.dropout_p,
                res.best_result.best_val_top1, res.best_result.test_top1_at_best);
  sel << line << "\n";
  std::printf("grid: points=%zu selected lr=%g wd=%g dropout=%g val_top1=%.4f test_top1=%.4f\n",
              res.points.size(), res.best_config.lr, res.best_config.weight_decay,
              res.best_config.dropout_p, res.best_result.best_val_top1,
              res.best_result.test_top1_at_best);
  return kExitPass;
}

int cmd_merge(const std::string& ckpt_path, const std::string& out_path,
              const std::string& precision) {
  if (precision == "f32") {
    auto [model, bank] = load_model_as<float>(ckpt_path);
    auto merged = merge<float>(model, bank ? &bank.value() : nullptr);
    Checkpoint out;
    model_to_checkpoint<float>(merged.model, nullptr, out);
    save_checkpoint(out, out_path);
    std::printf("merge: %zu site folds, %lld parameters, f32\n", merged.log.size(),
                merged.model.parameter_count());
  } else {
    LoadedModel in = load_model(ckpt_path);
    auto merged = merge<double>(in.model, in.bank ? &in.bank.value() : nullptr);
    Checkpoint out;
    model_to_checkpoint<double>(merged.model, nullptr, out);
    save_checkpoint(out, out_path);
    std::printf("merge: %zu site folds, %lld parameters, f64\n", merged.log.size(),
                merged.model.parameter_count());
  }
  return kExitPass;
}

template <class T>
MergeReport run_verify(const std::string& a, const std::string& b, int inputs, uint64_t seed,
                       double tol) {
  auto [model_a, bank_a] = load_model_as<T>(a);
  auto [model_b, bank_b] = load_model_as<T>(b);
  return verify_equivalence<T>(model_a, bank_a ? &bank_a.value() : nullptr, model_b,
                               bank_b ? &bank_b.value() : nullptr, inputs, seed, tol);
}

int cmd_verify(const std::string& a, const std::string& b, int inputs, uint64_t seed,
               double tol, const std::string& precision) {
  MergeReport report = precision == "f32" ? run_verify<float>(a, b, inputs, seed, tol)
                                          : run_verify<double>(a, b, inputs, seed, tol);
  std::printf("verify: inputs=%d max_abs_logit_diff=%.3e tol=%.3e -> %s\n",
              report.inputs_tested, report.max_abs_logit_diff, report.tol,
              report.pass ? "PASS" : "FAIL");
  return report.pass ? kExitPass : kExitVerifyFail;
}

int cmd_bench(const std::string& ckpt_path, int batch, int iters, int warmup, int threads,
              const std::string& precision) {
  if (const char* cap_env = std::getenv("ALORE_THREADS")) {
    const int cap = std::atoi(cap_env);
    if (cap >= 1 && threads > cap) threads = cap;
  }
  ThroughputReport rep;
  if (precision == "f32") {
    auto [model, bank] = load_model_as<float>(ckpt_path);
    rep = bench_throughput<float>(model, bank ? &bank.value() : nullptr, batch, warmup, iters,
                                  threads);
  } else {
    auto [model, bank] = load_model_as<double>(ckpt_path);
    rep = bench_throughput<double>(model, bank ? &bank.value() : nullptr, batch, warmup, iters,
                                   threads);
  }
  std::printf("bench: single_stream=%.2f images/sec all_stream=%.2f images/sec threads=%d\n",
              rep.single_stream_ips, rep.all_stream_ips, rep.threads);
  return kExitPass;
}

int cmd_params(const std::string& method_str, long long d, long long r, long long L,
               long long n, long long m, long long w, long long o, int sites) {
  std::printf("%-14s %12s %12s %8s %8s\n", "method", "fine_tune", "inference", "ft_M", "inf_M");
  long long ft = 0, inf = 0;
  if (method_str == "stacked") {
    ft = count_stacked_params(static_cast<int>(d), static_cast<int>(r), static_cast<int>(n),
                              sites, static_cast<int>(L));
    inf = ft;  // replicated Eq-5 adapters keep their parameters at inference
  } else if (method_str == "alore") {
    ft = count_alore_params(static_cast<int>(d), static_cast<int>(r), static_cast<int>(n),
                            sites, static_cast<int>(L));
    inf = 0;
  } else {
    auto method = method_from_name(method_str);
    if (!method.has_value()) throw ConfigError("unknown method '" + method_str + "'");
    AccountingInputs inp;
    inp.method = *method;
    inp.d = d;
    inp.r = r;
    inp.L = L;
    inp.n = n;
    inp.m = m;
    inp.w = w;
    inp.o = o;
    ft = fine_tune_params(inp);
    inf = inference_extra_params(inp);
  }
  std::printf("%-14s %12lld %12lld %8s %8s\n", method_str.c_str(), ft, inf,
              format_millions(ft).c_str(), format_millions(inf).c_str());
  return kExitPass;
}

int cmd_gradcheck(const std::string& config_path, double eps) {
  ExperimentConfig cfg = load_experiment_config(config_path);
  Rng rng(cfg.seed);
  Rng mrng = rng.fork(1);
  ViTModel<double> model = random_vit<double>(cfg.model, mrng, 0.25);
  std::optional<AloreBank<double>> bank;
  if (cfg.use_adapters()) {
    Rng brng = rng.fork(2);
    bank = init_alore<double>(cfg.alore, cfg.model.num_layers, brng);
    randomize_bank(bank.value(), brng, 0.3);
  }
  ImageBatch<double> images(2, cfg.model.channels, cfg.model.image_size, cfg.model.image_size);
  Rng irng = rng.fork(3);
  for (auto& v : images.data) v = irng.next_uniform();
  std::vector<int> labels(2);
  for (auto& l : labels) l = static_cast<int>(irng.next_below(cfg.model.classes));

  GradCheckResult res = gradient_check(model, bank ? &bank.value() : nullptr, images, labels,
                                       cfg.regime, /*train=*/cfg.alore.dropout_p > 0.0,
                                       cfg.seed, eps);
  const bool pass = res.max_rel_err <= 1e-4;
  std::printf("gradcheck: regime=%s max_rel_err=%.3e worst=%s[%d] -> %s\n",
              regime_name(cfg.regime), res.max_rel_err, res.worst_tensor.c_str(),
              res.worst_index, pass ? "PASS" : "FAIL");
  return pass ? kExitPass : kExitVerifyFail;
}

int cmd_mask_eval(const std::string& ckpt_path, const std::string& data_path,
                  const std::string& mode_str, int index) {
  auto mode = mask_mode_from_name(mode_str);
  if (!mode.has_value()) throw ConfigError("unknown mask mode '" + mode_str + "'");
  LoadedModel in = load_model(ckpt_path);
  if (!in.bank.has_value()) throw ConfigError("checkpoint has no adapter bank to mask");
  Dataset data = dataset_from_checkpoint(load_checkpoint(data_path), nullptr);

  ExpertMask mask = make_expert_mask(*mode, index, in.bank->cfg.n);
  EvalResult res = evaluate(in.model, &in.bank.value(), &mask, data,
                            std::span<const int>(data.test_idx), 64);
  std::string active;
  for (uint8_t b : mask.active) active += b ? '1' : '0';
  std::printf("{\"mode\":\"%s\",\"index\":%d,\"active\":\"%s\",\"test_loss\":%.6f,"
              "\"test_top1\":%.6f}\n",
              mode_str.c_str(), index, active.c_str(), res.loss, res.top1);
  return kExitPass;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_path) {
  ExperimentConfig cfg = load_experiment_config(config_path);
  Dataset data = gen_task(cfg.data, cfg.seed);
  Checkpoint ckpt;
  dataset_to_checkpoint(data, cfg.data, ckpt);
  save_checkpoint(ckpt, out_path);
  std::printf("gen-data: %d images, %zu train / %zu val / %zu test\n", data.count(),
              data.train_idx.size(), data.val_idx.size(), data.test_idx.size());
  return kExitPass;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ALoRE: aggregated low-rank experts on a minimal ViT"};
  app.require_subcommand(1);

  std::string config_path, out_dir, ckpt_path, out_path, path_a, path_b, data_path;
  std::string method_str, mode_str, precision = "f64";
  int inputs = 16, batch = 16, iters = 8, warmup = 2, threads = 1, index = 1, sites = 2;
  long long d = 768, r = 4, L = 12, n = 4, m = 0, w = 0, o = 0;
  double tol = 1e-10, eps = 1e-5;
  uint64_t seed = 1;

  auto* t = app.add_subcommand("train", "train one configuration, write checkpoint + metrics");
  t->add_option("--config", config_path)->required();
  t->add_option("--out", out_dir)->required();

  auto* g = app.add_subcommand("grid", "grid-search lr/wd/dropout and keep the best point");
  g->add_option("--config", config_path)->required();
  g->add_option("--out", out_dir)->required();

  auto* mg = app.add_subcommand("merge", "fold adapters into backbone weights");
  mg->add_option("--ckpt", ckpt_path)->required();
  mg->add_option("--out", out_path)->required();
  mg->add_option("--precision", precision)->check(CLI::IsMember({"f32", "f64"}));

  auto* v = app.add_subcommand("verify", "compare two checkpoints on random inputs");
  v->add_option("--a", path_a)->required();
  v->add_option("--b", path_b)->required();
  v->add_option("--inputs", inputs);
  v->add_option("--tol", tol);
  v->add_option("--seed", seed);
  v->add_option("--precision", precision)->check(CLI::IsMember({"f32", "f64"}));

  auto* b = app.add_subcommand("bench", "wall-clock throughput of a checkpoint");
  b->add_option("--ckpt", ckpt_path)->required();
  b->add_option("--batch", batch);
  b->add_option("--iters", iters);
  b->add_option("--warmup", warmup);
  b->add_option("--threads", threads);
  b->add_option("--precision", precision)->check(CLI::IsMember({"f32", "f64"}));

  auto* p = app.add_subcommand("params", "parameter budget table for a PETL method");
  p->add_option("--method", method_str)->required();
  p->add_option("--d", d);
  p->add_option("--r", r);
  p->add_option("--L", L);
  p->add_option("--n", n);
  p->add_option("--m", m);
  p->add_option("--w", w);
  p->add_option("--o", o);
  p->add_option("--sites", sites);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the trainable set");
  gc->add_option("--config", config_path)->required();
  gc->add_option("--eps", eps);

  auto* me = app.add_subcommand("mask-eval", "evaluate under an expert mask");
  me->add_option("--ckpt", ckpt_path)->required();
  me->add_option("--data", data_path)->required();
  me->add_option("--mode", mode_str)->required()
      ->check(CLI::IsMember({"increment", "single", "sliced"}));
  me->add_option("--index", index)->required();

  auto* gd = app.add_subcommand("gen-data", "generate and export a synthetic task");
  gd->add_option("--config", config_path)->required();
  gd->add_option("--out", out_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (t->parsed()) return cmd_train(config_path, out_dir);
    if (g->parsed()) return cmd_grid(config_path, out_dir);
    if (mg->parsed()) return cmd_merge(ckpt_path, out_path, precision);
    if (v->parsed()) return cmd_verify(path_a, path_b, inputs, seed, tol, precision);
    if (b->parsed()) return cmd_bench(ckpt_path, batch, iters, warmup, threads, precision);
    if (p->parsed()) return cmd_params(method_str, d, r, L, n, m, w, o, sites);
    if (gc->parsed()) return cmd_gradcheck(config_path, eps);
    if (me->parsed()) return cmd_mask_eval(ckpt_path, data_path, mode_str, index);
    if (gd->parsed()) return cmd_gen_data(config_path, out_path);
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
