#include "alore/reparam.hpp"

#include <chrono>
#include <cmath>
#include <thread>

namespace alore {

namespace {

template <class T>
Mat<T> delta_plus_identity(const AloreBank<T>& bank, int layer, Site site) {
  Mat<T> w = compose_delta(bank, layer, site);
  for (int i = 0; i < w.rows; ++i) w(i, i) += T(1);
  return w;
}

template <class T>
std::vector<T> row_times(const std::vector<T>& b, const Mat<T>& w) {
  std::vector<T> out(static_cast<size_t>(w.cols), T(0));
  for (int i = 0; i < w.rows; ++i) {
    const T bi = b[i];
    const T* wi = w.row(i);
    for (int j = 0; j < w.cols; ++j) out[j] += bi * wi[j];
  }
  return out;
}

}  // namespace

template <class T>
MergeResult<T> merge(const ViTModel<T>& model, const AloreBank<T>* bank) {
  MergeResult<T> out;
  out.model = model;
  if (bank == nullptr) return out;  // idempotent on a plain model

  for (int l = 0; l < bank->cfg.layers_adapted; ++l) {
    ViTLayer<T>& layer = out.model.layers[l];
    for (Site site : bank->cfg.sites) {
      Mat<T> wa = delta_plus_identity(*bank, l, site);
      switch (site) {
        case Site::PreMHSA:
          layer.wq = matmul(wa, layer.wq);
          layer.wk = matmul(wa, layer.wk);
          layer.wv = matmul(wa, layer.wv);
          out.log.push_back({l, site, "attn/wq,attn/wk,attn/wv"});
          break;
        case Site::PostMHSA:
          layer.wo = matmul(layer.wo, wa);
          layer.bo = row_times(layer.bo, wa);
          out.log.push_back({l, site, "attn/wo,attn/bo"});
          break;
        case Site::PreFFN:
          layer.w1 = matmul(wa, layer.w1);
          out.log.push_back({l, site, "mlp/w1"});
          break;
        case Site::PostFFN:
          layer.w2 = matmul(layer.w2, wa);
          layer.b2 = row_times(layer.b2, wa);
          out.log.push_back({l, site, "mlp/w2,mlp/b2"});
          break;
      }
    }
  }
  return out;
}

namespace {

template <class T>
ImageBatch<T> random_images(const ViTConfig& cfg, int batch, Rng& rng) {
  ImageBatch<T> images(batch, cfg.channels, cfg.image_size, cfg.image_size);
  for (auto& v : images.data) v = static_cast<T>(rng.next_uniform());
  return images;
}

}  // namespace

template <class T>
MergeReport verify_equivalence(const ViTModel<T>& model_a, const AloreBank<T>* bank_a,
                               const ViTModel<T>& model_b, const AloreBank<T>* bank_b,
                               int num_inputs, uint64_t seed, double tol, int batch_size) {
  if (!(model_a.cfg == model_b.cfg)) {
    throw ConfigError("verify_equivalence: model configs differ");
  }
  MergeReport report;
  report.tol = tol;
  report.merged_param_count = model_b.parameter_count();
  Rng rng(seed);
  for (int i = 0; i < num_inputs; ++i) {
    ImageBatch<T> images = random_images<T>(model_a.cfg, batch_size, rng);
    Mat<T> la = vit_forward(model_a, images, bank_a, nullptr, /*train=*/false, 0);
    Mat<T> lb = vit_forward(model_b, images, bank_b, nullptr, /*train=*/false, 0);
    for (size_t k = 0; k < la.size(); ++k) {
      const double diff = std::abs(static_cast<double>(la.data[k]) -
                                   static_cast<double>(lb.data[k]));
      if (diff > report.max_abs_logit_diff) report.max_abs_logit_diff = diff;
    }
    ++report.inputs_tested;
  }
  report.pass = report.max_abs_logit_diff <= tol;
  return report;
}

template <class T>
ThroughputReport bench_throughput(const ViTModel<T>& model, const AloreBank<T>* bank,
                                  int batch_size, int warmup_iters, int timed_iters,
                                  int threads) {
  if (timed_iters < 1) throw ConfigError("bench: timed_iters must be >= 1");
  if (threads < 1) threads = 1;
  using Clock = std::chrono::steady_clock;

  Rng rng(0xBE7C);
  ImageBatch<T> images = random_images<T>(model.cfg, batch_size, rng);

  auto run_stream = [&](int iters) {
    volatile T sink = T(0);
    for (int i = 0; i < iters; ++i) {
      Mat<T> logits = vit_forward(model, images, bank, nullptr, /*train=*/false, 0);
      sink = sink + logits(0, 0);
    }
    (void)sink;
  };

  ThroughputReport report;
  report.threads = threads;

  run_stream(warmup_iters);
  auto t0 = Clock::now();
  run_stream(timed_iters);
  auto t1 = Clock::now();
  const double secs = std::chrono::duration<double>(t1 - t0).count();
  report.images_timed = timed_iters * batch_size;
  report.single_stream_ips = report.images_timed / secs;

  if (threads == 1) {
    report.all_stream_ips = report.single_stream_ips;
    return report;
  }

  std::vector<std::thread> pool;
  pool.reserve(threads);
  auto t2 = Clock::now();
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&]() { run_stream(timed_iters); });
  }
  for (auto& th : pool) th.join();
  auto t3 = Clock::now();
  const double all_secs = std::chrono::duration<double>(t3 - t2).count();
  report.all_stream_ips = static_cast<double>(timed_iters) * batch_size * threads / all_secs;
  return report;
}

#define ALORE_INSTANTIATE(T)                                                             \
  template struct MergeResult<T>;                                                        \
  template MergeResult<T> merge<T>(const ViTModel<T>&, const AloreBank<T>*);             \
  template MergeReport verify_equivalence<T>(const ViTModel<T>&, const AloreBank<T>*,    \
                                             const ViTModel<T>&, const AloreBank<T>*,    \
                                             int, uint64_t, double, int);                \
  template ThroughputReport bench_throughput<T>(const ViTModel<T>&, const AloreBank<T>*, \
                                                int, int, int, int);

ALORE_INSTANTIATE(float)
ALORE_INSTANTIATE(double)
#undef ALORE_INSTANTIATE

}  // namespace alore
