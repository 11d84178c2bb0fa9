#pragma once

#include <string>
#include <vector>

#include "alore/vit.hpp"

namespace alore {

struct MergeLogEntry {
  int layer = 0;
  Site site = Site::PreMHSA;
  std::string target;  // tensor(s) rewritten
};

struct MergeReport {
  double max_abs_logit_diff = 0.0;
  int inputs_tested = 0;
  long long merged_param_count = 0;
  std::vector<MergeLogEntry> site_merge_log;
  double tol = 0.0;
  bool pass = false;
};

template <class T>
struct MergeResult {
  ViTModel<T> model;  // plain backbone, identical tensor shapes
  std::vector<MergeLogEntry> log;
};

/// Folds the full-mask eval-mode adapters into the adjacent linear layers:
/// pre sites left-multiply the following projection (W <- W_A * W), post
/// sites right-multiply the preceding one and its bias (W <- W * W_A,
/// b <- b * W_A). Null/absent bank returns an identical copy.
template <class T>
MergeResult<T> merge(const ViTModel<T>& model, const AloreBank<T>* bank);

/// Evaluates both models on num_inputs random batches and reports the max
/// absolute logit difference; pass iff <= tol.
template <class T>
MergeReport verify_equivalence(const ViTModel<T>& model_a, const AloreBank<T>* bank_a,
                               const ViTModel<T>& model_b, const AloreBank<T>* bank_b,
                               int num_inputs, uint64_t seed, double tol, int batch_size = 2);

struct ThroughputReport {
  double single_stream_ips = 0.0;
  double all_stream_ips = 0.0;
  int threads = 1;
  int images_timed = 0;
};

/// Wall-clock images/sec after warmup, deterministic inputs. all_stream runs
/// `threads` concurrent evaluation streams over the shared read-only model.
template <class T>
ThroughputReport bench_throughput(const ViTModel<T>& model, const AloreBank<T>* bank,
                                  int batch_size, int warmup_iters, int timed_iters,
                                  int threads);

}  // namespace alore
