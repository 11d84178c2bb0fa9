#pragma once

#include <optional>

#include "alore/vit.hpp"

namespace alore {

/// Gradient accumulators shaped exactly like the model (and bank, when
/// attached), so trainable_parameters() applied to the mirror yields grad
/// spans in the same order as the parameter spans.
struct Gradients {
  ViTModel<double> model;
  std::optional<AloreBank<double>> bank;

  void zero();
};

Gradients make_gradients(const ViTModel<double>& model, const AloreBank<double>* bank);

/// Grad spans parallel to trainable_parameters(model, bank, regime).
std::vector<ParamRef> gradient_refs(Gradients& grads, Regime regime);

/// Mean cross-entropy with softmax gradient; dlogits may be null.
double cross_entropy(const Matrix& logits, std::span<const int> labels, Matrix* dlogits);

/// Forward (with caches) + hand-derived backward. Returns the mean loss over
/// the batch; accumulates into `grads` (call grads.zero() first for a fresh
/// batch). Dropout draws replay vit_forward's for the same dropout_seed.
/// Weight gradients outside the regime's trainable set are skipped; input
/// gradients always flow. top1_out (optional) receives batch accuracy.
double loss_and_gradients(const ViTModel<double>& model, const AloreBank<double>* bank,
                          const ImageBatch<double>& images, std::span<const int> labels,
                          const ExpertMask* mask, bool train_mode, uint64_t dropout_seed,
                          Regime regime, Gradients& grads, double* top1_out);

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_tensor;
  int worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Central finite differences over every trainable tensor element, against
/// the analytic gradients. The numeric side perturbs parameters and re-runs
/// the independent vit_forward path.
GradCheckResult gradient_check(ViTModel<double>& model, AloreBank<double>* bank,
                               const ImageBatch<double>& images, std::span<const int> labels,
                               Regime regime, bool train_mode, uint64_t dropout_seed,
                               double eps);

}  // namespace alore
