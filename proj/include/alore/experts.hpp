#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "alore/matrix.hpp"

namespace alore {

/// Insertion site of an adapter relative to the encoder sublayers.
enum class Site : int { PreMHSA = 0, PostMHSA = 1, PreFFN = 2, PostFFN = 3 };

const char* site_name(Site s);
std::optional<Site> site_from_name(const std::string& name);

struct AloreConfig {
  int d = 64;
  int n = 4;  // number of experts
  int r = 4;  // bottleneck rank per expert
  std::vector<Site> sites{Site::PreMHSA, Site::PreFFN};
  int layers_adapted = 0;  // leading encoder layers that carry adapters
  double dropout_p = 0.1;

  void validate(int num_layers) const;
  /// Index of `site` within `sites`, or nullopt if not configured.
  std::optional<int> site_index(Site site) const;
};

template <class T>
struct ExpertPair {
  Mat<T> down;  // (d/n) x r
  Mat<T> up;    // r x (d/n)
};

/// Trainable ALoRE state: one global set of n scale matrices (n x n each,
/// shared across every adapted layer and site) plus per-layer, per-site
/// expert projection pairs.
template <class T>
struct AloreBank {
  AloreConfig cfg;
  std::vector<Mat<T>> scale;                                  // n matrices, n x n
  std::vector<std::vector<std::vector<ExpertPair<T>>>> experts;  // [layer][site][expert]

  long long parameter_count() const;
};

struct ExpertMask {
  std::vector<uint8_t> active;  // length n, 0/1

  int size() const { return static_cast<int>(active.size()); }
  bool all_active() const;
};

enum class MaskMode { Increment, Single, Sliced };

std::optional<MaskMode> mask_mode_from_name(const std::string& name);

/// Increment-i: experts 1..i on; Single-i: only expert i; Sliced-i: all but
/// expert i. `i` is 1-based, 1 <= i <= n.
ExpertMask make_expert_mask(MaskMode mode, int i, int n);

ExpertMask full_mask(int n);

template <class T>
AloreBank<T> init_alore(const AloreConfig& cfg, int num_layers, Rng& rng);

/// Materializes sum_i W_i^s kron (W_i^d W_i^u) as a dense d x d matrix.
/// Merge/oracle path only; the forward never builds this.
template <class T>
Mat<T> compose_delta(const AloreBank<T>& bank, int layer, Site site);

template <class T>
Mat<T> compose_delta_masked(const AloreBank<T>& bank, int layer, Site site,
                            const ExpertMask& mask);

/// Eq-7 forward: x + Drop(x * sum_active W_i^s kron (W_i^d W_i^u)), computed
/// blockwise so no d x d matrix is ever formed. Inverted dropout applies in
/// train mode only.
template <class T>
Mat<T> alore_forward(const Mat<T>& x, const AloreBank<T>& bank, int layer, Site site,
                     const ExpertMask& mask, bool train_mode, Rng& rng);

/// Branch-only part of the forward (no residual, no dropout), used by the
/// backward pass and by tests.
template <class T>
Mat<T> alore_branch(const Mat<T>& x, const AloreBank<T>& bank, int layer, Site site,
                    const ExpertMask& mask);

enum class Activation { Relu, Gelu, None };

/// Eq-5 bottleneck adapter, the paper's non-linear baseline.
template <class T>
struct AdapterBaseline {
  Mat<T> w_down;            // d x r
  std::vector<T> b_down;    // r
  Mat<T> w_up;              // r x d
  std::vector<T> b_up;      // d
  Activation act = Activation::Relu;
};

template <class T>
Mat<T> adapter_forward(const Mat<T>& x, const AdapterBaseline<T>& a, bool train_mode,
                       double dropout_p, Rng& rng);

/// Stacked multi-branch baseline: x + sum_i branch_body_i(x), one shared
/// residual across branches.
template <class T>
Mat<T> stacked_forward(const Mat<T>& x, const std::vector<AdapterBaseline<T>>& branches,
                       bool train_mode, double dropout_p, Rng& rng);

/// Trainable-parameter count for an ALoRE bank: 2*d*r*sites*layers + n^3.
long long count_alore_params(int d, int r, int n, int site_count, int layers_adapted);

/// Parameter count of the stacked baseline (n replicated Eq-5 adapters with
/// biases): n*(2*d*r + r + d)*site_count*layers.
long long count_stacked_params(int d, int r, int n, int site_count, int layers_adapted);

/// Inverted-dropout mask applied in place; keeps entries with prob 1-p and
/// scales by 1/(1-p).
template <class T>
void apply_dropout(Mat<T>& x, double p, Rng& rng);

/// Overwrites every bank tensor (scale, down, up) with N(0, scale) draws.
/// Test/verification fixture; init_alore is the training initializer.
template <class T>
void randomize_bank(AloreBank<T>& bank, Rng& rng, T scale);

}  // namespace alore
