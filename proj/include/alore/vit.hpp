#pragma once

#include <string>
#include <vector>

#include "alore/experts.hpp"
#include "alore/matrix.hpp"

namespace alore {

struct ViTConfig {
  int image_size = 32;
  int patch_size = 4;
  int channels = 3;
  int d = 64;
  int num_layers = 6;
  int n_h = 4;
  int mlp_ratio = 4;
  int classes = 10;

  void validate() const;
  int patches_per_side() const { return image_size / patch_size; }
  int tokens() const { return patches_per_side() * patches_per_side() + 1; }
  int patch_dim() const { return channels * patch_size * patch_size; }
  bool operator==(const ViTConfig&) const = default;
};

template <class T>
struct ViTLayer {
  std::vector<T> ln1_gamma, ln1_beta;
  Mat<T> wq, wk, wv, wo;  // d x d each
  std::vector<T> bq, bk, bv, bo;
  std::vector<T> ln2_gamma, ln2_beta;
  Mat<T> w1;  // d x (mlp_ratio*d)
  std::vector<T> b1;
  Mat<T> w2;  // (mlp_ratio*d) x d
  std::vector<T> b2;
};

template <class T>
struct ViTModel {
  ViTConfig cfg;
  Mat<T> patch_weight;  // patch_dim x d
  std::vector<T> patch_bias;
  Mat<T> pos_embed;  // tokens x d
  Mat<T> cls_token;  // 1 x d
  std::vector<ViTLayer<T>> layers;
  std::vector<T> lnf_gamma, lnf_beta;
  Mat<T> head_weight;  // d x classes
  std::vector<T> head_bias;

  long long parameter_count() const;
};

/// Batch of images, channel-major per image (c, h, w), values in [0, 1].
template <class T>
struct ImageBatch {
  int count = 0, channels = 0, height = 0, width = 0;
  std::vector<T> data;

  ImageBatch() = default;
  ImageBatch(int n, int c, int h, int w)
      : count(n), channels(c), height(h), width(w),
        data(static_cast<size_t>(n) * c * h * w, T(0)) {}
  size_t image_size() const { return static_cast<size_t>(channels) * height * width; }
  const T* image(int i) const { return data.data() + image_size() * i; }
  T* image(int i) { return data.data() + image_size() * i; }
};

/// Training init: Xavier projections, zero biases, unit LN, small pos/cls.
template <class T>
ViTModel<T> init_vit(const ViTConfig& cfg, Rng& rng);

/// Test fixture with every tensor (biases included) drawn at random.
template <class T>
ViTModel<T> random_vit(const ViTConfig& cfg, Rng& rng, T scale);

constexpr double kLayerNormEps = 1e-6;

/// Per-image patch extraction + projection + CLS + positional embedding.
template <class T>
Mat<T> patch_embed(const ViTModel<T>& model, const ImageBatch<T>& images, int image_index);

template <class T>
Mat<T> mhsa(const Mat<T>& x, const ViTLayer<T>& layer, int n_h);

/// One pre-norm encoder block with optional adapters at the configured sites.
/// `bank` may be null (plain backbone). Layers at or beyond
/// bank->cfg.layers_adapted run unmodified.
template <class T>
Mat<T> encoder_block(const Mat<T>& x, const ViTLayer<T>& layer, int n_h,
                     const AloreBank<T>* bank, int layer_index, const ExpertMask* mask,
                     bool train_mode, Rng& rng);

/// Full forward: logits (batch x classes) from the final-LN class token.
template <class T>
Mat<T> vit_forward(const ViTModel<T>& model, const ImageBatch<T>& images,
                   const AloreBank<T>* bank, const ExpertMask* mask, bool train_mode,
                   uint64_t dropout_seed);

enum class Regime { Full, LinearProbe, Alore };

std::optional<Regime> regime_from_name(const std::string& name);
const char* regime_name(Regime r);

/// Mutable view of one named parameter tensor.
struct ParamRef {
  std::string name;
  std::span<double> value;
};

/// Trainable tensors under a regime: Full = everything (bank included when
/// attached); LinearProbe = head only; Alore = bank + head. LN stays frozen
/// outside Full.
std::vector<ParamRef> trainable_parameters(ViTModel<double>& model, AloreBank<double>* bank,
                                           Regime regime);

/// Every tensor of the model (plus bank if given), for checkpointing and
/// freeze verification.
std::vector<ParamRef> all_parameters(ViTModel<double>& model, AloreBank<double>* bank);

/// Deterministic stream id for the dropout rng of (image, layer, site).
uint64_t dropout_stream(uint64_t seed, int image_index, int layer_index, int site_index);

}  // namespace alore
