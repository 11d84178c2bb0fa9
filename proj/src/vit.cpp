#include "alore/vit.hpp"

#include <cmath>

namespace alore {

void ViTConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || channels <= 0 || d <= 0 || num_layers <= 0 ||
      n_h <= 0 || mlp_ratio <= 0 || classes <= 0) {
    throw ConfigError("vit: all config fields must be positive");
  }
  if (image_size % patch_size != 0) {
    throw ConfigError("vit: image_size=" + std::to_string(image_size) +
                      " not divisible by patch_size=" + std::to_string(patch_size));
  }
  if (d % n_h != 0) {
    throw ConfigError("vit: d=" + std::to_string(d) + " not divisible by n_h=" +
                      std::to_string(n_h));
  }
}

template <class T>
long long ViTModel<T>::parameter_count() const {
  long long total = static_cast<long long>(patch_weight.size() + patch_bias.size() +
                                           pos_embed.size() + cls_token.size());
  for (const auto& l : layers) {
    total += static_cast<long long>(l.ln1_gamma.size() + l.ln1_beta.size());
    total += static_cast<long long>(l.wq.size() + l.wk.size() + l.wv.size() + l.wo.size());
    total += static_cast<long long>(l.bq.size() + l.bk.size() + l.bv.size() + l.bo.size());
    total += static_cast<long long>(l.ln2_gamma.size() + l.ln2_beta.size());
    total += static_cast<long long>(l.w1.size() + l.b1.size() + l.w2.size() + l.b2.size());
  }
  total += static_cast<long long>(lnf_gamma.size() + lnf_beta.size());
  total += static_cast<long long>(head_weight.size() + head_bias.size());
  return total;
}

namespace {

template <class T>
std::vector<T> zeros_vec(int n) {
  return std::vector<T>(static_cast<size_t>(n), T(0));
}

template <class T>
std::vector<T> const_vec(int n, T v) {
  return std::vector<T>(static_cast<size_t>(n), v);
}

template <class T>
std::vector<T> randn_vec(int n, T std_dev, Rng& rng) {
  std::vector<T> v(static_cast<size_t>(n));
  for (auto& x : v) x = static_cast<T>(rng.next_normal()) * std_dev;
  return v;
}

template <class T>
T xavier_std(int fan_in, int fan_out) {
  return static_cast<T>(std::sqrt(2.0 / (fan_in + fan_out)));
}

}  // namespace

template <class T>
ViTModel<T> init_vit(const ViTConfig& cfg, Rng& rng) {
  cfg.validate();
  ViTModel<T> m;
  m.cfg = cfg;
  const int d = cfg.d;
  const int pd = cfg.patch_dim();
  const int hidden = cfg.mlp_ratio * d;
  m.patch_weight = randn<T>(pd, d, xavier_std<T>(pd, d), rng);
  m.patch_bias = zeros_vec<T>(d);
  m.pos_embed = randn<T>(cfg.tokens(), d, T(0.02), rng);
  m.cls_token = randn<T>(1, d, T(0.02), rng);
  m.layers.resize(cfg.num_layers);
  for (auto& l : m.layers) {
    l.ln1_gamma = const_vec<T>(d, T(1));
    l.ln1_beta = zeros_vec<T>(d);
    l.wq = randn<T>(d, d, xavier_std<T>(d, d), rng);
    l.wk = randn<T>(d, d, xavier_std<T>(d, d), rng);
    l.wv = randn<T>(d, d, xavier_std<T>(d, d), rng);
    l.wo = randn<T>(d, d, xavier_std<T>(d, d), rng);
    l.bq = zeros_vec<T>(d);
    l.bk = zeros_vec<T>(d);
    l.bv = zeros_vec<T>(d);
    l.bo = zeros_vec<T>(d);
    l.ln2_gamma = const_vec<T>(d, T(1));
    l.ln2_beta = zeros_vec<T>(d);
    l.w1 = randn<T>(d, hidden, xavier_std<T>(d, hidden), rng);
    l.b1 = zeros_vec<T>(hidden);
    l.w2 = randn<T>(hidden, d, xavier_std<T>(hidden, d), rng);
    l.b2 = zeros_vec<T>(d);
  }
  m.lnf_gamma = const_vec<T>(d, T(1));
  m.lnf_beta = zeros_vec<T>(d);
  m.head_weight = randn<T>(d, cfg.classes, T(0.01), rng);
  m.head_bias = zeros_vec<T>(cfg.classes);
  return m;
}

template <class T>
ViTModel<T> random_vit(const ViTConfig& cfg, Rng& rng, T scale) {
  ViTModel<T> m = init_vit<T>(cfg, rng);
  const T half = scale / T(2);
  auto fill_mat = [&](Mat<T>& w, T s) {
    for (auto& v : w.data) v = static_cast<T>(rng.next_normal()) * s;
  };
  auto fill_vec = [&](std::vector<T>& w, T s, T base = T(0)) {
    for (auto& v : w) v = base + static_cast<T>(rng.next_normal()) * s;
  };
  fill_mat(m.patch_weight, scale);
  fill_vec(m.patch_bias, scale);
  fill_mat(m.pos_embed, scale);
  fill_mat(m.cls_token, scale);
  for (auto& l : m.layers) {
    fill_vec(l.ln1_gamma, half, T(1));
    fill_vec(l.ln1_beta, half);
    fill_mat(l.wq, scale);
    fill_mat(l.wk, scale);
    fill_mat(l.wv, scale);
    fill_mat(l.wo, scale);
    fill_vec(l.bq, scale);
    fill_vec(l.bk, scale);
    fill_vec(l.bv, scale);
    fill_vec(l.bo, scale);
    fill_vec(l.ln2_gamma, half, T(1));
    fill_vec(l.ln2_beta, half);
    fill_mat(l.w1, scale);
    fill_vec(l.b1, scale);
    fill_mat(l.w2, scale);
    fill_vec(l.b2, scale);
  }
  fill_vec(m.lnf_gamma, half, T(1));
  fill_vec(m.lnf_beta, half);
  fill_mat(m.head_weight, scale);
  fill_vec(m.head_bias, scale);
  return m;
}

template <class T>
Mat<T> patch_embed(const ViTModel<T>& model, const ImageBatch<T>& images, int image_index) {
  const ViTConfig& cfg = model.cfg;
  if (images.channels != cfg.channels || images.height != cfg.image_size ||
      images.width != cfg.image_size) {
    throw ShapeError("patch_embed: image " + std::to_string(images.channels) + "x" +
                     std::to_string(images.height) + "x" + std::to_string(images.width) +
                     " vs config " + std::to_string(cfg.channels) + "x" +
                     std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
  }
  const int nps = cfg.patches_per_side();
  const int ps = cfg.patch_size;
  const int pd = cfg.patch_dim();
  const T* img = images.image(image_index);

  Mat<T> patches(nps * nps, pd);
  for (int py = 0; py < nps; ++py) {
    for (int px = 0; px < nps; ++px) {
      T* dst = patches.row(py * nps + px);
      int k = 0;
      for (int c = 0; c < cfg.channels; ++c) {
        const T* plane = img + static_cast<size_t>(c) * cfg.image_size * cfg.image_size;
        for (int y = 0; y < ps; ++y) {
          const T* line = plane + static_cast<size_t>(py * ps + y) * cfg.image_size + px * ps;
          for (int x = 0; x < ps; ++x) dst[k++] = line[x];
        }
      }
    }
  }

  Mat<T> projected = matmul(patches, model.patch_weight);
  Mat<T> tokens(cfg.tokens(), cfg.d);
  for (int j = 0; j < cfg.d; ++j) {
    tokens(0, j) = model.cls_token(0, j) + model.pos_embed(0, j);
  }
  for (int i = 0; i < projected.rows; ++i) {
    const T* src = projected.row(i);
    const T* pos = model.pos_embed.row(i + 1);
    T* dst = tokens.row(i + 1);
    for (int j = 0; j < cfg.d; ++j) dst[j] = src[j] + model.patch_bias[j] + pos[j];
  }
  return tokens;
}

namespace {

template <class T>
Mat<T> linear_bias(const Mat<T>& x, const Mat<T>& w, const std::vector<T>& b) {
  Mat<T> out = matmul(x, w);
  for (int i = 0; i < out.rows; ++i) {
    T* oi = out.row(i);
    for (int j = 0; j < out.cols; ++j) oi[j] += b[j];
  }
  return out;
}

template <class T>
Mat<T> slice_cols(const Mat<T>& x, int start, int width) {
  Mat<T> out(x.rows, width);
  for (int i = 0; i < x.rows; ++i) {
    const T* src = x.row(i) + start;
    std::copy(src, src + width, out.row(i));
  }
  return out;
}

template <class T>
void paste_cols(Mat<T>& dst, const Mat<T>& src, int start) {
  for (int i = 0; i < src.rows; ++i) {
    std::copy(src.row(i), src.row(i) + src.cols, dst.row(i) + start);
  }
}

}  // namespace

template <class T>
Mat<T> mhsa(const Mat<T>& x, const ViTLayer<T>& layer, int n_h) {
  if (x.cols != layer.wq.rows) {
    throw ShapeError("mhsa: input width " + std::to_string(x.cols) + " vs d=" +
                     std::to_string(layer.wq.rows));
  }
  const int d = x.cols;
  const int dk = d / n_h;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));

  Mat<T> q = linear_bias(x, layer.wq, layer.bq);
  Mat<T> k = linear_bias(x, layer.wk, layer.bk);
  Mat<T> v = linear_bias(x, layer.wv, layer.bv);

  Mat<T> concat(x.rows, d);
  for (int h = 0; h < n_h; ++h) {
    Mat<T> qh = slice_cols(q, h * dk, dk);
    Mat<T> kh = slice_cols(k, h * dk, dk);
    Mat<T> vh = slice_cols(v, h * dk, dk);
    Mat<T> scores = matmul_nt(qh, kh);
    for (auto& s : scores.data) s *= scale;
    Mat<T> attn = softmax_rows(scores);
    paste_cols(concat, matmul(attn, vh), h * dk);
  }
  return linear_bias(concat, layer.wo, layer.bo);
}

namespace {

template <class T>
bool site_active(const AloreBank<T>* bank, int layer_index, Site site) {
  return bank != nullptr && layer_index < bank->cfg.layers_adapted &&
         bank->cfg.site_index(site).has_value();
}

}  // namespace

template <class T>
Mat<T> encoder_block(const Mat<T>& x, const ViTLayer<T>& layer, int n_h,
                     const AloreBank<T>* bank, int layer_index, const ExpertMask* mask,
                     bool train_mode, Rng& rng) {
  const T eps = static_cast<T>(kLayerNormEps);
  ExpertMask local;
  if (bank != nullptr) local = mask != nullptr ? *mask : full_mask(bank->cfg.n);

  Mat<T> z = layer_norm(x, std::span<const T>(layer.ln1_gamma),
                        std::span<const T>(layer.ln1_beta), eps);
  if (site_active(bank, layer_index, Site::PreMHSA)) {
    z = alore_forward(z, *bank, layer_index, Site::PreMHSA, local, train_mode, rng);
  }
  Mat<T> attn_out = mhsa(z, layer, n_h);
  if (site_active(bank, layer_index, Site::PostMHSA)) {
    attn_out = alore_forward(attn_out, *bank, layer_index, Site::PostMHSA, local, train_mode,
                             rng);
  }
  add_inplace(attn_out, x);  // x'

  Mat<T> z2 = layer_norm(attn_out, std::span<const T>(layer.ln2_gamma),
                         std::span<const T>(layer.ln2_beta), eps);
  if (site_active(bank, layer_index, Site::PreFFN)) {
    z2 = alore_forward(z2, *bank, layer_index, Site::PreFFN, local, train_mode, rng);
  }
  Mat<T> hidden = linear_bias(z2, layer.w1, layer.b1);
  for (auto& h : hidden.data) h = gelu_scalar(h);
  Mat<T> ffn_out = linear_bias(hidden, layer.w2, layer.b2);
  if (site_active(bank, layer_index, Site::PostFFN)) {
    ffn_out = alore_forward(ffn_out, *bank, layer_index, Site::PostFFN, local, train_mode,
                            rng);
  }
  add_inplace(ffn_out, attn_out);
  return ffn_out;
}

uint64_t dropout_stream(uint64_t seed, int image_index, int layer_index, int site_index) {
  uint64_t z = seed;
  z = z * 0x100000001B3ULL + static_cast<uint64_t>(image_index) + 1;
  z = z * 0x100000001B3ULL + static_cast<uint64_t>(layer_index) + 1;
  z = z * 0x100000001B3ULL + static_cast<uint64_t>(site_index) + 1;
  return z;
}

template <class T>
Mat<T> vit_forward(const ViTModel<T>& model, const ImageBatch<T>& images,
                   const AloreBank<T>* bank, const ExpertMask* mask, bool train_mode,
                   uint64_t dropout_seed) {
  const ViTConfig& cfg = model.cfg;
  Mat<T> logits(images.count, cfg.classes);
  const T eps = static_cast<T>(kLayerNormEps);
  for (int i = 0; i < images.count; ++i) {
    Mat<T> tokens = patch_embed(model, images, i);
    for (int l = 0; l < cfg.num_layers; ++l) {
      Rng layer_rng(dropout_stream(dropout_seed, i, l, 0));
      tokens = encoder_block(tokens, model.layers[l], cfg.n_h, bank, l, mask, train_mode,
                             layer_rng);
    }
    Mat<T> cls(1, cfg.d);
    std::copy(tokens.row(0), tokens.row(0) + cfg.d, cls.row(0));
    Mat<T> final_ln = layer_norm(cls, std::span<const T>(model.lnf_gamma),
                                 std::span<const T>(model.lnf_beta), eps);
    Mat<T> out = linear_bias(final_ln, model.head_weight, model.head_bias);
    std::copy(out.row(0), out.row(0) + cfg.classes, logits.row(i));
  }
  return logits;
}

std::optional<Regime> regime_from_name(const std::string& name) {
  if (name == "full") return Regime::Full;
  if (name == "linear_probe") return Regime::LinearProbe;
  if (name == "alore") return Regime::Alore;
  return std::nullopt;
}

const char* regime_name(Regime r) {
  switch (r) {
    case Regime::Full: return "full";
    case Regime::LinearProbe: return "linear_probe";
    case Regime::Alore: return "alore";
  }
  return "?";
}

namespace {

void push_mat(std::vector<ParamRef>& out, const std::string& name, Matrix& m) {
  out.push_back({name, std::span<double>(m.data)});
}

void push_vec(std::vector<ParamRef>& out, const std::string& name, std::vector<double>& v) {
  out.push_back({name, std::span<double>(v)});
}

void append_bank_params(std::vector<ParamRef>& out, AloreBank<double>& bank) {
  for (size_t i = 0; i < bank.scale.size(); ++i) {
    push_mat(out, "alore/scale/" + std::to_string(i), bank.scale[i]);
  }
  for (size_t l = 0; l < bank.experts.size(); ++l) {
    for (size_t s = 0; s < bank.experts[l].size(); ++s) {
      const std::string base = "alore/layers/" + std::to_string(l) + "/" +
                               site_name(bank.cfg.sites[s]) + "/";
      for (size_t e = 0; e < bank.experts[l][s].size(); ++e) {
        push_mat(out, base + "expert/" + std::to_string(e) + "/down",
                 bank.experts[l][s][e].down);
        push_mat(out, base + "expert/" + std::to_string(e) + "/up", bank.experts[l][s][e].up);
      }
    }
  }
}

void append_backbone_params(std::vector<ParamRef>& out, ViTModel<double>& m) {
  push_mat(out, "model/patch_embed/weight", m.patch_weight);
  push_vec(out, "model/patch_embed/bias", m.patch_bias);
  push_mat(out, "model/pos_embed", m.pos_embed);
  push_mat(out, "model/cls_token", m.cls_token);
  for (size_t i = 0; i < m.layers.size(); ++i) {
    auto& l = m.layers[i];
    const std::string base = "model/layers/" + std::to_string(i) + "/";
    push_vec(out, base + "ln1/gamma", l.ln1_gamma);
    push_vec(out, base + "ln1/beta", l.ln1_beta);
    push_mat(out, base + "attn/wq", l.wq);
    push_mat(out, base + "attn/wk", l.wk);
    push_mat(out, base + "attn/wv", l.wv);
    push_mat(out, base + "attn/wo", l.wo);
    push_vec(out, base + "attn/bq", l.bq);
    push_vec(out, base + "attn/bk", l.bk);
    push_vec(out, base + "attn/bv", l.bv);
    push_vec(out, base + "attn/bo", l.bo);
    push_vec(out, base + "ln2/gamma", l.ln2_gamma);
    push_vec(out, base + "ln2/beta", l.ln2_beta);
    push_mat(out, base + "mlp/w1", l.w1);
    push_vec(out, base + "mlp/b1", l.b1);
    push_mat(out, base + "mlp/w2", l.w2);
    push_vec(out, base + "mlp/b2", l.b2);
  }
  push_vec(out, "model/ln_f/gamma", m.lnf_gamma);
  push_vec(out, "model/ln_f/beta", m.lnf_beta);
}

void append_head_params(std::vector<ParamRef>& out, ViTModel<double>& m) {
  push_mat(out, "model/head/weight", m.head_weight);
  push_vec(out, "model/head/bias", m.head_bias);
}

}  // namespace

std::vector<ParamRef> trainable_parameters(ViTModel<double>& model, AloreBank<double>* bank,
                                           Regime regime) {
  std::vector<ParamRef> out;
  switch (regime) {
    case Regime::Full:
      append_backbone_params(out, model);
      if (bank != nullptr) append_bank_params(out, *bank);
      append_head_params(out, model);
      break;
    case Regime::LinearProbe:
      append_head_params(out, model);
      break;
    case Regime::Alore:
      if (bank != nullptr) append_bank_params(out, *bank);
      append_head_params(out, model);
      break;
  }
  return out;
}

std::vector<ParamRef> all_parameters(ViTModel<double>& model, AloreBank<double>* bank) {
  std::vector<ParamRef> out;
  append_backbone_params(out, model);
  append_head_params(out, model);
  if (bank != nullptr) append_bank_params(out, *bank);
  return out;
}

#define ALORE_INSTANTIATE(T)                                                                 \
  template struct ViTModel<T>;                                                               \
  template ViTModel<T> init_vit<T>(const ViTConfig&, Rng&);                                  \
  template ViTModel<T> random_vit<T>(const ViTConfig&, Rng&, T);                             \
  template Mat<T> patch_embed<T>(const ViTModel<T>&, const ImageBatch<T>&, int);             \
  template Mat<T> mhsa<T>(const Mat<T>&, const ViTLayer<T>&, int);                           \
  template Mat<T> encoder_block<T>(const Mat<T>&, const ViTLayer<T>&, int,                   \
                                   const AloreBank<T>*, int, const ExpertMask*, bool, Rng&); \
  template Mat<T> vit_forward<T>(const ViTModel<T>&, const ImageBatch<T>&,                   \
                                 const AloreBank<T>*, const ExpertMask*, bool, uint64_t);

ALORE_INSTANTIATE(float)
ALORE_INSTANTIATE(double)
#undef ALORE_INSTANTIATE

}  // namespace alore
