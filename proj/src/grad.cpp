#include "alore/grad.hpp"

#include <algorithm>
#include <cmath>

namespace alore {

void Gradients::zero() {
  auto refs = all_parameters(model, bank.has_value() ? &bank.value() : nullptr);
  for (auto& r : refs) std::fill(r.value.begin(), r.value.end(), 0.0);
}

Gradients make_gradients(const ViTModel<double>& model, const AloreBank<double>* bank) {
  Gradients g;
  g.model = model;
  if (bank != nullptr) g.bank = *bank;
  g.zero();
  return g;
}

std::vector<ParamRef> gradient_refs(Gradients& grads, Regime regime) {
  return trainable_parameters(grads.model, grads.bank.has_value() ? &grads.bank.value() : nullptr,
                              regime);
}

double cross_entropy(const Matrix& logits, std::span<const int> labels, Matrix* dlogits) {
  if (static_cast<int>(labels.size()) != logits.rows) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(logits.rows) + " logit rows");
  }
  const int b = logits.rows;
  const int k = logits.cols;
  if (dlogits != nullptr) *dlogits = Matrix(b, k);
  double total = 0.0;
  for (int i = 0; i < b; ++i) {
    if (labels[i] < 0 || labels[i] >= k) {
      throw IndexError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " +
                       std::to_string(k) + ")");
    }
    const double* z = logits.row(i);
    double mx = z[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, z[j]);
    double sum = 0.0;
    for (int j = 0; j < k; ++j) sum += std::exp(z[j] - mx);
    const double lse = mx + std::log(sum);
    total += lse - z[labels[i]];
    if (dlogits != nullptr) {
      double* g = dlogits->row(i);
      for (int j = 0; j < k; ++j) {
        g[j] = std::exp(z[j] - lse) / b;
      }
      g[labels[i]] -= 1.0 / b;
    }
  }
  return total / b;
}

namespace {

// ---- small helpers -------------------------------------------------------

Matrix linear_bias(const Matrix& x, const Matrix& w, const std::vector<double>& b) {
  Matrix out = matmul(x, w);
  for (int i = 0; i < out.rows; ++i) {
    double* oi = out.row(i);
    for (int j = 0; j < out.cols; ++j) oi[j] += b[j];
  }
  return out;
}

void accumulate_colsum(const Matrix& g, std::vector<double>& out) {
  for (int i = 0; i < g.rows; ++i) {
    const double* gi = g.row(i);
    for (int j = 0; j < g.cols; ++j) out[j] += gi[j];
  }
}

void acc_matmul_tn(Matrix& acc, const Matrix& a, const Matrix& b) {
  add_inplace(acc, matmul_tn(a, b));
}

Matrix slice_cols(const Matrix& x, int start, int width) {
  Matrix out(x.rows, width);
  for (int i = 0; i < x.rows; ++i) {
    const double* src = x.row(i) + start;
    std::copy(src, src + width, out.row(i));
  }
  return out;
}

void paste_cols(Matrix& dst, const Matrix& src, int start) {
  for (int i = 0; i < src.rows; ++i) {
    std::copy(src.row(i), src.row(i) + src.cols, dst.row(i) + start);
  }
}

// ---- layer norm ----------------------------------------------------------

Matrix layer_norm_cached(const Matrix& x, std::span<const double> gamma,
                         std::span<const double> beta, Matrix& xhat_out,
                         std::vector<double>& rstd_out) {
  const int c = x.cols;
  xhat_out = Matrix(x.rows, c);
  rstd_out.assign(x.rows, 0.0);
  Matrix out(x.rows, c);
  for (int i = 0; i < x.rows; ++i) {
    const double* xi = x.row(i);
    double mean = 0.0;
    for (int j = 0; j < c; ++j) mean += xi[j];
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      const double dxx = xi[j] - mean;
      var += dxx * dxx;
    }
    var /= c;
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd_out[i] = rstd;
    double* hi = xhat_out.row(i);
    double* oi = out.row(i);
    for (int j = 0; j < c; ++j) {
      hi[j] = (xi[j] - mean) * rstd;
      oi[j] = hi[j] * gamma[j] + beta[j];
    }
  }
  return out;
}

Matrix layer_norm_backward(const Matrix& xhat, const std::vector<double>& rstd,
                           std::span<const double> gamma, const Matrix& dy,
                           std::vector<double>* dgamma, std::vector<double>* dbeta) {
  const int c = xhat.cols;
  Matrix dx(xhat.rows, c);
  for (int i = 0; i < xhat.rows; ++i) {
    const double* hi = xhat.row(i);
    const double* gi = dy.row(i);
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (int j = 0; j < c; ++j) {
      const double dxh = gi[j] * gamma[j];
      mean_dxhat += dxh;
      mean_dxhat_xhat += dxh * hi[j];
    }
    mean_dxhat /= c;
    mean_dxhat_xhat /= c;
    double* di = dx.row(i);
    for (int j = 0; j < c; ++j) {
      const double dxh = gi[j] * gamma[j];
      di[j] = rstd[i] * (dxh - mean_dxhat - hi[j] * mean_dxhat_xhat);
    }
    if (dgamma != nullptr) {
      for (int j = 0; j < c; ++j) {
        (*dgamma)[j] += gi[j] * hi[j];
        (*dbeta)[j] += gi[j];
      }
    }
  }
  return dx;
}

// ---- ALoRE adapter -------------------------------------------------------

// Same uniform consumption order as apply_dropout; stores the multiplier.
Matrix sample_dropmask(int rows, int cols, double p, Rng& rng) {
  Matrix mask(rows, cols);
  const double scale = 1.0 / (1.0 - p);
  for (auto& v : mask.data) v = (rng.next_uniform() < p) ? 0.0 : scale;
  return mask;
}

Matrix alore_forward_cached(const Matrix& x, const AloreBank<double>& bank, int layer,
                            Site site, const ExpertMask& mask, bool train_mode, Rng& rng,
                            Matrix& dropmask_out) {
  Matrix branch = alore_branch(x, bank, layer, site, mask);
  if (train_mode && bank.cfg.dropout_p > 0.0) {
    dropmask_out = sample_dropmask(x.rows, x.cols, bank.cfg.dropout_p, rng);
    for (size_t i = 0; i < branch.size(); ++i) branch.data[i] *= dropmask_out.data[i];
  } else {
    dropmask_out = Matrix();
  }
  add_inplace(branch, x);
  return branch;
}

// y = x + drop(branch(x)). Accumulates bank gradients (when grads non-null)
// and returns dL/dx.
Matrix alore_backward(const Matrix& x, const AloreBank<double>& bank, int layer, Site site,
                      const ExpertMask& mask, const Matrix& dropmask, const Matrix& dy,
                      AloreBank<double>* bank_grads) {
  const AloreConfig& cfg = bank.cfg;
  const int n = cfg.n;
  const int w = cfg.d / n;
  const int t = x.rows;
  const int site_idx = *cfg.site_index(site);

  Matrix dbranch = dy;
  if (dropmask.rows > 0) {
    for (size_t i = 0; i < dbranch.size(); ++i) dbranch.data[i] *= dropmask.data[i];
  }

  Matrix dx = dy;
  Matrix mixed(t, w);
  Matrix gj(t, w);
  for (int e = 0; e < n; ++e) {
    if (!mask.active[e]) continue;
    const Mat<double>& s = bank.scale[e];
    const ExpertPair<double>& pair = bank.experts[layer][site_idx][e];
    for (int j = 0; j < n; ++j) {
      for (int row = 0; row < t; ++row) {
        const double* src = dbranch.row(row) + static_cast<size_t>(j) * w;
        std::copy(src, src + w, gj.row(row));
      }
      std::fill(mixed.data.begin(), mixed.data.end(), 0.0);
      for (int i = 0; i < n; ++i) {
        const double sij = s(i, j);
        if (sij == 0.0) continue;
        for (int row = 0; row < t; ++row) {
          const double* xb = x.row(row) + static_cast<size_t>(i) * w;
          double* mb = mixed.row(row);
          for (int cidx = 0; cidx < w; ++cidx) mb[cidx] += sij * xb[cidx];
        }
      }
      Matrix down = matmul(mixed, pair.down);      // t x r
      Matrix ddown = matmul_nt(gj, pair.up);       // t x r
      Matrix dmixed = matmul_nt(ddown, pair.down); // t x w
      if (bank_grads != nullptr) {
        ExpertPair<double>& gpair = bank_grads->experts[layer][site_idx][e];
        acc_matmul_tn(gpair.up, down, gj);
        acc_matmul_tn(gpair.down, mixed, ddown);
        Mat<double>& gscale = bank_grads->scale[e];
        for (int i = 0; i < n; ++i) {
          double dot = 0.0;
          for (int row = 0; row < t; ++row) {
            const double* xb = x.row(row) + static_cast<size_t>(i) * w;
            const double* mb = dmixed.row(row);
            for (int cidx = 0; cidx < w; ++cidx) dot += xb[cidx] * mb[cidx];
          }
          gscale(i, j) += dot;
        }
      }
      for (int i = 0; i < n; ++i) {
        const double sij = s(i, j);
        if (sij == 0.0) continue;
        for (int row = 0; row < t; ++row) {
          double* xb = dx.row(row) + static_cast<size_t>(i) * w;
          const double* mb = dmixed.row(row);
          for (int cidx = 0; cidx < w; ++cidx) xb[cidx] += sij * mb[cidx];
        }
      }
    }
  }
  return dx;
}

// ---- encoder block -------------------------------------------------------

struct BlockCache {
  Matrix x_in;
  Matrix xhat1;
  std::vector<double> rstd1;
  Matrix z;        // LN1 output, PreMHSA adapter input
  Matrix pm_drop;  // dropout multipliers (empty when unused)
  Matrix za;       // MHSA input
  Matrix q, k, v;
  std::vector<Matrix> attn;  // per-head probabilities
  Matrix concat;
  Matrix attn_pre;  // MHSA projection output, PostMHSA adapter input
  Matrix postm_drop;
  Matrix x_mid;
  Matrix xhat2;
  std::vector<double> rstd2;
  Matrix z2;  // LN2 output, PreFFN adapter input
  Matrix pf_drop;
  Matrix z2a;  // FFN input
  Matrix u;    // pre-GELU
  Matrix h;    // post-GELU
  Matrix f_pre;  // FFN projection output, PostFFN adapter input
  Matrix pff_drop;
};

bool site_active(const AloreBank<double>* bank, int layer_index, Site site) {
  return bank != nullptr && layer_index < bank->cfg.layers_adapted &&
         bank->cfg.site_index(site).has_value();
}

Matrix block_forward_cached(const Matrix& x, const ViTLayer<double>& layer, int n_h,
                            const AloreBank<double>* bank, int layer_index,
                            const ExpertMask& mask, bool train_mode, Rng& rng,
                            BlockCache& cache) {
  cache.x_in = x;
  cache.z = layer_norm_cached(x, layer.ln1_gamma, layer.ln1_beta, cache.xhat1, cache.rstd1);

  if (site_active(bank, layer_index, Site::PreMHSA)) {
    cache.za = alore_forward_cached(cache.z, *bank, layer_index, Site::PreMHSA, mask,
                                    train_mode, rng, cache.pm_drop);
  } else {
    cache.za = cache.z;
  }

  const int d = x.cols;
  const int dk = d / n_h;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  cache.q = linear_bias(cache.za, layer.wq, layer.bq);
  cache.k = linear_bias(cache.za, layer.wk, layer.bk);
  cache.v = linear_bias(cache.za, layer.wv, layer.bv);
  cache.attn.assign(n_h, Matrix());
  cache.concat = Matrix(x.rows, d);
  for (int h = 0; h < n_h; ++h) {
    Matrix qh = slice_cols(cache.q, h * dk, dk);
    Matrix kh = slice_cols(cache.k, h * dk, dk);
    Matrix vh = slice_cols(cache.v, h * dk, dk);
    Matrix scores = matmul_nt(qh, kh);
    for (auto& s : scores.data) s *= scale;
    cache.attn[h] = softmax_rows(scores);
    paste_cols(cache.concat, matmul(cache.attn[h], vh), h * dk);
  }
  cache.attn_pre = linear_bias(cache.concat, layer.wo, layer.bo);

  Matrix attn_out;
  if (site_active(bank, layer_index, Site::PostMHSA)) {
    attn_out = alore_forward_cached(cache.attn_pre, *bank, layer_index, Site::PostMHSA, mask,
                                    train_mode, rng, cache.postm_drop);
  } else {
    attn_out = cache.attn_pre;
  }
  add_inplace(attn_out, x);
  cache.x_mid = attn_out;

  cache.z2 = layer_norm_cached(cache.x_mid, layer.ln2_gamma, layer.ln2_beta, cache.xhat2,
                               cache.rstd2);
  if (site_active(bank, layer_index, Site::PreFFN)) {
    cache.z2a = alore_forward_cached(cache.z2, *bank, layer_index, Site::PreFFN, mask,
                                     train_mode, rng, cache.pf_drop);
  } else {
    cache.z2a = cache.z2;
  }
  cache.u = linear_bias(cache.z2a, layer.w1, layer.b1);
  cache.h = Matrix(cache.u.rows, cache.u.cols);
  for (size_t i = 0; i < cache.u.size(); ++i) cache.h.data[i] = gelu_scalar(cache.u.data[i]);
  cache.f_pre = linear_bias(cache.h, layer.w2, layer.b2);

  Matrix ffn_out;
  if (site_active(bank, layer_index, Site::PostFFN)) {
    ffn_out = alore_forward_cached(cache.f_pre, *bank, layer_index, Site::PostFFN, mask,
                                   train_mode, rng, cache.pff_drop);
  } else {
    ffn_out = cache.f_pre;
  }
  add_inplace(ffn_out, cache.x_mid);
  return ffn_out;
}

Matrix block_backward(const Matrix& dy, const ViTLayer<double>& layer, int n_h,
                      const AloreBank<double>* bank, int layer_index, const ExpertMask& mask,
                      const BlockCache& cache, ViTLayer<double>* lgrads,
                      AloreBank<double>* bank_grads) {
  // out = drop_site(ffn) + x_mid
  Matrix d_f = dy;
  if (site_active(bank, layer_index, Site::PostFFN)) {
    d_f = alore_backward(cache.f_pre, *bank, layer_index, Site::PostFFN, mask, cache.pff_drop,
                         dy, bank_grads);
  }
  // f_pre = h*W2 + b2
  Matrix dh = matmul_nt(d_f, layer.w2);
  if (lgrads != nullptr) {
    acc_matmul_tn(lgrads->w2, cache.h, d_f);
    accumulate_colsum(d_f, lgrads->b2);
  }
  Matrix du(dh.rows, dh.cols);
  for (size_t i = 0; i < dh.size(); ++i) {
    du.data[i] = dh.data[i] * gelu_grad_scalar(cache.u.data[i]);
  }
  Matrix d_z2a = matmul_nt(du, layer.w1);
  if (lgrads != nullptr) {
    acc_matmul_tn(lgrads->w1, cache.z2a, du);
    accumulate_colsum(du, lgrads->b1);
  }
  Matrix d_z2 = d_z2a;
  if (site_active(bank, layer_index, Site::PreFFN)) {
    d_z2 = alore_backward(cache.z2, *bank, layer_index, Site::PreFFN, mask, cache.pf_drop,
                          d_z2a, bank_grads);
  }
  Matrix d_x_mid = layer_norm_backward(cache.xhat2, cache.rstd2, layer.ln2_gamma, d_z2,
                                       lgrads != nullptr ? &lgrads->ln2_gamma : nullptr,
                                       lgrads != nullptr ? &lgrads->ln2_beta : nullptr);
  add_inplace(d_x_mid, dy);  // residual from the block output

  // x_mid = drop_site(attn) + x_in
  Matrix d_attn = d_x_mid;
  if (site_active(bank, layer_index, Site::PostMHSA)) {
    d_attn = alore_backward(cache.attn_pre, *bank, layer_index, Site::PostMHSA, mask,
                            cache.postm_drop, d_x_mid, bank_grads);
  }
  // attn_pre = concat*Wo + bo
  Matrix dconcat = matmul_nt(d_attn, layer.wo);
  if (lgrads != nullptr) {
    acc_matmul_tn(lgrads->wo, cache.concat, d_attn);
    accumulate_colsum(d_attn, lgrads->bo);
  }

  const int d = cache.x_in.cols;
  const int dk = d / n_h;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  Matrix dq(cache.q.rows, d), dk_(cache.q.rows, d), dv(cache.q.rows, d);
  for (int h = 0; h < n_h; ++h) {
    Matrix doh = slice_cols(dconcat, h * dk, dk);
    Matrix qh = slice_cols(cache.q, h * dk, dk);
    Matrix kh = slice_cols(cache.k, h * dk, dk);
    Matrix vh = slice_cols(cache.v, h * dk, dk);
    const Matrix& p = cache.attn[h];
    Matrix dp = matmul_nt(doh, vh);
    paste_cols(dv, matmul_tn(p, doh), h * dk);
    // softmax backward: ds = p .* (dp - rowsum(dp .* p))
    Matrix ds(p.rows, p.cols);
    for (int i = 0; i < p.rows; ++i) {
      const double* pi = p.row(i);
      const double* dpi = dp.row(i);
      double rowdot = 0.0;
      for (int j = 0; j < p.cols; ++j) rowdot += dpi[j] * pi[j];
      double* dsi = ds.row(i);
      for (int j = 0; j < p.cols; ++j) dsi[j] = pi[j] * (dpi[j] - rowdot) * scale;
    }
    paste_cols(dq, matmul(ds, kh), h * dk);
    paste_cols(dk_, matmul_tn(ds, qh), h * dk);
  }

  Matrix d_za = matmul_nt(dq, layer.wq);
  add_inplace(d_za, matmul_nt(dk_, layer.wk));
  add_inplace(d_za, matmul_nt(dv, layer.wv));
  if (lgrads != nullptr) {
    acc_matmul_tn(lgrads->wq, cache.za, dq);
    acc_matmul_tn(lgrads->wk, cache.za, dk_);
    acc_matmul_tn(lgrads->wv, cache.za, dv);
    accumulate_colsum(dq, lgrads->bq);
    accumulate_colsum(dk_, lgrads->bk);
    accumulate_colsum(dv, lgrads->bv);
  }

  Matrix d_z = d_za;
  if (site_active(bank, layer_index, Site::PreMHSA)) {
    d_z = alore_backward(cache.z, *bank, layer_index, Site::PreMHSA, mask, cache.pm_drop,
                         d_za, bank_grads);
  }
  Matrix d_x_in = layer_norm_backward(cache.xhat1, cache.rstd1, layer.ln1_gamma, d_z,
                                      lgrads != nullptr ? &lgrads->ln1_gamma : nullptr,
                                      lgrads != nullptr ? &lgrads->ln1_beta : nullptr);
  add_inplace(d_x_in, d_x_mid);  // residual into the MHSA sublayer
  return d_x_in;
}

Matrix extract_patches(const ViTConfig& cfg, const ImageBatch<double>& images, int index) {
  const int nps = cfg.patches_per_side();
  const int ps = cfg.patch_size;
  Matrix patches(nps * nps, cfg.patch_dim());
  const double* img = images.image(index);
  for (int py = 0; py < nps; ++py) {
    for (int px = 0; px < nps; ++px) {
      double* dst = patches.row(py * nps + px);
      int kk = 0;
      for (int c = 0; c < cfg.channels; ++c) {
        const double* plane = img + static_cast<size_t>(c) * cfg.image_size * cfg.image_size;
        for (int y = 0; y < ps; ++y) {
          const double* line = plane + static_cast<size_t>(py * ps + y) * cfg.image_size +
                               px * ps;
          for (int x = 0; x < ps; ++x) dst[kk++] = line[x];
        }
      }
    }
  }
  return patches;
}

}  // namespace

double loss_and_gradients(const ViTModel<double>& model, const AloreBank<double>* bank,
                          const ImageBatch<double>& images, std::span<const int> labels,
                          const ExpertMask* mask, bool train_mode, uint64_t dropout_seed,
                          Regime regime, Gradients& grads, double* top1_out) {
  const ViTConfig& cfg = model.cfg;
  if (static_cast<int>(labels.size()) != images.count) {
    throw ShapeError("loss: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(images.count) + " images");
  }
  const bool need_backbone = regime == Regime::Full;
  const bool need_bank = bank != nullptr && regime != Regime::LinearProbe;
  const bool head_only = regime == Regime::LinearProbe;
  AloreBank<double>* bank_grads =
      (need_bank && grads.bank.has_value()) ? &grads.bank.value() : nullptr;

  ExpertMask local;
  if (bank != nullptr) local = mask != nullptr ? *mask : full_mask(bank->cfg.n);

  const int batch = images.count;
  double total_loss = 0.0;
  int correct = 0;
  std::vector<BlockCache> caches(head_only ? 0 : cfg.num_layers);

  for (int i = 0; i < batch; ++i) {
    Matrix patches = extract_patches(cfg, images, i);
    Matrix projected = matmul(patches, model.patch_weight);
    Matrix tokens(cfg.tokens(), cfg.d);
    for (int j = 0; j < cfg.d; ++j) tokens(0, j) = model.cls_token(0, j) + model.pos_embed(0, j);
    for (int p = 0; p < projected.rows; ++p) {
      const double* src = projected.row(p);
      const double* pos = model.pos_embed.row(p + 1);
      double* dst = tokens.row(p + 1);
      for (int j = 0; j < cfg.d; ++j) dst[j] = src[j] + model.patch_bias[j] + pos[j];
    }

    for (int l = 0; l < cfg.num_layers; ++l) {
      Rng layer_rng(dropout_stream(dropout_seed, i, l, 0));
      if (head_only) {
        tokens = encoder_block(tokens, model.layers[l], cfg.n_h, bank, l,
                               bank != nullptr ? &local : nullptr, train_mode, layer_rng);
      } else {
        tokens = block_forward_cached(tokens, model.layers[l], cfg.n_h, bank, l, local,
                                      train_mode, layer_rng, caches[l]);
      }
    }

    Matrix cls(1, cfg.d);
    std::copy(tokens.row(0), tokens.row(0) + cfg.d, cls.row(0));
    Matrix lnf_xhat;
    std::vector<double> lnf_rstd;
    Matrix features = layer_norm_cached(cls, model.lnf_gamma, model.lnf_beta, lnf_xhat,
                                        lnf_rstd);
    Matrix logits = linear_bias(features, model.head_weight, model.head_bias);

    // per-image CE (already scaled by 1/batch below)
    const double* z = logits.row(0);
    double mx = z[0];
    int argmax = 0;
    for (int j = 1; j < cfg.classes; ++j) {
      if (z[j] > mx) {
        mx = z[j];
        argmax = j;
      }
    }
    if (labels[i] < 0 || labels[i] >= cfg.classes) {
      throw IndexError("loss: label " + std::to_string(labels[i]) + " outside [0, " +
                       std::to_string(cfg.classes) + ")");
    }
    if (argmax == labels[i]) ++correct;
    double sum = 0.0;
    for (int j = 0; j < cfg.classes; ++j) sum += std::exp(z[j] - mx);
    const double lse = mx + std::log(sum);
    total_loss += lse - z[labels[i]];

    Matrix dlogits(1, cfg.classes);
    for (int j = 0; j < cfg.classes; ++j) {
      dlogits(0, j) = std::exp(z[j] - lse) / batch;
    }
    dlogits(0, labels[i]) -= 1.0 / batch;

    // head
    acc_matmul_tn(grads.model.head_weight, features, dlogits);
    accumulate_colsum(dlogits, grads.model.head_bias);
    if (head_only) continue;

    Matrix dfeat = matmul_nt(dlogits, model.head_weight);
    Matrix dcls = layer_norm_backward(lnf_xhat, lnf_rstd, model.lnf_gamma, dfeat,
                                      need_backbone ? &grads.model.lnf_gamma : nullptr,
                                      need_backbone ? &grads.model.lnf_beta : nullptr);
    Matrix dtokens(cfg.tokens(), cfg.d);
    std::copy(dcls.row(0), dcls.row(0) + cfg.d, dtokens.row(0));

    for (int l = cfg.num_layers - 1; l >= 0; --l) {
      dtokens = block_backward(dtokens, model.layers[l], cfg.n_h, bank, l, local, caches[l],
                               need_backbone ? &grads.model.layers[l] : nullptr, bank_grads);
    }

    if (need_backbone) {
      for (int j = 0; j < cfg.d; ++j) grads.model.cls_token(0, j) += dtokens(0, j);
      add_inplace(grads.model.pos_embed, dtokens);
      Matrix dproj(dtokens.rows - 1, cfg.d);
      for (int p = 1; p < dtokens.rows; ++p) {
        std::copy(dtokens.row(p), dtokens.row(p) + cfg.d, dproj.row(p - 1));
      }
      accumulate_colsum(dproj, grads.model.patch_bias);
      acc_matmul_tn(grads.model.patch_weight, patches, dproj);
    }
  }

  if (top1_out != nullptr) *top1_out = static_cast<double>(correct) / batch;
  return total_loss / batch;
}

GradCheckResult gradient_check(ViTModel<double>& model, AloreBank<double>* bank,
                               const ImageBatch<double>& images, std::span<const int> labels,
                               Regime regime, bool train_mode, uint64_t dropout_seed,
                               double eps) {
  Gradients grads = make_gradients(model, bank);
  loss_and_gradients(model, bank, images, labels, nullptr, train_mode, dropout_seed, regime,
                     grads, nullptr);

  auto params = trainable_parameters(model, bank, regime);
  auto grefs = gradient_refs(grads, regime);

  auto eval_loss = [&]() {
    Matrix logits = vit_forward(model, images, bank, nullptr, train_mode, dropout_seed);
    return cross_entropy(logits, labels, nullptr);
  };

  GradCheckResult result;
  for (size_t t = 0; t < params.size(); ++t) {
    auto& value = params[t].value;
    auto& gval = grefs[t].value;
    for (size_t idx = 0; idx < value.size(); ++idx) {
      const double saved = value[idx];
      value[idx] = saved + eps;
      const double lp = eval_loss();
      value[idx] = saved - eps;
      const double lm = eval_loss();
      value[idx] = saved;
      const double numeric = (lp - lm) / (2.0 * eps);
      const double analytic = gval[idx];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
      const double rel = std::abs(analytic - numeric) / denom;
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst_tensor = params[t].name;
        result.worst_index = static_cast<int>(idx);
        result.analytic = analytic;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace alore
