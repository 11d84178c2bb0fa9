#include "alore/experts.hpp"

#include <algorithm>
#include <cmath>

namespace alore {

const char* site_name(Site s) {
  switch (s) {
    case Site::PreMHSA: return "pre_mhsa";
    case Site::PostMHSA: return "post_mhsa";
    case Site::PreFFN: return "pre_ffn";
    case Site::PostFFN: return "post_ffn";
  }
  return "?";
}

std::optional<Site> site_from_name(const std::string& name) {
  if (name == "pre_mhsa") return Site::PreMHSA;
  if (name == "post_mhsa") return Site::PostMHSA;
  if (name == "pre_ffn") return Site::PreFFN;
  if (name == "post_ffn") return Site::PostFFN;
  return std::nullopt;
}

void AloreConfig::validate(int num_layers) const {
  if (n < 1) throw ConfigError("alore: n must be >= 1");
  if (d % n != 0) {
    throw ConfigError("alore: d=" + std::to_string(d) + " not divisible by n=" +
                      std::to_string(n));
  }
  if (r < 1) throw ConfigError("alore: r must be >= 1");
  if (r > d / n) {
    throw ConfigError("alore: r=" + std::to_string(r) + " exceeds block width d/n=" +
                      std::to_string(d / n));
  }
  if (sites.empty()) throw ConfigError("alore: at least one insertion site required");
  for (size_t i = 0; i < sites.size(); ++i) {
    for (size_t j = i + 1; j < sites.size(); ++j) {
      if (sites[i] == sites[j]) throw ConfigError("alore: duplicate insertion site");
    }
  }
  if (layers_adapted < 1 || layers_adapted > num_layers) {
    throw ConfigError("alore: layers_adapted=" + std::to_string(layers_adapted) +
                      " outside [1, " + std::to_string(num_layers) + "]");
  }
  if (dropout_p < 0.0 || dropout_p >= 1.0) {
    throw ConfigError("alore: dropout_p must be in [0, 1)");
  }
}

std::optional<int> AloreConfig::site_index(Site site) const {
  for (size_t i = 0; i < sites.size(); ++i) {
    if (sites[i] == site) return static_cast<int>(i);
  }
  return std::nullopt;
}

template <class T>
long long AloreBank<T>::parameter_count() const {
  long long total = 0;
  for (const auto& s : scale) total += static_cast<long long>(s.size());
  for (const auto& layer : experts) {
    for (const auto& site : layer) {
      for (const auto& e : site) {
        total += static_cast<long long>(e.down.size() + e.up.size());
      }
    }
  }
  return total;
}

bool ExpertMask::all_active() const {
  return std::all_of(active.begin(), active.end(), [](uint8_t v) { return v != 0; });
}

std::optional<MaskMode> mask_mode_from_name(const std::string& name) {
  if (name == "increment") return MaskMode::Increment;
  if (name == "single") return MaskMode::Single;
  if (name == "sliced") return MaskMode::Sliced;
  return std::nullopt;
}

ExpertMask make_expert_mask(MaskMode mode, int i, int n) {
  if (i < 1 || i > n) {
    throw IndexError("expert mask index " + std::to_string(i) + " outside [1, " +
                     std::to_string(n) + "]");
  }
  ExpertMask m;
  m.active.assign(static_cast<size_t>(n), 0);
  switch (mode) {
    case MaskMode::Increment:
      for (int k = 0; k < i; ++k) m.active[k] = 1;
      break;
    case MaskMode::Single:
      m.active[i - 1] = 1;
      break;
    case MaskMode::Sliced:
      for (int k = 0; k < n; ++k) m.active[k] = (k == i - 1) ? 0 : 1;
      break;
  }
  return m;
}

ExpertMask full_mask(int n) {
  ExpertMask m;
  m.active.assign(static_cast<size_t>(n), 1);
  return m;
}

template <class T>
AloreBank<T> init_alore(const AloreConfig& cfg, int num_layers, Rng& rng) {
  cfg.validate(num_layers);
  AloreBank<T> bank;
  bank.cfg = cfg;
  const int w = cfg.d / cfg.n;
  const T down_std = static_cast<T>(1.0 / std::sqrt(static_cast<double>(w)));
  const T scale_std = static_cast<T>(1.0 / cfg.n);
  bank.scale.reserve(cfg.n);
  for (int i = 0; i < cfg.n; ++i) bank.scale.push_back(randn<T>(cfg.n, cfg.n, scale_std, rng));
  bank.experts.resize(cfg.layers_adapted);
  for (int l = 0; l < cfg.layers_adapted; ++l) {
    bank.experts[l].resize(cfg.sites.size());
    for (size_t s = 0; s < cfg.sites.size(); ++s) {
      bank.experts[l][s].resize(cfg.n);
      for (int i = 0; i < cfg.n; ++i) {
        bank.experts[l][s][i].down = randn<T>(w, cfg.r, down_std, rng);
        bank.experts[l][s][i].up = Mat<T>(cfg.r, w);  // zero: identity at init
      }
    }
  }
  return bank;
}

namespace {

template <class T>
const std::vector<ExpertPair<T>>& expert_slot(const AloreBank<T>& bank, int layer, Site site) {
  auto si = bank.cfg.site_index(site);
  if (!si.has_value() || layer < 0 || layer >= static_cast<int>(bank.experts.size())) {
    throw LookupError(std::string("no expert bank at layer ") + std::to_string(layer) +
                      ", site " + site_name(site));
  }
  return bank.experts[layer][*si];
}

}  // namespace

template <class T>
Mat<T> compose_delta_masked(const AloreBank<T>& bank, int layer, Site site,
                            const ExpertMask& mask) {
  if (mask.size() != bank.cfg.n) {
    throw ShapeError("expert mask length " + std::to_string(mask.size()) + " vs n=" +
                     std::to_string(bank.cfg.n));
  }
  const auto& slot = expert_slot(bank, layer, site);
  Mat<T> delta(bank.cfg.d, bank.cfg.d);
  for (int i = 0; i < bank.cfg.n; ++i) {
    if (!mask.active[i]) continue;
    Mat<T> hyper = matmul(slot[i].down, slot[i].up);  // (d/n) x (d/n)
    add_inplace(delta, kron(bank.scale[i], hyper));
  }
  return delta;
}

template <class T>
Mat<T> compose_delta(const AloreBank<T>& bank, int layer, Site site) {
  return compose_delta_masked(bank, layer, site, full_mask(bank.cfg.n));
}

template <class T>
void apply_dropout(Mat<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return;
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  for (auto& v : x.data) v = (rng.next_uniform() < p) ? T(0) : v * scale;
}

template <class T>
Mat<T> alore_branch(const Mat<T>& x, const AloreBank<T>& bank, int layer, Site site,
                    const ExpertMask& mask) {
  const AloreConfig& cfg = bank.cfg;
  if (x.cols != cfg.d) {
    throw ShapeError("alore_forward: input width " + std::to_string(x.cols) + " vs d=" +
                     std::to_string(cfg.d));
  }
  if (mask.size() != cfg.n) {
    throw ShapeError("expert mask length " + std::to_string(mask.size()) + " vs n=" +
                     std::to_string(cfg.n));
  }
  const auto& slot = expert_slot(bank, layer, site);
  const int n = cfg.n;
  const int w = cfg.d / n;
  const int t = x.rows;

  Mat<T> out(t, cfg.d);
  Mat<T> mixed(t, w);
  // Block identity: for y = x * (W^s kron M), output block j is
  // (sum_i W^s[i][j] * x_i) * M, with M factored as down*up.
  for (int e = 0; e < n; ++e) {
    if (!mask.active[e]) continue;
    const Mat<T>& s = bank.scale[e];
    for (int j = 0; j < n; ++j) {
      std::fill(mixed.data.begin(), mixed.data.end(), T(0));
      for (int i = 0; i < n; ++i) {
        const T sij = s(i, j);
        if (sij == T(0)) continue;
        for (int row = 0; row < t; ++row) {
          const T* xb = x.row(row) + static_cast<size_t>(i) * w;
          T* mb = mixed.row(row);
          for (int cidx = 0; cidx < w; ++cidx) mb[cidx] += sij * xb[cidx];
        }
      }
      Mat<T> up = matmul(matmul(mixed, slot[e].down), slot[e].up);  // t x w
      for (int row = 0; row < t; ++row) {
        const T* ub = up.row(row);
        T* ob = out.row(row) + static_cast<size_t>(j) * w;
        for (int cidx = 0; cidx < w; ++cidx) ob[cidx] += ub[cidx];
      }
    }
  }
  return out;
}

template <class T>
Mat<T> alore_forward(const Mat<T>& x, const AloreBank<T>& bank, int layer, Site site,
                     const ExpertMask& mask, bool train_mode, Rng& rng) {
  Mat<T> branch = alore_branch(x, bank, layer, site, mask);
  if (train_mode) apply_dropout(branch, bank.cfg.dropout_p, rng);
  add_inplace(branch, x);
  return branch;
}

namespace {

template <class T>
Mat<T> adapter_body(const Mat<T>& x, const AdapterBaseline<T>& a) {
  if (x.cols != a.w_down.rows) {
    throw ShapeError("adapter: input width " + std::to_string(x.cols) + " vs d=" +
                     std::to_string(a.w_down.rows));
  }
  Mat<T> h = matmul(x, a.w_down);
  for (int i = 0; i < h.rows; ++i) {
    T* hi = h.row(i);
    for (int j = 0; j < h.cols; ++j) {
      T v = hi[j] + a.b_down[j];
      switch (a.act) {
        case Activation::Relu: v = std::max(v, T(0)); break;
        case Activation::Gelu: v = gelu_scalar(v); break;
        case Activation::None: break;
      }
      hi[j] = v;
    }
  }
  Mat<T> out = matmul(h, a.w_up);
  for (int i = 0; i < out.rows; ++i) {
    T* oi = out.row(i);
    for (int j = 0; j < out.cols; ++j) oi[j] += a.b_up[j];
  }
  return out;
}

}  // namespace

template <class T>
Mat<T> adapter_forward(const Mat<T>& x, const AdapterBaseline<T>& a, bool train_mode,
                       double dropout_p, Rng& rng) {
  Mat<T> body = adapter_body(x, a);
  if (train_mode) apply_dropout(body, dropout_p, rng);
  add_inplace(body, x);
  return body;
}

template <class T>
Mat<T> stacked_forward(const Mat<T>& x, const std::vector<AdapterBaseline<T>>& branches,
                       bool train_mode, double dropout_p, Rng& rng) {
  if (branches.empty()) throw ConfigError("stacked_forward: empty branch list");
  Mat<T> acc(x.rows, x.cols);
  for (const auto& b : branches) {
    Mat<T> body = adapter_body(x, b);
    if (train_mode) apply_dropout(body, dropout_p, rng);
    add_inplace(acc, body);
  }
  add_inplace(acc, x);
  return acc;
}

template <class T>
void randomize_bank(AloreBank<T>& bank, Rng& rng, T scale) {
  for (auto& s : bank.scale) {
    for (auto& v : s.data) v = static_cast<T>(rng.next_normal()) * scale;
  }
  for (auto& layer : bank.experts) {
    for (auto& site : layer) {
      for (auto& e : site) {
        for (auto& v : e.down.data) v = static_cast<T>(rng.next_normal()) * scale;
        for (auto& v : e.up.data) v = static_cast<T>(rng.next_normal()) * scale;
      }
    }
  }
}

long long count_alore_params(int d, int r, int n, int site_count, int layers_adapted) {
  const long long experts = 2LL * d * r * site_count * layers_adapted;
  return experts + static_cast<long long>(n) * n * n;
}

long long count_stacked_params(int d, int r, int n, int site_count, int layers_adapted) {
  const long long per_branch = 2LL * d * r + r + d;  // W^d, b^d, W^u, b^u
  return per_branch * n * site_count * layers_adapted;
}

#define ALORE_INSTANTIATE(T)                                                                  \
  template struct AloreBank<T>;                                                               \
  template AloreBank<T> init_alore<T>(const AloreConfig&, int, Rng&);                         \
  template Mat<T> compose_delta<T>(const AloreBank<T>&, int, Site);                           \
  template Mat<T> compose_delta_masked<T>(const AloreBank<T>&, int, Site, const ExpertMask&); \
  template Mat<T> alore_branch<T>(const Mat<T>&, const AloreBank<T>&, int, Site,              \
                                  const ExpertMask&);                                         \
  template Mat<T> alore_forward<T>(const Mat<T>&, const AloreBank<T>&, int, Site,             \
                                   const ExpertMask&, bool, Rng&);                            \
  template Mat<T> adapter_forward<T>(const Mat<T>&, const AdapterBaseline<T>&, bool, double,  \
                                     Rng&);                                                   \
  template Mat<T> stacked_forward<T>(const Mat<T>&, const std::vector<AdapterBaseline<T>>&,   \
                                     bool, double, Rng&);                                     \
  template void apply_dropout<T>(Mat<T>&, double, Rng&);                                      \
  template void randomize_bank<T>(AloreBank<T>&, Rng&, T);

ALORE_INSTANTIATE(float)
ALORE_INSTANTIATE(double)
#undef ALORE_INSTANTIATE

}  // namespace alore
