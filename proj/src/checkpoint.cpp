#include "alore/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <functional>

namespace alore {

namespace {

constexpr char kMagic[4] = {'A', 'L', 'R', 'E'};
constexpr uint32_t kVersion = 1;

template <class U>
void write_le(std::ostream& out, U value) {
  unsigned char buf[sizeof(U)];
  for (size_t i = 0; i < sizeof(U); ++i) {
    buf[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xFF);
  }
  out.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U read_le(std::istream& in) {
  unsigned char buf[sizeof(U)];
  in.read(reinterpret_cast<char*>(buf), sizeof(U));
  U value = 0;
  for (size_t i = 0; i < sizeof(U); ++i) {
    value |= static_cast<U>(buf[i]) << (8 * i);
  }
  return value;
}

// Payloads are memcpy'd as native IEEE-754; this targets little-endian hosts.
template <class T>
std::vector<unsigned char> to_payload(std::span<const T> src, uint8_t dtype) {
  std::vector<unsigned char> out;
  if (dtype == 0) {
    out.resize(src.size() * 4);
    for (size_t i = 0; i < src.size(); ++i) {
      const float f = static_cast<float>(src[i]);
      std::memcpy(out.data() + i * 4, &f, 4);
    }
  } else {
    out.resize(src.size() * 8);
    for (size_t i = 0; i < src.size(); ++i) {
      const double d = static_cast<double>(src[i]);
      std::memcpy(out.data() + i * 8, &d, 8);
    }
  }
  return out;
}

template <class T>
constexpr uint8_t dtype_of() {
  return sizeof(T) == 4 ? 0 : 1;
}

template <class T>
std::vector<T> from_payload(const TensorBlob& blob) {
  const size_t n = blob.element_count();
  std::vector<T> out(n);
  if (blob.dtype == 0) {
    for (size_t i = 0; i < n; ++i) {
      float f;
      std::memcpy(&f, blob.payload.data() + i * 4, 4);
      out[i] = static_cast<T>(f);
    }
  } else {
    for (size_t i = 0; i < n; ++i) {
      double d;
      std::memcpy(&d, blob.payload.data() + i * 8, 8);
      out[i] = static_cast<T>(d);
    }
  }
  return out;
}

}  // namespace

size_t TensorBlob::element_count() const {
  size_t n = 1;
  for (uint64_t d : dims) n *= static_cast<size_t>(d);
  return dims.empty() ? 0 : n;
}

const TensorBlob* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

const TensorBlob& Checkpoint::require(const std::string& name) const {
  const TensorBlob* t = find(name);
  if (t == nullptr) throw IoError("checkpoint: missing tensor '" + name + "'");
  return *t;
}

template <class T>
void Checkpoint::put_matrix(const std::string& name, const Mat<T>& m) {
  TensorBlob blob;
  blob.name = name;
  blob.dtype = dtype_of<T>();
  blob.dims = {static_cast<uint64_t>(m.rows), static_cast<uint64_t>(m.cols)};
  blob.payload = to_payload(std::span<const T>(m.data), blob.dtype);
  tensors.push_back(std::move(blob));
}

template <class T>
void Checkpoint::put_vector(const std::string& name, std::span<const T> v) {
  TensorBlob blob;
  blob.name = name;
  blob.dtype = dtype_of<T>();
  blob.dims = {static_cast<uint64_t>(v.size())};
  blob.payload = to_payload(v, blob.dtype);
  tensors.push_back(std::move(blob));
}

void Checkpoint::put_scalars(const std::string& name, const std::vector<double>& v) {
  put_vector<double>(name, std::span<const double>(v));
}

template <class T>
void Checkpoint::put_raw(const std::string& name, std::vector<uint64_t> dims,
                         std::span<const T> v) {
  size_t n = dims.empty() ? 0 : 1;
  for (uint64_t d : dims) n *= static_cast<size_t>(d);
  if (n != v.size()) throw ShapeError("checkpoint: dims do not match payload for " + name);
  TensorBlob blob;
  blob.name = name;
  blob.dtype = dtype_of<T>();
  blob.dims = std::move(dims);
  blob.payload = to_payload(v, blob.dtype);
  tensors.push_back(std::move(blob));
}

template <class T>
Mat<T> Checkpoint::get_matrix(const std::string& name) const {
  const TensorBlob& blob = require(name);
  if (blob.dims.size() != 2) {
    throw IoError("checkpoint: tensor '" + name + "' has rank " +
                  std::to_string(blob.dims.size()) + ", expected 2");
  }
  Mat<T> m(static_cast<int>(blob.dims[0]), static_cast<int>(blob.dims[1]));
  m.data = from_payload<T>(blob);
  return m;
}

template <class T>
std::vector<T> Checkpoint::get_vector(const std::string& name) const {
  const TensorBlob& blob = require(name);
  if (blob.dims.size() != 1) {
    throw IoError("checkpoint: tensor '" + name + "' has rank " +
                  std::to_string(blob.dims.size()) + ", expected 1");
  }
  return from_payload<T>(blob);
}

std::vector<double> Checkpoint::get_scalars(const std::string& name) const {
  return get_vector<double>(name);
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(kMagic, 4);
  write_le<uint32_t>(out, kVersion);
  write_le<uint32_t>(out, static_cast<uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (t.name.size() > 0xFFFF) throw IoError("tensor name too long: " + t.name);
    write_le<uint16_t>(out, static_cast<uint16_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    out.put(static_cast<char>(t.dtype));
    out.put(static_cast<char>(t.dims.size()));
    for (uint64_t d : t.dims) write_le<uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.payload.data()),
              static_cast<std::streamsize>(t.payload.size()));
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("'" + path + "' is not an ALRE checkpoint");
  }
  const uint32_t version = read_le<uint32_t>(in);
  if (version != kVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  const uint32_t count = read_le<uint32_t>(in);
  Checkpoint ckpt;
  ckpt.tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    TensorBlob blob;
    const uint16_t name_len = read_le<uint16_t>(in);
    blob.name.resize(name_len);
    in.read(blob.name.data(), name_len);
    const int dtype = in.get();
    const int rank = in.get();
    if (dtype != 0 && dtype != 1) throw IoError("bad dtype in '" + path + "'");
    blob.dtype = static_cast<uint8_t>(dtype);
    blob.dims.resize(static_cast<size_t>(rank));
    for (auto& d : blob.dims) d = read_le<uint64_t>(in);
    blob.payload.resize(blob.element_count() * blob.element_size());
    in.read(reinterpret_cast<char*>(blob.payload.data()),
            static_cast<std::streamsize>(blob.payload.size()));
    if (!in) throw IoError("truncated checkpoint '" + path + "'");
    ckpt.tensors.push_back(std::move(blob));
  }
  return ckpt;
}

// -- model / bank adapters --------------------------------------------------

namespace {

template <class T>
void walk_model(ViTModel<T>& m,
                const std::function<void(const std::string&, Mat<T>&)>& on_mat,
                const std::function<void(const std::string&, std::vector<T>&)>& on_vec) {
  on_mat("model/patch_embed/weight", m.patch_weight);
  on_vec("model/patch_embed/bias", m.patch_bias);
  on_mat("model/pos_embed", m.pos_embed);
  on_mat("model/cls_token", m.cls_token);
  for (size_t i = 0; i < m.layers.size(); ++i) {
    auto& l = m.layers[i];
    const std::string base = "model/layers/" + std::to_string(i) + "/";
    on_vec(base + "ln1/gamma", l.ln1_gamma);
    on_vec(base + "ln1/beta", l.ln1_beta);
    on_mat(base + "attn/wq", l.wq);
    on_mat(base + "attn/wk", l.wk);
    on_mat(base + "attn/wv", l.wv);
    on_mat(base + "attn/wo", l.wo);
    on_vec(base + "attn/bq", l.bq);
    on_vec(base + "attn/bk", l.bk);
    on_vec(base + "attn/bv", l.bv);
    on_vec(base + "attn/bo", l.bo);
    on_vec(base + "ln2/gamma", l.ln2_gamma);
    on_vec(base + "ln2/beta", l.ln2_beta);
    on_mat(base + "mlp/w1", l.w1);
    on_vec(base + "mlp/b1", l.b1);
    on_mat(base + "mlp/w2", l.w2);
    on_vec(base + "mlp/b2", l.b2);
  }
  on_vec("model/ln_f/gamma", m.lnf_gamma);
  on_vec("model/ln_f/beta", m.lnf_beta);
  on_mat("model/head/weight", m.head_weight);
  on_vec("model/head/bias", m.head_bias);
}

template <class T>
void walk_bank(AloreBank<T>& bank,
               const std::function<void(const std::string&, Mat<T>&)>& on_mat) {
  for (size_t i = 0; i < bank.scale.size(); ++i) {
    on_mat("alore/scale/" + std::to_string(i), bank.scale[i]);
  }
  for (size_t l = 0; l < bank.experts.size(); ++l) {
    for (size_t s = 0; s < bank.experts[l].size(); ++s) {
      const std::string base = "alore/layers/" + std::to_string(l) + "/" +
                               site_name(bank.cfg.sites[s]) + "/";
      for (size_t e = 0; e < bank.experts[l][s].size(); ++e) {
        on_mat(base + "expert/" + std::to_string(e) + "/down", bank.experts[l][s][e].down);
        on_mat(base + "expert/" + std::to_string(e) + "/up", bank.experts[l][s][e].up);
      }
    }
  }
}

}  // namespace

template <class T>
void model_to_checkpoint(const ViTModel<T>& model, const AloreBank<T>* bank,
                         Checkpoint& ckpt) {
  const ViTConfig& c = model.cfg;
  ckpt.put_scalars("meta/vit_config",
                   {static_cast<double>(c.image_size), static_cast<double>(c.patch_size),
                    static_cast<double>(c.channels), static_cast<double>(c.d),
                    static_cast<double>(c.num_layers), static_cast<double>(c.n_h),
                    static_cast<double>(c.mlp_ratio), static_cast<double>(c.classes)});
  auto& mut = const_cast<ViTModel<T>&>(model);  // walker never writes on save
  walk_model<T>(
      mut, [&](const std::string& name, Mat<T>& m) { ckpt.put_matrix(name, m); },
      [&](const std::string& name, std::vector<T>& v) {
        ckpt.put_vector<T>(name, std::span<const T>(v));
      });
  if (bank != nullptr) {
    const AloreConfig& a = bank->cfg;
    std::vector<double> meta{static_cast<double>(a.d), static_cast<double>(a.n),
                             static_cast<double>(a.r), static_cast<double>(a.layers_adapted),
                             a.dropout_p};
    ckpt.put_scalars("meta/alore_config", meta);
    std::vector<double> sites;
    for (Site s : a.sites) sites.push_back(static_cast<double>(static_cast<int>(s)));
    ckpt.put_scalars("meta/alore_sites", sites);
    auto& mut_bank = const_cast<AloreBank<T>&>(*bank);
    walk_bank<T>(mut_bank,
                 [&](const std::string& name, Mat<T>& m) { ckpt.put_matrix(name, m); });
  }
}

template <class T>
ViTModel<T> model_from_checkpoint(const Checkpoint& ckpt) {
  const auto meta = ckpt.get_scalars("meta/vit_config");
  if (meta.size() != 8) throw IoError("checkpoint: bad meta/vit_config");
  ViTConfig cfg;
  cfg.image_size = static_cast<int>(meta[0]);
  cfg.patch_size = static_cast<int>(meta[1]);
  cfg.channels = static_cast<int>(meta[2]);
  cfg.d = static_cast<int>(meta[3]);
  cfg.num_layers = static_cast<int>(meta[4]);
  cfg.n_h = static_cast<int>(meta[5]);
  cfg.mlp_ratio = static_cast<int>(meta[6]);
  cfg.classes = static_cast<int>(meta[7]);
  cfg.validate();

  Rng rng(0);
  ViTModel<T> model = init_vit<T>(cfg, rng);
  walk_model<T>(
      model,
      [&](const std::string& name, Mat<T>& m) {
        Mat<T> loaded = ckpt.get_matrix<T>(name);
        if (!loaded.same_shape(m)) {
          throw IoError("checkpoint: tensor '" + name + "' shape " + loaded.shape_str() +
                        " vs expected " + m.shape_str());
        }
        validate_finite(loaded, name);
        m = std::move(loaded);
      },
      [&](const std::string& name, std::vector<T>& v) {
        std::vector<T> loaded = ckpt.get_vector<T>(name);
        if (loaded.size() != v.size()) {
          throw IoError("checkpoint: tensor '" + name + "' length mismatch");
        }
        validate_finite(std::span<const T>(loaded), name);
        v = std::move(loaded);
      });
  return model;
}

template <class T>
std::optional<AloreBank<T>> bank_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.has("meta/alore_config")) return std::nullopt;
  const auto meta = ckpt.get_scalars("meta/alore_config");
  if (meta.size() != 5) throw IoError("checkpoint: bad meta/alore_config");
  AloreConfig cfg;
  cfg.d = static_cast<int>(meta[0]);
  cfg.n = static_cast<int>(meta[1]);
  cfg.r = static_cast<int>(meta[2]);
  cfg.layers_adapted = static_cast<int>(meta[3]);
  cfg.dropout_p = meta[4];
  cfg.sites.clear();
  for (double s : ckpt.get_scalars("meta/alore_sites")) {
    cfg.sites.push_back(static_cast<Site>(static_cast<int>(s)));
  }
  Rng rng(0);
  AloreBank<T> bank = init_alore<T>(cfg, cfg.layers_adapted, rng);
  walk_bank<T>(bank, [&](const std::string& name, Mat<T>& m) {
    Mat<T> loaded = ckpt.get_matrix<T>(name);
    if (!loaded.same_shape(m)) {
      throw IoError("checkpoint: tensor '" + name + "' shape " + loaded.shape_str() +
                    " vs expected " + m.shape_str());
    }
    validate_finite(loaded, name);
    m = std::move(loaded);
  });
  return bank;
}

void dataset_to_checkpoint(const Dataset& data, const TaskSpec& spec, Checkpoint& ckpt) {
  ckpt.put_raw<float>("images",
                      {static_cast<uint64_t>(data.images.count),
                       static_cast<uint64_t>(data.images.channels),
                       static_cast<uint64_t>(data.images.height),
                       static_cast<uint64_t>(data.images.width)},
                      std::span<const float>(data.images.data));
  auto to_doubles = [](const std::vector<int>& v) {
    std::vector<double> out(v.begin(), v.end());
    return out;
  };
  ckpt.put_scalars("labels", to_doubles(data.labels));
  ckpt.put_scalars("split_train", to_doubles(data.train_idx));
  ckpt.put_scalars("split_val", to_doubles(data.val_idx));
  ckpt.put_scalars("split_test", to_doubles(data.test_idx));
  ckpt.put_scalars("meta/task",
                   {static_cast<double>(spec.classes), static_cast<double>(spec.images_per_class),
                    static_cast<double>(spec.image_size), static_cast<double>(spec.channels),
                    static_cast<double>(spec.pattern_seed), spec.noise_sigma, spec.shift,
                    static_cast<double>(spec.train_per_class),
                    static_cast<double>(spec.val_per_class),
                    static_cast<double>(spec.test_per_class)});
}

Dataset dataset_from_checkpoint(const Checkpoint& ckpt, TaskSpec* spec_out) {
  const TensorBlob& blob = ckpt.require("images");
  if (blob.dims.size() != 4 || blob.dtype != 0) {
    throw IoError("checkpoint: 'images' must be a rank-4 f32 tensor");
  }
  Dataset data;
  data.images = ImageBatch<float>(static_cast<int>(blob.dims[0]), static_cast<int>(blob.dims[1]),
                                  static_cast<int>(blob.dims[2]), static_cast<int>(blob.dims[3]));
  std::memcpy(data.images.data.data(), blob.payload.data(), blob.payload.size());
  auto to_ints = [&](const std::string& name) {
    std::vector<int> out;
    for (double v : ckpt.get_scalars(name)) out.push_back(static_cast<int>(v));
    return out;
  };
  data.labels = to_ints("labels");
  data.train_idx = to_ints("split_train");
  data.val_idx = to_ints("split_val");
  data.test_idx = to_ints("split_test");
  if (spec_out != nullptr) {
    const auto meta = ckpt.get_scalars("meta/task");
    if (meta.size() != 10) throw IoError("checkpoint: bad meta/task");
    spec_out->classes = static_cast<int>(meta[0]);
    spec_out->images_per_class = static_cast<int>(meta[1]);
    spec_out->image_size = static_cast<int>(meta[2]);
    spec_out->channels = static_cast<int>(meta[3]);
    spec_out->pattern_seed = static_cast<uint64_t>(meta[4]);
    spec_out->noise_sigma = meta[5];
    spec_out->shift = meta[6];
    spec_out->train_per_class = static_cast<int>(meta[7]);
    spec_out->val_per_class = static_cast<int>(meta[8]);
    spec_out->test_per_class = static_cast<int>(meta[9]);
  }
  return data;
}

#define ALORE_INSTANTIATE(T)                                                              \
  template void Checkpoint::put_matrix<T>(const std::string&, const Mat<T>&);             \
  template void Checkpoint::put_vector<T>(const std::string&, std::span<const T>);        \
  template void Checkpoint::put_raw<T>(const std::string&, std::vector<uint64_t>,         \
                                       std::span<const T>);                               \
  template Mat<T> Checkpoint::get_matrix<T>(const std::string&) const;                    \
  template std::vector<T> Checkpoint::get_vector<T>(const std::string&) const;            \
  template void model_to_checkpoint<T>(const ViTModel<T>&, const AloreBank<T>*,           \
                                       Checkpoint&);                                      \
  template ViTModel<T> model_from_checkpoint<T>(const Checkpoint&);                       \
  template std::optional<AloreBank<T>> bank_from_checkpoint<T>(const Checkpoint&);

ALORE_INSTANTIATE(float)
ALORE_INSTANTIATE(double)
#undef ALORE_INSTANTIATE

}  // namespace alore
