#include "alore/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace alore {

void TaskSpec::validate() const {
  if (classes < 2) throw ConfigError("data: need at least 2 classes");
  if (images_per_class < 1 || image_size < 1 || channels < 1) {
    throw ConfigError("data: counts must be positive");
  }
  if (noise_sigma < 0.0) throw ConfigError("data: noise_sigma must be >= 0");
  if (shift < 0.0) throw ConfigError("data: shift must be >= 0");
  if (train_per_class < 1 || val_per_class < 1 || test_per_class < 1) {
    throw ConfigError("data: split counts must be positive");
  }
  if (train_per_class + val_per_class + test_per_class > images_per_class) {
    throw ConfigError("data: splits exceed images_per_class");
  }
}

namespace {

constexpr double kPi = 3.14159265358979323846;

struct ClassPattern {
  double theta = 0.0;
  double freq = 0.0;
  double phase[3] = {0.0, 0.0, 0.0};
  double grating_amp = 0.0;
  double blob_x = 0.0, blob_y = 0.0;
  double blob_sigma = 0.0;
  double blob_amp = 0.0;
  double blob2_x = 0.0, blob2_y = 0.0;
  double blob2_amp = 0.0;
};

// Base parameters come from one stream, shift offsets from another, so
// shift=0 reproduces the source generators exactly.
ClassPattern make_class_pattern(const TaskSpec& spec, int c) {
  Rng base = Rng(spec.pattern_seed).fork(0x42000 + static_cast<uint64_t>(c));
  Rng delta = Rng(spec.pattern_seed).fork(0x77000 + static_cast<uint64_t>(c));
  const double s = spec.image_size;
  ClassPattern p;
  p.theta = kPi * (c + 0.5) / spec.classes + 0.12 * (base.next_uniform() - 0.5);
  p.freq = 2.0 + 3.0 * base.next_uniform();
  for (int ch = 0; ch < 3; ++ch) p.phase[ch] = 2.0 * kPi * base.next_uniform();
  p.grating_amp = 0.16 + 0.06 * base.next_uniform();
  p.blob_x = s * (0.2 + 0.6 * base.next_uniform());
  p.blob_y = s * (0.2 + 0.6 * base.next_uniform());
  p.blob_sigma = s * (0.08 + 0.08 * base.next_uniform());
  p.blob_amp = 0.24 + 0.10 * base.next_uniform();
  p.blob2_x = s * (0.2 + 0.6 * base.next_uniform());
  p.blob2_y = s * (0.2 + 0.6 * base.next_uniform());
  p.blob2_amp = -(0.18 + 0.08 * base.next_uniform());

  const double sh = spec.shift;
  if (sh != 0.0) {
    // rotate the grating far off the source orientation grid and relocate /
    // re-sign the blob topology, so source features misalign on the target
    p.theta += sh * (0.3 * kPi + 0.4 * kPi * delta.next_uniform());
    p.freq *= 1.0 + 0.8 * sh * (delta.next_uniform() - 0.5);
    for (int ch = 0; ch < 3; ++ch) p.phase[ch] += sh * 2.0 * kPi * delta.next_uniform();
    p.blob_x = std::clamp(p.blob_x + sh * s * 0.9 * (delta.next_uniform() - 0.5), 0.1 * s,
                          0.9 * s);
    p.blob_y = std::clamp(p.blob_y + sh * s * 0.9 * (delta.next_uniform() - 0.5), 0.1 * s,
                          0.9 * s);
    p.blob2_x = std::clamp(p.blob2_x + sh * s * 0.9 * (delta.next_uniform() - 0.5), 0.1 * s,
                           0.9 * s);
    p.blob2_y = std::clamp(p.blob2_y + sh * s * 0.9 * (delta.next_uniform() - 0.5), 0.1 * s,
                           0.9 * s);
    p.blob_sigma *= 1.0 + 0.5 * sh * (delta.next_uniform() - 0.5);
    if (delta.next_uniform() < 0.5 * sh) p.blob_amp = -p.blob_amp;
    if (delta.next_uniform() < 0.5 * sh) p.blob2_amp = -p.blob2_amp;
  }
  return p;
}

void render_image(const TaskSpec& spec, const ClassPattern& p, uint64_t noise_stream,
                  float* out) {
  const int s = spec.image_size;
  const double ct = std::cos(p.theta);
  const double st = std::sin(p.theta);
  Rng noise(noise_stream);
  const double two_sig2 = 2.0 * p.blob_sigma * p.blob_sigma;
  for (int c = 0; c < spec.channels; ++c) {
    const double phase = p.phase[c % 3];
    float* plane = out + static_cast<size_t>(c) * s * s;
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const double proj = (x * ct + y * st) / s;
        double v = 0.5 + p.grating_amp * std::sin(2.0 * kPi * p.freq * proj + phase);
        const double dx1 = x - p.blob_x, dy1 = y - p.blob_y;
        v += p.blob_amp * std::exp(-(dx1 * dx1 + dy1 * dy1) / two_sig2);
        const double dx2 = x - p.blob2_x, dy2 = y - p.blob2_y;
        v += p.blob2_amp * std::exp(-(dx2 * dx2 + dy2 * dy2) / two_sig2);
        if (spec.noise_sigma > 0.0) v += spec.noise_sigma * noise.next_normal();
        plane[static_cast<size_t>(y) * s + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
}

}  // namespace

Dataset gen_task(const TaskSpec& spec, uint64_t seed) {
  spec.validate();
  Dataset out;
  const int total = spec.classes * spec.images_per_class;
  out.images = ImageBatch<float>(total, spec.channels, spec.image_size, spec.image_size);
  out.labels.resize(total);

  std::vector<ClassPattern> patterns;
  patterns.reserve(spec.classes);
  for (int c = 0; c < spec.classes; ++c) patterns.push_back(make_class_pattern(spec, c));

  Rng stream_src(seed);
  for (int c = 0; c < spec.classes; ++c) {
    for (int k = 0; k < spec.images_per_class; ++k) {
      const int idx = c * spec.images_per_class + k;
      out.labels[idx] = c;
      const uint64_t noise_stream =
          stream_src.fork((static_cast<uint64_t>(c) << 32) | static_cast<uint64_t>(k)).seed;
      render_image(spec, patterns[c], noise_stream, out.images.image(idx));
      // per-class range split keeps classes balanced exactly
      if (k < spec.train_per_class) {
        out.train_idx.push_back(idx);
      } else if (k < spec.train_per_class + spec.val_per_class) {
        out.val_idx.push_back(idx);
      } else if (k < spec.train_per_class + spec.val_per_class + spec.test_per_class) {
        out.test_idx.push_back(idx);
      }
    }
  }
  return out;
}

std::pair<Dataset, Dataset> make_transfer_pair(const TaskSpec& spec, uint64_t seed) {
  TaskSpec source_spec = spec;
  source_spec.shift = 0.0;
  return {gen_task(source_spec, seed), gen_task(spec, seed)};
}

template <class T>
ImageBatch<T> gather_images(const Dataset& data, std::span<const int> indices) {
  ImageBatch<T> out(static_cast<int>(indices.size()), data.images.channels,
                    data.images.height, data.images.width);
  const size_t img_sz = data.images.image_size();
  for (size_t i = 0; i < indices.size(); ++i) {
    const float* src = data.images.image(indices[i]);
    T* dst = out.image(static_cast<int>(i));
    for (size_t j = 0; j < img_sz; ++j) dst[j] = static_cast<T>(src[j]);
  }
  return out;
}

std::vector<int> gather_labels(const Dataset& data, std::span<const int> indices) {
  std::vector<int> out(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) out[i] = data.labels[indices[i]];
  return out;
}

uint64_t image_hash(const Dataset& data, int index) {
  const float* img = data.images.image(index);
  const size_t bytes = data.images.image_size() * sizeof(float);
  const unsigned char* p = reinterpret_cast<const unsigned char*>(img);
  uint64_t h = 0xCBF29CE484222325ULL;
  for (size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

template ImageBatch<float> gather_images<float>(const Dataset&, std::span<const int>);
template ImageBatch<double> gather_images<double>(const Dataset&, std::span<const int>);

}  // namespace alore
