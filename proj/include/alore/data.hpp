#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "alore/vit.hpp"

namespace alore {

/// Procedural classification task: each class is an oriented grating plus a
/// Gaussian blob, with per-sample pixel noise. `shift` perturbs the per-class
/// generators (rotated gratings, relocated blobs) to build transfer targets.
struct TaskSpec {
  int classes = 10;
  int images_per_class = 120;
  int image_size = 32;
  int channels = 3;
  uint64_t pattern_seed = 7;
  double noise_sigma = 0.05;
  double shift = 0.0;
  int train_per_class = 100;
  int val_per_class = 10;
  int test_per_class = 10;

  void validate() const;
};

struct Dataset {
  ImageBatch<float> images;  // flat 32-bit reals in [0, 1]
  std::vector<int> labels;
  std::vector<int> train_idx, val_idx, test_idx;

  int count() const { return images.count; }
};

Dataset gen_task(const TaskSpec& spec, uint64_t seed);

/// (source, target): source is the spec with shift forced to 0; target uses
/// spec.shift as-is. Identical generators when shift is 0.
std::pair<Dataset, Dataset> make_transfer_pair(const TaskSpec& spec, uint64_t seed);

/// Copies the images at `indices` into a batch of the requested precision.
template <class T>
ImageBatch<T> gather_images(const Dataset& data, std::span<const int> indices);

std::vector<int> gather_labels(const Dataset& data, std::span<const int> indices);

/// FNV-1a over the raw float bytes of one image.
uint64_t image_hash(const Dataset& data, int index);

}  // namespace alore
