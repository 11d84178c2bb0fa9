#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "alore/data.hpp"
#include "alore/vit.hpp"

namespace alore {

/// One named tensor in the "ALRE" v1 container. dtype 0 = 32-bit real,
/// 1 = 64-bit real; payload is little-endian row-major.
struct TensorBlob {
  std::string name;
  uint8_t dtype = 1;
  std::vector<uint64_t> dims;
  std::vector<unsigned char> payload;

  size_t element_count() const;
  size_t element_size() const { return dtype == 0 ? 4 : 8; }
};

struct Checkpoint {
  std::vector<TensorBlob> tensors;

  const TensorBlob* find(const std::string& name) const;
  const TensorBlob& require(const std::string& name) const;
  bool has(const std::string& name) const { return find(name) != nullptr; }

  template <class T>
  void put_matrix(const std::string& name, const Mat<T>& m);
  template <class T>
  void put_vector(const std::string& name, std::span<const T> v);
  void put_scalars(const std::string& name, const std::vector<double>& v);
  template <class T>
  void put_raw(const std::string& name, std::vector<uint64_t> dims, std::span<const T> v);

  /// Typed reads convert between the stored dtype and T when they differ.
  template <class T>
  Mat<T> get_matrix(const std::string& name) const;
  template <class T>
  std::vector<T> get_vector(const std::string& name) const;
  std::vector<double> get_scalars(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// -- model / bank / dataset adapters ---------------------------------------

template <class T>
void model_to_checkpoint(const ViTModel<T>& model, const AloreBank<T>* bank,
                         Checkpoint& ckpt);

/// Validates shapes against the embedded config and rejects non-finite
/// parameter values.
template <class T>
ViTModel<T> model_from_checkpoint(const Checkpoint& ckpt);

template <class T>
std::optional<AloreBank<T>> bank_from_checkpoint(const Checkpoint& ckpt);

void dataset_to_checkpoint(const Dataset& data, const TaskSpec& spec, Checkpoint& ckpt);
Dataset dataset_from_checkpoint(const Checkpoint& ckpt, TaskSpec* spec_out);

}  // namespace alore
