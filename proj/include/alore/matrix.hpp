#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace alore {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LookupError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IndexError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Dense row-major 2-D array. double is the default precision for tests and
/// training; float is the throughput mode.
template <class T>
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c) {
    if (r <= 0 || c <= 0) {
      throw ShapeError("matrix dims must be positive, got " + std::to_string(r) + "x" +
                       std::to_string(c));
    }
    data.assign(static_cast<size_t>(r) * static_cast<size_t>(c), T(0));
  }

  static Mat identity(int n) {
    Mat m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  static Mat from_rows(std::initializer_list<std::initializer_list<T>> rws) {
    int r = static_cast<int>(rws.size());
    int c = r > 0 ? static_cast<int>(rws.begin()->size()) : 0;
    Mat m(r, c);
    int i = 0;
    for (const auto& row : rws) {
      if (static_cast<int>(row.size()) != c) throw ShapeError("ragged initializer rows");
      int j = 0;
      for (T v : row) m(i, j++) = v;
      ++i;
    }
    return m;
  }

  T& operator()(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
  const T& operator()(int i, int j) const { return data[static_cast<size_t>(i) * cols + j]; }

  T* row(int i) { return data.data() + static_cast<size_t>(i) * cols; }
  const T* row(int i) const { return data.data() + static_cast<size_t>(i) * cols; }

  size_t size() const { return data.size(); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
  std::string shape_str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
  }
};

using Matrix = Mat<double>;
using MatrixF = Mat<float>;

/// Counter-based PRNG (SplitMix64 mix over seed + counter). Identical seed
/// gives an identical sequence on every platform: the normal sampler avoids
/// libm entirely (Irwin-Hall: sum of 12 uniforms minus 6, exact mean 0 and
/// variance 1).
struct Rng {
  uint64_t seed = 0;
  uint64_t counter = 0;

  explicit Rng(uint64_t s = 0) : seed(s) {}

  uint64_t next_u64() {
    uint64_t z = seed + (++counter) * 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 random mantissa bits.
  double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double next_normal() {
    double s = 0.0;
    for (int i = 0; i < 12; ++i) s += next_uniform();
    return s - 6.0;
  }

  /// Independent stream derived from this seed; does not advance this state.
  Rng fork(uint64_t stream) const {
    uint64_t z = (seed ^ 0xA3EC647659359ACDULL) + stream * 0xD1B54A32D192ED03ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return Rng(z ^ (z >> 31));
  }

  /// Draw in [0, n).
  uint64_t next_below(uint64_t n) { return next_u64() % n; }
};

template <class T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b);
template <class T>
Mat<T> matmul_tn(const Mat<T>& a, const Mat<T>& b);  // a^T * b
template <class T>
Mat<T> matmul_nt(const Mat<T>& a, const Mat<T>& b);  // a * b^T

template <class T>
Mat<T> kron(const Mat<T>& a, const Mat<T>& b);

template <class T>
Mat<T> layer_norm(const Mat<T>& x, std::span<const T> gamma, std::span<const T> beta, T eps);

template <class T>
Mat<T> softmax_rows(const Mat<T>& x);

template <class T>
Mat<T> gelu(const Mat<T>& x);

// Exact-erf GELU; used consistently by forward and gradient paths.
template <class T>
T gelu_scalar(T x);
template <class T>
T gelu_grad_scalar(T x);

template <class T>
Mat<T> randn(int rows, int cols, T std_dev, Rng& rng);

template <class T>
Mat<T> transpose(const Mat<T>& a);

template <class T>
void add_inplace(Mat<T>& a, const Mat<T>& b);

/// Throws DataError if any entry is NaN/Inf; `name` identifies the tensor.
template <class T>
void validate_finite(const Mat<T>& m, const std::string& name);
template <class T>
void validate_finite(std::span<const T> v, const std::string& name);

}  // namespace alore
