#include "alore/matrix.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace alore {

namespace {

template <class T>
using EigenRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
Eigen::Map<const EigenRM<T>> emap(const Mat<T>& m) {
  return Eigen::Map<const EigenRM<T>>(m.data.data(), m.rows, m.cols);
}

template <class T>
Eigen::Map<EigenRM<T>> emap(Mat<T>& m) {
  return Eigen::Map<EigenRM<T>>(m.data.data(), m.rows, m.cols);
}

}  // namespace

template <class T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul: inner dims differ, " + a.shape_str() + " x " + b.shape_str());
  }
  Mat<T> out(a.rows, b.cols);
  emap(out).noalias() = emap(a) * emap(b);
  return out;
}

template <class T>
Mat<T> matmul_tn(const Mat<T>& a, const Mat<T>& b) {
  if (a.rows != b.rows) {
    throw ShapeError("matmul_tn: row dims differ, " + a.shape_str() + " x " + b.shape_str());
  }
  Mat<T> out(a.cols, b.cols);
  emap(out).noalias() = emap(a).transpose() * emap(b);
  return out;
}

template <class T>
Mat<T> matmul_nt(const Mat<T>& a, const Mat<T>& b) {
  if (a.cols != b.cols) {
    throw ShapeError("matmul_nt: col dims differ, " + a.shape_str() + " x " + b.shape_str());
  }
  Mat<T> out(a.rows, b.rows);
  emap(out).noalias() = emap(a) * emap(b).transpose();
  return out;
}

template <class T>
Mat<T> kron(const Mat<T>& a, const Mat<T>& b) {
  Mat<T> out(a.rows * b.rows, a.cols * b.cols);
  for (int i = 0; i < a.rows; ++i) {
    for (int j = 0; j < a.cols; ++j) {
      const T aij = a(i, j);
      for (int p = 0; p < b.rows; ++p) {
        T* dst = out.row(i * b.rows + p) + static_cast<size_t>(j) * b.cols;
        const T* src = b.row(p);
        for (int q = 0; q < b.cols; ++q) dst[q] = aij * src[q];
      }
    }
  }
  return out;
}

template <class T>
Mat<T> layer_norm(const Mat<T>& x, std::span<const T> gamma, std::span<const T> beta, T eps) {
  if (static_cast<int>(gamma.size()) != x.cols || static_cast<int>(beta.size()) != x.cols) {
    throw ShapeError("layer_norm: gamma/beta length " + std::to_string(gamma.size()) + "/" +
                     std::to_string(beta.size()) + " vs cols " + std::to_string(x.cols));
  }
  if (!(eps > T(0))) throw ConfigError("layer_norm: eps must be positive");
  Mat<T> out(x.rows, x.cols);
  const int c = x.cols;
  for (int i = 0; i < x.rows; ++i) {
    const T* xi = x.row(i);
    T mean = T(0);
    for (int j = 0; j < c; ++j) mean += xi[j];
    mean /= static_cast<T>(c);
    T var = T(0);
    for (int j = 0; j < c; ++j) {
      const T dxx = xi[j] - mean;
      var += dxx * dxx;
    }
    var /= static_cast<T>(c);
    const T rstd = T(1) / std::sqrt(var + eps);
    T* oi = out.row(i);
    for (int j = 0; j < c; ++j) oi[j] = (xi[j] - mean) * rstd * gamma[j] + beta[j];
  }
  return out;
}

template <class T>
Mat<T> softmax_rows(const Mat<T>& x) {
  Mat<T> out(x.rows, x.cols);
  for (int i = 0; i < x.rows; ++i) {
    const T* xi = x.row(i);
    T mx = xi[0];
    for (int j = 1; j < x.cols; ++j) mx = std::max(mx, xi[j]);
    T sum = T(0);
    T* oi = out.row(i);
    for (int j = 0; j < x.cols; ++j) {
      oi[j] = std::exp(xi[j] - mx);
      sum += oi[j];
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < x.cols; ++j) oi[j] *= inv;
  }
  return out;
}

template <class T>
T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865476)));
}

template <class T>
T gelu_grad_scalar(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865476)));
  const T pdf = T(0.3989422804014327) * std::exp(T(-0.5) * x * x);
  return cdf + x * pdf;
}

template <class T>
Mat<T> gelu(const Mat<T>& x) {
  Mat<T> out(x.rows, x.cols);
  for (size_t i = 0; i < x.size(); ++i) out.data[i] = gelu_scalar(x.data[i]);
  return out;
}

template <class T>
Mat<T> randn(int rows, int cols, T std_dev, Rng& rng) {
  if (std_dev < T(0)) throw ConfigError("randn: std must be >= 0");
  Mat<T> out(rows, cols);
  for (auto& v : out.data) v = static_cast<T>(rng.next_normal()) * std_dev;
  return out;
}

template <class T>
Mat<T> transpose(const Mat<T>& a) {
  Mat<T> out(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) out(j, i) = a(i, j);
  return out;
}

template <class T>
void add_inplace(Mat<T>& a, const Mat<T>& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("add: shapes differ, " + a.shape_str() + " vs " + b.shape_str());
  }
  for (size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
}

template <class T>
void validate_finite(std::span<const T> v, const std::string& name) {
  for (size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(static_cast<double>(v[i]))) {
      throw DataError("non-finite value in tensor '" + name + "' at flat index " +
                      std::to_string(i));
    }
  }
}

template <class T>
void validate_finite(const Mat<T>& m, const std::string& name) {
  validate_finite(std::span<const T>(m.data), name);
}

#define ALORE_INSTANTIATE(T)                                                                  \
  template Mat<T> matmul<T>(const Mat<T>&, const Mat<T>&);                                    \
  template Mat<T> matmul_tn<T>(const Mat<T>&, const Mat<T>&);                                 \
  template Mat<T> matmul_nt<T>(const Mat<T>&, const Mat<T>&);                                 \
  template Mat<T> kron<T>(const Mat<T>&, const Mat<T>&);                                      \
  template Mat<T> layer_norm<T>(const Mat<T>&, std::span<const T>, std::span<const T>, T);    \
  template Mat<T> softmax_rows<T>(const Mat<T>&);                                             \
  template Mat<T> gelu<T>(const Mat<T>&);                                                     \
  template T gelu_scalar<T>(T);                                                               \
  template T gelu_grad_scalar<T>(T);                                                          \
  template Mat<T> randn<T>(int, int, T, Rng&);                                                \
  template Mat<T> transpose<T>(const Mat<T>&);                                                \
  template void add_inplace<T>(Mat<T>&, const Mat<T>&);                                       \
  template void validate_finite<T>(const Mat<T>&, const std::string&);                        \
  template void validate_finite<T>(std::span<const T>, const std::string&);

ALORE_INSTANTIATE(float)
ALORE_INSTANTIATE(double)
#undef ALORE_INSTANTIATE

}  // namespace alore
