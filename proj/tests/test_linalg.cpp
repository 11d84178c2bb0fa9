#include <doctest.h>

#include <cmath>

#include "alore/matrix.hpp"

using namespace alore;

namespace {

Matrix random_matrix(int r, int c, Rng& rng, double scale = 1.0) {
  return randn<double>(r, c, scale, rng);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  REQUIRE(a.same_shape(b));
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace

TEST_CASE("matmul identity and hand-expanded product") {
  Matrix ident = Matrix::identity(3);
  Rng rng(1);
  Matrix m = random_matrix(3, 5, rng);
  CHECK(max_abs_diff(matmul(ident, m), m) == 0.0);

  Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  Matrix b = Matrix::from_rows({{1}, {1}});
  Matrix p = matmul(a, b);
  CHECK(p.rows == 2);
  CHECK(p.cols == 1);
  CHECK(p(0, 0) == doctest::Approx(3.0));
  CHECK(p(1, 0) == doctest::Approx(7.0));
}

TEST_CASE("matmul shape error names both shapes") {
  Matrix a(2, 3), b(2, 3);
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("2x3"), ShapeError);
}

TEST_CASE("matmul associativity on random 8x8 chains") {
  Rng rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    Matrix a = random_matrix(8, 8, rng);
    Matrix b = random_matrix(8, 8, rng);
    Matrix c = random_matrix(8, 8, rng);
    CHECK(max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) < 1e-9);
  }
}

TEST_CASE("kron identity blocks") {
  Rng rng(3);
  Matrix m = random_matrix(2, 3, rng);
  Matrix k = kron(Matrix::identity(2), m);
  CHECK(k.rows == 4);
  CHECK(k.cols == 6);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 3; ++j) {
      CHECK(k(i, j) == m(i, j));
      CHECK(k(i + 2, j + 3) == m(i, j));
      CHECK(k(i, j + 3) == 0.0);
      CHECK(k(i + 2, j) == 0.0);
    }
  }
}

TEST_CASE("kron elementwise expansion oracle") {
  Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  Matrix b = Matrix::from_rows({{0, 5}, {6, 7}});
  Matrix k = kron(a, b);
  Matrix expected = Matrix::from_rows({{0, 5, 0, 10},
                                       {6, 7, 12, 14},
                                       {0, 15, 0, 20},
                                       {18, 21, 24, 28}});
  CHECK(max_abs_diff(k, expected) == 0.0);
}

TEST_CASE("kron of identities is the identity, exactly") {
  Matrix k = kron(Matrix::identity(3), Matrix::identity(4));
  Matrix expected = Matrix::identity(12);
  CHECK(max_abs_diff(k, expected) == 0.0);
}

TEST_CASE("kron mixed-product identity against matmul oracle") {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix a = random_matrix(2, 2, rng);
    Matrix b = random_matrix(2, 2, rng);
    Matrix c = random_matrix(2, 2, rng);
    Matrix d = random_matrix(2, 2, rng);
    Matrix lhs = matmul(kron(a, b), kron(c, d));
    Matrix rhs = kron(matmul(a, c), matmul(b, d));
    CHECK(max_abs_diff(lhs, rhs) < 1e-10);
  }
}

TEST_CASE("layer_norm basics") {
  std::vector<double> ones(4, 1.0), zeros(4, 0.0);

  Matrix constant(1, 4);
  for (int j = 0; j < 4; ++j) constant(0, j) = 3.25;
  Matrix y = layer_norm(constant, std::span<const double>(ones),
                        std::span<const double>(zeros), 1e-6);
  for (int j = 0; j < 4; ++j) CHECK(y(0, j) == doctest::Approx(0.0));

  Rng rng(5);
  Matrix x = random_matrix(3, 4, rng);
  Matrix normed = layer_norm(x, std::span<const double>(ones),
                             std::span<const double>(zeros), 1e-6);
  for (int i = 0; i < 3; ++i) {
    double mean = 0.0;
    for (int j = 0; j < 4; ++j) mean += normed(i, j);
    CHECK(std::abs(mean / 4) < 1e-9);
  }

  std::vector<double> beta_c(4, -1.5);
  Matrix shifted = layer_norm(x, std::span<const double>(zeros),
                              std::span<const double>(beta_c), 1e-6);
  for (size_t i = 0; i < shifted.size(); ++i) CHECK(shifted.data[i] == -1.5);

  std::vector<double> short_gamma(3, 1.0);
  CHECK_THROWS_AS(layer_norm(x, std::span<const double>(short_gamma),
                             std::span<const double>(zeros), 1e-6),
                  ShapeError);
}

TEST_CASE("softmax_rows symmetry, stability, shift invariance") {
  Matrix equal(1, 5);
  for (int j = 0; j < 5; ++j) equal(0, j) = 2.0;
  Matrix s = softmax_rows(equal);
  for (int j = 0; j < 5; ++j) CHECK(s(0, j) == doctest::Approx(0.2));

  Matrix big = Matrix::from_rows({{1000.0, 0.0}});
  Matrix sb = softmax_rows(big);
  CHECK(sb(0, 0) == doctest::Approx(1.0));
  CHECK(sb(0, 1) == doctest::Approx(0.0));
  CHECK(std::isfinite(sb(0, 0)));

  Rng rng(6);
  Matrix x = random_matrix(4, 6, rng);
  Matrix shifted = x;
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 6; ++j) shifted(i, j) += 7.5;
  }
  Matrix s1 = softmax_rows(x);
  Matrix s2 = softmax_rows(shifted);
  for (size_t i = 0; i < s1.size(); ++i) CHECK(std::abs(s1.data[i] - s2.data[i]) < 1e-12);

  for (int i = 0; i < 4; ++i) {
    double sum = 0.0;
    for (int j = 0; j < 6; ++j) {
      sum += s1(i, j);
      CHECK(s1(i, j) >= 0.0);
    }
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
}

TEST_CASE("gelu values and asymptotes") {
  Matrix x = Matrix::from_rows({{0.0, 10.0, -10.0}});
  Matrix y = gelu(x);
  CHECK(y(0, 0) == 0.0);
  CHECK(std::abs(y(0, 1) - 10.0) < 1e-6);
  CHECK(std::abs(y(0, 2)) < 1e-6);
}

TEST_CASE("randn determinism and statistics") {
  Rng rng(7);
  Matrix zero = randn<double>(4, 4, 0.0, rng);
  for (double v : zero.data) CHECK(v == 0.0);

  Rng a(99), b(99);
  Matrix ma = randn<double>(8, 8, 1.0, a);
  Matrix mb = randn<double>(8, 8, 1.0, b);
  CHECK(max_abs_diff(ma, mb) == 0.0);

  Rng big(123);
  Matrix samples = randn<double>(1000, 100, 1.0, big);
  double mean = 0.0;
  for (double v : samples.data) mean += v;
  mean /= samples.size();
  double var = 0.0;
  for (double v : samples.data) var += (v - mean) * (v - mean);
  var /= samples.size();
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(std::sqrt(var) - 1.0) < 0.02);
}

TEST_CASE("ops are pure: identical rng state gives identical output") {
  Rng r1(11);
  r1.next_u64();
  Rng r2 = r1;  // same seed and counter
  Matrix m1 = randn<double>(3, 3, 0.5, r1);
  Matrix m2 = randn<double>(3, 3, 0.5, r2);
  CHECK(max_abs_diff(m1, m2) == 0.0);
  CHECK(r1.counter == r2.counter);
}

TEST_CASE("matrix invariants") {
  CHECK_THROWS_AS(Matrix(0, 3), ShapeError);
  CHECK_THROWS_AS(Matrix(2, -1), ShapeError);
  Matrix m(2, 3);
  CHECK(m.size() == 6);

  Matrix bad(1, 2);
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(validate_finite(bad, "w"), DataError);
  CHECK_THROWS_WITH_AS(validate_finite(bad, "w"), doctest::Contains("'w'"), DataError);
}
