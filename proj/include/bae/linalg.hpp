#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace bae {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix from_data(std::size_t rows, std::size_t cols, std::vector<double> data);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  Matrix transposed() const;
  bool all_finite() const;

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Products. The *_nt / *_tn variants transpose the second / first operand
// without materialising the transpose.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Vector matvec(const Matrix& a, std::span<const double> x);

Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);
Matrix& operator+=(Matrix& a, const Matrix& b);
Matrix& operator-=(Matrix& a, const Matrix& b);
Matrix& operator*=(Matrix& a, double s);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
double frobenius_norm(const Matrix& a);
double frobenius_dot(const Matrix& a, const Matrix& b);
double max_abs(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);
double trace(const Matrix& a);
Matrix symmetrized(const Matrix& a);
Matrix outer(std::span<const double> u, std::span<const double> v);

/// Eigendecomposition of a symmetric matrix. Eigenvalues are sorted by
/// descending magnitude and eigenvectors are the matching columns of
/// `vectors`, each with its first non-negligible component made positive.
struct SymEigen {
  Vector values;
  Matrix vectors;
};

/// Throws NonSymmetric when max|A - A^T| > 1e-9 * max|A| and NoConvergence
/// when the iteration cap is hit. Cyclic Jacobi for m <= 64, Householder
/// tridiagonalisation with implicit-shift QL above that.
SymEigen sym_eigendecompose(const Matrix& a, double tol = 1e-14);

/// Random orthogonal matrix: orthonormal rows when rows <= cols, otherwise
/// orthonormal columns. Bitwise deterministic for a given seed.
Matrix orthogonal_init(std::size_t rows, std::size_t cols, std::uint64_t seed);

struct NewtonSchulzOptions {
  std::size_t iterations = 5;
  // Cubic refinement after the quintic phase drives every non-negligible
  // singular value to 1. Optimiser updates turn it off.
  bool polish = true;
};

/// Approximates the orthogonal polar factor U V^T of G. Throws ZeroMatrix
/// when ||G||_F == 0.
Matrix newton_schulz_orthogonalize(const Matrix& g, const NewtonSchulzOptions& options = {});
Matrix newton_schulz_orthogonalize(const Matrix& g, std::size_t iterations);

/// I_x(a, b) by Lentz's continued fraction. Throws DomainError outside
/// a > 0, b > 0, x in [0, 1].
double regularized_incomplete_beta(double a, double b, double x);

/// ln I_x(a, b), finite far below the double underflow threshold.
double log_regularized_incomplete_beta(double a, double b, double x);

/// Optimal assignment on a square cost matrix. result[i] is the column
/// assigned to row i.
std::vector<std::size_t> hungarian_assignment(const Matrix& cost, bool maximize);

double assignment_objective(const Matrix& cost, std::span<const std::size_t> perm);

}  // namespace bae
