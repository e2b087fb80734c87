#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "tprop/errors.hpp"
#include "tprop/rng.hpp"

namespace tprop {

/// Dense row-major matrix of doubles. Batches of samples are stored
/// column-stacked: a (features x batch) matrix holds one sample per column.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("Matrix: data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(rows_, cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("Matrix: ragged initializer list");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape() const { return shape_string(rows_, cols_); }
  static std::string shape_string(std::size_t r, std::size_t c) {
    return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
  }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  template <typename F>
  Matrix map(F&& f) const {
    Matrix out(rows_, cols_);
    std::transform(data_.begin(), data_.end(), out.data_.begin(), f);
    return out;
  }

  Matrix& operator+=(const Matrix& o) {
    require_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& o) {
    require_same(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Matrix& operator*=(double s) noexcept {
    for (double& v : data_) v *= s;
    return *this;
  }
  friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
  friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
  friend Matrix operator*(Matrix a, double s) { return a *= s; }
  friend Matrix operator*(double s, Matrix a) { return a *= s; }

  // Bitwise equality of shape and contents.
  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  using EigenMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<EigenMat> eigen() noexcept {
    return {data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
  }
  Eigen::Map<const EigenMat> eigen() const noexcept {
    return {data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
  }

 private:
  void require_same(const Matrix& o, const char* op) const {
    if (!same_shape(o)) throw DimensionError(std::string("Matrix ") + op + ": " + shape() + " vs " + o.shape());
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Dense vector of doubles (a single sample, a bias, a spectrum).
class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t n, double fill = 0.0) : data_(n, fill) {}
  explicit Vector(std::vector<double> data) : data_(std::move(data)) {}
  Vector(std::initializer_list<double> values) : data_(values) {}

  /// Copies the single column of an (n x 1) matrix.
  static Vector from_column(const Matrix& m) {
    if (m.cols() != 1) throw DimensionError("Vector::from_column: expected one column, got " + m.shape());
    return Vector(std::vector<double>(m.data().begin(), m.data().end()));
  }

  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  Matrix as_column() const { return Matrix(data_.size(), 1, data_); }

  friend bool operator==(const Vector& a, const Vector& b) { return a.data_ == b.data_; }

 private:
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Products

inline void require_product(std::size_t inner_a, std::size_t inner_b, const Matrix& a,
                            const Matrix& b, const char* op) {
  if (inner_a != inner_b) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + a.shape() + " and " + b.shape());
  }
}

/// a * b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  require_product(a.cols(), b.rows(), a, b, "matmul");
  Matrix out(a.rows(), b.cols());
  if (a.cols() == 0) return out;
  out.eigen().noalias() = a.eigen() * b.eigen();
  return out;
}

/// a^T * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require_product(a.rows(), b.rows(), a, b, "matmul_tn");
  Matrix out(a.cols(), b.cols());
  if (a.rows() == 0) return out;
  out.eigen().noalias() = a.eigen().transpose() * b.eigen();
  return out;
}

/// a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require_product(a.cols(), b.cols(), a, b, "matmul_nt");
  Matrix out(a.rows(), b.rows());
  if (a.cols() == 0) return out;
  out.eigen().noalias() = a.eigen() * b.eigen().transpose();
  return out;
}

inline Vector matvec(const Matrix& a, const Vector& x) {
  return Vector::from_column(matmul(a, x.as_column()));
}

/// Adds `bias` to every column of `m`.
inline void add_to_columns(Matrix& m, const Vector& bias) {
  if (bias.size() != m.rows()) {
    throw DimensionError("add_to_columns: bias length " + std::to_string(bias.size()) +
                         " vs matrix " + m.shape());
  }
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double v = bias[r];
    for (double& x : m.row(r)) x += v;
  }
}

/// Sum across columns (e.g. reduce a per-sample gradient over the batch).
inline Vector row_sums(const Matrix& m) {
  Vector out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double s = 0.0;
    for (double x : m.row(r)) s += x;
    out[r] = s;
  }
  return out;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw DimensionError("hadamard: " + a.shape() + " vs " + b.shape());
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  return out;
}

/// Trace inner product <a, b> = sum_ij a_ij b_ij.
inline double frobenius_dot(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw DimensionError("frobenius_dot: " + a.shape() + " vs " + b.shape());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

inline double squared_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}
inline double frobenius_norm(const Matrix& a) { return std::sqrt(squared_norm(a.data())); }
inline double norm(const Vector& v) { return std::sqrt(squared_norm(v.data())); }

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Column j of m as a Vector.
inline Vector column(const Matrix& m, std::size_t j) {
  Vector v(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) v[r] = m(r, j);
  return v;
}

inline Matrix diagonal(const Vector& d) {
  Matrix m(d.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
  return m;
}

/// Inverse of a square matrix by partially pivoted LU. Throws NumericalError
/// when the matrix is numerically singular.
inline Matrix inverse(const Matrix& a) {
  if (a.rows() != a.cols()) throw DimensionError("inverse: matrix not square " + a.shape());
  Eigen::PartialPivLU<Matrix::EigenMat> lu(a.eigen());
  const double det = lu.determinant();
  if (!std::isfinite(det) || det == 0.0) throw NumericalError("inverse: singular matrix " + a.shape());
  Matrix out(a.rows(), a.cols());
  out.eigen() = lu.inverse();
  if (!all_finite(out.data())) throw NumericalError("inverse: non-finite result");
  return out;
}

// ---------------------------------------------------------------------------
// Random construction

inline Vector gaussian_noise(std::size_t len, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) throw ParameterError("gaussian_noise: sigma must be >= 0, got " + std::to_string(sigma));
  Vector v(len);
  if (sigma == 0.0) return v;
  for (double& x : v) x = sigma * rng.normal();
  return v;
}

inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) throw ParameterError("gaussian_matrix: sigma must be >= 0, got " + std::to_string(sigma));
  Matrix m(rows, cols);
  if (sigma == 0.0) return m;
  for (double& x : m.data()) x = sigma * rng.normal();
  return m;
}

/// gain * Q, where Q comes from the QR factorisation of a Gaussian matrix with
/// the signs of R's diagonal forced positive. Q has orthonormal rows when
/// rows <= cols and orthonormal columns otherwise.
inline Matrix orthogonal_init(std::size_t rows, std::size_t cols, double gain, Rng& rng) {
  if (rows == 0 || cols == 0) throw ParameterError("orthogonal_init: shape must be nonempty");
  const bool wide = rows < cols;
  const std::size_t tall_rows = wide ? cols : rows;
  const std::size_t tall_cols = wide ? rows : cols;
  const Matrix g = gaussian_matrix(tall_rows, tall_cols, 1.0, rng);

  Eigen::HouseholderQR<Matrix::EigenMat> qr(g.eigen());
  Matrix::EigenMat q = qr.householderQ() * Matrix::EigenMat::Identity(
                                               static_cast<Eigen::Index>(tall_rows),
                                               static_cast<Eigen::Index>(tall_cols));
  const auto& r = qr.matrixQR();
  for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(tall_cols); ++j) {
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  }
  Matrix out(tall_rows, tall_cols);
  out.eigen() = q * gain;
  return wide ? out.transposed() : out;
}

// ---------------------------------------------------------------------------
// Spectra

/// Singular values in nonincreasing order by one-sided (Hestenes) Jacobi:
/// plane rotations orthogonalise the columns, whose norms are then the
/// singular values.
inline Vector svd_singular_values(const Matrix& a, int max_sweeps = 80) {
  if (a.empty()) throw ParameterError("svd_singular_values: empty matrix");
  // Work on the orientation with at least as many rows as columns.
  Matrix work = a.rows() >= a.cols() ? a : a.transposed();
  const std::size_t m = work.rows();
  const std::size_t n = work.cols();
  // Column-major copy keeps the column sweeps contiguous.
  std::vector<std::vector<double>> col(n, std::vector<double>(m));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) col[j][i] = work(i, j);

  constexpr double tol = 1e-15;
  bool converged = false;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += col[p][i] * col[p][i];
          beta += col[q][i] * col[q][i];
          gamma += col[p][i] * col[q][i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double xp = col[p][i];
          const double xq = col[q][i];
          col[p][i] = c * xp - s * xq;
          col[q][i] = s * xp + c * xq;
        }
      }
    }
  }
  if (!converged) throw NumericalError("svd_singular_values: no convergence after " + std::to_string(max_sweeps) + " sweeps");

  Vector sv(n);
  for (std::size_t j = 0; j < n; ++j) sv[j] = std::sqrt(squared_norm(col[j]));
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

/// Largest (algebraic) eigenvalue of a symmetric matrix by power iteration on
/// the Gershgorin-shifted matrix A + sI, which is positive semidefinite.
inline double largest_eigenvalue_sym(const Matrix& a, int max_iter = 200000) {
  if (a.rows() != a.cols() || a.empty()) throw ParameterError("largest_eigenvalue_sym: matrix must be square, got " + a.shape());
  const std::size_t n = a.rows();
  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row_abs = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (std::abs(a(i, j) - a(j, i)) > 1e-10) {
        throw ParameterError("largest_eigenvalue_sym: matrix is not symmetric");
      }
      row_abs += std::abs(a(i, j));
    }
    scale = std::max(scale, row_abs);
  }
  if (scale == 0.0) return 0.0;

  // Normalise so the iteration is scale-free, then shift by the Gershgorin bound.
  Matrix b = a * (1.0 / scale);
  for (std::size_t i = 0; i < n; ++i) b(i, i) += 1.0;

  Rng start(0x7e11a5ULL);
  Vector v(n);
  for (double& x : v) x = 1.0 + 0.5 * start.uniform();
  double vn = norm(v);
  for (double& x : v) x /= vn;

  double mu = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    Vector w = matvec(b, v);
    double next = 0.0;
    for (std::size_t i = 0; i < n; ++i) next += v[i] * w[i];  // Rayleigh quotient
    const double wn = norm(w);
    if (wn == 0.0) return (0.0 - 1.0) * scale;
    for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / wn;
    if (it > 0 && std::abs(next - mu) <= 1e-15 * std::max(1.0, std::abs(next))) {
      return (next - 1.0) * scale;
    }
    mu = next;
  }
  throw NumericalError("largest_eigenvalue_sym: power iteration did not converge");
}

}  // namespace tprop
