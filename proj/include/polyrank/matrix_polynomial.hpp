#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

namespace polyrank {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// A column vector of univariate real polynomials with explicit per-entry
/// degree bounds. An entry with an empty coefficient list is identically
/// zero and carries degree bound -1 (fixed-zero entries of a structured
/// kernel are represented this way).
class PolyVector {
public:
  PolyVector() = default;

  explicit PolyVector(std::vector<Vector> entries) : entries_(std::move(entries)) {}

  /// n entries, each with degree bound `deg` (deg+1 zero coefficients).
  PolyVector(int n, int deg) {
    entries_.assign(static_cast<std::size_t>(n), Vector::Zero(deg + 1));
  }

  int size() const { return static_cast<int>(entries_.size()); }

  /// Degree bound of entry i; -1 for a fixed-zero entry.
  int degree(int i) const { return static_cast<int>(entries_[static_cast<std::size_t>(i)].size()) - 1; }

  /// Largest entry degree bound (-1 when all entries are empty).
  int maxDegree() const {
    int d = -1;
    for (int i = 0; i < size(); ++i) d = std::max(d, degree(i));
    return d;
  }

  const Vector& entry(int i) const { return entries_[static_cast<std::size_t>(i)]; }
  Vector& entry(int i) { return entries_[static_cast<std::size_t>(i)]; }

  /// Coefficient of t^k in entry i; zero outside the stored bound.
  double coeff(int i, int k) const {
    const Vector& e = entries_[static_cast<std::size_t>(i)];
    return (k >= 0 && k < e.size()) ? e(k) : 0.0;
  }

  double normSq() const {
    double s = 0.0;
    for (const auto& e : entries_) s += e.squaredNorm();
    return s;
  }
  double norm() const { return std::sqrt(normSq()); }

  bool isZero(double tol = 0.0) const {
    for (const auto& e : entries_)
      for (Eigen::Index k = 0; k < e.size(); ++k)
        if (std::abs(e(k)) > tol) return false;
    return true;
  }

  PolyVector scaled(double s) const {
    PolyVector out = *this;
    for (auto& e : out.entries_) e *= s;
    return out;
  }

  /// Drops trailing coefficients with magnitude <= tol from every entry.
  PolyVector trimmed(double tol = 0.0) const {
    PolyVector out = *this;
    for (auto& e : out.entries_) {
      Eigen::Index last = -1;
      for (Eigen::Index k = 0; k < e.size(); ++k)
        if (std::abs(e(k)) > tol) last = k;
      e.conservativeResize(last + 1);
    }
    return out;
  }

private:
  std::vector<Vector> entries_;
};

/// An n-by-n real matrix polynomial A_0 + A_1 t + ... + A_d t^d stored as
/// dense coefficient matrices. Rectangular inputs are zero-padded to square
/// on ingestion; the original shape is retained so that structure builders
/// can pin the padding at zero. The degree bound d is explicit and never
/// re-derived from trailing zero coefficients.
class MatrixPolynomial {
public:
  MatrixPolynomial() : n_(0), origRows_(0), origCols_(0) {}

  MatrixPolynomial(int n, int deg) : n_(n), origRows_(n), origCols_(n) {
    coeffs_.assign(static_cast<std::size_t>(deg + 1), Matrix::Zero(n, n));
  }

  /// Builds from coefficient matrices, padding rectangular input with zeros.
  static MatrixPolynomial fromCoefficients(const std::vector<Matrix>& coeffs) {
    if (coeffs.empty()) throw std::invalid_argument("matrix polynomial needs at least one coefficient");
    const int m = static_cast<int>(coeffs.front().rows());
    const int c = static_cast<int>(coeffs.front().cols());
    for (const auto& C : coeffs)
      if (C.rows() != m || C.cols() != c)
        throw std::invalid_argument("coefficient matrices must share one shape");
    const int n = std::max(m, c);
    MatrixPolynomial A(n, static_cast<int>(coeffs.size()) - 1);
    A.origRows_ = m;
    A.origCols_ = c;
    for (std::size_t k = 0; k < coeffs.size(); ++k) A.coeffs_[k].topLeftCorner(m, c) = coeffs[k];
    return A;
  }

  int size() const { return n_; }
  int degree() const { return static_cast<int>(coeffs_.size()) - 1; }
  int originalRows() const { return origRows_; }
  int originalCols() const { return origCols_; }

  const Matrix& coefficient(int k) const { return coeffs_[static_cast<std::size_t>(k)]; }
  Matrix& coefficient(int k) { return coeffs_[static_cast<std::size_t>(k)]; }

  double coeff(int i, int j, int k) const {
    return (k >= 0 && k <= degree()) ? coeffs_[static_cast<std::size_t>(k)](i, j) : 0.0;
  }
  double& coeffRef(int i, int j, int k) { return coeffs_[static_cast<std::size_t>(k)](i, j); }

  /// Degree of entry (i,j) by its nonzero pattern; -1 for a zero entry.
  int entryDegree(int i, int j) const {
    for (int k = degree(); k >= 0; --k)
      if (coeffs_[static_cast<std::size_t>(k)](i, j) != 0.0) return k;
    return -1;
  }

  double frobeniusNormSq() const {
    double s = 0.0;
    for (const auto& C : coeffs_) s += C.squaredNorm();
    return s;
  }
  double frobeniusNorm() const { return std::sqrt(frobeniusNormSq()); }

  MatrixPolynomial operator+(const MatrixPolynomial& other) const {
    if (other.n_ != n_) throw std::invalid_argument("dimension mismatch");
    MatrixPolynomial out(n_, std::max(degree(), other.degree()));
    for (int k = 0; k <= out.degree(); ++k) {
      if (k <= degree()) out.coeffs_[static_cast<std::size_t>(k)] += coefficient(k);
      if (k <= other.degree()) out.coeffs_[static_cast<std::size_t>(k)] += other.coefficient(k);
    }
    return out;
  }

  MatrixPolynomial operator-(const MatrixPolynomial& other) const {
    return *this + other.scaled(-1.0);
  }

  MatrixPolynomial scaled(double s) const {
    MatrixPolynomial out = *this;
    for (auto& C : out.coeffs_) C *= s;
    return out;
  }

  /// Exact polynomial matrix-vector product A*b.
  PolyVector apply(const PolyVector& b) const {
    if (b.size() != n_) throw std::invalid_argument("dimension mismatch in polynomial product");
    const int outDeg = degree() + std::max(b.maxDegree(), 0);
    std::vector<Vector> out(static_cast<std::size_t>(n_), Vector::Zero(outDeg + 1));
    for (int i = 0; i < n_; ++i)
      for (int l = 0; l < n_; ++l) {
        const Vector& bl = b.entry(l);
        for (int k = 0; k < bl.size(); ++k) {
          if (bl(k) == 0.0) continue;
          for (int c = 0; c <= degree(); ++c) out[static_cast<std::size_t>(i)](c + k) += coeff(i, l, c) * bl(k);
        }
      }
    return PolyVector(std::move(out));
  }

private:
  int n_;
  int origRows_, origCols_;
  std::vector<Matrix> coeffs_;
};

inline double frobenius_norm(const MatrixPolynomial& A) { return A.frobeniusNorm(); }

inline PolyVector apply(const MatrixPolynomial& A, const PolyVector& b) { return A.apply(b); }

/// Number of scalar coefficient slots of an n-by-n, degree-d polynomial.
inline int slot_count(int n, int d) { return n * n * (d + 1); }

/// Linear index of coefficient slot (i,j,k): columns stacked left to right,
/// each entry contributing its d+1 coefficients contiguously.
inline int slot_index(int n, int d, int i, int j, int k) { return j * n * (d + 1) + i * (d + 1) + k; }

/// Stacks all coefficients in slot order into one vector.
inline Vector vectorize(const MatrixPolynomial& A) {
  const int n = A.size(), d = A.degree();
  Vector v(slot_count(n, d));
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i)
      for (int k = 0; k <= d; ++k) v(slot_index(n, d, i, j, k)) = A.coeff(i, j, k);
  return v;
}

inline MatrixPolynomial unvectorize(const Vector& v, int n, int d) {
  if (v.size() != slot_count(n, d)) throw std::invalid_argument("vector length does not match shape");
  MatrixPolynomial A(n, d);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i)
      for (int k = 0; k <= d; ++k) A.coeffRef(i, j, k) = v(slot_index(n, d, i, j, k));
  return A;
}

/// Convolution c = a*b of scalar coefficient vectors.
inline Vector convolve(const Vector& a, const Vector& b) {
  if (a.size() == 0 || b.size() == 0) return Vector();
  Vector c = Vector::Zero(a.size() + b.size() - 1);
  for (Eigen::Index i = 0; i < a.size(); ++i)
    for (Eigen::Index j = 0; j < b.size(); ++j) c(i + j) += a(i) * b(j);
  return c;
}

}  // namespace polyrank
