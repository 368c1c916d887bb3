#pragma once

#include "polyrank/matrix_polynomial.hpp"

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace polyrank {

/// Affine coefficient structure on the perturbation dA of an n-by-n,
/// degree-d matrix polynomial. Every coefficient slot (i,j,k) is either
/// free or fixed; fixed slots carry an offset value (zero for linear
/// structures, nonzero for affine ones such as enforced monic leading
/// coefficients).
class PerturbationStructure {
public:
  PerturbationStructure() : n_(0), d_(0) {}

  PerturbationStructure(int n, int d, bool allFree = false)
      : n_(n), d_(d),
        free_(static_cast<std::size_t>(slot_count(n, d)), allFree ? 1 : 0),
        offset_(static_cast<std::size_t>(slot_count(n, d)), 0.0) {}

  int size() const { return n_; }
  int degree() const { return d_; }

  bool isFree(int i, int j, int k) const { return free_[static_cast<std::size_t>(slot_index(n_, d_, i, j, k))] != 0; }
  double offset(int i, int j, int k) const { return offset_[static_cast<std::size_t>(slot_index(n_, d_, i, j, k))]; }

  void setFree(int i, int j, int k) {
    const auto s = static_cast<std::size_t>(slot_index(n_, d_, i, j, k));
    free_[s] = 1;
    offset_[s] = 0.0;
  }
  void setFixed(int i, int j, int k, double value = 0.0) {
    const auto s = static_cast<std::size_t>(slot_index(n_, d_, i, j, k));
    free_[s] = 0;
    offset_[s] = value;
  }

  int freeCount() const {
    int c = 0;
    for (auto f : free_) c += (f != 0);
    return c;
  }

  /// Flat slot indices of the free coefficients, in slot order.
  std::vector<int> freeSlots() const {
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(freeCount()));
    for (int s = 0; s < static_cast<int>(free_.size()); ++s)
      if (free_[static_cast<std::size_t>(s)] != 0) out.push_back(s);
    return out;
  }

  /// True when the slot can hold a nonzero value of A+dA: the slot is free,
  /// its fixed offset is nonzero, or A itself is nonzero there. Used for
  /// the structural (value-pattern) row reduction of minimal embeddings.
  bool slotActive(const MatrixPolynomial& A, int i, int j, int k) const {
    if (k < 0 || k > d_) return false;
    if (isFree(i, j, k)) return true;
    if (offset(i, j, k) != 0.0) return true;
    return A.coeff(i, j, k) != 0.0;
  }

  /// Materializes dA from its free coefficients (fixed slots take offsets).
  MatrixPolynomial assemble(const Vector& freeValues) const {
    MatrixPolynomial dA(n_, d_);
    int p = 0;
    for (int j = 0; j < n_; ++j)
      for (int i = 0; i < n_; ++i)
        for (int k = 0; k <= d_; ++k) {
          if (isFree(i, j, k))
            dA.coeffRef(i, j, k) = freeValues(p++);
          else
            dA.coeffRef(i, j, k) = offset(i, j, k);
        }
    if (p != freeValues.size()) throw std::invalid_argument("free coefficient vector has wrong length");
    return dA;
  }

  /// Extracts the free coefficients of dA in slot order.
  Vector extract(const MatrixPolynomial& dA) const {
    Vector v(freeCount());
    int p = 0;
    for (int j = 0; j < n_; ++j)
      for (int i = 0; i < n_; ++i)
        for (int k = 0; k <= d_; ++k)
          if (isFree(i, j, k)) v(p++) = dA.coeff(i, j, k);
    return v;
  }

  double offsetNormSq() const {
    double s = 0.0;
    for (double o : offset_) s += o * o;
    return s;
  }

private:
  int n_, d_;
  std::vector<std::uint8_t> free_;
  std::vector<double> offset_;
};

/// All coefficients up to the matrix degree bound are perturbable, except
/// inside rows/columns introduced by zero-padding a rectangular input.
inline PerturbationStructure structure_degree_preserving(const MatrixPolynomial& A) {
  PerturbationStructure s(A.size(), A.degree(), true);
  for (int i = 0; i < A.size(); ++i)
    for (int j = 0; j < A.size(); ++j)
      if (i >= A.originalRows() || j >= A.originalCols())
        for (int k = 0; k <= A.degree(); ++k) s.setFixed(i, j, k);
  return s;
}

/// A coefficient is perturbable exactly when it is nonzero in the input.
inline PerturbationStructure structure_support_preserving(const MatrixPolynomial& A) {
  PerturbationStructure s(A.size(), A.degree(), false);
  for (int i = 0; i < A.size(); ++i)
    for (int j = 0; j < A.size(); ++j)
      for (int k = 0; k <= A.degree(); ++k)
        if (A.coeff(i, j, k) != 0.0) s.setFree(i, j, k);
  return s;
}

enum class NormalizationKind {
  PivotUnit,        // pivot coefficient held at 1; constant row e_q
  ColumnUnitNorm,   // ||bhat||^2 = 1, row linearized at the current iterate
  MonicPivot,       // leading coefficient of the pivot entry held at 1
};

/// Pivot choice per kernel column: (entry index, coefficient index) within
/// the column's minimal embedding.
struct NormalizationSpec {
  NormalizationKind kind = NormalizationKind::PivotUnit;
  std::vector<std::pair<int, int>> pivots;
};

}  // namespace polyrank
