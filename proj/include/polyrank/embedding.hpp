#pragma once

#include "polyrank/matrix_polynomial.hpp"
#include "polyrank/structure.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

namespace polyrank {

/// Convolution matrix of a scalar polynomial: (mu + deg) x mu, column c
/// holding the coefficients shifted down by c rows, so that
/// vec(a*b) = phi(a) * vec(b) for every b of degree < mu. The coefficient
/// list fixes the degree bound; trailing zeros widen the matrix on purpose.
inline Matrix phi(const Vector& coeffs, int mu) {
  if (mu < 1) throw std::invalid_argument("phi needs mu >= 1");
  const int da = static_cast<int>(coeffs.size()) - 1;
  Matrix T = Matrix::Zero(mu + da, mu);
  for (int c = 0; c < mu; ++c)
    for (int k = 0; k <= da; ++k) T(c + k, c) = coeffs(k);
  return T;
}

/// Block-Toeplitz real embedding of a matrix polynomial: the n-by-n grid of
/// phi(A_ij) blocks, with mu = n*d + 1 so that every kernel vector of a
/// singular polynomial fits (degree lemma). Satisfies
/// ||matrix||_F^2 = mu * ||A||_F^2 and vec(A*b) = matrix * vec(b).
struct REmbedding {
  Matrix matrix;
  int n = 0, d = 0, mu = 0;

  int rows() const { return n * (mu + d); }
  int cols() const { return n * mu; }
};

inline REmbedding r_embed(const MatrixPolynomial& A) {
  REmbedding E;
  E.n = A.size();
  E.d = A.degree();
  E.mu = E.n * E.d + 1;
  E.matrix = Matrix::Zero(E.rows(), E.cols());
  for (int i = 0; i < E.n; ++i)
    for (int l = 0; l < E.n; ++l)
      for (int c = 0; c < E.mu; ++c)
        for (int k = 0; k <= E.d; ++k) E.matrix(i * (E.mu + E.d) + c + k, l * E.mu + c) = A.coeff(i, l, k);
  return E;
}

/// Stacked coefficient vector (b_{1,0},...,b_{1,mu-1},...,b_{n,mu-1}).
inline Vector r_embed_vector(const PolyVector& b, int mu) {
  Vector v = Vector::Zero(static_cast<Eigen::Index>(b.size()) * mu);
  for (int l = 0; l < b.size(); ++l) {
    if (b.degree(l) >= mu) throw std::invalid_argument("kernel entry degree exceeds embedding width");
    for (int k = 0; k <= b.degree(l); ++k) v(l * mu + k) = b.coeff(l, k);
  }
  return v;
}

inline PolyVector unembed_vector(const Vector& v, int n, int mu) {
  if (v.size() != static_cast<Eigen::Index>(n) * mu) throw std::invalid_argument("embedded vector length mismatch");
  std::vector<Vector> entries(static_cast<std::size_t>(n));
  for (int l = 0; l < n; ++l) entries[static_cast<std::size_t>(l)] = v.segment(l * mu, mu);
  return PolyVector(std::move(entries));
}

/// Per-entry degree bounds of one kernel column; -1 marks an entry that is
/// identically zero (CREF displacement structure). Individual coefficients
/// below a bound can additionally be pinned at zero.
struct KernelShape {
  std::vector<int> degBounds;
  std::vector<std::pair<int, int>> pinnedZero;  // (entry, coefficient) held at 0

  int freeCount() const {
    int c = 0;
    for (int d : degBounds) c += d + 1;
    return c - static_cast<int>(pinnedZero.size());
  }
  bool pinned(int l, int k) const {
    for (const auto& [pl, pk] : pinnedZero)
      if (pl == l && pk == k) return true;
    return false;
  }
  static KernelShape uniform(int n, int deg) {
    return KernelShape{std::vector<int>(static_cast<std::size_t>(n), deg), {}};
  }
  static KernelShape of(const PolyVector& b) {
    KernelShape s;
    s.degBounds.reserve(static_cast<std::size_t>(b.size()));
    for (int i = 0; i < b.size(); ++i) s.degBounds.push_back(b.degree(i));
    return s;
  }
};

/// One kernel column's reduced linear system. Columns are exactly the free
/// kernel coefficients under the degree bounds; rows are the equations that
/// are not identically zero as functionals of the free unknowns. The row
/// reduction is structural (computed from the zero pattern of A and the
/// perturbation mask, never from iterate values), so the layout is fixed
/// over a whole solve.
struct MinimalEmbedding {
  int n = 0, d = 0, mu = 0;
  KernelShape shape;
  std::vector<std::pair<int, int>> cols;  // (entry l, coefficient k)
  std::vector<std::pair<int, int>> rows;  // (block row i, power s)
  std::vector<std::vector<int>> colIndex; // [l][k] -> column position, -1 if absent
  Matrix A0;                              // reduced embedding of the unperturbed input

  int rowCount() const { return static_cast<int>(rows.size()); }
  int colCount() const { return static_cast<int>(cols.size()); }

  /// Value lookup of an embedded kernel coefficient, zero where fixed.
  double kernelValue(const Vector& bhat, int l, int k) const {
    if (l < 0 || l >= n || k < 0) return 0.0;
    if (k >= static_cast<int>(colIndex[static_cast<std::size_t>(l)].size())) return 0.0;
    const int c = colIndex[static_cast<std::size_t>(l)][static_cast<std::size_t>(k)];
    return c >= 0 ? bhat(c) : 0.0;
  }

  /// Reduced embedding of any polynomial with matching shape metadata.
  Matrix reducedEmbedding(const MatrixPolynomial& X) const {
    Matrix M = Matrix::Zero(rowCount(), colCount());
    for (int r = 0; r < rowCount(); ++r) {
      const auto [i, s] = rows[static_cast<std::size_t>(r)];
      for (int c = 0; c < colCount(); ++c) {
        const auto [l, k] = cols[static_cast<std::size_t>(c)];
        M(r, c) = X.coeff(i, l, s - k);
      }
    }
    return M;
  }

  /// Restriction of an embedded kernel vector (length n*mu) to the free
  /// coordinates of this layout.
  Vector restrict(const Vector& full) const {
    Vector v(colCount());
    for (int c = 0; c < colCount(); ++c) {
      const auto [l, k] = cols[static_cast<std::size_t>(c)];
      v(c) = full(l * mu + k);
    }
    return v;
  }

  Vector toFull(const Vector& bhat) const {
    Vector full = Vector::Zero(static_cast<Eigen::Index>(n) * mu);
    for (int c = 0; c < colCount(); ++c) {
      const auto [l, k] = cols[static_cast<std::size_t>(c)];
      full(l * mu + k) = bhat(c);
    }
    return full;
  }

  PolyVector toPolyVector(const Vector& bhat) const {
    std::vector<Vector> entries(static_cast<std::size_t>(n));
    for (int l = 0; l < n; ++l) entries[static_cast<std::size_t>(l)] = Vector::Zero(shape.degBounds[static_cast<std::size_t>(l)] + 1);
    for (int c = 0; c < colCount(); ++c) {
      const auto [l, k] = cols[static_cast<std::size_t>(c)];
      entries[static_cast<std::size_t>(l)](k) = bhat(c);
    }
    return PolyVector(std::move(entries));
  }
};

inline MinimalEmbedding minimal_embed(const MatrixPolynomial& A, const KernelShape& shape,
                                      const PerturbationStructure& structure) {
  const int n = A.size(), d = A.degree(), mu = n * d + 1;
  if (static_cast<int>(shape.degBounds.size()) != n) throw std::invalid_argument("kernel shape size mismatch");
  MinimalEmbedding L;
  L.n = n;
  L.d = d;
  L.mu = mu;
  L.shape = shape;
  L.colIndex.assign(static_cast<std::size_t>(n), {});
  for (int l = 0; l < n; ++l) {
    const int db = shape.degBounds[static_cast<std::size_t>(l)];
    if (db > mu - 1) throw std::invalid_argument("kernel degree bound exceeds mu-1");
    L.colIndex[static_cast<std::size_t>(l)].assign(static_cast<std::size_t>(std::max(db + 1, 0)), -1);
    for (int k = 0; k <= db; ++k) {
      if (shape.pinned(l, k)) continue;
      L.colIndex[static_cast<std::size_t>(l)][static_cast<std::size_t>(k)] = static_cast<int>(L.cols.size());
      L.cols.emplace_back(l, k);
    }
  }
  if (L.cols.empty()) throw std::invalid_argument("kernel has no free coefficients");

  for (int i = 0; i < n; ++i)
    for (int s = 0; s < mu + d; ++s) {
      bool active = false;
      for (const auto& [l, k] : L.cols)
        if (structure.slotActive(A, i, l, s - k)) {
          active = true;
          break;
        }
      if (active) L.rows.emplace_back(i, s);
    }
  L.A0 = L.reducedEmbedding(A);
  return L;
}

/// The bilinear swap: a matrix with one row per retained equation and one
/// column per coefficient slot of vec(A+dA), satisfying
/// psi(bhat) * vec(A+dA) = (Ahat+dAhat) * bhat entrywise.
inline Matrix psi_full(const MinimalEmbedding& L, const Vector& bhat) {
  Matrix M = Matrix::Zero(L.rowCount(), slot_count(L.n, L.d));
  for (int r = 0; r < L.rowCount(); ++r) {
    const auto [i, s] = L.rows[static_cast<std::size_t>(r)];
    for (int l = 0; l < L.n; ++l)
      for (int k2 = 0; k2 <= L.d; ++k2) {
        const double bv = L.kernelValue(bhat, l, s - k2);
        if (bv != 0.0) M(r, slot_index(L.n, L.d, i, l, k2)) = bv;
      }
  }
  return M;
}

/// Columns of psi restricted to the free slots of the structure (the
/// Jacobian block with respect to vec dA).
inline Matrix psi_free(const MinimalEmbedding& L, const Vector& bhat, const PerturbationStructure& structure,
                       const std::vector<int>& freeSlots) {
  Matrix M = Matrix::Zero(L.rowCount(), static_cast<Eigen::Index>(freeSlots.size()));
  std::vector<int> slotToFree(static_cast<std::size_t>(slot_count(L.n, L.d)), -1);
  for (std::size_t p = 0; p < freeSlots.size(); ++p) slotToFree[static_cast<std::size_t>(freeSlots[p])] = static_cast<int>(p);
  (void)structure;
  for (int r = 0; r < L.rowCount(); ++r) {
    const auto [i, s] = L.rows[static_cast<std::size_t>(r)];
    for (int l = 0; l < L.n; ++l)
      for (int k2 = 0; k2 <= L.d; ++k2) {
        const int p = slotToFree[static_cast<std::size_t>(slot_index(L.n, L.d, i, l, k2))];
        if (p < 0) continue;
        const double bv = L.kernelValue(bhat, l, s - k2);
        if (bv != 0.0) M(r, p) = bv;
      }
  }
  return M;
}

/// Certified lower bound sigma_min(Ahat)/sqrt(mu) on ||dA||_F over all
/// perturbations making A singular, structured or not.
inline double distance_lower_bound(const MatrixPolynomial& A) {
  const REmbedding E = r_embed(A);
  Eigen::JacobiSVD<Matrix> svd(E.matrix);
  return svd.singularValues()(svd.singularValues().size() - 1) / std::sqrt(static_cast<double>(E.mu));
}

/// Orthogonal projection of an N-by-M matrix onto the affine set of
/// R-embeddings of structure-conforming perturbations: each free slot's
/// mu Toeplitz copies are replaced by their mean, fixed slots by their
/// offsets, off-pattern positions by zero.
inline Matrix project_to_structure(const Matrix& W, const PerturbationStructure& S) {
  const int n = S.size(), d = S.degree(), mu = n * d + 1;
  if (W.rows() != n * (mu + d) || W.cols() != n * mu) throw std::invalid_argument("embedding shape mismatch");
  Matrix P = Matrix::Zero(W.rows(), W.cols());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k <= d; ++k) {
        if (S.isFree(i, j, k)) {
          double acc = 0.0;
          for (int c = 0; c < mu; ++c) acc += W(i * (mu + d) + k + c, j * mu + c);
          acc /= mu;
          for (int c = 0; c < mu; ++c) P(i * (mu + d) + k + c, j * mu + c) = acc;
        } else {
          const double o = S.offset(i, j, k);
          if (o != 0.0)
            for (int c = 0; c < mu; ++c) P(i * (mu + d) + k + c, j * mu + c) = o;
        }
      }
  return P;
}

/// Extracts the conforming perturbation realized by the projection.
inline MatrixPolynomial unembed_projected(const Matrix& W, const PerturbationStructure& S) {
  const int n = S.size(), d = S.degree(), mu = n * d + 1;
  MatrixPolynomial dA(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k <= d; ++k) {
        if (S.isFree(i, j, k)) {
          double acc = 0.0;
          for (int c = 0; c < mu; ++c) acc += W(i * (mu + d) + k + c, j * mu + c);
          dA.coeffRef(i, j, k) = acc / mu;
        } else {
          dA.coeffRef(i, j, k) = S.offset(i, j, k);
        }
      }
  return dA;
}

/// Structural enforcement value: squared Frobenius distance from
/// dAhat = Ahat - UV to the nearest conforming embedding; zero exactly when
/// Ahat - UV embeds a structure-conforming perturbation.
inline double gamma(const Matrix& UV, const PerturbationStructure& S, const REmbedding& Ahat) {
  const Matrix W = Ahat.matrix - UV;
  return (W - project_to_structure(W, S)).squaredNorm();
}

/// Normalization row N(bhat)^T for one kernel column, in the column's
/// minimal embedding coordinates.
inline Vector normalization_row(const NormalizationSpec& spec, int column, const MinimalEmbedding& L,
                                const Vector& bhat) {
  switch (spec.kind) {
    case NormalizationKind::ColumnUnitNorm:
      return bhat;
    case NormalizationKind::PivotUnit:
    case NormalizationKind::MonicPivot: {
      if (column < 0 || column >= static_cast<int>(spec.pivots.size()))
        throw std::invalid_argument("missing pivot for kernel column");
      auto [l, k] = spec.pivots[static_cast<std::size_t>(column)];
      if (spec.kind == NormalizationKind::MonicPivot) k = L.shape.degBounds[static_cast<std::size_t>(l)];
      if (l < 0 || l >= L.n || k < 0 || k >= static_cast<int>(L.colIndex[static_cast<std::size_t>(l)].size()))
        throw std::invalid_argument("pivot outside kernel layout");
      const int c = L.colIndex[static_cast<std::size_t>(l)][static_cast<std::size_t>(k)];
      if (c < 0) throw std::invalid_argument("pivot refers to a fixed kernel coefficient");
      Vector row = Vector::Zero(L.colCount());
      row(c) = 1.0;
      return row;
    }
  }
  throw std::logic_error("unknown normalization kind");
}

}  // namespace polyrank
