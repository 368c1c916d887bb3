#pragma once

#include "polyrank/embedding.hpp"
#include "polyrank/matrix_polynomial.hpp"
#include "polyrank/structure.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <stdexcept>
#include <vector>

namespace polyrank {

/// The equality-constrained program behind one refinement run:
///
///   minimize ||dA||_F^2  subject to  (Ahat_j + dAhat_j) bhat_j = 0 (j = 1..r)
///                                    N(bhat_j)^T bhat_j = 1
///
/// over x = (vec dA restricted to free slots, bhat_1, ..., bhat_r), each
/// kernel column living in its own minimal embedding. Fixed coefficients of
/// dA are excluded from x, so structure holds bit-exactly by construction.
///
/// With pivot normalizations all constraint rows are polynomial in x and
/// the assembled Jacobian/Hessian are exact. Column-unit-norm rows are
/// linearized by freezing N at the evaluation point (the Jacobian row is
/// bhat^T, not 2 bhat^T), which parameterizes the same KKT manifold with
/// rescaled multipliers.
struct RefinementProblem {
  MatrixPolynomial A;
  PerturbationStructure structure;
  NormalizationSpec normalization;
  std::vector<MinimalEmbedding> kernels;
  std::vector<int> freeSlots;

  int numFreeA = 0;
  std::vector<int> bOffset;    // start of column j's bhat inside x, relative to numFreeA
  std::vector<int> rowOffset;  // start of column j's kernel rows inside the residual
  int numKernelRows = 0;

  int rank() const { return static_cast<int>(kernels.size()); }
  int xDim() const { return numFreeA + (bOffset.empty() ? 0 : bOffset.back() + kernels.back().colCount()); }
  int residualDim() const { return numKernelRows + rank(); }

  static RefinementProblem build(const MatrixPolynomial& A, const PerturbationStructure& structure,
                                 const std::vector<KernelShape>& shapes, const NormalizationSpec& normalization) {
    RefinementProblem P;
    P.A = A;
    P.structure = structure;
    P.normalization = normalization;
    P.freeSlots = structure.freeSlots();
    P.numFreeA = static_cast<int>(P.freeSlots.size());
    if (P.numFreeA == 0) throw std::invalid_argument("rigid structure: no free coefficients to optimize");
    int bo = 0, ro = 0;
    for (const auto& shape : shapes) {
      P.kernels.push_back(minimal_embed(A, shape, structure));
      P.bOffset.push_back(bo);
      P.rowOffset.push_back(ro);
      bo += P.kernels.back().colCount();
      ro += P.kernels.back().rowCount();
    }
    P.numKernelRows = ro;
    if (P.kernels.empty()) throw std::invalid_argument("at least one kernel column required");
    return P;
  }

  MatrixPolynomial deltaA(const Vector& x) const { return structure.assemble(x.head(numFreeA)); }

  Eigen::VectorBlock<const Vector> bhat(const Vector& x, int j) const {
    return x.segment(numFreeA + bOffset[static_cast<std::size_t>(j)], kernels[static_cast<std::size_t>(j)].colCount());
  }

  Vector makeX(const MatrixPolynomial& dA, const std::vector<Vector>& bhats) const {
    Vector x(xDim());
    x.head(numFreeA) = structure.extract(dA);
    for (int j = 0; j < rank(); ++j)
      x.segment(numFreeA + bOffset[static_cast<std::size_t>(j)], kernels[static_cast<std::size_t>(j)].colCount()) =
          bhats[static_cast<std::size_t>(j)];
    return x;
  }

  /// ||dA||_F^2 including fixed offsets.
  double objective(const Vector& x) const { return x.head(numFreeA).squaredNorm() + structure.offsetNormSq(); }
};

/// Stacked constraint residual: kernel blocks first, one normalization row
/// per column last.
inline Vector residual(const RefinementProblem& P, const Vector& x) {
  if (x.size() != P.xDim()) throw std::invalid_argument("state vector has wrong length");
  const MatrixPolynomial dA = P.deltaA(x);
  Vector M(P.residualDim());
  for (int j = 0; j < P.rank(); ++j) {
    const auto& L = P.kernels[static_cast<std::size_t>(j)];
    const Vector b = P.bhat(x, j);
    M.segment(P.rowOffset[static_cast<std::size_t>(j)], L.rowCount()) = (L.A0 + L.reducedEmbedding(dA)) * b;
    const Vector nrow = normalization_row(P.normalization, j, L, b);
    M(P.numKernelRows + j) = nrow.dot(b) - 1.0;
  }
  return M;
}

/// Closed-form Jacobian of the residual with respect to x: stacked psi
/// blocks against vec dA, block-diagonal perturbed embeddings against the
/// kernel unknowns, and normalization rows with a zero dA block. The
/// unit-norm residual bhat^T bhat - 1 differentiates to 2 bhat^T.
inline Matrix jacobian(const RefinementProblem& P, const Vector& x) {
  const MatrixPolynomial dA = P.deltaA(x);
  Matrix J = Matrix::Zero(P.residualDim(), P.xDim());
  for (int j = 0; j < P.rank(); ++j) {
    const auto& L = P.kernels[static_cast<std::size_t>(j)];
    const Vector b = P.bhat(x, j);
    const int r0 = P.rowOffset[static_cast<std::size_t>(j)];
    const int c0 = P.numFreeA + P.bOffset[static_cast<std::size_t>(j)];
    J.block(r0, 0, L.rowCount(), P.numFreeA) = psi_free(L, b, P.structure, P.freeSlots);
    J.block(r0, c0, L.rowCount(), L.colCount()) = L.A0 + L.reducedEmbedding(dA);
    const double rowScale = P.normalization.kind == NormalizationKind::ColumnUnitNorm ? 2.0 : 1.0;
    J.block(P.numKernelRows + j, c0, 1, L.colCount()) =
        rowScale * normalization_row(P.normalization, j, L, b).transpose();
  }
  return J;
}

/// Hessian of the Lagrangian in x: 2I on the free-dA diagonal plus the
/// multiplier-weighted bilinear coupling between dA and kernel unknowns.
/// Pivot normalization rows are linear and contribute nothing; the
/// unit-norm residual adds 2 lambda I on its column's diagonal block.
inline Matrix hessian_lagrangian(const RefinementProblem& P, const Vector& x, const Vector& lambda) {
  if (lambda.size() != P.residualDim()) throw std::invalid_argument("multiplier vector has wrong length");
  (void)x;
  Matrix H = Matrix::Zero(P.xDim(), P.xDim());
  H.topLeftCorner(P.numFreeA, P.numFreeA) = 2.0 * Matrix::Identity(P.numFreeA, P.numFreeA);
  if (P.normalization.kind == NormalizationKind::ColumnUnitNorm)
    for (int j = 0; j < P.rank(); ++j) {
      const int c0 = P.numFreeA + P.bOffset[static_cast<std::size_t>(j)];
      const int nb = P.kernels[static_cast<std::size_t>(j)].colCount();
      H.block(c0, c0, nb, nb).diagonal().array() += 2.0 * lambda(P.numKernelRows + j);
    }

  std::vector<int> slotToFree(static_cast<std::size_t>(slot_count(P.A.size(), P.A.degree())), -1);
  for (std::size_t p = 0; p < P.freeSlots.size(); ++p)
    slotToFree[static_cast<std::size_t>(P.freeSlots[p])] = static_cast<int>(p);

  for (int j = 0; j < P.rank(); ++j) {
    const auto& L = P.kernels[static_cast<std::size_t>(j)];
    for (int r = 0; r < L.rowCount(); ++r) {
      const double lam = lambda(P.rowOffset[static_cast<std::size_t>(j)] + r);
      if (lam == 0.0) continue;
      const auto [i, s] = L.rows[static_cast<std::size_t>(r)];
      for (int c = 0; c < L.colCount(); ++c) {
        const auto [l, k] = L.cols[static_cast<std::size_t>(c)];
        const int k2 = s - k;
        if (k2 < 0 || k2 > P.A.degree()) continue;
        const int pA = slotToFree[static_cast<std::size_t>(slot_index(P.A.size(), P.A.degree(), i, l, k2))];
        if (pA < 0) continue;
        const int pB = P.numFreeA + P.bOffset[static_cast<std::size_t>(j)] + c;
        H(pA, pB) += lam;
        H(pB, pA) += lam;
      }
    }
  }
  return H;
}

/// Gradient of the Lagrangian stacked over (x, lambda): (grad_x L, M(x)).
inline Vector grad_lagrangian(const RefinementProblem& P, const Vector& x, const Vector& lambda) {
  const Matrix J = jacobian(P, x);
  const Vector M = residual(P, x);
  Vector g(P.xDim() + P.residualDim());
  Vector gradF = Vector::Zero(P.xDim());
  gradF.head(P.numFreeA) = 2.0 * x.head(P.numFreeA);
  g.head(P.xDim()) = gradF + J.transpose() * lambda;
  g.tail(P.residualDim()) = M;
  return g;
}

struct SecondOrderReport {
  int jacobianRank = 0;
  double jacobianSigmaMin = 0.0;
  int jacobianNullity = 0;
  double reducedHessianMinEig = 0.0;
  bool sufficient = false;  // Z^T H Z positive definite
  bool necessary = false;   // Z^T H Z positive semidefinite (tolerance slack)
};

/// Evaluates the second-order conditions: an orthonormal basis Z of ker J
/// and the extreme eigenvalue of Z^T H Z.
inline SecondOrderReport check_second_order(const RefinementProblem& P, const Vector& x, const Vector& lambda) {
  const Matrix J = jacobian(P, x);
  const Matrix H = hessian_lagrangian(P, x, lambda);
  Eigen::JacobiSVD<Matrix> svd(J, Eigen::ComputeFullV);
  const Vector sv = svd.singularValues();
  const double smax = sv.size() ? sv(0) : 0.0;
  const double tol = std::max(J.rows(), J.cols()) * 1e-15 * std::max(smax, 1.0);
  int rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) rank += sv(i) > tol;

  SecondOrderReport rep;
  rep.jacobianRank = rank;
  rep.jacobianSigmaMin = sv.size() ? sv(sv.size() - 1) : 0.0;
  rep.jacobianNullity = static_cast<int>(J.cols()) - rank;
  if (rep.jacobianNullity <= 0) {
    rep.reducedHessianMinEig = 0.0;
    rep.sufficient = rep.necessary = true;  // vacuous: ker J trivial
    return rep;
  }
  const Matrix Z = svd.matrixV().rightCols(rep.jacobianNullity);
  const Matrix W = Z.transpose() * H * Z;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (W + W.transpose()));
  rep.reducedHessianMinEig = eig.eigenvalues()(0);
  rep.sufficient = rep.reducedHessianMinEig > 0.0;
  rep.necessary = rep.reducedHessianMinEig > -1e-10 * std::max(1.0, H.norm());
  return rep;
}

}  // namespace polyrank
