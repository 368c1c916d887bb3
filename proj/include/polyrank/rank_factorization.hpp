#pragma once

#include "polyrank/embedding.hpp"
#include "polyrank/matrix_polynomial.hpp"
#include "polyrank/structure.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

namespace polyrank {

namespace detail {

/// Embedding of the fixed offsets of an affine structure (zero for linear
/// structures).
inline Matrix offset_embedding(const PerturbationStructure& S) {
  const int n = S.size(), d = S.degree(), mu = n * d + 1;
  Matrix E = Matrix::Zero(n * (mu + d), n * mu);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k <= d; ++k) {
        const double o = S.isFree(i, j, k) ? 0.0 : S.offset(i, j, k);
        if (o != 0.0)
          for (int c = 0; c < mu; ++c) E(i * (mu + d) + k + c, j * mu + c) = o;
      }
  return E;
}

/// Projection onto the linear span of free-slot embeddings (per-slot mean
/// over the mu Toeplitz copies).
inline Matrix project_linear(const Matrix& W, const PerturbationStructure& S) {
  const int n = S.size(), d = S.degree(), mu = n * d + 1;
  Matrix P = Matrix::Zero(W.rows(), W.cols());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k <= d; ++k) {
        if (!S.isFree(i, j, k)) continue;
        double acc = 0.0;
        for (int c = 0; c < mu; ++c) acc += W(i * (mu + d) + k + c, j * mu + c);
        acc /= mu;
        for (int c = 0; c < mu; ++c) P(i * (mu + d) + k + c, j * mu + c) = acc;
      }
  return P;
}

inline Matrix polar_factor(const Matrix& X) {
  Eigen::JacobiSVD<Matrix> svd(X, Eigen::ComputeThinU | Eigen::ComputeThinV);
  return svd.matrixU() * svd.matrixV().transpose();
}

}  // namespace detail

/// Penalty form of the constrained embedded rank factorization:
/// ||Ahat - UV||_F^2 + rho * Gamma(U,V) + rho * ||U^T U - I||_F^2.
inline double penalty_objective(const Matrix& U, const Matrix& V, const REmbedding& Ahat,
                                const PerturbationStructure& structure, double rho) {
  if (!(rho > 0.0)) throw std::invalid_argument("penalty weight must be positive");
  const Matrix UV = U * V;
  const Matrix orth = U.transpose() * U - Matrix::Identity(U.cols(), U.cols());
  return (Ahat.matrix - UV).squaredNorm() + rho * gamma(UV, structure, Ahat) + rho * orth.squaredNorm();
}

struct RankFactorization {
  Matrix U, V;
  double phiValue = 0.0;
  std::vector<double> phiHistory;
  MatrixPolynomial deltaA;        // structure projection of Ahat - UV
  double structureResidual = 0.0; // Gamma at the returned iterate
  int rejectedUpdates = 0;
};

namespace detail {

/// CG for the self-adjoint positive definite map V -> U^T((1+rho)UV - rho P(UV)).
inline Matrix solve_v_update(const Matrix& U, const Matrix& rhs, const PerturbationStructure& S, double rho,
                             const Matrix& warm) {
  auto apply = [&](const Matrix& V) -> Matrix {
    const Matrix UV = U * V;
    return U.transpose() * ((1.0 + rho) * UV - rho * project_linear(UV, S));
  };
  Matrix V = warm;
  Matrix R = rhs - apply(V);
  Matrix P = R;
  double rs = R.squaredNorm();
  const double tol2 = 1e-28 * std::max(1.0, rhs.squaredNorm());
  const int maxit = 40 * static_cast<int>(rhs.size()) + 100;
  for (int it = 0; it < maxit && rs > tol2; ++it) {
    const Matrix AP = apply(P);
    const double alpha = rs / P.cwiseProduct(AP).sum();
    V += alpha * P;
    R -= alpha * AP;
    const double rs2 = R.squaredNorm();
    P = R + (rs2 / rs) * P;
    rs = rs2;
  }
  return V;
}

/// Same weighted normal equations in the U block.
inline Matrix solve_u_update(const Matrix& V, const Matrix& rhs, const PerturbationStructure& S, double rho,
                             const Matrix& warm) {
  auto apply = [&](const Matrix& U) -> Matrix {
    const Matrix UV = U * V;
    return ((1.0 + rho) * UV - rho * project_linear(UV, S)) * V.transpose();
  };
  Matrix U = warm;
  Matrix R = rhs - apply(U);
  Matrix P = R;
  double rs = R.squaredNorm();
  const double tol2 = 1e-28 * std::max(1.0, rhs.squaredNorm());
  const int maxit = 40 * static_cast<int>(rhs.size()) + 100;
  for (int it = 0; it < maxit && rs > tol2; ++it) {
    const Matrix AP = apply(P);
    const double denom = P.cwiseProduct(AP).sum();
    if (!(denom > 0.0)) break;
    const double alpha = rs / denom;
    U += alpha * P;
    R -= alpha * AP;
    const double rs2 = R.squaredNorm();
    P = R + (rs2 / rs) * P;
    rs = rs2;
  }
  return U;
}

}  // namespace detail

namespace detail {

/// Fixed-weight sweeps: exact ridge least squares in V, then an orthonormal
/// U candidate (polar factor of the unconstrained minimizer or the
/// Procrustes factor, whichever is lower) kept only when it lowers the
/// objective. The recorded objective sequence never increases.
inline void descend_fixed_rho(const REmbedding& Ahat, const PerturbationStructure& structure, double rho,
                              int iters, Matrix& U, Matrix& V, RankFactorization* record) {
  const Matrix E0 = offset_embedding(structure);
  const Matrix rhsBase = (1.0 + rho) * Ahat.matrix - rho * project_linear(Ahat.matrix, structure) - rho * E0;
  double phi = std::numeric_limits<double>::infinity();
  double prev = std::numeric_limits<double>::infinity();
  for (int it = 0; it < iters; ++it) {
    V = solve_v_update(U, U.transpose() * rhsBase, structure, rho, V);
    phi = penalty_objective(U, V, Ahat, structure, rho);
    if (record) record->phiHistory.push_back(phi);

    const Matrix Uunc = solve_u_update(V, rhsBase * V.transpose(), structure, rho, U);
    Matrix Ucand = polar_factor(Uunc);
    double phiCand = penalty_objective(Ucand, V, Ahat, structure, rho);
    {
      const Matrix Uproc = polar_factor(Ahat.matrix * V.transpose());
      const double phiProc = penalty_objective(Uproc, V, Ahat, structure, rho);
      if (phiProc < phiCand) {
        Ucand = Uproc;
        phiCand = phiProc;
      }
    }
    if (phiCand < phi) {
      U = Ucand;
      phi = phiCand;
    } else if (record) {
      ++record->rejectedUpdates;
    }
    if (record) record->phiHistory.push_back(phi);
    if (it > 1 && std::abs(prev - phi) <= 1e-15 * (1.0 + std::abs(phi))) break;
    prev = phi;
  }
}

}  // namespace detail

/// Block coordinate descent on the penalty objective. The default start is
/// a short lift-and-project warm-up (alternating rank-R truncation with the
/// structure projection), which places the factors in the valley of
/// structure-conforming residuals before the penalized sweeps polish them;
/// seeded runs start from a random orthonormal U instead (multi-start).
/// The recorded objective history never increases. Returns the best iterate
/// at the iteration cap.
inline RankFactorization coordinate_descent(const REmbedding& Ahat, const PerturbationStructure& structure,
                                            int R, double rho, int iters, unsigned seed = 0) {
  const int N = Ahat.rows(), M = Ahat.cols();
  if (R < 1 || R > M - 1) throw std::invalid_argument("inner dimension must satisfy 1 <= R <= M-1");

  Matrix U, V;
  if (seed == 0) {
    const Matrix E0 = detail::offset_embedding(structure);
    Matrix X = Ahat.matrix;
    Matrix UV = X;
    for (int it = 0; it < 60; ++it) {
      Eigen::JacobiSVD<Matrix> svd(X, Eigen::ComputeThinU | Eigen::ComputeThinV);
      U = svd.matrixU().leftCols(R);
      Vector sv = svd.singularValues();
      for (Eigen::Index i = R; i < sv.size(); ++i) sv(i) = 0.0;
      V = sv.head(R).asDiagonal() * svd.matrixV().leftCols(R).transpose();
      const Matrix UVnew = U * V;
      const Matrix W = Ahat.matrix - UVnew;
      X = Ahat.matrix - (E0 + detail::project_linear(W - E0, structure));
      if ((UVnew - UV).norm() <= 1e-14 * (1.0 + UV.norm())) break;
      UV = UVnew;
    }
  } else {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    Matrix X(N, R);
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < R; ++j) X(i, j) = g(rng);
    U = Eigen::HouseholderQR<Matrix>(X).householderQ() * Matrix::Identity(N, R);
    V = Matrix::Zero(R, M);
  }

  RankFactorization out;
  detail::descend_fixed_rho(Ahat, structure, rho, iters, U, V, &out);

  out.U = U;
  out.V = V;
  out.phiValue = out.phiHistory.empty() ? penalty_objective(U, V, Ahat, structure, rho) : out.phiHistory.back();
  // oriented so that A + deltaA is the lower-rank approximant UV
  const Matrix W = U * V - Ahat.matrix;
  out.deltaA = unembed_projected(W, structure);
  out.structureResidual = gamma(U * V, structure, Ahat);
  return out;
}

struct SeparationReport {
  std::vector<int> classOf;        // class index per qualifying input, -1 if excluded
  std::vector<bool> firstOrderOk;  // stationarity qualification per input
  int classes = 0;
  double sigmaMin = 0.0;           // separation threshold sigma_min(Ahat)
  double minCrossDistance = std::numeric_limits<double>::infinity();
  bool violation = false;
};

/// Pairwise spectral-norm separation of converged embedded perturbations.
/// Inputs are first qualified against the rank-factorization first-order
/// conditions (the perturbed matrix must agree with the projection of Ahat
/// onto its own column space); duplicates within clusterTol are classified
/// as one solution class. A pair of distinct classes closer than
/// sigma_min(Ahat) - tol flags a violation.
inline SeparationReport separation_check(const std::vector<Matrix>& deltas, const REmbedding& Ahat,
                                         double qualTol = 1e-6, double clusterTol = -1.0, double sepTol = 1e-6) {
  SeparationReport rep;
  const double scale = Ahat.matrix.norm();
  if (clusterTol < 0.0) clusterTol = 1e-6 * std::max(1.0, scale);
  {
    Eigen::JacobiSVD<Matrix> svd(Ahat.matrix);
    rep.sigmaMin = svd.singularValues()(svd.singularValues().size() - 1);
  }

  const int m = static_cast<int>(deltas.size());
  rep.classOf.assign(static_cast<std::size_t>(m), -1);
  rep.firstOrderOk.assign(static_cast<std::size_t>(m), false);
  std::vector<int> qualified;
  for (int i = 0; i < m; ++i) {
    const Matrix B = Ahat.matrix + deltas[static_cast<std::size_t>(i)];
    Eigen::JacobiSVD<Matrix> svd(B, Eigen::ComputeThinU);
    const Vector sv = svd.singularValues();
    const double smax = sv.size() ? sv(0) : 0.0;
    int rank = 0;
    for (Eigen::Index k = 0; k < sv.size(); ++k) rank += sv(k) > 1e-8 * std::max(smax, 1.0);
    if (rank == 0) continue;
    const Matrix Uq = svd.matrixU().leftCols(rank);
    const bool ok = (Uq * (Uq.transpose() * Ahat.matrix) - B).norm() <= qualTol * std::max(1.0, scale);
    rep.firstOrderOk[static_cast<std::size_t>(i)] = ok;
    if (ok) qualified.push_back(i);
  }

  // single-linkage clustering by spectral distance (union-find)
  const std::size_t q = qualified.size();
  Matrix dist = Matrix::Zero(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(q));
  for (std::size_t a = 0; a < q; ++a)
    for (std::size_t b = a + 1; b < q; ++b) {
      const Matrix D = deltas[static_cast<std::size_t>(qualified[a])] - deltas[static_cast<std::size_t>(qualified[b])];
      Eigen::JacobiSVD<Matrix> svd(D);
      dist(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
          dist(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) =
              svd.singularValues().size() ? svd.singularValues()(0) : 0.0;
    }
  std::vector<std::size_t> parent(q);
  for (std::size_t a = 0; a < q; ++a) parent[a] = a;
  auto find = [&](std::size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  for (std::size_t a = 0; a < q; ++a)
    for (std::size_t b = a + 1; b < q; ++b)
      if (dist(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) <= clusterTol)
        parent[find(a)] = find(b);
  std::vector<int> cls(q, -1);
  for (std::size_t a = 0; a < q; ++a) {
    const std::size_t root = find(a);
    if (cls[root] < 0) cls[root] = rep.classes++;
    cls[a] = cls[root];
  }
  for (std::size_t a = 0; a < q; ++a)
    for (std::size_t b = a + 1; b < q; ++b)
      if (cls[a] != cls[b])
        rep.minCrossDistance =
            std::min(rep.minCrossDistance, dist(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)));
  for (std::size_t a = 0; a < q; ++a)
    rep.classOf[static_cast<std::size_t>(qualified[a])] = cls[a];
  rep.violation = rep.classes >= 2 && rep.minCrossDistance < rep.sigmaMin - sepTol;
  return rep;
}

}  // namespace polyrank
