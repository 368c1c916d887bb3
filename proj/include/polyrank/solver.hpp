#pragma once

#include "polyrank/embedding.hpp"
#include "polyrank/kkt.hpp"
#include "polyrank/matrix_polynomial.hpp"
#include "polyrank/structure.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace polyrank {

// ---------------------------------------------------------------------------
// Initialization: SVD kernel guesses, primitivity, CREF reduction
// ---------------------------------------------------------------------------

/// Right singular vectors of the (possibly degree-restricted) embedding for
/// the r smallest singular values, unembedded into polynomial vectors.
inline std::vector<PolyVector> init_kernel_svd(const MatrixPolynomial& A, int r,
                                               const std::optional<KernelShape>& shape = std::nullopt) {
  if (r < 1) throw std::invalid_argument("kernel dimension must be at least 1");
  const int mu = A.size() * A.degree() + 1;
  const KernelShape sh = shape.value_or(KernelShape::uniform(A.size(), mu - 1));
  const MinimalEmbedding L = minimal_embed(A, sh, structure_degree_preserving(A));
  if (r >= A.size() * mu || r > L.colCount())
    throw std::invalid_argument("kernel dimension exceeds embedding width");
  Eigen::JacobiSVD<Matrix> svd(L.A0, Eigen::ComputeFullV);
  std::vector<PolyVector> out;
  const Eigen::Index m = svd.matrixV().cols();
  for (int j = 0; j < r; ++j) out.push_back(L.toPolyVector(svd.matrixV().col(m - 1 - j)));
  return out;
}

namespace detail {

/// r-th smallest singular value of the reduced embedding with the given
/// kernel shape (1-based r).
inline double restricted_sigma(const MatrixPolynomial& A, const KernelShape& shape, int r,
                               const PerturbationStructure& pattern) {
  const MinimalEmbedding L = minimal_embed(A, shape, pattern);
  if (L.colCount() < r) return std::numeric_limits<double>::infinity();
  Eigen::JacobiSVD<Matrix> svd(L.A0);
  const Vector sv = svd.singularValues();
  // Fewer rows than columns means a structurally guaranteed kernel; the
  // missing singular values are exact zeros.
  if (sv.size() < r) return 0.0;
  return sv(sv.size() - r);
}

}  // namespace detail

/// Derives per-entry kernel degree bounds by shrinking the embedding while
/// the r-th smallest singular value stays at the level of the shapes that
/// still admit the nearby kernel. A reduction is kept when its singular
/// value does not jump past `factor` times the best level seen so far;
/// dropping a genuinely needed coefficient forces the distance (and hence
/// the singular value) up by far more. This realizes the minimal-degree
/// reduction of the SVD kernel guess without relying on noisy coefficient
/// magnitudes.
inline KernelShape auto_kernel_shape(const MatrixPolynomial& A, int r, int degreeCap = -1,
                                     double factor = 1.12) {
  const int n = A.size(), mu = n * A.degree() + 1;
  const int cap = degreeCap < 0 ? mu - 1 : std::min(degreeCap, mu - 1);
  const PerturbationStructure pattern = structure_degree_preserving(A);
  const REmbedding E = r_embed(A);

  // Full spectrum, ascending from the smallest value. The kernel of the
  // nearby singular matrix shows up as a cluster of small singular values
  // (one per admissible shift); when that cluster is separated from the
  // regular spectrum by a wide gap, any shape whose singular value stays
  // well below the gap still admits the kernel.
  double level = 0.0, clusterTop = 0.0;
  double factorEff = factor;
  {
    Eigen::JacobiSVD<Matrix> svd(E.matrix);
    const Vector svDesc = svd.singularValues();
    std::vector<double> sv(svDesc.size());
    for (Eigen::Index i = 0; i < svDesc.size(); ++i)
      sv[static_cast<std::size_t>(i)] = svDesc(svDesc.size() - 1 - i);
    level = sv[static_cast<std::size_t>(r - 1)];
    clusterTop = level;
    std::size_t K = static_cast<std::size_t>(r);
    const double eps = 1e-300;
    while (K < sv.size() && sv[K] <= 3.0 * std::max(sv[K - 1], eps)) ++K;
    if (K < sv.size()) clusterTop = sv[K - 1];
    // A wide gap to the regular spectrum marks a near-singular instance:
    // shape decisions are then coarse and a loose factor is safe.
    if (K < sv.size() && sv[K] > 100.0 * std::max(sv[K - 1], eps)) factorEff = std::max(factor, 3.0);
  }
  const double floor = 1e-10 * std::max(1.0, E.matrix.norm());
  const double thresh = std::max(factorEff * std::max(level, clusterTop), floor);

  int theta = cap;
  for (int t = 0; t <= cap; ++t)
    if (detail::restricted_sigma(A, KernelShape::uniform(n, t), r, pattern) <= thresh) {
      theta = t;
      break;
    }

  KernelShape shape = KernelShape::uniform(n, theta);
  bool changed = true;
  while (changed) {
    changed = false;
    for (int l = 0; l < n; ++l) {
      while (shape.degBounds[static_cast<std::size_t>(l)] >= 0) {
        KernelShape trial = shape;
        trial.degBounds[static_cast<std::size_t>(l)] -= 1;
        if (trial.freeCount() < std::max(r, 1)) break;
        if (detail::restricted_sigma(A, trial, r, pattern) > thresh) break;
        shape = trial;
        changed = true;
      }
    }
  }
  return shape;
}

/// Removes the approximate content (common factor of all entries) from a
/// polynomial vector. The content degree is estimated by a singular-value
/// rank test on the Sylvester matrix of the two largest entries; the
/// content and the reduced entries are then fit by alternating least
/// squares and accepted when the reconstruction residual is below tol.
inline PolyVector make_primitive(const PolyVector& b, double tol) {
  const double scale = b.norm();
  if (!(scale > 0.0) || b.isZero(1e-300)) throw std::invalid_argument("cannot normalize a numerically zero vector");

  const PolyVector bt = b.trimmed(1e-14 * scale);
  std::vector<int> active;
  for (int l = 0; l < bt.size(); ++l)
    if (bt.degree(l) >= 0 && bt.entry(l).norm() > 1e-14 * scale) active.push_back(l);
  if (active.empty()) throw std::invalid_argument("cannot normalize a numerically zero vector");

  // Entry pair with the largest norms (the single-entry case degenerates to
  // dividing that entry by itself).
  std::sort(active.begin(), active.end(),
            [&](int a, int c) { return bt.entry(a).norm() > bt.entry(c).norm(); });
  const Vector p = bt.entry(active[0]);
  const Vector q = bt.entry(active.size() > 1 ? active[1] : active[0]);
  const int dp = static_cast<int>(p.size()) - 1, dq = static_cast<int>(q.size()) - 1;
  if (dp == 0 && dq == 0) return b;  // constants have trivial gcd

  int gcdDeg = 0;
  if (active.size() == 1) {
    gcdDeg = dp;
  } else if (dp >= 1 && dq >= 1) {
    Matrix S(dp + dq, dp + dq);
    S.setZero();
    for (int c = 0; c < dq; ++c)
      for (int k = 0; k <= dp; ++k) S(c + k, c) = p(k);
    for (int c = 0; c < dp; ++c)
      for (int k = 0; k <= dq; ++k) S(c + k, dq + c) = q(k);
    Eigen::JacobiSVD<Matrix> svd(S);
    const Vector sv = svd.singularValues();
    for (Eigen::Index i = sv.size() - 1; i >= 0; --i)
      if (sv(i) <= tol)
        ++gcdDeg;
      else
        break;
  } else {
    // One of the two top entries is a nonzero constant.
    gcdDeg = 0;
  }

  for (int k = std::min({gcdDeg, dp, dq}); k >= 1; --k) {
    // Cofactor pair from the near-null space of [phi(p) | -phi(q)].
    const int wa = dq - k + 1, wb = dp - k + 1;
    Matrix Msys(dp + wa, wa + wb);
    Msys << phi(p, wa), -phi(q, wb);
    Eigen::JacobiSVD<Matrix> svd(Msys, Eigen::ComputeFullV);
    const Vector nv = svd.matrixV().col(svd.matrixV().cols() - 1);

    Vector g;
    {
      const Vector cq = nv.head(wa), cp = nv.tail(wb);
      Matrix D(p.size() + q.size(), k + 1);
      D << phi(cp, k + 1), phi(cq, k + 1);
      Vector rhs(p.size() + q.size());
      rhs << p, q;
      g = D.colPivHouseholderQr().solve(rhs);
    }

    std::vector<Vector> reduced(static_cast<std::size_t>(bt.size()));
    double err = 0.0;
    for (int pass = 0; pass < 5; ++pass) {
      err = 0.0;
      for (int l = 0; l < bt.size(); ++l) {
        const Vector& e = bt.entry(l);
        if (e.size() == 0) {
          reduced[static_cast<std::size_t>(l)] = Vector();
          continue;
        }
        const int w = std::max(static_cast<int>(e.size()) - k, 1);
        const Matrix G = phi(g, w);
        Vector rhs = Vector::Zero(G.rows());
        rhs.head(e.size()) = e;
        reduced[static_cast<std::size_t>(l)] = G.colPivHouseholderQr().solve(rhs);
        err += (G * reduced[static_cast<std::size_t>(l)] - rhs).squaredNorm();
      }
      // refit the content against every entry
      Eigen::Index rows = 0;
      for (int l = 0; l < bt.size(); ++l)
        if (bt.entry(l).size() > 0) rows += reduced[static_cast<std::size_t>(l)].size() + k;
      Matrix D(rows, k + 1);
      Vector rhs(rows);
      Eigen::Index at = 0;
      for (int l = 0; l < bt.size(); ++l) {
        const Vector& e = bt.entry(l);
        if (e.size() == 0) continue;
        const Matrix C = phi(reduced[static_cast<std::size_t>(l)], k + 1);
        D.middleRows(at, C.rows()) = C;
        Vector r2 = Vector::Zero(C.rows());
        r2.head(e.size()) = e;
        rhs.segment(at, C.rows()) = r2;
        at += C.rows();
      }
      g = D.colPivHouseholderQr().solve(rhs);
    }
    if (std::sqrt(err) <= std::max(tol, 1e-14 * scale)) {
      PolyVector out{std::vector<Vector>(reduced.begin(), reduced.end())};
      return out;
    }
  }
  return b;
}

/// Kernel columns after CREF reduction: distinct pivots, pivot coefficient
/// scaled to one, other columns eliminated at each pivot coordinate.
struct KernelSpec {
  std::vector<PolyVector> columns;
  std::vector<std::pair<int, int>> pivots;  // (entry, coefficient)
  bool pivotCollision = false;
};

inline KernelSpec cref_reduce(const std::vector<PolyVector>& vectors) {
  if (vectors.empty()) throw std::invalid_argument("no kernel vectors given");
  const int r = static_cast<int>(vectors.size());
  const int n = vectors.front().size();
  int w = 1;
  for (const auto& v : vectors) w = std::max(w, v.maxDegree() + 1);

  Matrix B = Matrix::Zero(static_cast<Eigen::Index>(n) * w, r);
  for (int j = 0; j < r; ++j) {
    if (vectors[static_cast<std::size_t>(j)].size() != n) throw std::invalid_argument("kernel vectors disagree in length");
    for (int l = 0; l < n; ++l)
      for (int k = 0; k <= vectors[static_cast<std::size_t>(j)].degree(l); ++k)
        B(l * w + k, j) = vectors[static_cast<std::size_t>(j)].coeff(l, k);
  }

  {
    Matrix Bn = B;
    for (int j = 0; j < r; ++j) {
      const double cn = Bn.col(j).norm();
      if (!(cn > 0.0)) throw std::invalid_argument("numerically dependent kernel columns");
      Bn.col(j) /= cn;
    }
    Eigen::JacobiSVD<Matrix> svd(Bn);
    if (svd.singularValues()(r - 1) < 1e-10) throw std::invalid_argument("numerically dependent kernel columns");
  }

  KernelSpec spec;
  spec.pivots.assign(static_cast<std::size_t>(r), {-1, -1});
  std::vector<bool> used(static_cast<std::size_t>(n) * w, false);
  for (int j = 0; j < r; ++j) {
    // Prefer pivot coordinates where every other column is already zero (a
    // supplied CREF is then accepted unchanged up to scaling).
    Eigen::Index best = -1;
    double bestVal = 0.0;
    for (Eigen::Index qrow = 0; qrow < B.rows(); ++qrow) {
      if (used[static_cast<std::size_t>(qrow)]) continue;
      bool othersZero = true;
      for (int i = 0; i < r && othersZero; ++i)
        if (i != j && std::abs(B(qrow, i)) > 1e-12 * B.col(i).norm()) othersZero = false;
      if (!othersZero) continue;
      if (std::abs(B(qrow, j)) > bestVal) {
        bestVal = std::abs(B(qrow, j));
        best = qrow;
      }
    }
    if (best < 0 || bestVal < 1e-8 * B.col(j).norm()) {
      spec.pivotCollision = spec.pivotCollision || best < 0 || bestVal > 0.0;
      best = -1;
      bestVal = 0.0;
      for (Eigen::Index qrow = 0; qrow < B.rows(); ++qrow) {
        if (used[static_cast<std::size_t>(qrow)]) continue;
        if (std::abs(B(qrow, j)) > bestVal) {
          bestVal = std::abs(B(qrow, j));
          best = qrow;
        }
      }
      if (best < 0) throw std::invalid_argument("numerically dependent kernel columns");
    }
    used[static_cast<std::size_t>(best)] = true;
    B.col(j) /= B(best, j);
    for (int i = 0; i < r; ++i)
      if (i != j && B(best, i) != 0.0) B.col(i) -= B(best, i) * B.col(j);
    spec.pivots[static_cast<std::size_t>(j)] = {static_cast<int>(best / w), static_cast<int>(best % w)};
  }

  for (int j = 0; j < r; ++j) {
    std::vector<Vector> entries(static_cast<std::size_t>(n));
    for (int l = 0; l < n; ++l) entries[static_cast<std::size_t>(l)] = B.col(j).segment(l * w, w);
    spec.columns.push_back(PolyVector(std::move(entries)).trimmed(0.0));
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Iteration
// ---------------------------------------------------------------------------

enum class StepMode { Newton, Regularized, Damped };

struct SolveOptions {
  NormalizationKind normalization = NormalizationKind::PivotUnit;
  StepMode mode = StepMode::Regularized;
  double tolStep = 1e-12;
  double tolFeas = 1e-10;
  double tolKkt = 1e-9;
  int maxIter = 100;
  int kernelDegreeCap = -1;  // -1: the lemma bound mu-1
  bool degreeSweep = true;
  double sweepFactor = 1.12;
  double gcdTol = -1.0;  // -1: 1e-8 * ||b||
  std::optional<std::vector<PolyVector>> kernelInit;
  /// Displacement structure on the kernel columns; defaults to the degree
  /// bounds of the (initial) columns.
  std::optional<std::vector<KernelShape>> kernelShapes;
  std::optional<MatrixPolynomial> deltaInit;
  /// Start from the minimum-norm structure-conforming dA that makes the
  /// initial kernel columns exactly feasible (useful when the kernel guess
  /// belongs to a different nearby singular matrix).
  bool feasibilityProjectInit = false;
};

struct IterationRecord {
  int iter = 0;
  double deltaNorm = 0.0;     // ||dA||_F
  double feasibility = 0.0;   // max block residual
  double gradInf = 0.0;       // ||grad L||_inf
  double stepNorm = 0.0;      // ||(dx, dlambda)||_2
  double mu = 0.0;            // regularization mu_k
  double tau = 0.0;           // LM damping shift
  int rejected = 0;           // damped trial steps rejected before acceptance
};

struct SolveReport {
  bool converged = false;
  std::string failure;
  MatrixPolynomial deltaA;
  std::vector<PolyVector> kernel;
  double distance = 0.0;
  double lowerBound = 0.0;
  int iterations = 0;
  double feasibility = 0.0;
  double firstOrderResidual = 0.0;
  SecondOrderReport secondOrder;
  std::vector<IterationRecord> history;
  std::vector<PolyVector> svdInit;
  std::vector<std::pair<int, int>> pivots;
  bool pivotCollision = false;
  double lambdaInitResidual = 0.0;
  bool lambdaInitPoor = false;
  bool dampedFallback = false;     // diverged run retried with the LM iteration
  bool minimalityRepaired = false; // kernel re-embedded minimally after convergence
  int repairIterations = 0;
  RefinementProblem problem;
  Vector x;
  Vector x0;
  Vector lambda;
};

struct SolverState {
  Vector x;
  Vector lambda;
  double muK = 0.0;
  double tau = 0.0;
  int iter = 0;
  double stepNorm = std::numeric_limits<double>::infinity();
  std::vector<IterationRecord> history;
};

/// Multipliers from the linear least squares problem J(x)^T lambda = -grad f,
/// minimum-norm when J^T is rank deficient. Returns the attained residual.
inline double init_lambda(const RefinementProblem& P, const Vector& x, Vector& lambda) {
  const Matrix Jt = jacobian(P, x).transpose();
  Vector gradF = Vector::Zero(P.xDim());
  gradF.head(P.numFreeA) = 2.0 * x.head(P.numFreeA);
  lambda = Jt.completeOrthogonalDecomposition().solve(-gradF);
  return (Jt * lambda + gradF).norm();
}

namespace detail {

struct KktPoint {
  Matrix J, H;
  Vector M, gradX, gradL;
  double gradInf = 0.0, grad1 = 0.0, feas = 0.0;
};

inline KktPoint evaluate(const RefinementProblem& P, const Vector& x, const Vector& lambda) {
  KktPoint pt;
  pt.J = jacobian(P, x);
  pt.H = hessian_lagrangian(P, x, lambda);
  pt.M = residual(P, x);
  Vector gradF = Vector::Zero(P.xDim());
  gradF.head(P.numFreeA) = 2.0 * x.head(P.numFreeA);
  pt.gradX = gradF + pt.J.transpose() * lambda;
  pt.gradL.resize(P.xDim() + P.residualDim());
  pt.gradL << pt.gradX, pt.M;
  pt.gradInf = pt.gradL.size() ? pt.gradL.cwiseAbs().maxCoeff() : 0.0;
  pt.grad1 = pt.gradL.lpNorm<1>();
  double feas = 0.0;
  for (int j = 0; j < P.rank(); ++j) {
    feas = std::max(feas, pt.M.segment(P.rowOffset[static_cast<std::size_t>(j)],
                                       P.kernels[static_cast<std::size_t>(j)].rowCount())
                              .norm());
    feas = std::max(feas, std::abs(pt.M(P.numKernelRows + j)));
  }
  pt.feas = feas;
  return pt;
}

/// Solves the bordered system [[H + tau I, J^T], [J, -mu I]] s = -gradL.
/// Returns false when the matrix is numerically singular.
inline bool solve_kkt(const KktPoint& pt, double tau, double mu, Vector& step) {
  const Eigen::Index nx = pt.H.rows(), m = pt.J.rows();
  Matrix K(nx + m, nx + m);
  K << pt.H + tau * Matrix::Identity(nx, nx), pt.J.transpose(), pt.J, -mu * Matrix::Identity(m, m);
  Eigen::FullPivLU<Matrix> lu(K);
  if (lu.rank() < nx + m) return false;
  step = lu.solve(-pt.gradL);
  return step.allFinite();
}

}  // namespace detail

/// One plain Newton step on the KKT system. Signals failure (for the
/// regularized fallback) when the bordered matrix is singular.
inline bool newton_step(const RefinementProblem& P, SolverState& state) {
  const auto pt = detail::evaluate(P, state.x, state.lambda);
  Vector s;
  if (!detail::solve_kkt(pt, 0.0, 0.0, s)) return false;
  state.x += s.head(P.xDim());
  state.lambda += s.tail(P.residualDim());
  state.stepNorm = s.norm();
  state.muK = 0.0;
  return true;
}

/// Regularized step with mu_k = ||grad L||_1 in the lower-right block.
inline bool regularized_step(const RefinementProblem& P, SolverState& state) {
  const auto pt = detail::evaluate(P, state.x, state.lambda);
  state.muK = pt.grad1;
  Vector s;
  if (!detail::solve_kkt(pt, 0.0, state.muK, s)) return false;
  state.x += s.head(P.xDim());
  state.lambda += s.tail(P.residualDim());
  state.stepNorm = s.norm();
  return true;
}

/// Levenberg-Marquardt globalization of the Newton iteration, applied to the
/// KKT residual F(x,lambda) = grad L: trial steps solve
/// (K^2 + tau I) s = -K grad L with the symmetric KKT matrix K, so tau -> 0
/// recovers the plain Newton step and large tau turns s into steepest
/// descent on ||grad L||^2. tau grows on rejected trials and decays on
/// accepted ones; a trial is accepted only if ||grad L||_2 decreases.
inline bool damped_step(const RefinementProblem& P, SolverState& state, int* rejectedOut = nullptr) {
  const auto pt = detail::evaluate(P, state.x, state.lambda);
  state.muK = pt.grad1;
  const Eigen::Index nx = P.xDim(), m = P.residualDim();
  Matrix K(nx + m, nx + m);
  K << pt.H, pt.J.transpose(), pt.J, Matrix::Zero(m, m);
  const Matrix K2 = K * K;
  const Vector Kg = K * pt.gradL;
  const double scale = std::max(1.0, K2.diagonal().cwiseAbs().maxCoeff());
  const double tauMax = 1e14 * scale;
  if (state.tau <= 0.0) state.tau = 1e-3 * scale;
  int rejected = 0;
  const double merit0 = pt.gradL.norm();
  while (state.tau <= tauMax) {
    // The effective shift scales with the merit, so the step degenerates to
    // plain Newton at the quadratic rate once the residual collapses.
    const double tauEff = state.tau * std::min(1.0, merit0);
    Eigen::LDLT<Matrix> ldlt(K2 + tauEff * Matrix::Identity(nx + m, nx + m));
    if (ldlt.info() == Eigen::Success) {
      const Vector s = ldlt.solve(-Kg);
      if (s.allFinite()) {
        const Vector xTrial = state.x + s.head(nx);
        const Vector lTrial = state.lambda + s.tail(m);
        const auto ptTrial = detail::evaluate(P, xTrial, lTrial);
        if (ptTrial.gradL.norm() < merit0) {
          state.x = xTrial;
          state.lambda = lTrial;
          state.stepNorm = s.norm();
          state.tau = std::max(state.tau / 3.0, 1e-14 * scale);
          if (rejectedOut) *rejectedOut = rejected;
          return true;
        }
      }
    }
    state.tau *= 4.0;
    ++rejected;
  }
  if (rejectedOut) *rejectedOut = rejected;
  return false;
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

namespace detail {

inline SolveReport solve_once(const MatrixPolynomial& A, int r, const PerturbationStructure& structure,
                              const SolveOptions& opts) {
  SolveReport rep;
  const int n = A.size();
  const int mu = n * A.degree() + 1;
  rep.lowerBound = distance_lower_bound(A);

  if (structure.freeCount() == 0) {
    rep.failure = "rigid structure: no free coefficients";
    return rep;
  }

  // --- kernel initialization ---
  std::vector<PolyVector> columns;
  if (opts.kernelInit) {
    columns = *opts.kernelInit;
    if (static_cast<int>(columns.size()) != r) throw std::invalid_argument("kernel init has wrong column count");
  } else {
    rep.svdInit = init_kernel_svd(A, r);
    if (opts.degreeSweep) {
      const KernelShape shape = auto_kernel_shape(A, r, opts.kernelDegreeCap, opts.sweepFactor);
      columns = init_kernel_svd(A, r, shape);
    } else {
      const int cap = opts.kernelDegreeCap < 0 ? mu - 1 : std::min(opts.kernelDegreeCap, mu - 1);
      columns = init_kernel_svd(A, r, KernelShape::uniform(n, cap));
    }
    for (auto& c : columns) {
      const double tol = opts.gcdTol > 0.0 ? opts.gcdTol : 1e-8 * c.norm();
      c = make_primitive(c, tol);
    }
  }

  KernelSpec spec = cref_reduce(columns);
  rep.pivots = spec.pivots;
  rep.pivotCollision = spec.pivotCollision;

  std::vector<KernelShape> shapes;
  for (std::size_t j = 0; j < spec.columns.size(); ++j) {
    auto& c = spec.columns[j];
    if (opts.normalization == NormalizationKind::ColumnUnitNorm) {
      c = c.scaled(1.0 / c.norm());
    } else if (opts.normalization == NormalizationKind::MonicPivot) {
      const int l = spec.pivots[j].first;
      const double lead = c.coeff(l, c.degree(l));
      if (lead == 0.0) throw std::invalid_argument("monic normalization needs a nonzero leading pivot coefficient");
      c = c.scaled(1.0 / lead);
    }
    KernelShape shape = KernelShape::of(c);
    if (opts.kernelShapes) {
      if (opts.kernelShapes->size() != spec.columns.size())
        throw std::invalid_argument("kernel shape override has wrong column count");
      shape = (*opts.kernelShapes)[j];
    }
    shapes.push_back(shape);
  }

  NormalizationSpec norm;
  norm.kind = opts.normalization;
  norm.pivots = spec.pivots;

  RefinementProblem P = RefinementProblem::build(A, structure, shapes, norm);

  SolverState state;
  {
    MatrixPolynomial dA0 = opts.deltaInit ? *opts.deltaInit : MatrixPolynomial(n, A.degree());
    std::vector<Vector> bhats;
    for (int j = 0; j < r; ++j)
      bhats.push_back(P.kernels[static_cast<std::size_t>(j)].restrict(
          r_embed_vector(spec.columns[static_cast<std::size_t>(j)], mu)));
    state.x = P.makeX(dA0, bhats);
    if (opts.feasibilityProjectInit && !opts.deltaInit) {
      // minimum-norm free coefficients with (Ahat_j + dAhat_j) bhat_j = 0
      Matrix Psi(P.numKernelRows, P.numFreeA);
      Vector rhs(P.numKernelRows);
      const MatrixPolynomial fixedPart = structure.assemble(Vector::Zero(P.numFreeA));
      for (int j = 0; j < r; ++j) {
        const auto& L = P.kernels[static_cast<std::size_t>(j)];
        Psi.middleRows(P.rowOffset[static_cast<std::size_t>(j)], L.rowCount()) =
            psi_free(L, bhats[static_cast<std::size_t>(j)], structure, P.freeSlots);
        rhs.segment(P.rowOffset[static_cast<std::size_t>(j)], L.rowCount()) =
            -(L.A0 + L.reducedEmbedding(fixedPart)) * bhats[static_cast<std::size_t>(j)];
      }
      state.x.head(P.numFreeA) = Psi.completeOrthogonalDecomposition().solve(rhs);
    }
  }
  rep.lambdaInitResidual = init_lambda(P, state.x, state.lambda);
  rep.lambdaInitPoor = rep.lambdaInitResidual > 1e-2;
  rep.x0 = state.x;

  // --- iterate ---
  int growth = 0;
  double prevStep = std::numeric_limits<double>::infinity();
  bool stepConverged = false;
  std::string stepFailure;
  for (state.iter = 1; state.iter <= opts.maxIter; ++state.iter) {
    IterationRecord rec;
    rec.iter = state.iter;
    bool ok = false;
    switch (opts.mode) {
      case StepMode::Newton:
        ok = newton_step(P, state);
        if (!ok) ok = regularized_step(P, state);
        if (!ok) ok = damped_step(P, state, &rec.rejected);
        break;
      case StepMode::Regularized:
        ok = regularized_step(P, state);
        if (!ok) ok = damped_step(P, state, &rec.rejected);
        break;
      case StepMode::Damped:
        ok = damped_step(P, state, &rec.rejected);
        break;
    }
    if (!ok) {
      // A KKT point leaves no descent for the damped fallback; that is
      // convergence, not divergence.
      const auto ptHere = detail::evaluate(P, state.x, state.lambda);
      if (ptHere.feas <= opts.tolFeas && ptHere.gradInf <= opts.tolKkt)
        stepConverged = true;
      else
        stepFailure = "diverged: no acceptable step";
      break;
    }
    const auto pt = detail::evaluate(P, state.x, state.lambda);
    rec.deltaNorm = std::sqrt(P.objective(state.x));
    rec.feasibility = pt.feas;
    rec.gradInf = pt.gradInf;
    rec.stepNorm = state.stepNorm;
    rec.mu = state.muK;
    rec.tau = state.tau;
    state.history.push_back(rec);

    if (state.stepNorm <= opts.tolStep) {
      stepConverged = true;
      break;
    }
    if (state.stepNorm > prevStep) {
      if (++growth >= 5) {
        stepFailure = "diverged: step norms grew for 5 consecutive iterations";
        break;
      }
    } else {
      growth = 0;
    }
    prevStep = state.stepNorm;
  }
  if (!stepConverged && stepFailure.empty()) stepFailure = "iteration limit reached";

  // --- verify and report ---
  const auto pt = detail::evaluate(P, state.x, state.lambda);
  rep.feasibility = pt.feas;
  rep.firstOrderResidual = pt.gradInf;
  rep.iterations = static_cast<int>(state.history.size());
  rep.history = state.history;
  rep.deltaA = P.deltaA(state.x);
  rep.distance = std::sqrt(P.objective(state.x));
  for (int j = 0; j < r; ++j)
    rep.kernel.push_back(P.kernels[static_cast<std::size_t>(j)].toPolyVector(P.bhat(state.x, j)));
  rep.secondOrder = check_second_order(P, state.x, state.lambda);
  rep.problem = P;
  rep.x = state.x;
  rep.lambda = state.lambda;

  if (!stepConverged) {
    rep.failure = stepFailure;
  } else if (pt.feas > opts.tolFeas) {
    rep.failure = "stalled at an infeasible point";
  } else if (pt.gradInf > opts.tolKkt) {
    rep.failure = "first-order residual above tolerance";
  } else {
    rep.converged = true;
  }
  return rep;
}

}  // namespace detail

/// Full pipeline: one refinement run, a Levenberg-Marquardt retry when the
/// plain iteration diverges, and for r = 1 a minimality repair that strips
/// content from the converged kernel vector and re-embeds it whenever the
/// Jacobian came out rank deficient (an over-estimated kernel shape).
inline SolveReport solve(const MatrixPolynomial& A, int r, const PerturbationStructure& structure,
                         const SolveOptions& opts = {}) {
  SolveReport rep = detail::solve_once(A, r, structure, opts);

  if (!rep.converged && opts.mode != StepMode::Damped && rep.failure.rfind("rigid", 0) == std::string::npos) {
    SolveOptions retry = opts;
    retry.mode = StepMode::Damped;
    SolveReport rep2 = detail::solve_once(A, r, structure, retry);
    if (rep2.converged) {
      rep2.dampedFallback = true;
      rep = std::move(rep2);
    }
  }

  if (rep.converged && r == 1 && rep.secondOrder.jacobianSigmaMin <= 1e-8) {
    try {
      PolyVector b = rep.kernel[0].trimmed(1e-9 * rep.kernel[0].norm());
      b = make_primitive(b, 1e-8 * b.norm());
      if (KernelShape::of(b).freeCount() < KernelShape::of(rep.kernel[0]).freeCount()) {
        SolveOptions repair = opts;
        repair.kernelInit = std::vector<PolyVector>{b};
        repair.kernelShapes.reset();
        repair.deltaInit = rep.deltaA;
        repair.feasibilityProjectInit = false;
        SolveReport rep2 = detail::solve_once(A, r, structure, repair);
        if (rep2.converged && std::abs(rep2.distance - rep.distance) <= 1e-6 * (1.0 + rep.distance)) {
          rep2.minimalityRepaired = true;
          rep2.repairIterations = rep2.iterations;
          rep2.iterations += rep.iterations;
          rep2.history = rep.history;  // the main phase carries the convergence behaviour
          rep2.dampedFallback = rep.dampedFallback;
          rep2.svdInit = rep.svdInit;
          rep = std::move(rep2);
        }
      }
    } catch (const std::invalid_argument&) {
      // content removal can reject degenerate vectors; keep the original run
    }
  }
  return rep;
}

/// Convenience wrapper mirroring the CLI default pipeline.
inline SolveReport solve(const MatrixPolynomial& A, int r, const SolveOptions& opts = {}) {
  return solve(A, r, structure_degree_preserving(A), opts);
}

}  // namespace polyrank
