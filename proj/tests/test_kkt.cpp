#include "helpers.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace polyrank;
using testutil::example_a_matrix;
using testutil::fd_jacobian;
using testutil::random_matrix_polynomial;
using testutil::rng;
using testutil::unif;

namespace {

RefinementProblem random_problem(int n, int d, int r) {
  MatrixPolynomial A = random_matrix_polynomial(n, d);
  if (n > 1) A.coeffRef(0, 1, 0) = 0.0;  // keep one fixed slot in the support mask
  const PerturbationStructure S =
      (n + d + r) % 2 == 0 ? structure_degree_preserving(A) : structure_support_preserving(A);
  std::vector<KernelShape> shapes;
  std::uniform_int_distribution<int> degd(0, std::min(3, n * d));
  for (int j = 0; j < r; ++j) {
    KernelShape sh;
    for (int l = 0; l < n; ++l) sh.degBounds.push_back(degd(rng()));
    shapes.push_back(sh);
  }
  NormalizationSpec norm;
  norm.kind = NormalizationKind::PivotUnit;
  for (int j = 0; j < r; ++j) {
    const auto& db = shapes[static_cast<std::size_t>(j)].degBounds;
    int l = j % n;
    while (db[static_cast<std::size_t>(l)] < 0) l = (l + 1) % n;
    norm.pivots.emplace_back(l, db[static_cast<std::size_t>(l)]);
  }
  return RefinementProblem::build(A, S, shapes, norm);
}

Vector random_x(const RefinementProblem& P) {
  Vector x(P.xDim());
  for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = unif();
  return x;
}

}  // namespace

TEST_CASE("jacobian matches central finite differences") {
  for (int trial = 0; trial < 30; ++trial) {
    const RefinementProblem P = random_problem(2 + trial % 3, 1 + trial % 3, 1 + trial % 2);
    const Vector x = random_x(P);
    const Matrix J = jacobian(P, x);
    const Matrix Jfd = fd_jacobian([&](const Vector& z) { return residual(P, z); }, x);
    CHECK((J - Jfd).norm() <= 1e-6 * std::max(1.0, J.norm()));
  }
}

TEST_CASE("hessian matches finite differences of the gradient") {
  for (int trial = 0; trial < 20; ++trial) {
    const RefinementProblem P = random_problem(2 + trial % 2, 1 + trial % 3, 1 + trial % 2);
    const Vector x = random_x(P);
    Vector lambda(P.residualDim());
    for (Eigen::Index i = 0; i < lambda.size(); ++i) lambda(i) = unif();

    const Matrix H = hessian_lagrangian(P, x, lambda);
    const Matrix Hfd = fd_jacobian(
        [&](const Vector& z) { return grad_lagrangian(P, z, lambda).head(P.xDim()).eval(); }, x);
    CHECK((H - Hfd).norm() <= 1e-5 * std::max(1.0, H.norm()));
    CHECK((H - H.transpose()).norm() <= 1e-14 * std::max(1.0, H.norm()));
  }
}

TEST_CASE("unit-norm normalization keeps derivatives exact") {
  for (int trial = 0; trial < 10; ++trial) {
    MatrixPolynomial A = random_matrix_polynomial(3, 1);
    NormalizationSpec norm{NormalizationKind::ColumnUnitNorm, {{0, 1}}};
    const RefinementProblem P = RefinementProblem::build(A, structure_degree_preserving(A),
                                                         {KernelShape{{1, 1, 0}, {}}}, norm);
    const Vector x = random_x(P);
    Vector lambda(P.residualDim());
    for (Eigen::Index i = 0; i < lambda.size(); ++i) lambda(i) = unif();
    const Matrix J = jacobian(P, x);
    const Matrix Jfd = fd_jacobian([&](const Vector& z) { return residual(P, z); }, x);
    CHECK((J - Jfd).norm() <= 1e-6 * std::max(1.0, J.norm()));
    const Matrix H = hessian_lagrangian(P, x, lambda);
    const Matrix Hfd = fd_jacobian(
        [&](const Vector& z) { return grad_lagrangian(P, z, lambda).head(P.xDim()).eval(); }, x);
    CHECK((H - Hfd).norm() <= 1e-5 * std::max(1.0, H.norm()));
  }
}

TEST_CASE("residual blocks are bilinear in the two unknown groups") {
  const RefinementProblem P = random_problem(3, 2, 1);
  const int nb = P.kernels[0].colCount();
  const Vector b0 = random_x(P).tail(nb);

  auto kernelPart = [&](const Vector& xa, const Vector& xb) {
    Vector x(P.xDim());
    x << xa, xb;
    return residual(P, x).head(P.numKernelRows).eval();
  };
  Vector a1(P.numFreeA), a2(P.numFreeA);
  for (Eigen::Index i = 0; i < a1.size(); ++i) {
    a1(i) = unif();
    a2(i) = unif();
  }
  // affine in dA: superposition of the dA-dependent part
  const Vector base = kernelPart(Vector::Zero(P.numFreeA), b0);
  const Vector r1 = kernelPart(a1, b0) - base;
  const Vector r2 = kernelPart(a2, b0) - base;
  const Vector r12 = kernelPart(a1 + 2.0 * a2, b0) - base;
  CHECK((r12 - r1 - 2.0 * r2).norm() < 1e-12);

  // linear in b for fixed dA, and doubling b doubles the kernel block
  const Vector k1 = kernelPart(a1, b0);
  const Vector k2 = kernelPart(a1, 2.0 * b0);
  CHECK((k2 - 2.0 * k1).norm() < 1e-12);
}

TEST_CASE("doubling the kernel vector rescales the pivot normalization residual") {
  const RefinementProblem P = random_problem(3, 1, 1);
  Vector x = random_x(P);
  const double n1 = residual(P, x)(P.numKernelRows);
  x.tail(P.kernels[0].colCount()) *= 2.0;
  const double n2 = residual(P, x)(P.numKernelRows);
  CHECK(n2 == Catch::Approx(2.0 * (n1 + 1.0) - 1.0).margin(1e-14));
}

TEST_CASE("total perturbation dA = -A with a normalized kernel is feasible") {
  const MatrixPolynomial A = example_a_matrix();
  const PerturbationStructure S = structure_degree_preserving(A);
  NormalizationSpec norm{NormalizationKind::PivotUnit, {{0, 1}}};
  const RefinementProblem P = RefinementProblem::build(A, S, {KernelShape{{1, 0, 0}, {}}}, norm);

  Vector x = Vector::Zero(P.xDim());
  x.head(P.numFreeA) = S.extract(A.scaled(-1.0));
  Vector bhat(P.kernels[0].colCount());
  bhat << unif(), 1.0, unif(), unif();  // pivot coefficient at one
  x.tail(P.kernels[0].colCount()) = bhat;

  const Vector M = residual(P, x);
  CHECK(M.head(P.numKernelRows).norm() < 1e-14);
  CHECK(std::abs(M(P.numKernelRows)) < 1e-14);
}

TEST_CASE("gradient at the origin reduces to the unperturbed residual") {
  const RefinementProblem P = random_problem(3, 1, 1);
  const Vector x = Vector::Zero(P.xDim());
  const Vector lambda = Vector::Zero(P.residualDim());
  const Vector g = grad_lagrangian(P, x, lambda);
  CHECK(g.head(P.xDim()).norm() == 0.0);
  const Vector M = residual(P, x);
  CHECK((g.tail(P.residualDim()) - M).norm() == 0.0);
  // at B = 0 the kernel rows vanish and the normalization rows sit at -1
  CHECK(M.head(P.numKernelRows).norm() == 0.0);
  CHECK(M(P.numKernelRows) == -1.0);
}

TEST_CASE("hessian with zero multipliers is the plain objective curvature") {
  const RefinementProblem P = random_problem(2, 2, 1);
  const Matrix H = hessian_lagrangian(P, random_x(P), Vector::Zero(P.residualDim()));
  Matrix expect = Matrix::Zero(P.xDim(), P.xDim());
  expect.topLeftCorner(P.numFreeA, P.numFreeA) = 2.0 * Matrix::Identity(P.numFreeA, P.numFreeA);
  CHECK((H - expect).norm() == 0.0);
}

TEST_CASE("psi-based and direct Jacobian blocks agree") {
  for (int trial = 0; trial < 10; ++trial) {
    const RefinementProblem P = random_problem(3, 2, 1);
    const Vector x = random_x(P);
    const Matrix J = jacobian(P, x);
    // direct differentiation: the dA block must satisfy the psi identity
    const auto& L = P.kernels[0];
    const Vector b = P.bhat(x, 0);
    const Matrix psiBlock = J.block(0, 0, L.rowCount(), P.numFreeA);
    // contract with a random conforming direction and compare against the
    // embedded directional product
    Vector dir(P.numFreeA);
    for (Eigen::Index i = 0; i < dir.size(); ++i) dir(i) = unif();
    const MatrixPolynomial E = P.structure.assemble(dir) - P.structure.assemble(Vector::Zero(P.numFreeA));
    const Vector lhs = psiBlock * dir;
    const Vector rhs = L.reducedEmbedding(E) * b;
    CHECK((lhs - rhs).norm() < 1e-12 * (1.0 + rhs.norm()));
  }
}

TEST_CASE("second-order report basics") {
  const RefinementProblem P = random_problem(3, 1, 1);
  const Vector x = random_x(P);
  Vector lambda(P.residualDim());
  for (Eigen::Index i = 0; i < lambda.size(); ++i) lambda(i) = unif();
  const SecondOrderReport rep = check_second_order(P, x, lambda);
  CHECK(rep.jacobianRank + rep.jacobianNullity == P.xDim());
  CHECK(rep.jacobianRank <= P.residualDim());
  CHECK(std::isfinite(rep.reducedHessianMinEig));
}

TEST_CASE("the trivial feasible point dA = -A is flagged, not an error") {
  const MatrixPolynomial A = example_a_matrix();
  const PerturbationStructure S = structure_degree_preserving(A);
  NormalizationSpec norm{NormalizationKind::PivotUnit, {{0, 1}}};
  const RefinementProblem P = RefinementProblem::build(A, S, {KernelShape{{1, 0, 0}, {}}}, norm);
  Vector x = Vector::Zero(P.xDim());
  x.head(P.numFreeA) = S.extract(A.scaled(-1.0));
  Vector bhat = Vector::Zero(P.kernels[0].colCount());
  bhat(P.kernels[0].colIndex[0][1]) = 1.0;
  x.tail(P.kernels[0].colCount()) = bhat;
  Vector lambda;
  init_lambda(P, x, lambda);
  const SecondOrderReport rep = check_second_order(P, x, lambda);
  CHECK(std::isfinite(rep.reducedHessianMinEig));  // may be indefinite; must not throw
}
