#pragma once

#include "polyrank/polyrank.hpp"

#include <functional>
#include <random>
#include <vector>

namespace testutil {

using namespace polyrank;

inline std::mt19937_64& rng() {
  static std::mt19937_64 gen(20240917ULL);
  return gen;
}

inline double unif(double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  return d(rng());
}

inline MatrixPolynomial random_matrix_polynomial(int n, int d) {
  MatrixPolynomial A(n, d);
  for (int k = 0; k <= d; ++k)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) A.coeffRef(i, j, k) = unif();
  return A;
}

inline PolyVector random_poly_vector(int n, const std::vector<int>& degs) {
  std::vector<Vector> entries(static_cast<std::size_t>(n));
  for (int l = 0; l < n; ++l) {
    if (degs[static_cast<std::size_t>(l)] < 0) continue;
    Vector e(degs[static_cast<std::size_t>(l)] + 1);
    for (Eigen::Index k = 0; k < e.size(); ++k) e(k) = unif();
    entries[static_cast<std::size_t>(l)] = e;
  }
  return PolyVector(std::move(entries));
}

/// Matrix polynomial of degree d with the given vector planted in its
/// kernel: rows are random elements of the orthogonal complement of the
/// convolution constraints.
inline MatrixPolynomial planted_singular(int n, int d, const PolyVector& b) {
  const int rowDim = n * (d + 1);
  const int prodDeg = d + std::max(b.maxDegree(), 0);
  Matrix C(prodDeg + 1, rowDim);  // constraints: coefficients of (row a) * b
  C.setZero();
  for (int l = 0; l < n; ++l)
    for (int k = 0; k <= d; ++k)
      for (int c = 0; c <= b.degree(l); ++c) C(k + c, l * (d + 1) + k) += b.coeff(l, c);
  Eigen::JacobiSVD<Matrix> svd(C, Eigen::ComputeFullV);
  int rank = 0;
  const Vector sv = svd.singularValues();
  for (Eigen::Index i = 0; i < sv.size(); ++i) rank += sv(i) > 1e-12 * sv(0);
  const Matrix Z = svd.matrixV().rightCols(rowDim - rank);

  MatrixPolynomial A(n, d);
  for (int i = 0; i < n; ++i) {
    Vector w(Z.cols());
    for (Eigen::Index q = 0; q < w.size(); ++q) w(q) = unif();
    const Vector row = Z * w;
    for (int l = 0; l < n; ++l)
      for (int k = 0; k <= d; ++k) A.coeffRef(i, l, k) = row(l * (d + 1) + k);
  }
  return A;
}

/// Central finite differences of a vector-valued function.
inline Matrix fd_jacobian(const std::function<Vector(const Vector&)>& f, const Vector& x, double h = 1e-7) {
  const Vector f0 = f(x);
  Matrix J(f0.size(), x.size());
  for (Eigen::Index p = 0; p < x.size(); ++p) {
    Vector xp = x, xm = x;
    xp(p) += h;
    xm(p) -= h;
    J.col(p) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return J;
}

// ---------------------------------------------------------------------------
// Matrices from the experiments section, used as regression fixtures.
// ---------------------------------------------------------------------------

/// 3x3 pencil with A_1 having two unit entries (examples I).
inline MatrixPolynomial example_a_matrix() {
  Matrix A0(3, 3), A1(3, 3);
  A0 << 0.0, 0.0400, 0.8900, 0.1500, -0.0200, 0.0, 0.9200, 0.1100, 0.06600;
  A1 << 0, 0, 0, 0, 0, 1, 0, 1, 0;
  return MatrixPolynomial::fromCoefficients({A0, A1});
}

/// 3x3 pencil of examples II.
inline MatrixPolynomial example_b_matrix() {
  Matrix A0(3, 3), A1(3, 3);
  A0 << -1.79, 0.10, -0.6, 0.84, -0.54, 0.49, -0.89, 0.3, 0.74;
  A1 << 0, 0, 0, 0, 0, 1, 0, 1, 0;
  return MatrixPolynomial::fromCoefficients({A0, A1});
}

/// 4x4 degree-3 lower-rank approximation instance.
inline MatrixPolynomial example_c_matrix() {
  Matrix A0(4, 4), A1(4, 4), A2(4, 4), A3(4, 4);
  A0 << 0.09108776, -0.05442464, 0.3645006, 0.01821543,
      -0.1456436, 0.03647524, -0.07277662, 0.07305016,
      0.05478714, -0.05444916, 0.4373220, 0.05478385,
      -0.1274211, 0.09124859, -0.6556615, -0.05446850;
  A1 << 0.09116729, 0.00001797690, 0.2550857, 0.05475106,
      0.0001156514, 0.00001659159, 0.09108906, -0.05447104,
      0.05470823, 0.03662426, 0.1276959, 0.03650378,
      0.05472202, -0.1091389, 0.1458359, -0.09090507;
  A2 << 0.01833149, 0.03661770, 0.01824331, 0.03660918,
      0.01837542, -0.05442525, 0.0, 0.01832234,
      0.01841784, 0.00003900436, 0.0, 0.01836515,
      0.01840752, 0.00001508311, 0.01839699, 0.03659170;
  A3 << 0.0, 0.01837967, 0.0, 0.0,
      0.0, 0.01843603, 0.0, 0.0,
      0.0, 0.01829203, 0.0, 0.0,
      0.0, 0.01842778, 0.0, 0.0;
  return MatrixPolynomial::fromCoefficients({A0, A1, A2, A3});
}

/// Structure for the examples-I affine runs: A_1 entirely fixed, A_0 free on
/// its support (preserveZeros) or dense.
inline PerturbationStructure example_a_structure(bool preserveZeros) {
  const MatrixPolynomial A = example_a_matrix();
  PerturbationStructure S(3, 1, false);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (!preserveZeros || A.coeff(i, j, 0) != 0.0) S.setFree(i, j, 0);
  return S;
}

/// Structure of the 4x4 instance: low-order coefficients free, higher-order
/// (k >= 2) zero coefficients preserved.
inline PerturbationStructure example_c_structure() {
  const MatrixPolynomial A = example_c_matrix();
  PerturbationStructure S(4, 3, false);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      for (int k = 0; k <= 3; ++k)
        if (k <= 1 || A.coeff(i, j, k) != 0.0) S.setFree(i, j, k);
  return S;
}

inline std::vector<PolyVector> example_c_kernel_a() {
  using V = Vector;
  auto vec = [](std::initializer_list<double> c) {
    V v(static_cast<Eigen::Index>(c.size()));
    Eigen::Index i = 0;
    for (double x : c) v(i++) = x;
    return v;
  };
  PolyVector col1({vec({0.0, 0.0, 0.1954059}), vec({-0.7681472, -0.2526800}),
                   vec({-0.1280246, -0.01010720, -0.05727413}), vec({0.2560491, 0.4683004, 0.05727413})});
  PolyVector col2({Vector(), vec({0.7357675, -0.1839419, -0.06131396}),
                   vec({0.1226279, -0.06131396, 0.0, -0.06131396}),
                   vec({-0.2452558, -0.3065698, 0.4905117, 0.06131396})});
  return {col1, col2};
}

inline std::vector<PolyVector> example_c_kernel_b() {
  using V = Vector;
  auto vec = [](std::initializer_list<double> c) {
    V v(static_cast<Eigen::Index>(c.size()));
    Eigen::Index i = 0;
    for (double x : c) v(i++) = x;
    return v;
  };
  PolyVector col1({vec({-0.3162278, 0.1581139, 0.0, 0.1581139}), vec({-0.6324556, -0.4743417, -0.1581139}),
                   Vector(), vec({-0.3162278, 0.3162278})});
  PolyVector col2({vec({-0.1586103, -0.1982629, 0.3172206, 0.03965258}),
                   vec({-0.7930516, -0.4361784, -0.03965258}), vec({-0.07930516, 0.07930516}), Vector()});
  return {col1, col2};
}

/// Kernel init printed for the degree-2 run of examples II.
inline std::vector<PolyVector> example_b_kernel_deg2() {
  auto vec = [](std::initializer_list<double> c) {
    Vector v(static_cast<Eigen::Index>(c.size()));
    Eigen::Index i = 0;
    for (double x : c) v(i++) = x;
    return v;
  };
  PolyVector col({vec({0.12362, 0.25146, 0.16409}), vec({0.55516, 0.23740, -4.5353e-14}),
                  vec({-0.0060443, -0.48688, 1.2457e-13})});
  return {col};
}

}  // namespace testutil
