#pragma once

#include "polyrank/matrix_polynomial.hpp"
#include "polyrank/rank_factorization.hpp"
#include "polyrank/solver.hpp"
#include "polyrank/structure.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace polyrank {

struct ParseError : std::runtime_error {
  ParseError(const std::string& path, int line, const std::string& what)
      : std::runtime_error(path + ":" + std::to_string(line) + ": " + what) {}
};

struct ProblemFile {
  MatrixPolynomial A;
  std::optional<PerturbationStructure> structure;
  std::optional<std::vector<PolyVector>> kernelInit;
  std::optional<std::vector<KernelShape>> kernelShapes;
  std::optional<int> rank;
  std::string structurePath;
};

namespace detail {

struct LineReader {
  std::istream& in;
  std::string path;
  int lineNo = 0;

  /// Next non-empty, non-comment line; false at end of input.
  bool next(std::string& out) {
    std::string raw;
    while (std::getline(in, raw)) {
      ++lineNo;
      const auto hash = raw.find('#');
      if (hash != std::string::npos) raw.erase(hash);
      std::size_t a = raw.find_first_not_of(" \t\r\n");
      if (a == std::string::npos) continue;
      std::size_t b = raw.find_last_not_of(" \t\r\n");
      out = raw.substr(a, b - a + 1);
      return true;
    }
    return false;
  }

  [[noreturn]] void fail(const std::string& what) const { throw ParseError(path, lineNo, what); }
};

inline std::vector<double> parse_reals(LineReader& r, const std::string& line, int expected) {
  std::istringstream ss(line);
  std::vector<double> vals;
  double v;
  while (ss >> v) vals.push_back(v);
  if (!ss.eof()) r.fail("malformed real number");
  if (static_cast<int>(vals.size()) != expected)
    r.fail("expected " + std::to_string(expected) + " values, got " + std::to_string(vals.size()));
  return vals;
}

/// Reads `rows` x `cols` reals arranged under DEG k headers for k = 0..dmax.
inline std::vector<Matrix> parse_deg_blocks(LineReader& r, int rows, int cols, int dmax, std::string& pending) {
  std::vector<Matrix> coeffs(static_cast<std::size_t>(dmax + 1), Matrix::Zero(rows, cols));
  std::string line;
  for (int k = 0; k <= dmax; ++k) {
    if (!r.next(line)) r.fail("unexpected end of file: expected DEG " + std::to_string(k));
    std::istringstream ss(line);
    std::string kw;
    int deg = -1;
    ss >> kw >> deg;
    if (kw != "DEG" || ss.fail() || deg != k) r.fail("expected 'DEG " + std::to_string(k) + "'");
    for (int i = 0; i < rows; ++i) {
      if (!r.next(line)) r.fail("unexpected end of file inside DEG block");
      const auto vals = parse_reals(r, line, cols);
      for (int j = 0; j < cols; ++j) coeffs[static_cast<std::size_t>(k)](i, j) = vals[static_cast<std::size_t>(j)];
    }
  }
  pending.clear();
  return coeffs;
}

inline std::vector<PolyVector> kernel_columns_from_blocks(const std::vector<Matrix>& blocks) {
  const int n = static_cast<int>(blocks.front().rows());
  const int r = static_cast<int>(blocks.front().cols());
  std::vector<PolyVector> cols;
  for (int j = 0; j < r; ++j) {
    std::vector<Vector> entries(static_cast<std::size_t>(n));
    for (int l = 0; l < n; ++l) {
      Vector e(static_cast<Eigen::Index>(blocks.size()));
      for (std::size_t k = 0; k < blocks.size(); ++k) e(static_cast<Eigen::Index>(k)) = blocks[k](l, j);
      entries[static_cast<std::size_t>(l)] = e;
    }
    // per-entry degree bounds inferred from the printed coefficients
    cols.push_back(PolyVector(std::move(entries)).trimmed(0.0));
  }
  return cols;
}

/// Displacement shapes for parsed kernel columns: degree bounds from the
/// nonzero pattern; with pinZeros also every interior zero coefficient is
/// held at zero.
inline std::vector<KernelShape> kernel_shapes_from_columns(const std::vector<PolyVector>& cols, bool pinZeros) {
  std::vector<KernelShape> shapes;
  for (const auto& c : cols) {
    KernelShape s = KernelShape::of(c);
    if (pinZeros)
      for (int l = 0; l < c.size(); ++l)
        for (int k = 0; k < c.degree(l); ++k)
          if (c.coeff(l, k) == 0.0) s.pinnedZero.emplace_back(l, k);
    shapes.push_back(s);
  }
  return shapes;
}

}  // namespace detail

/// Structure mask file: lines `i j k FREE|FIXED [value]` with 1-based i,j
/// and 0-based k; unlisted coefficients follow the degree-preserving rule.
inline PerturbationStructure parse_structure_mask(const std::string& path, const MatrixPolynomial& A) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open structure file");
  detail::LineReader r{in, path};
  PerturbationStructure S = structure_degree_preserving(A);
  std::string line;
  while (r.next(line)) {
    std::istringstream ss(line);
    int i = 0, j = 0, k = 0;
    std::string flag;
    ss >> i >> j >> k >> flag;
    if (ss.fail()) r.fail("expected 'i j k FREE|FIXED [value]'");
    if (i < 1 || i > A.size() || j < 1 || j > A.size() || k < 0 || k > A.degree()) r.fail("coefficient index out of range");
    if (flag == "FREE") {
      S.setFree(i - 1, j - 1, k);
    } else if (flag == "FIXED") {
      double value = 0.0;
      if (!(ss >> value)) value = 0.0;
      S.setFixed(i - 1, j - 1, k, value);
    } else {
      r.fail("unknown flag '" + flag + "'");
    }
  }
  return S;
}

inline ProblemFile parse_problem_stream(std::istream& in, const std::string& path) {
  detail::LineReader r{in, path};
  std::string line;
  if (!r.next(line)) r.fail("empty file: expected 'MATPOLY n d'");
  {
    std::istringstream ss(line);
    std::string kw;
    int n = 0, d = -1;
    ss >> kw >> n >> d;
    if (kw != "MATPOLY" || ss.fail() || n < 1 || d < 0) r.fail("expected header 'MATPOLY n d'");
    ProblemFile pf;
    std::string pending;
    pf.A = MatrixPolynomial::fromCoefficients(detail::parse_deg_blocks(r, n, n, d, pending));
    while (r.next(line)) {
      std::istringstream ls(line);
      std::string key;
      ls >> key;
      if (key == "STRUCTURE") {
        std::string sp;
        ls >> sp;
        if (ls.fail() || sp.empty()) r.fail("STRUCTURE needs a file path");
        pf.structurePath = sp;
        const auto resolved = std::filesystem::path(path).parent_path() / sp;
        pf.structure = parse_structure_mask(resolved.string(), pf.A);
      } else if (key == "RANK") {
        int rr = 0;
        ls >> rr;
        if (ls.fail() || rr < 1) r.fail("RANK needs a positive integer");
        pf.rank = rr;
      } else if (key == "KERNEL") {
        int rr = 0, dmax = -1;
        std::string flag;
        ls >> rr >> dmax >> flag;
        if (rr < 1 || dmax < 0) r.fail("expected 'KERNEL r dmax [PINZEROS]'");
        if (!flag.empty() && flag != "PINZEROS") r.fail("unknown KERNEL flag '" + flag + "'");
        std::string pending2;
        pf.kernelInit = detail::kernel_columns_from_blocks(detail::parse_deg_blocks(r, n, rr, dmax, pending2));
        pf.kernelShapes = detail::kernel_shapes_from_columns(*pf.kernelInit, flag == "PINZEROS");
      } else {
        r.fail("unknown directive '" + key + "'");
      }
    }
    return pf;
  }
}

inline ProblemFile parse_problem(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open problem file");
  return parse_problem_stream(in, path);
}

/// Init files may carry a MATPOLY block (an initial dA), a KERNEL block, or
/// both.
struct InitFile {
  std::optional<MatrixPolynomial> delta;
  std::optional<std::vector<PolyVector>> kernel;
  std::optional<std::vector<KernelShape>> kernelShapes;
};

inline InitFile parse_init_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open init file");
  detail::LineReader r{in, path};
  InitFile out;
  std::string line;
  while (r.next(line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "MATPOLY") {
      int n = 0, d = -1;
      ls >> n >> d;
      if (ls.fail() || n < 1 || d < 0) r.fail("expected 'MATPOLY n d'");
      std::string pending;
      out.delta = MatrixPolynomial::fromCoefficients(detail::parse_deg_blocks(r, n, n, d, pending));
    } else if (key == "KERNEL") {
      int rr = 0, dmax = -1, n = 0;
      std::string flag;
      ls >> rr >> dmax >> flag;
      if (rr < 1 || dmax < 0) r.fail("expected 'KERNEL r dmax [PINZEROS]'");
      if (!flag.empty() && flag != "PINZEROS") r.fail("unknown KERNEL flag '" + flag + "'");
      if (out.delta)
        n = out.delta->size();
      else
        r.fail("KERNEL block in an init file needs a preceding MATPOLY block or use 'KERNELN n r dmax'");
      std::string pending;
      out.kernel = detail::kernel_columns_from_blocks(detail::parse_deg_blocks(r, n, rr, dmax, pending));
      out.kernelShapes = detail::kernel_shapes_from_columns(*out.kernel, flag == "PINZEROS");
    } else if (key == "KERNELN") {
      int n = 0, rr = 0, dmax = -1;
      std::string flag;
      ls >> n >> rr >> dmax >> flag;
      if (n < 1 || rr < 1 || dmax < 0) r.fail("expected 'KERNELN n r dmax [PINZEROS]'");
      if (!flag.empty() && flag != "PINZEROS") r.fail("unknown KERNELN flag '" + flag + "'");
      std::string pending;
      out.kernel = detail::kernel_columns_from_blocks(detail::parse_deg_blocks(r, n, rr, dmax, pending));
      out.kernelShapes = detail::kernel_shapes_from_columns(*out.kernel, flag == "PINZEROS");
    } else {
      r.fail("unknown directive '" + key + "'");
    }
  }
  return out;
}

inline void write_problem(std::ostream& out, const MatrixPolynomial& A,
                          const std::optional<std::vector<PolyVector>>& kernel = std::nullopt) {
  out.precision(17);
  out << "MATPOLY " << A.size() << ' ' << A.degree() << '\n';
  for (int k = 0; k <= A.degree(); ++k) {
    out << "DEG " << k << '\n';
    for (int i = 0; i < A.size(); ++i) {
      for (int j = 0; j < A.size(); ++j) out << (j ? " " : "") << A.coeff(i, j, k);
      out << '\n';
    }
  }
  if (kernel && !kernel->empty()) {
    int dmax = 0;
    for (const auto& c : *kernel) dmax = std::max(dmax, c.maxDegree());
    out << "KERNEL " << kernel->size() << ' ' << dmax << '\n';
    for (int k = 0; k <= dmax; ++k) {
      out << "DEG " << k << '\n';
      for (int i = 0; i < A.size(); ++i) {
        for (std::size_t j = 0; j < kernel->size(); ++j) out << (j ? " " : "") << (*kernel)[j].coeff(i, k);
        out << '\n';
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline nlohmann::json poly_vector_to_json(const PolyVector& b) {
  nlohmann::json entries = nlohmann::json::array();
  for (int l = 0; l < b.size(); ++l) {
    nlohmann::json coeffs = nlohmann::json::array();
    for (int k = 0; k <= b.degree(l); ++k) coeffs.push_back(b.coeff(l, k));
    entries.push_back(coeffs);
  }
  return entries;
}

inline nlohmann::json matrix_polynomial_to_json(const MatrixPolynomial& A) {
  nlohmann::json j;
  j["n"] = A.size();
  j["degree"] = A.degree();
  nlohmann::json coeffs = nlohmann::json::array();
  for (int k = 0; k <= A.degree(); ++k) {
    nlohmann::json rows = nlohmann::json::array();
    for (int i = 0; i < A.size(); ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (int jj = 0; jj < A.size(); ++jj) row.push_back(A.coeff(i, jj, k));
      rows.push_back(row);
    }
    coeffs.push_back(rows);
  }
  j["coefficients"] = coeffs;
  return j;
}

inline nlohmann::json report_to_json(const SolveReport& rep, bool includeHistory = true) {
  nlohmann::json j;
  j["converged"] = rep.converged;
  if (!rep.converged) j["failure"] = rep.failure;
  j["distance"] = rep.distance;
  j["lowerBound"] = rep.lowerBound;
  j["iterations"] = rep.iterations;
  j["feasibility"] = rep.feasibility;
  j["firstOrderResidual"] = rep.firstOrderResidual;
  j["secondOrder"] = {{"jacobianRank", rep.secondOrder.jacobianRank},
                      {"jacobianSigmaMin", rep.secondOrder.jacobianSigmaMin},
                      {"jacobianNullity", rep.secondOrder.jacobianNullity},
                      {"reducedHessianMinEig", rep.secondOrder.reducedHessianMinEig},
                      {"sufficient", rep.secondOrder.sufficient},
                      {"necessary", rep.secondOrder.necessary}};
  j["structure"] = {{"freeCoefficients", rep.problem.structure.freeCount()}};
  nlohmann::json piv = nlohmann::json::array();
  for (const auto& [l, k] : rep.pivots) piv.push_back({{"entry", l + 1}, {"coefficient", k}});
  j["pivots"] = piv;
  j["pivotCollision"] = rep.pivotCollision;
  j["dampedFallback"] = rep.dampedFallback;
  j["minimalityRepaired"] = rep.minimalityRepaired;
  j["lambdaInit"] = {{"residual", rep.lambdaInitResidual}, {"poor", rep.lambdaInitPoor}};
  nlohmann::json kern = nlohmann::json::array();
  for (const auto& b : rep.kernel) kern.push_back(poly_vector_to_json(b));
  j["kernel"] = kern;
  j["deltaA"] = matrix_polynomial_to_json(rep.deltaA);
  if (includeHistory) {
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& h : rep.history)
      hist.push_back({{"iter", h.iter},
                      {"deltaNorm", h.deltaNorm},
                      {"feasibility", h.feasibility},
                      {"gradInf", h.gradInf},
                      {"stepNorm", h.stepNorm},
                      {"mu", h.mu},
                      {"tau", h.tau},
                      {"rejected", h.rejected}});
    j["history"] = hist;
  }
  return j;
}

inline std::string format_poly(const Vector& coeffs, int precision = 6) {
  std::ostringstream out;
  out.precision(precision);
  bool any = false;
  for (Eigen::Index k = 0; k < coeffs.size(); ++k) {
    if (coeffs(k) == 0.0 && coeffs.size() > 1) continue;
    if (any) out << " + ";
    out << coeffs(k);
    if (k == 1)
      out << "*t";
    else if (k > 1)
      out << "*t^" << k;
    any = true;
  }
  if (!any) out << 0.0;
  return out.str();
}

inline std::string report_to_text(const SolveReport& rep) {
  std::ostringstream out;
  out.precision(6);
  out << (rep.converged ? "converged" : ("FAILED: " + rep.failure)) << '\n';
  out << "  distance            " << rep.distance << '\n';
  out << "  lower bound         " << rep.lowerBound << '\n';
  out << "  iterations          " << rep.iterations << '\n';
  out << "  feasibility         " << rep.feasibility << '\n';
  out << "  first-order resid   " << rep.firstOrderResidual << '\n';
  out << "  J rank / sigma_min  " << rep.secondOrder.jacobianRank << " / " << rep.secondOrder.jacobianSigmaMin << '\n';
  out << "  reduced H min eig   " << rep.secondOrder.reducedHessianMinEig
      << (rep.secondOrder.sufficient ? "  (second-order sufficient)" : "") << '\n';
  for (std::size_t j = 0; j < rep.kernel.size(); ++j) {
    out << "  kernel[" << j << "]";
    for (int l = 0; l < rep.kernel[j].size(); ++l)
      out << (l ? "; " : "  = (") << format_poly(rep.kernel[j].entry(l));
    out << ")\n";
  }
  out << "  deltaA:\n";
  for (int k = 0; k <= rep.deltaA.degree(); ++k) {
    out << "    t^" << k << ":\n";
    for (int i = 0; i < rep.deltaA.size(); ++i) {
      out << "     ";
      for (int jj = 0; jj < rep.deltaA.size(); ++jj) out << ' ' << rep.deltaA.coeff(i, jj, k);
      out << '\n';
    }
  }
  return out.str();
}

}  // namespace polyrank
