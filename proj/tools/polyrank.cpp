#include "polyrank/polyrank.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <future>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace {

using namespace polyrank;

enum class LogLevel { Quiet = 0, Info = 1, Trace = 2 };

LogLevel log_level() {
  const char* env = std::getenv("POLYRANK_LOG");
  if (!env) return LogLevel::Quiet;
  const std::string v(env);
  if (v == "trace") return LogLevel::Trace;
  if (v == "info") return LogLevel::Info;
  return LogLevel::Quiet;
}

void trace_history(const SolveReport& rep) {
  if (log_level() < LogLevel::Trace) return;
  for (const auto& h : rep.history)
    std::cerr << "iter " << h.iter << "  |dA|=" << h.deltaNorm << "  feas=" << h.feasibility
              << "  |gradL|_inf=" << h.gradInf << "  step=" << h.stepNorm << "  mu=" << h.mu << "  tau=" << h.tau
              << "  rejected=" << h.rejected << '\n';
}

struct CommonOpts {
  std::string structureMode = "default";  // default | degree | support | mask:<file>
  int rankDrop = 0;                        // 0: use problem file / 1
  std::string normalize = "pivot";
  std::string init = "default";            // default | svd | file:<path>
  double tolStep = 1e-12, tolFeas = 1e-10, tolKkt = 1e-9;
  int maxIter = 100;
  int kernelDegree = -1;
  bool noSweep = false;
  bool damped = false;
  std::string mode = "regularized";  // newton | regularized | damped
  bool projectInit = false;
  bool json = false;
  unsigned long long seed = 0;
  int starts = 1;
};

PerturbationStructure resolve_structure(const CommonOpts& o, const ProblemFile& pf, const std::string& problemPath) {
  if (o.structureMode == "default") {
    if (pf.structure) return *pf.structure;
    return structure_degree_preserving(pf.A);
  }
  if (o.structureMode == "degree") return structure_degree_preserving(pf.A);
  if (o.structureMode == "support") return structure_support_preserving(pf.A);
  if (o.structureMode.rfind("mask:", 0) == 0) {
    const auto rel = o.structureMode.substr(5);
    const auto resolved = std::filesystem::path(problemPath).parent_path() / rel;
    return parse_structure_mask(std::filesystem::exists(resolved) ? resolved.string() : rel, pf.A);
  }
  throw CLI::ValidationError("--structure", "expected degree|support|mask:<file>");
}

SolveOptions make_solve_options(const CommonOpts& o, const ProblemFile& pf) {
  SolveOptions s;
  if (o.normalize == "pivot")
    s.normalization = NormalizationKind::PivotUnit;
  else if (o.normalize == "column")
    s.normalization = NormalizationKind::ColumnUnitNorm;
  else if (o.normalize == "monic")
    s.normalization = NormalizationKind::MonicPivot;
  else
    throw CLI::ValidationError("--normalize", "expected pivot|column|monic");
  if (o.damped)
    s.mode = StepMode::Damped;
  else if (o.mode == "newton")
    s.mode = StepMode::Newton;
  else if (o.mode == "damped")
    s.mode = StepMode::Damped;
  else
    s.mode = StepMode::Regularized;
  s.tolStep = o.tolStep;
  s.tolFeas = o.tolFeas;
  s.tolKkt = o.tolKkt;
  s.maxIter = o.maxIter;
  s.kernelDegreeCap = o.kernelDegree;
  s.degreeSweep = !o.noSweep;
  s.feasibilityProjectInit = o.projectInit;

  if (o.init == "default") {
    if (pf.kernelInit) {
      s.kernelInit = pf.kernelInit;
      s.kernelShapes = pf.kernelShapes;
    }
  } else if (o.init == "svd") {
    // force the SVD pipeline even when the problem file carries an init
  } else if (o.init.rfind("file:", 0) == 0) {
    const InitFile ini = parse_init_file(o.init.substr(5));
    if (ini.kernel) {
      s.kernelInit = ini.kernel;
      s.kernelShapes = ini.kernelShapes;
    }
    if (ini.delta) s.deltaInit = ini.delta;
  } else {
    throw CLI::ValidationError("--init", "expected svd|file:<path>");
  }
  return s;
}

int resolve_rank(const CommonOpts& o, const ProblemFile& pf) {
  if (o.rankDrop > 0) return o.rankDrop;
  if (pf.rank) return *pf.rank;
  return 1;
}

std::vector<PolyVector> jitter_kernel(const std::vector<PolyVector>& base, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<PolyVector> out = base;
  for (auto& c : out) {
    const double cn = c.norm();
    for (int l = 0; l < c.size(); ++l)
      for (Eigen::Index k = 0; k < c.entry(l).size(); ++k) c.entry(l)(k) += scale * cn * g(rng);
  }
  return out;
}

int run_solve(const std::string& path, const CommonOpts& o) {
  const ProblemFile pf = parse_problem(path);
  const PerturbationStructure S = resolve_structure(o, pf, path);
  const int r = resolve_rank(o, pf);
  SolveOptions base = make_solve_options(o, pf);

  std::vector<SolveOptions> runs{base};
  if (o.starts > 1) {
    std::mt19937_64 rng(o.seed ? o.seed : 0x5eed);
    std::vector<PolyVector> seedKernel;
    if (base.kernelInit)
      seedKernel = *base.kernelInit;
    else {
      const KernelShape shape =
          base.degreeSweep ? auto_kernel_shape(pf.A, r, base.kernelDegreeCap, base.sweepFactor)
                           : KernelShape::uniform(pf.A.size(), pf.A.size() * pf.A.degree());
      seedKernel = init_kernel_svd(pf.A, r, shape);
    }
    for (int k = 1; k < o.starts; ++k) {
      SolveOptions alt = base;
      alt.kernelInit = jitter_kernel(seedKernel, rng, 0.25);
      alt.kernelShapes.reset();
      runs.push_back(alt);
    }
  }

  std::vector<std::future<SolveReport>> futures;
  futures.reserve(runs.size());
  for (const auto& opt : runs)
    futures.push_back(std::async(std::launch::async, [&, opt] { return solve(pf.A, r, S, opt); }));
  std::vector<SolveReport> reports;
  reports.reserve(runs.size());
  for (auto& f : futures) reports.push_back(f.get());

  int best = -1;
  for (std::size_t i = 0; i < reports.size(); ++i)
    if (reports[i].converged && (best < 0 || reports[i].distance < reports[static_cast<std::size_t>(best)].distance))
      best = static_cast<int>(i);
  const SolveReport& rep = reports[static_cast<std::size_t>(best < 0 ? 0 : best)];
  trace_history(rep);
  if (log_level() >= LogLevel::Info)
    std::cerr << "solve " << path << ": " << (rep.converged ? "converged" : rep.failure) << " distance="
              << rep.distance << " iterations=" << rep.iterations << '\n';

  if (o.json) {
    nlohmann::json j = report_to_json(rep);
    if (reports.size() > 1) {
      const REmbedding E = r_embed(pf.A);
      std::vector<Matrix> deltas;
      nlohmann::json all = nlohmann::json::array();
      for (const auto& rr : reports) {
        all.push_back({{"converged", rr.converged}, {"distance", rr.distance}, {"iterations", rr.iterations}});
        if (rr.converged) deltas.push_back(r_embed(rr.deltaA).matrix);
      }
      const SeparationReport sep = separation_check(deltas, E);
      j["starts"] = all;
      j["bestStart"] = best;
      j["separation"] = {{"classes", sep.classes},
                         {"minCrossDistance", sep.minCrossDistance},
                         {"sigmaMin", sep.sigmaMin},
                         {"violation", sep.violation}};
    }
    std::cout << j.dump(2) << '\n';
  } else {
    std::cout << report_to_text(rep);
    if (reports.size() > 1) {
      int conv = 0;
      for (const auto& rr : reports) conv += rr.converged;
      std::cout << "  multi-start: " << conv << "/" << reports.size() << " converged; best distance " << rep.distance
                << '\n';
    }
  }
  return rep.converged ? 0 : 2;
}

int run_bound(const std::string& path, bool json) {
  const ProblemFile pf = parse_problem(path);
  const double lb = distance_lower_bound(pf.A);
  if (json)
    std::cout << nlohmann::json{{"lowerBound", lb}}.dump(2) << '\n';
  else
    std::cout << "lower bound " << lb << '\n';
  return 0;
}

int run_check(const std::string& path, const std::string& candidatePath, const CommonOpts& o) {
  const ProblemFile pf = parse_problem(path);
  const ProblemFile cand = parse_problem(candidatePath);
  if (!cand.kernelInit) throw std::runtime_error("candidate file needs a KERNEL block");
  if (cand.A.size() != pf.A.size()) throw std::runtime_error("candidate dimension mismatch");
  const MatrixPolynomial perturbed = pf.A + cand.A;

  nlohmann::json cols = nlohmann::json::array();
  double worst = 0.0;
  for (const auto& b : *cand.kernelInit) {
    const double res = apply(perturbed, b).norm();
    worst = std::max(worst, res);
    cols.push_back({{"kernelResidual", res}, {"norm", b.norm()}});
  }

  // first-order residual with least-squares multipliers at the candidate
  const PerturbationStructure S = resolve_structure(o, pf, path);
  double gradInf = 0.0, lambdaRes = 0.0;
  {
    std::vector<KernelShape> shapes;
    for (const auto& b : *cand.kernelInit) shapes.push_back(KernelShape::of(b));
    KernelSpec spec = cref_reduce(*cand.kernelInit);
    NormalizationSpec norm{NormalizationKind::ColumnUnitNorm, spec.pivots};
    const RefinementProblem P = RefinementProblem::build(pf.A, S, shapes, norm);
    std::vector<Vector> bhats;
    for (int j = 0; j < P.rank(); ++j)
      bhats.push_back(P.kernels[static_cast<std::size_t>(j)].restrict(
          r_embed_vector((*cand.kernelInit)[static_cast<std::size_t>(j)], P.kernels[static_cast<std::size_t>(j)].mu)));
    const Vector x = P.makeX(cand.A, bhats);
    Vector lambda;
    lambdaRes = init_lambda(P, x, lambda);
    const Vector g = grad_lagrangian(P, x, lambda);
    gradInf = g.head(P.xDim()).cwiseAbs().maxCoeff();
  }

  const double dist = cand.A.frobeniusNorm();
  if (o.json) {
    std::cout << nlohmann::json{{"distance", dist},
                                {"feasibility", worst},
                                {"columns", cols},
                                {"firstOrderResidual", gradInf},
                                {"lambdaLsResidual", lambdaRes},
                                {"lowerBound", distance_lower_bound(pf.A)}}
                     .dump(2)
              << '\n';
  } else {
    std::cout << "candidate distance     " << dist << '\n'
              << "feasibility residual   " << worst << '\n'
              << "first-order residual   " << gradInf << '\n'
              << "lambda LS residual     " << lambdaRes << '\n';
  }
  return 0;
}

int run_rankfact(const std::string& path, const CommonOpts& o, int inner, double rho, int iters, bool refine) {
  const ProblemFile pf = parse_problem(path);
  const PerturbationStructure S = resolve_structure(o, pf, path);
  const REmbedding E = r_embed(pf.A);
  const int R = inner > 0 ? inner : E.cols() - 1;
  const double rhoUsed = rho > 0 ? rho : 1e3 * E.matrix.squaredNorm();
  const RankFactorization rf = coordinate_descent(E, S, R, rhoUsed, iters, static_cast<unsigned>(o.seed));

  nlohmann::json j{{"phi", rf.phiValue},
                   {"structureResidual", rf.structureResidual},
                   {"rejectedUpdates", rf.rejectedUpdates},
                   {"deltaNorm", rf.deltaA.frobeniusNorm()},
                   {"deltaA", matrix_polynomial_to_json(rf.deltaA)}};

  int code = 0;
  if (refine) {
    const int r = resolve_rank(o, pf);
    SolveOptions sopt = make_solve_options(o, pf);
    sopt.deltaInit = rf.deltaA;
    const MatrixPolynomial perturbed = pf.A + rf.deltaA;
    const KernelShape shape = auto_kernel_shape(perturbed, r);
    sopt.kernelInit = init_kernel_svd(perturbed, r, shape);
    sopt.kernelShapes.reset();
    const SolveReport rep = solve(pf.A, r, S, sopt);
    trace_history(rep);
    j["refined"] = report_to_json(rep);
    code = rep.converged ? 0 : 2;
    if (!o.json)
      std::cout << "rankfact phi " << rf.phiValue << ", |dA| " << rf.deltaA.frobeniusNorm() << '\n'
                << "refined:\n"
                << report_to_text(rep);
  }
  if (o.json)
    std::cout << j.dump(2) << '\n';
  else if (!refine)
    std::cout << "rankfact phi " << rf.phiValue << ", |dA| " << rf.deltaA.frobeniusNorm() << ", gamma "
              << rf.structureResidual << '\n';
  return code;
}

void add_common(CLI::App* cmd, CommonOpts& o, bool solverFlags) {
  cmd->add_option("--structure", o.structureMode, "degree|support|mask:<file>");
  cmd->add_flag("--json", o.json, "machine-readable report");
  if (!solverFlags) return;
  cmd->add_option("--rank-drop", o.rankDrop, "target kernel dimension r");
  cmd->add_option("--normalize", o.normalize, "pivot|column|monic");
  cmd->add_option("--init", o.init, "svd|file:<path>");
  cmd->add_option("--tol-step", o.tolStep, "step-norm stopping tolerance");
  cmd->add_option("--tol-feas", o.tolFeas, "feasibility tolerance");
  cmd->add_option("--tol-kkt", o.tolKkt, "first-order residual tolerance");
  cmd->add_option("--max-iter", o.maxIter, "iteration cap");
  cmd->add_option("--kernel-degree", o.kernelDegree, "uniform kernel degree bound (default n*d)");
  cmd->add_flag("--no-degree-sweep", o.noSweep, "skip the minimal-degree reduction of the SVD init");
  cmd->add_flag("--damped", o.damped, "Levenberg-Marquardt globalized iteration");
  cmd->add_option("--mode", o.mode, "newton|regularized|damped");
  cmd->add_flag("--project-init", o.projectInit, "start from the feasibility projection of dA for the given kernel");
  cmd->add_option("--seed", o.seed, "random seed for multi-start");
  cmd->add_option("--starts", o.starts, "number of multi-start solves");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"structured lower-rank approximation of matrix polynomials"};
  app.require_subcommand(1);

  CommonOpts so, co, ro;
  std::string solvePath, boundPath, checkPath, checkCandidate, rankfactPath;
  bool boundJson = false;
  int rfInner = 0, rfIters = 200;
  double rfRho = 0.0;
  bool rfRefine = false;

  auto* cmdSolve = app.add_subcommand("solve", "compute a nearby lower-rank matrix polynomial");
  cmdSolve->add_option("problem", solvePath, "problem file")->required();
  add_common(cmdSolve, so, true);

  auto* cmdBound = app.add_subcommand("bound", "unstructured distance lower bound sigma_min/sqrt(mu)");
  cmdBound->add_option("problem", boundPath, "problem file")->required();
  cmdBound->add_flag("--json", boundJson, "machine-readable report");

  auto* cmdCheck = app.add_subcommand("check", "evaluate feasibility/KKT residuals of a candidate (dA, B)");
  cmdCheck->add_option("problem", checkPath, "problem file")->required();
  cmdCheck->add_option("candidate", checkCandidate, "candidate file with MATPOLY dA and KERNEL blocks")->required();
  add_common(cmdCheck, co, false);

  auto* cmdRankfact = app.add_subcommand("rankfact", "block coordinate descent on the embedded rank factorization");
  cmdRankfact->add_option("problem", rankfactPath, "problem file")->required();
  add_common(cmdRankfact, ro, true);
  cmdRankfact->add_option("--inner", rfInner, "inner dimension R (default M-1)");
  cmdRankfact->add_option("--rho", rfRho, "penalty weight (default 1e3*|Ahat|_F^2)");
  cmdRankfact->add_option("--iters", rfIters, "sweep cap");
  cmdRankfact->add_flag("--refine", rfRefine, "post-refine the projected perturbation with the Newton solver");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 64;
  }

  try {
    if (cmdSolve->parsed()) return run_solve(solvePath, so);
    if (cmdBound->parsed()) return run_bound(boundPath, boundJson);
    if (cmdCheck->parsed()) return run_check(checkPath, checkCandidate, co);
    if (cmdRankfact->parsed()) return run_rankfact(rankfactPath, ro, rfInner, rfRho, rfIters, rfRefine);
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 64;
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 64;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 64;
}
