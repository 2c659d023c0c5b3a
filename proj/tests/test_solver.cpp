#include "ensemble/solver.hpp"
#include "ensemble/transcription.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>

using namespace ensemble;
using Eigen::VectorXd;

namespace {

NlpProblem rosenbrock() {
  auto nlp = NlpProblem::unconstrained(2, [](const VectorXd& x) {
    return 100.0 * std::pow(x[1] - x[0] * x[0], 2) + std::pow(1.0 - x[0], 2);
  });
  nlp.gradient = [](const VectorXd& x, VectorXd& g) {
    g.resize(2);
    g[0] = -400.0 * x[0] * (x[1] - x[0] * x[0]) - 2.0 * (1.0 - x[0]);
    g[1] = 200.0 * (x[1] - x[0] * x[0]);
  };
  return nlp;
}

// min -x(T), x' = u, |u| <= 1, x(0) = 0, T = 1
EnsembleProblem bang_bang() {
  EnsembleProblem p;
  p.state_dim = 1;
  p.control_dim = 1;
  p.dynamics = [](double, ConstVec, ConstVec, ConstVec u, VecOut xdot) { xdot[0] = u[0]; };
  p.dynamics_jacobian = [](double, ConstVec, ConstVec, ConstVec, MatOut fx, MatOut fu) {
    fx.setZero();
    fu.setOnes();
  };
  p.initial_state = [](ConstVec, VecOut x0) { x0[0] = 0.0; };
  p.terminal_cost = [](double, ConstVec x) { return -x[0]; };
  p.terminal_cost_gradient = [](double, ConstVec, VecOut g) { g[0] = -1.0; };
  p.control_bound = 1.0;
  p.horizon = FixedHorizon{1.0};
  return p;
}

}  // namespace

TEST_CASE("unconstrained Rosenbrock") {
  const auto r = solve(rosenbrock(), VectorXd::Constant(2, -1.2));
  CHECK(r.report.status == SolveStatus::optimal);
  CHECK(r.x[0] == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(r.x[1] == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("finite-difference gradient fallback") {
  auto nlp = rosenbrock();
  nlp.gradient = nullptr;
  const auto r = solve(nlp, VectorXd::Constant(2, 0.5));
  CHECK(r.x[0] == doctest::Approx(1.0).epsilon(1e-4));
  const VectorXd g = objective_gradient(nlp, VectorXd::Constant(2, 0.5));
  CHECK(g[0] == doctest::Approx(-400.0 * 0.5 * 0.25 - 1.0).epsilon(1e-6));
}

TEST_CASE("equality constrained quadratic") {
  // min x^2 + 2 y^2  s.t. x + y = 1  ->  (2/3, 1/3), multiplier -4/3 (sign convention free)
  auto nlp = NlpProblem::unconstrained(2, [](const VectorXd& x) { return x[0] * x[0] + 2 * x[1] * x[1]; });
  nlp.gradient = [](const VectorXd& x, VectorXd& g) { g = VectorXd{{2 * x[0], 4 * x[1]}}; };
  nlp.num_eq = 1;
  nlp.eq_constraints = [](const VectorXd& x, VectorXd& c) { c = VectorXd::Constant(1, x[0] + x[1] - 1.0); };
  nlp.eq_jacobian = [](const VectorXd&, SparseMatrix& J) {
    J.resize(1, 2);
    J.setZero();
    J.insert(0, 0) = 1.0;
    J.insert(0, 1) = 1.0;
    J.makeCompressed();
  };
  const auto r = solve(nlp, VectorXd::Zero(2));
  CHECK(r.report.status == SolveStatus::optimal);
  CHECK(r.x[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-6));
  CHECK(r.x[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
  CHECK(std::abs(r.eq_multipliers[0]) == doctest::Approx(4.0 / 3.0).epsilon(1e-4));
  CHECK(r.report.constraint_violation < 1e-6);
  CHECK(kkt_residual(nlp, r.x, r.eq_multipliers, r.ineq_multipliers) < 1e-5);
}

TEST_CASE("bounds and inequalities") {
  // min (x-2)^2 + (y-2)^2  s.t. x <= 1 (bound), x + y <= 2 (inequality)
  auto nlp = NlpProblem::unconstrained(2, [](const VectorXd& x) {
    return (x[0] - 2) * (x[0] - 2) + (x[1] - 2) * (x[1] - 2);
  });
  nlp.upper[0] = 1.0;
  nlp.num_ineq = 1;
  nlp.ineq_constraints = [](const VectorXd& x, VectorXd& c) { c = VectorXd::Constant(1, x[0] + x[1] - 2.0); };
  const auto r = solve(nlp, VectorXd::Zero(2));
  // optimum on x + y = 2 closest to (2, 2) is (1, 1), which also meets x <= 1
  CHECK(r.x[0] == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(r.x[1] == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(constraint_violation(nlp, r.x) < 1e-6);
}

TEST_CASE("bang-bang toy reaches the analytic optimum") {
  const auto p = bang_bang();
  const auto grid = build_grid(p, 8, {});
  const auto nlp = transcribe(p, grid);
  const auto r = solve(nlp, initial_guess(p, grid));
  const double f = nlp.objective(r.x);
  CHECK(std::abs(f - (-1.0)) <= 1e-4);
  CHECK(r.report.constraint_violation <= 1e-6);
  const auto sol = extract_solution(nlp, r.x, grid, p);
  CHECK(sol.controls.minCoeff() > 1.0 - 1e-3);
}

TEST_CASE("repeated solves are byte-identical") {
  const auto p = bang_bang();
  const auto grid = build_grid(p, 8, {});
  const auto nlp = transcribe(p, grid);
  SolverConfig cfg;
  cfg.seed = 42;
  const auto a = solve(nlp, initial_guess(p, grid), cfg);
  const auto b = solve(nlp, initial_guess(p, grid), cfg);
  REQUIRE(a.x.size() == b.x.size());
  CHECK(std::memcmp(a.x.data(), b.x.data(), sizeof(double) * a.x.size()) == 0);
  CHECK(a.report.inner_iters == b.report.inner_iters);
}

TEST_CASE("inconsistent constraints are reported infeasible") {
  auto nlp = NlpProblem::unconstrained(1, [](const VectorXd& x) { return x[0] * x[0]; });
  nlp.num_eq = 2;
  nlp.eq_constraints = [](const VectorXd& x, VectorXd& c) { c = VectorXd{{x[0] - 1.0, x[0] - 2.0}}; };
  SolverConfig cfg;
  cfg.max_outer = 30;
  const auto r = solve(nlp, VectorXd::Zero(1), cfg);
  CHECK(r.report.status == SolveStatus::infeasible);
  CHECK(r.report.constraint_violation > 0.4);
  CHECK(r.x[0] == doctest::Approx(1.5).epsilon(1e-3));
}

TEST_CASE("history and counters are filled") {
  const auto r = solve(rosenbrock(), VectorXd::Constant(2, -1.2));
  CHECK(r.report.outer_iters >= 1);
  CHECK(r.report.inner_iters > 0);
  CHECK(r.report.function_evals >= r.report.inner_iters);
  CHECK(r.report.objective_history.size() == static_cast<std::size_t>(r.report.outer_iters));
  CHECK(to_string(SolveStatus::feasible_stalled) == "feasible_stalled");
}

TEST_CASE("configuration checks") {
  SolverConfig cfg;
  cfg.feasibility_tol = 0.0;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("feasibility_tol"), std::invalid_argument);
  cfg = {};
  cfg.max_inner = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.penalty_growth = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK_THROWS_AS(solve(rosenbrock(), VectorXd::Zero(3)), std::invalid_argument);
}
