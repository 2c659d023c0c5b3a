#include "ensemble/bloch.hpp"
#include "ensemble/transcription.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace ensemble;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// x' = -s x + u, x(0) = 1, s in [0.5, 1.5]; no derivative callbacks.
EnsembleProblem decay_problem(double T = 2.0) {
  EnsembleProblem p;
  p.state_dim = 1;
  p.control_dim = 1;
  p.param_box = {{0.5, 1.5}};
  p.dynamics = [](double, ConstVec s, ConstVec x, ConstVec u, VecOut xdot) { xdot[0] = -s[0] * x[0] + u[0]; };
  p.initial_state = [](ConstVec, VecOut x0) { x0[0] = 1.0; };
  p.horizon = FixedHorizon{T};
  return p;
}

// Exact node states of the uncontrolled decay.
VectorXd exact_decay(const EnsembleProblem& p, const CollocationGrid& grid) {
  const auto layout = make_layout(p, grid);
  std::vector<MatrixXd> states;
  const VectorXd t = grid.time_grid.mapped_nodes(*grid.time_map);
  for (Eigen::Index j = 0; j < grid.sample_count(); ++j)
    states.push_back((-grid.samples(0, j) * t.array()).exp().matrix());
  return pack_decision(layout, states, MatrixXd::Zero(grid.nodes(), 1), p.nominal_duration());
}

VectorXd fd_gradient(const std::function<double(const VectorXd&)>& f, const VectorXd& x) {
  VectorXd g(x.size());
  VectorXd xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double h = 1e-6 * (1.0 + std::abs(x[i]));
    xp[i] = x[i] + h;
    const double fp = f(xp);
    xp[i] = x[i] - h;
    const double fm = f(xp);
    xp[i] = x[i];
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

double rel_error(const VectorXd& a, const VectorXd& b) {
  return (a - b).norm() / std::max(1e-12, b.norm());
}

VectorXd random_point(Eigen::Index n, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-scale, scale);
  VectorXd x(n);
  for (auto& v : x) v = d(rng);
  return x;
}

}  // namespace

TEST_CASE("grid samples and weights") {
  const auto p = decay_problem();
  const auto grid = build_grid(p, 6, {4});
  CHECK(grid.nodes() == 7);
  CHECK(grid.sample_count() == 5);
  CHECK(grid.param_weights.sum() == doctest::Approx(1.0));
  CHECK(grid.samples.minCoeff() == 0.5);
  CHECK(grid.samples.maxCoeff() == 1.5);

  EnsembleProblem two = decay_problem();
  two.param_box.push_back({-1.0, 3.0});
  const auto g2 = build_grid(two, 4, {2, 3});
  CHECK(g2.sample_count() == 12);
  CHECK(g2.param_weights.sum() == doctest::Approx(4.0));
  // first parameter fastest
  CHECK(g2.samples(0, 0) == 0.5);
  CHECK(g2.samples(0, 1) == 1.0);
  CHECK(g2.samples(1, 1) == -1.0);

  CHECK_THROWS_AS(build_grid(p, 6, {}), std::invalid_argument);
  CHECK_THROWS_AS(build_grid(p, 1, {4}), std::invalid_argument);
  CHECK_THROWS_AS(build_grid(p, 6, {0}), std::invalid_argument);
}

TEST_CASE("variable layout") {
  auto p = decay_problem();
  p.state_dim = 1;
  const auto grid = build_grid(p, 4, {2});
  const auto layout = make_layout(p, grid);
  CHECK(layout.num_vars() == 3 * 5 + 5);
  CHECK(layout.state_index(2, 1, 0) == 7);
  CHECK(layout.control_index(0, 0) == 15);
  CHECK_FALSE(layout.free_horizon);

  p.horizon = FreeHorizon{0.5, 2.0, 1.0};
  const auto fgrid = build_grid(p, 4, {2});
  const auto flayout = make_layout(p, fgrid);
  CHECK(flayout.free_horizon);
  CHECK(flayout.horizon_index() == 20);
  const auto nlp = transcribe(p, fgrid);
  CHECK(nlp.lower[20] == 0.5);
  CHECK(nlp.upper[20] == 2.0);
}

TEST_CASE("exact trajectories have spectrally small defects") {
  const auto p = decay_problem();
  double coarse = 0.0;
  for (int N : {4, 20}) {
    const auto grid = build_grid(p, N, {3});
    const VectorXd x = exact_decay(p, grid);
    double worst = 0.0;
    for (Eigen::Index j = 0; j < grid.sample_count(); ++j)
      worst = std::max(worst, collocation_defect(p, grid, x, j).cwiseAbs().maxCoeff());
    if (N == 4) coarse = worst;
    else CHECK(worst < 1e-11);
  }
  CHECK(coarse > 1e-4);

  const auto grid = build_grid(p, 20, {3});
  const auto nlp = transcribe(p, grid);
  VectorXd c(nlp.num_eq);
  nlp.eq_constraints(exact_decay(p, grid), c);
  CHECK(c.cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("ensemble and time quadrature of the costs") {
  auto p = decay_problem(2.0);
  p.terminal_cost = [](double, ConstVec x) { return x[0]; };
  p.running_cost = [](ConstVec, ConstVec u) { return u[0] * u[0]; };
  const auto grid = build_grid(p, 12, {10});
  VectorXd x = exact_decay(p, grid);
  const auto layout = make_layout(p, grid);
  const VectorXd t = grid.time_grid.mapped_nodes(*grid.time_map);
  for (Eigen::Index k = 0; k < grid.nodes(); ++k) x[layout.control_index(k, 0)] = t[k];

  const auto c = evaluate_costs(p, grid, x);
  // int_{0.5}^{1.5} exp(-2 s) ds and int_0^2 t^2 dt
  CHECK(c.terminal == doctest::Approx((std::exp(-1.0) - std::exp(-3.0)) / 2.0).epsilon(1e-12));
  CHECK(c.running == doctest::Approx(8.0 / 3.0).epsilon(1e-13));

  // ensemble scope integrates over the box too
  p.running_cost_scope = RunningCostScope::ensemble;
  p.running_cost = [](ConstVec x, ConstVec) { return x[0]; };
  const auto ce = evaluate_costs(p, grid, x);
  // int_{0.5}^{1.5} (1 - exp(-2 s)) / s ds
  double ref = 0.0;
  const auto gq = lgl_grid(60);
  const AffineMap<double> box(0.5, 1.5);
  for (int k = 0; k <= 60; ++k) {
    const double s = box.to_interval(gq.nodes[k]);
    ref += box.weight_scale() * gq.weights[k] * (1.0 - std::exp(-2.0 * s)) / s;
  }
  CHECK(ce.running == doctest::Approx(ref).epsilon(1e-10));
}

TEST_CASE("gradients and Jacobians match finite differences") {
  auto p = decay_problem(1.5);
  p.terminal_cost = [](double, ConstVec x) { return (x[0] - 0.2) * (x[0] - 0.2); };
  p.running_cost = [](ConstVec, ConstVec u) { return 0.5 * u[0] * u[0]; };
  p.control_bound = 2.0;
  const auto grid = build_grid(p, 6, {2});
  const auto nlp = transcribe(p, grid);
  const VectorXd x = random_point(nlp.num_vars, 3);

  VectorXd g;
  nlp.gradient(x, g);
  CHECK(rel_error(g, fd_gradient(nlp.objective, x)) < 1e-6);

  SparseMatrix J;
  nlp.eq_jacobian(x, J);
  MatrixXd Jd = MatrixXd(J);
  for (Eigen::Index r = 0; r < nlp.num_eq; ++r) {
    auto row = [&](const VectorXd& z) {
      VectorXd c(nlp.num_eq);
      nlp.eq_constraints(z, c);
      return c[r];
    };
    CHECK(rel_error(Jd.row(r).transpose(), fd_gradient(row, x)) < 1e-6);
  }
  SparseMatrix G;
  nlp.ineq_jacobian(x, G);
  MatrixXd Gd = MatrixXd(G);
  for (Eigen::Index r = 0; r < nlp.num_ineq; ++r) {
    auto row = [&](const VectorXd& z) {
      VectorXd c(nlp.num_ineq);
      nlp.ineq_constraints(z, c);
      return c[r];
    };
    CHECK(rel_error(Gd.row(r).transpose(), fd_gradient(row, x)) < 1e-6);
  }
}

TEST_CASE("free-horizon gradients include the horizon") {
  auto p = decay_problem();
  p.horizon = FreeHorizon{0.2, 2.0, 1.0};
  p.terminal_cost = [](double T, ConstVec x) { return x[0] * x[0] + 0.1 * T; };
  p.running_cost = [](ConstVec, ConstVec u) { return u[0] * u[0] + 1.0; };
  const auto grid = build_grid(p, 5, {2});
  const auto nlp = transcribe(p, grid);
  VectorXd x = random_point(nlp.num_vars, 5);
  x[make_layout(p, grid).horizon_index()] = 1.1;
  VectorXd g;
  nlp.gradient(x, g);
  CHECK(rel_error(g, fd_gradient(nlp.objective, x)) < 1e-6);

  SparseMatrix J;
  nlp.eq_jacobian(x, J);
  auto col = [&](Eigen::Index i) {
    VectorXd cp(nlp.num_eq), cm(nlp.num_eq);
    VectorXd z = x;
    z[i] += 1e-6;
    nlp.eq_constraints(z, cp);
    z[i] -= 2e-6;
    nlp.eq_constraints(z, cm);
    return VectorXd((cp - cm) / 2e-6);
  };
  const Eigen::Index h = make_layout(p, grid).horizon_index();
  CHECK(rel_error(MatrixXd(J).col(h), col(h)) < 1e-6);
}

TEST_CASE("Bloch transcription gradient check") {
  bloch::BlochParams bp;
  bp.B = 1.0;
  bp.delta = 0.1;
  auto p = bloch::make_ensemble_problem(bp, Eigen::Vector3d::UnitZ());
  p.terminal_cost = [](double, ConstVec x) { return x[2]; };
  p.terminal_cost_gradient = [](double, ConstVec, VecOut g) { g << 0.0, 0.0, 1.0; };
  p.running_cost = [](ConstVec, ConstVec u) { return 0.01 * u.squaredNorm(); };
  p.running_cost_gradient = [](ConstVec, ConstVec u, VecOut gx, VecOut gu) {
    gx.setZero();
    gu = 0.02 * u;
  };
  const auto grid = build_grid(p, 8, {3, 2});
  const auto nlp = transcribe(p, grid);
  const VectorXd x = random_point(nlp.num_vars, 9);
  VectorXd g;
  nlp.gradient(x, g);
  CHECK(rel_error(g, fd_gradient(nlp.objective, x)) < 1e-4);

  SparseMatrix J;
  nlp.eq_jacobian(x, J);
  const MatrixXd Jd(J);
  // directional derivative along a random direction
  const VectorXd d = random_point(nlp.num_vars, 10);
  VectorXd cp(nlp.num_eq), cm(nlp.num_eq);
  nlp.eq_constraints(x + 1e-6 * d, cp);
  nlp.eq_constraints(x - 1e-6 * d, cm);
  CHECK(rel_error(Jd * d, (cp - cm) / 2e-6) < 1e-4);
}

TEST_CASE("initial guess integrates the given controls") {
  const auto p = decay_problem(2.0);
  const auto grid = build_grid(p, 16, {2});
  GuessOptions opt;
  opt.strategy = GuessStrategy::given_controls;
  opt.controls = [](double t, VecOut u) { u[0] = std::cos(t); };
  const VectorXd x = initial_guess(p, grid, opt);
  const auto layout = make_layout(p, grid);
  for (Eigen::Index j = 0; j < grid.sample_count(); ++j) {
    const double s = grid.samples(0, j);
    // x(T) = e^{-sT} + (s cos T + sin T - s e^{-sT}) / (1 + s^2)
    const double T = 2.0;
    const double ref = std::exp(-s * T) + (s * std::cos(T) + std::sin(T) - s * std::exp(-s * T)) / (1 + s * s);
    CHECK(x[layout.state_index(grid.nodes() - 1, j, 0)] == doctest::Approx(ref).epsilon(1e-8));
  }
  CHECK(x[layout.control_index(0, 0)] == doctest::Approx(1.0));

  const VectorXd z = initial_guess(p, grid);
  CHECK(z.segment(layout.states_size(), layout.controls_size()).isZero());
}

TEST_CASE("extracted solutions interpolate states and controls") {
  auto p = decay_problem(2.0);
  const auto grid = build_grid(p, 20, {10});
  const auto nlp = transcribe(p, grid);
  const VectorXd x = exact_decay(p, grid);
  const auto sol = extract_solution(nlp, x, grid, p);
  CHECK(sol.horizon == 2.0);
  CHECK(sol.dynamics_residual <= sol.dynamics_residual_max);
  CHECK(sol.dynamics_residual_max < 1e-10);
  CHECK(sol.control_at(0.7)[0] == 0.0);
  CHECK(sol.state_at(0.7, 5)[0] == doctest::Approx(std::exp(-1.0 * 0.7)).epsilon(1e-12));
  VectorXd s(1);
  s << 0.83;
  CHECK(sol.state_at(1.3, s)[0] == doctest::Approx(std::exp(-0.83 * 1.3)).epsilon(1e-10));
  CHECK(sol.terminal_state(0)[0] == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
}

TEST_CASE("malformed problems are rejected") {
  auto p = decay_problem();
  p.dynamics = nullptr;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = decay_problem();
  p.param_box = {{1.0, 0.0}};
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = decay_problem();
  p.horizon = FreeHorizon{2.0, 1.0, 1.5};
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
}
