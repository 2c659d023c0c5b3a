#include "ensemble/studies.hpp"

#include "ensemble/parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace ensemble::studies {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using bloch::BlochParams;
using bloch::Vector2d;

namespace {

[[noreturn]] void bad(const std::string& field, const std::string& what) {
  throw std::invalid_argument(field + ": " + what);
}

template <class E>
E parse_enum(const std::string& s, std::initializer_list<E> values, const char* what) {
  for (E v : values)
    if (to_string(v) == s) return v;
  throw std::invalid_argument(std::string("unknown ") + what + " '" + s + "'");
}

void check_unit(const Vector3d& v, const std::string& field) {
  if (!v.allFinite() || std::abs(v.norm() - 1.0) > 1e-9) bad(field, "must be a unit vector");
}

}  // namespace

std::string to_string(StudyName v) {
  switch (v) {
    case StudyName::robust_pi: return "robust_pi";
    case StudyName::three_stage: return "three_stage";
    case StudyName::time_varying: return "time_varying";
    case StudyName::convergence: return "convergence";
  }
  return "?";
}

std::string to_string(StageMode v) {
  return v == StageMode::concatenated ? "concatenated" : "simultaneous";
}

std::string to_string(CostChoice v) {
  switch (v) {
    case CostChoice::terminal_only: return "terminal_only";
    case CostChoice::energy: return "energy";
    case CostChoice::time: return "time";
  }
  return "?";
}

std::string to_string(InitialPulse v) {
  switch (v) {
    case InitialPulse::automatic: return "auto";
    case InitialPulse::hard: return "hard";
    case InitialPulse::chirp: return "chirp";
  }
  return "?";
}

StudyName parse_study_name(const std::string& s) {
  return parse_enum(s, {StudyName::robust_pi, StudyName::three_stage, StudyName::time_varying,
                        StudyName::convergence},
                    "study");
}

StageMode parse_stage_mode(const std::string& s) {
  return parse_enum(s, {StageMode::concatenated, StageMode::simultaneous}, "stage mode");
}

CostChoice parse_cost_choice(const std::string& s) {
  return parse_enum(s, {CostChoice::terminal_only, CostChoice::energy, CostChoice::time}, "cost choice");
}

InitialPulse parse_initial_pulse(const std::string& s) {
  return parse_enum(s, {InitialPulse::automatic, InitialPulse::hard, InitialPulse::chirp}, "initial pulse");
}

void StudySpec::validate() const {
  bloch.validate();
  if (N < 2) bad("orders.N", "must be >= 2");
  if (bloch.has_omega_axis() && N_omega < 1) bad("orders.N_omega", "must be >= 1 when B > 0");
  if (bloch.has_epsilon_axis() && N_epsilon < 1) bad("orders.N_epsilon", "must be >= 1 when delta > 0");
  if (!(weights.terminal >= 0.0) || !std::isfinite(weights.terminal)) bad("weights.terminal", "must be finite and >= 0");
  if (!(weights.energy >= 0.0) || !std::isfinite(weights.energy)) bad("weights.energy", "must be finite and >= 0");
  if (!(weights.time >= 0.0) || !std::isfinite(weights.time)) bad("weights.time", "must be finite and >= 0");
  if (weights.terminal == 0.0 && weights.energy == 0.0 && weights.time == 0.0)
    bad("weights", "at least one weight must be positive");
  check_unit(initial_state, "study.initial_state");
  check_unit(target, "study.target");

  if (name == StudyName::three_stage) {
    if (stages.empty()) bad("stages.targets", "three_stage needs at least one stage");
    double total = 0.0;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const std::string idx = "[" + std::to_string(i) + "]";
      check_unit(stages[i].initial, "stages.initial" + idx);
      check_unit(stages[i].target, "stages.targets" + idx);
      if (!(stages[i].duration_fraction > 0.0)) bad("stages.fractions" + idx, "must be > 0");
      total += stages[i].duration_fraction;
      if (i > 0 && (stages[i].initial - stages[i - 1].target).norm() > 1e-9)
        bad("stages.initial" + idx, "must equal the previous stage target");
    }
    if (std::abs(total - 1.0) > 1e-9) bad("stages.fractions", "must sum to 1");
  }
  if (name == StudyName::convergence) {
    if (sweep.N.empty()) bad("sweep.N", "must not be empty");
    if (sweep.N_omega.empty()) bad("sweep.N_omega", "must not be empty");
    for (int n : sweep.N)
      if (n < 2) bad("sweep.N", "entries must be >= 2");
    for (int n : sweep.N_omega)
      if (n < 1) bad("sweep.N_omega", "entries must be >= 1");
    if (!bloch.has_omega_axis()) bad("bloch.B", "convergence needs B > 0");
  }
  if (name == StudyName::time_varying) {
    if (!(min_duration > 0.0) || !(min_duration <= bloch.duration))
      bad("study.min_duration", "must lie in (0, bloch.duration]");
  }

  const int nw = name == StudyName::convergence
                     ? *std::max_element(sweep.N_omega.begin(), sweep.N_omega.end())
                     : N_omega;
  if (validation.omega_points < 0) bad("validation.omega_points", "must be >= 0");
  if (validation.epsilon_points < 0) bad("validation.epsilon_points", "must be >= 0");
  if (bloch.has_omega_axis() && validation.omega_points > 0 && validation.omega_points < 4 * nw + 1)
    bad("validation.omega_points", "must be at least 4 N_omega + 1");
  if (bloch.has_epsilon_axis() && validation.epsilon_points > 0 && validation.epsilon_points < 4 * N_epsilon + 1)
    bad("validation.epsilon_points", "must be at least 4 N_epsilon + 1");
  if (validation.rk4_steps < 100) bad("validation.rk4_steps", "must be >= 100");
  for (const auto& [v, f] : {std::pair{thresholds.average, "thresholds.average"},
                             std::pair{thresholds.worst, "thresholds.worst"}}) {
    if (v && !(std::abs(*v) <= 1.0)) bad(f, "must lie in [-1, 1]");
  }
}

StudySpec robust_pi_spec() {
  StudySpec s;
  s.name = StudyName::robust_pi;
  s.bloch.B = 1.0;
  s.bloch.delta = 0.1;
  s.bloch.amplitude_bound = 2.0;
  s.bloch.duration = 7.5398;
  s.N = 32;
  s.N_omega = 10;
  s.N_epsilon = 4;
  s.weights = {1.0, 0.001, 0.0};
  s.initial_state = Vector3d::UnitZ();
  s.target = -Vector3d::UnitZ();
  s.thresholds.average = 0.98;
  return s;
}

StudySpec three_stage_spec() {
  StudySpec s;
  s.name = StudyName::three_stage;
  s.bloch.B = 1.0;
  s.bloch.delta = 0.0;
  s.bloch.amplitude_bound = 2.0;
  s.bloch.duration = 22.5;
  s.N = 32;
  s.N_omega = 10;
  s.N_epsilon = 0;
  s.weights = {1.0, 0.001, 0.0};
  s.initial_state = Vector3d::UnitZ();
  s.target = Vector3d::UnitZ();
  s.stages = {{Vector3d::UnitZ(), Vector3d::UnitY(), 1.0 / 3.0},
              {Vector3d::UnitY(), -Vector3d::UnitY(), 1.0 / 3.0},
              {-Vector3d::UnitY(), Vector3d::UnitZ(), 1.0 / 3.0}};
  s.thresholds.worst = 0.95;
  return s;
}

StudySpec time_varying_spec() {
  StudySpec s;
  s.name = StudyName::time_varying;
  s.bloch.B = 0.0;
  s.bloch.delta = 0.0;
  s.bloch.amplitude_bound = 2.0;
  s.bloch.duration = 1.0;
  s.bloch.frequency_profile = [](double t) { return std::sin(t); };
  s.N = 32;
  s.N_omega = 0;
  s.N_epsilon = 0;
  s.weights = {10.0, 0.1, 0.1};
  s.initial_state = Vector3d::UnitZ();
  s.target = Vector3d::UnitX();
  s.min_duration = 0.05;
  s.thresholds.average = 0.99;
  return s;
}

StudySpec convergence_spec() {
  StudySpec s;
  s.name = StudyName::convergence;
  s.bloch.B = 1.0;
  s.bloch.delta = 0.0;
  s.bloch.amplitude_bound = 10.0;
  s.bloch.duration = 1.0;
  s.N = 32;
  s.N_omega = 12;
  s.N_epsilon = 0;
  s.weights = {1.0, 0.0, 0.0};
  s.initial_state = Vector3d::UnitZ();
  s.target = Vector3d::UnitX();
  s.sweep.N = {8, 16, 24, 32, 40};
  s.sweep.N_omega = {2, 4, 8, 12};
  s.thresholds.average = 0.99;
  return s;
}

StudySpec default_spec(StudyName name) {
  switch (name) {
    case StudyName::robust_pi: return robust_pi_spec();
    case StudyName::three_stage: return three_stage_spec();
    case StudyName::time_varying: return time_varying_spec();
    case StudyName::convergence: return convergence_spec();
  }
  return robust_pi_spec();
}

// ---- validation lattice ---------------------------------------------------

std::vector<Vector2d> ValidationGrid::points() const {
  std::vector<Vector2d> out;
  out.reserve(omega.size() * epsilon.size());
  for (Index e = 0; e < epsilon.size(); ++e)
    for (Index w = 0; w < omega.size(); ++w) out.emplace_back(omega[w], epsilon[e]);
  return out;
}

ValidationGrid validation_grid(const BlochParams& params, int omega_points, int epsilon_points) {
  ValidationGrid g;
  if (params.has_omega_axis()) {
    if (omega_points < 2) throw std::invalid_argument("validation_grid: need >= 2 omega points");
    g.omega = VectorXd::LinSpaced(omega_points, -params.B, params.B);
  } else {
    g.omega = VectorXd::Zero(1);
  }
  if (params.has_epsilon_axis()) {
    if (epsilon_points < 2) throw std::invalid_argument("validation_grid: need >= 2 epsilon points");
    g.epsilon = VectorXd::LinSpaced(epsilon_points, 1.0 - params.delta, 1.0 + params.delta);
  } else {
    g.epsilon = VectorXd::Ones(1);
  }
  return g;
}

ValidationGrid validation_grid(const StudySpec& spec) {
  int nw = spec.N_omega;
  if (spec.name == StudyName::convergence && !spec.sweep.N_omega.empty())
    nw = *std::max_element(spec.sweep.N_omega.begin(), spec.sweep.N_omega.end());
  const int wp = spec.validation.omega_points > 0 ? spec.validation.omega_points : std::max(41, 4 * nw + 1);
  const int ep = spec.validation.epsilon_points > 0 ? spec.validation.epsilon_points
                                                    : std::max(9, 4 * spec.N_epsilon + 1);
  return validation_grid(spec.bloch, wp, ep);
}

std::vector<io::ScoredPoint> RobustnessReport::rows() const {
  std::vector<io::ScoredPoint> out;
  for (Index e = 0; e < grid.epsilon.size(); ++e)
    for (Index w = 0; w < grid.omega.size(); ++w) out.push_back({grid.omega[w], grid.epsilon[e], scores(w, e)});
  return out;
}

RobustnessReport make_report(const ValidationGrid& grid, const std::vector<Vector3d>& terminal,
                             const Vector3d& target, const Thresholds& thresholds) {
  const Index nw = grid.omega.size();
  const Index ne = grid.epsilon.size();
  if (static_cast<Index>(terminal.size()) != nw * ne)
    throw std::invalid_argument("make_report: one terminal state per lattice point required");
  RobustnessReport r;
  r.grid = grid;
  r.target = target;
  r.scores.resize(nw, ne);
  for (Index e = 0; e < ne; ++e)
    for (Index w = 0; w < nw; ++w) r.scores(w, e) = terminal[e * nw + w].dot(target);
  r.average = r.scores.mean();
  r.worst = r.scores.minCoeff();
  r.passed = std::isfinite(r.average) && (!thresholds.average || r.average >= *thresholds.average) &&
             (!thresholds.worst || r.worst >= *thresholds.worst);
  return r;
}

RobustnessReport validate_pulse(const BlochParams& params, const bloch::ControlFn& controls,
                                const Vector3d& initial, const Vector3d& target,
                                const ValidationGrid& grid, const Thresholds& thresholds, int steps) {
  const auto terminal = bloch::simulate(params, controls, initial, grid.points(), steps);
  return make_report(grid, terminal, target, thresholds);
}

PulseChecks check_pulse(const BlochParams& params, const PulseSolution& pulse,
                        const std::vector<Vector3d>& collocation_initial, int steps) {
  const Index S = pulse.param_samples.cols();
  if (static_cast<Index>(collocation_initial.size()) != S)
    throw std::invalid_argument("check_pulse: one initial state per collocation sample required");
  BlochParams p = params;
  p.duration = pulse.horizon;
  std::vector<Vector2d> samples;
  for (Index j = 0; j < S; ++j) samples.push_back(bloch::physical_parameters(p, pulse.param_samples.col(j)));
  const auto rk4 = bloch::simulate(p, pulse.control_function(), collocation_initial, samples, steps,
                                   pulse.time_map.a);
  PulseChecks c;
  for (Index j = 0; j < S; ++j)
    c.oracle_gap = std::max(c.oracle_gap, (rk4[j] - pulse.terminal_state(j)).cwiseAbs().maxCoeff());

  const int fine = 10 * static_cast<int>(pulse.controls.rows());
  c.max_amplitude = pulse.controls.rowwise().norm().maxCoeff();
  for (int i = 0; i <= fine; ++i) {
    const double t = pulse.time_map.a + pulse.time_map.length() * i / fine;
    c.max_amplitude = std::max(c.max_amplitude, pulse.control_at(t).norm());
  }
  // The interpolant may overshoot the node bound slightly between nodes.
  c.amplitude_ok = c.max_amplitude <= params.amplitude_bound * (1.0 + 1e-3);
  c.energy = pulse.time_map.weight_scale() *
             pulse.time_grid.weights.dot(pulse.controls.rowwise().squaredNorm());
  return c;
}

// ---- problem construction ---------------------------------------------------

namespace {

double box_volume(const EnsembleProblem& p) {
  double v = 1.0;
  for (const auto& b : p.param_box) v *= b.width();
  return v;
}

// Terminal -w <M, target> averaged over the box plus energy |u|^2 + time.
EnsembleProblem build_problem(const BlochParams& params, const Vector3d& initial, const Vector3d& target,
                              const CostWeights& w) {
  EnsembleProblem p = bloch::make_ensemble_problem(params, initial);
  const double scale = w.terminal / box_volume(p);
  p.terminal_cost = [scale, target](double, ConstVec x) { return -scale * target.dot(Vector3d(x)); };
  p.terminal_cost_gradient = [scale, target](double, ConstVec, VecOut g) { g = -scale * target; };
  if (w.energy > 0.0 || w.time > 0.0) {
    const double e = w.energy;
    const double c = w.time;
    p.running_cost = [e, c](ConstVec, ConstVec u) { return e * u.squaredNorm() + c; };
    p.running_cost_gradient = [e](ConstVec, ConstVec u, VecOut gx, VecOut gu) {
      gx.setZero();
      gu = 2.0 * e * u;
    };
  }
  return p;
}

// Constant rotation taking initial to target within the amplitude bound.
bloch::ControlFn hard_pulse(const Vector3d& initial, const Vector3d& target, double T, double A) {
  Vector3d axis = initial.cross(target);
  double theta = std::atan2(axis.norm(), initial.dot(target));
  if (axis.norm() < 1e-12) {
    axis = Vector3d::UnitY() - Vector3d::UnitY().dot(initial) * initial;
    if (axis.norm() < 1e-6) axis = Vector3d::UnitX() - Vector3d::UnitX().dot(initial) * initial;
  }
  axis.normalize();
  const double rate = std::min(theta / T, A);
  const Vector2d u(rate * axis.y(), rate * axis.x());
  return [u](double, VecOut out) { out = u; };
}

// Linear chirp sweeping the frequency band at 95% of the bound.
bloch::ControlFn chirp_pulse(double A, double B, double T, double start) {
  const double sweep = 4.0 * B;
  return [=](double t, VecOut out) {
    const double s = t - start;
    const std::complex<double> z = 0.95 * A * std::exp(std::complex<double>(0.0, sweep * (s * s / T - s)));
    out << z.real(), z.imag();
  };
}

std::vector<int> param_orders(const BlochParams& params, int nw, int ne) {
  std::vector<int> orders;
  if (params.has_omega_axis()) orders.push_back(nw);
  if (params.has_epsilon_axis()) orders.push_back(ne);
  return orders;
}

struct Solved {
  PulseSolution pulse;
  SolveReport report;
};

Solved solve_single(const EnsembleProblem& problem, int N, const std::vector<int>& orders,
                    const bloch::ControlFn& guess, const SolverConfig& solver) {
  const CollocationGrid grid = build_grid(problem, N, orders);
  const NlpProblem nlp = transcribe(problem, grid);
  GuessOptions g;
  g.strategy = GuessStrategy::given_controls;
  g.controls = guess;
  const VectorXd x0 = initial_guess(problem, grid, g);
  const SolveResult r = solve(nlp, x0, solver);
  Solved out{extract_solution(nlp, r.x, grid, problem), r.report};
  out.pulse.solver_stats = r.report;
  return out;
}

std::vector<Vector3d> repeat(const Vector3d& v, Index n) { return std::vector<Vector3d>(n, v); }

}  // namespace

RobustPiResult run_robust_pi(const StudySpec& spec, const SolverConfig& solver) {
  spec.validate();
  if (spec.name != StudyName::robust_pi) throw std::invalid_argument("study.name: expected robust_pi");
  const BlochParams& params = spec.bloch;
  const EnsembleProblem problem = build_problem(params, spec.initial_state, spec.target, spec.weights);
  const bool chirp = spec.initial_pulse == InitialPulse::chirp ||
                     (spec.initial_pulse == InitialPulse::automatic && params.has_omega_axis());
  const bloch::ControlFn guess =
      chirp ? chirp_pulse(params.amplitude_bound, params.B, params.duration, 0.0)
            : hard_pulse(spec.initial_state, spec.target, params.duration, params.amplitude_bound);
  Solved s = solve_single(problem, spec.N, param_orders(params, spec.N_omega, spec.N_epsilon), guess, solver);

  RobustPiResult out;
  out.report = validate_pulse(params, s.pulse.control_function(), spec.initial_state, spec.target,
                              validation_grid(spec), spec.thresholds, spec.validation.rk4_steps);
  out.checks = check_pulse(params, s.pulse, repeat(spec.initial_state, s.pulse.param_samples.cols()),
                           spec.validation.rk4_steps);
  out.pulse = std::move(s.pulse);
  return out;
}

// ---- three stages ---------------------------------------------------------

double ThreeStageResult::worst() const {
  double w = std::numeric_limits<double>::infinity();
  for (const auto& s : stages) w = std::min(w, s.report.worst);
  return w;
}

NlpProblem link_stages(const std::vector<NlpProblem>& stages) {
  if (stages.empty()) throw std::invalid_argument("link_stages: no stages");
  for (const auto& s : stages)
    if (!s.layout) throw std::invalid_argument("link_stages: every stage needs a variable layout");
  const Index K = static_cast<Index>(stages.size());
  std::vector<Index> var_off(K + 1, 0), eq_off(K + 1, 0), ineq_off(K + 1, 0);
  for (Index k = 0; k < K; ++k) {
    var_off[k + 1] = var_off[k] + stages[k].num_vars;
    eq_off[k + 1] = eq_off[k] + stages[k].num_eq;
    ineq_off[k + 1] = ineq_off[k] + stages[k].num_ineq;
  }
  // Link rows: last node of stage k equals first node of stage k+1.
  std::vector<Eigen::Triplet<double>> link;
  Index links = 0;
  for (Index k = 0; k + 1 < K; ++k) {
    const auto& a = *stages[k].layout;
    const auto& b = *stages[k + 1].layout;
    if (a.samples != b.samples || a.state_dim != b.state_dim)
      throw std::invalid_argument("link_stages: stages have different sample sets");
    for (Index j = 0; j < a.samples; ++j)
      for (Index c = 0; c < a.state_dim; ++c) {
        link.emplace_back(links, var_off[k] + a.state_index(a.nodes - 1, j, c), 1.0);
        link.emplace_back(links, var_off[k + 1] + b.state_index(0, j, c), -1.0);
        ++links;
      }
  }

  NlpProblem out;
  out.num_vars = var_off[K];
  out.num_eq = eq_off[K] + links;
  out.num_ineq = ineq_off[K];
  out.lower.resize(out.num_vars);
  out.upper.resize(out.num_vars);
  for (Index k = 0; k < K; ++k) {
    out.lower.segment(var_off[k], stages[k].num_vars) = stages[k].lower;
    out.upper.segment(var_off[k], stages[k].num_vars) = stages[k].upper;
  }

  out.objective = [stages, var_off](const VectorXd& x) {
    double f = 0.0;
    for (std::size_t k = 0; k < stages.size(); ++k)
      f += stages[k].objective(x.segment(var_off[k], stages[k].num_vars));
    return f;
  };
  out.gradient = [stages, var_off](const VectorXd& x, VectorXd& g) {
    g.resize(x.size());
    for (std::size_t k = 0; k < stages.size(); ++k) {
      const VectorXd xk = x.segment(var_off[k], stages[k].num_vars);
      VectorXd gk;
      if (stages[k].gradient)
        stages[k].gradient(xk, gk);
      else
        gk = objective_gradient(stages[k], xk);
      g.segment(var_off[k], stages[k].num_vars) = gk;
    }
  };
  out.eq_constraints = [stages, var_off, eq_off, link, links](const VectorXd& x, VectorXd& c) {
    c.resize(eq_off.back() + links);
    for (std::size_t k = 0; k < stages.size(); ++k) {
      if (stages[k].num_eq == 0) continue;
      VectorXd ck;
      stages[k].eq_constraints(x.segment(var_off[k], stages[k].num_vars), ck);
      c.segment(eq_off[k], stages[k].num_eq) = ck;
    }
    VectorXd l = VectorXd::Zero(links);
    for (const auto& t : link) l[t.row()] += t.value() * x[t.col()];
    c.tail(links) = l;
  };
  out.eq_jacobian = [stages, var_off, eq_off, link, links](const VectorXd& x, SparseMatrix& J) {
    std::vector<Eigen::Triplet<double>> trip;
    for (std::size_t k = 0; k < stages.size(); ++k) {
      if (stages[k].num_eq == 0) continue;
      SparseMatrix Jk;
      stages[k].eq_jacobian(x.segment(var_off[k], stages[k].num_vars), Jk);
      for (Index o = 0; o < Jk.outerSize(); ++o)
        for (SparseMatrix::InnerIterator it(Jk, o); it; ++it)
          trip.emplace_back(eq_off[k] + it.row(), var_off[k] + it.col(), it.value());
    }
    for (const auto& t : link) trip.emplace_back(eq_off.back() + t.row(), t.col(), t.value());
    J.resize(eq_off.back() + links, var_off.back());
    J.setFromTriplets(trip.begin(), trip.end());
  };
  if (out.num_ineq > 0) {
    out.ineq_constraints = [stages, var_off, ineq_off](const VectorXd& x, VectorXd& g) {
      g.resize(ineq_off.back());
      for (std::size_t k = 0; k < stages.size(); ++k) {
        if (stages[k].num_ineq == 0) continue;
        VectorXd gk;
        stages[k].ineq_constraints(x.segment(var_off[k], stages[k].num_vars), gk);
        g.segment(ineq_off[k], stages[k].num_ineq) = gk;
      }
    };
    out.ineq_jacobian = [stages, var_off, ineq_off](const VectorXd& x, SparseMatrix& J) {
      std::vector<Eigen::Triplet<double>> trip;
      for (std::size_t k = 0; k < stages.size(); ++k) {
        if (stages[k].num_ineq == 0) continue;
        SparseMatrix Jk;
        stages[k].ineq_jacobian(x.segment(var_off[k], stages[k].num_vars), Jk);
        for (Index o = 0; o < Jk.outerSize(); ++o)
          for (SparseMatrix::InnerIterator it(Jk, o); it; ++it)
            trip.emplace_back(ineq_off[k] + it.row(), var_off[k] + it.col(), it.value());
      }
      J.resize(ineq_off.back(), var_off.back());
      J.setFromTriplets(trip.begin(), trip.end());
    };
  }
  return out;
}

namespace {

struct StagePlan {
  BlochParams params;
  double start = 0.0;
  EnsembleProblem problem;
};

std::vector<StagePlan> plan_stages(const StudySpec& spec) {
  std::vector<StagePlan> plans;
  double start = 0.0;
  for (const auto& st : spec.stages) {
    StagePlan p;
    p.params = spec.bloch;
    p.params.duration = st.duration_fraction * spec.bloch.duration;
    p.start = start;
    p.problem = build_problem(p.params, st.initial, st.target, spec.weights);
    p.problem.start_time = start;
    start += p.params.duration;
    plans.push_back(std::move(p));
  }
  return plans;
}

// Chains RK4 through the stages over the lattice and scores every boundary.
void chain_reports(const StudySpec& spec, const std::vector<StagePlan>& plans, ThreeStageResult& out) {
  const ValidationGrid grid = validation_grid(spec);
  const auto points = grid.points();
  std::vector<Vector3d> states(points.size(), spec.stages.front().initial);
  for (std::size_t k = 0; k < plans.size(); ++k) {
    states = bloch::simulate(plans[k].params, out.stages[k].pulse.control_function(), states, points,
                             spec.validation.rk4_steps, plans[k].start);
    out.stages[k].report = make_report(grid, states, spec.stages[k].target, spec.thresholds);
  }
}

}  // namespace

namespace {

// Each stage solved from its nominal initial state.
ThreeStageResult solve_independent(const StudySpec& spec, const std::vector<StagePlan>& plans,
                                   const std::vector<int>& orders, const SolverConfig& solver) {
  const double A = spec.bloch.amplitude_bound;
  ThreeStageResult out;
  out.mode = StageMode::concatenated;
  out.stages.resize(plans.size());
  for (std::size_t k = 0; k < plans.size(); ++k) {
    const auto& st = spec.stages[k];
    Solved s = solve_single(plans[k].problem, spec.N, orders,
                            hard_pulse(st.initial, st.target, plans[k].params.duration, A), solver);
    out.stages[k].checks = check_pulse(plans[k].params, s.pulse, repeat(st.initial, s.pulse.param_samples.cols()),
                                       spec.validation.rk4_steps);
    // Report the weakest stage solve.
    if (k == 0 || static_cast<int>(s.report.status) > static_cast<int>(out.solver.status)) out.solver = s.report;
    out.stages[k].pulse = std::move(s.pulse);
  }
  return out;
}

// One linked NLP started from the independent stage controls.
ThreeStageResult solve_joint(const StudySpec& spec, const std::vector<StagePlan>& plans,
                             const std::vector<int>& orders, const SolverConfig& solver,
                             const ThreeStageResult& independent) {
  ThreeStageResult out;
  out.mode = StageMode::simultaneous;
  out.stages.resize(plans.size());
  std::vector<EnsembleProblem> problems;
  std::vector<CollocationGrid> grids;
  std::vector<NlpProblem> nlps;
  std::vector<VectorXd> guesses;
  for (std::size_t k = 0; k < plans.size(); ++k) {
    EnsembleProblem p = plans[k].problem;
    grids.push_back(build_grid(p, spec.N, orders));
    const CollocationGrid& grid = grids.back();

    // The guess for stage k starts where the guess for stage k-1 ended.
    EnsembleProblem g = p;
    if (k > 0) {
      const VectorXd prev = guesses.back();
      const VariableLayout pl = make_layout(problems.back(), grids[k - 1]);
      const MatrixXd samples = grid.samples;
      g.initial_state = [prev, pl, samples](ConstVec s, VecOut x) {
        for (Index j = 0; j < samples.cols(); ++j) {
          if (samples.rows() == 0 || (samples.col(j) - s).cwiseAbs().maxCoeff() == 0.0) {
            for (Index c = 0; c < pl.state_dim; ++c) x[c] = prev[pl.state_index(pl.nodes - 1, j, c)];
            return;
          }
        }
        throw std::logic_error("three_stage guess: unknown sample");
      };
      p.initial_state = nullptr;
    }
    GuessOptions opt;
    opt.strategy = GuessStrategy::given_controls;
    opt.controls = independent.stages[k].pulse.control_function();
    guesses.push_back(initial_guess(g, grid, opt));
    nlps.push_back(transcribe(p, grid));
    problems.push_back(std::move(p));
  }
  const NlpProblem joint = link_stages(nlps);
  VectorXd x0(joint.num_vars);
  Index off = 0;
  for (const auto& gk : guesses) {
    x0.segment(off, gk.size()) = gk;
    off += gk.size();
  }
  const SolveResult r = solve(joint, x0, solver);
  out.solver = r.report;
  off = 0;
  for (std::size_t k = 0; k < plans.size(); ++k) {
    PulseSolution pulse = extract_solution(nlps[k], r.x.segment(off, nlps[k].num_vars), grids[k], problems[k]);
    off += nlps[k].num_vars;
    pulse.solver_stats = r.report;
    std::vector<Vector3d> starts;
    for (const auto& block : pulse.states) starts.emplace_back(block.row(0).transpose());
    out.stages[k].checks = check_pulse(plans[k].params, pulse, starts, spec.validation.rk4_steps);
    out.stages[k].pulse = std::move(pulse);
  }
  return out;
}

}  // namespace

ThreeStageResult run_three_stage(const StudySpec& spec, StageMode mode, const SolverConfig& solver) {
  auto both = run_three_stage_modes(spec, solver, mode == StageMode::simultaneous);
  return std::move(both.back());
}

std::vector<ThreeStageResult> run_three_stage_modes(const StudySpec& spec, const SolverConfig& solver,
                                                    bool simultaneous) {
  spec.validate();
  if (spec.name != StudyName::three_stage) throw std::invalid_argument("study.name: expected three_stage");
  const auto plans = plan_stages(spec);
  const auto orders = param_orders(spec.bloch, spec.N_omega, spec.N_epsilon);
  std::vector<ThreeStageResult> out;
  out.push_back(solve_independent(spec, plans, orders, solver));
  if (simultaneous) out.push_back(solve_joint(spec, plans, orders, solver, out.front()));
  for (auto& r : out) chain_reports(spec, plans, r);
  return out;
}

// ---- time-varying frequency -------------------------------------------------

TimeVaryingResult run_time_varying(const StudySpec& spec, CostChoice choice, const SolverConfig& solver) {
  spec.validate();
  if (spec.name != StudyName::time_varying) throw std::invalid_argument("study.name: expected time_varying");
  CostWeights w{spec.weights.terminal, 0.0, 0.0};
  if (choice == CostChoice::energy) w.energy = spec.weights.energy;
  if (choice == CostChoice::time) w.time = spec.weights.time;
  if (w.terminal == 0.0 && w.energy == 0.0 && w.time == 0.0)
    throw std::invalid_argument("weights: the selected cost has no positive weight");

  EnsembleProblem problem = build_problem(spec.bloch, spec.initial_state, spec.target, w);
  problem.horizon = FreeHorizon{spec.min_duration, spec.bloch.duration, spec.bloch.duration};
  const bloch::ControlFn guess =
      spec.initial_pulse == InitialPulse::chirp
          ? chirp_pulse(spec.bloch.amplitude_bound, spec.bloch.B, spec.bloch.duration, 0.0)
          : hard_pulse(spec.initial_state, spec.target, spec.bloch.duration, spec.bloch.amplitude_bound);
  Solved s = solve_single(problem, spec.N, param_orders(spec.bloch, spec.N_omega, spec.N_epsilon), guess, solver);

  TimeVaryingResult out;
  out.choice = choice;
  out.horizon = s.pulse.horizon;
  BlochParams p = spec.bloch;
  p.duration = out.horizon;
  // Nominal member only when no axis is active; otherwise the lattice average.
  const auto grid = validation_grid(p, std::max(41, 4 * spec.N_omega + 1), std::max(9, 4 * spec.N_epsilon + 1));
  const auto report = validate_pulse(p, s.pulse.control_function(), spec.initial_state, spec.target, grid,
                                     spec.thresholds, spec.validation.rk4_steps);
  out.score = report.average;
  out.report = report;
  out.checks = check_pulse(spec.bloch, s.pulse, repeat(spec.initial_state, s.pulse.param_samples.cols()),
                           spec.validation.rk4_steps);
  out.pulse = std::move(s.pulse);
  return out;
}

// ---- convergence sweep ------------------------------------------------------

std::vector<io::ConvergenceRow> ConvergenceTable::rows() const {
  std::vector<io::ConvergenceRow> out;
  for (const auto& c : cells) out.push_back({c.N, c.N_omega, c.average});
  return out;
}

const ConvergenceCell& ConvergenceTable::largest() const {
  if (cells.empty()) throw std::logic_error("ConvergenceTable: empty");
  return *std::max_element(cells.begin(), cells.end(), [](const auto& a, const auto& b) {
    return std::pair(a.N, a.N_omega) < std::pair(b.N, b.N_omega);
  });
}

const ConvergenceCell& ConvergenceTable::smallest() const {
  if (cells.empty()) throw std::logic_error("ConvergenceTable: empty");
  return *std::min_element(cells.begin(), cells.end(), [](const auto& a, const auto& b) {
    return std::pair(a.N, a.N_omega) < std::pair(b.N, b.N_omega);
  });
}

ConvergenceTable run_convergence(const StudySpec& spec, const SolverConfig& solver) {
  spec.validate();
  if (spec.name != StudyName::convergence) throw std::invalid_argument("study.name: expected convergence");
  const ValidationGrid grid = validation_grid(spec);
  ConvergenceTable table;
  for (int n : spec.sweep.N)
    for (int nw : spec.sweep.N_omega) {
      ConvergenceCell cell;
      cell.N = n;
      cell.N_omega = nw;
      table.cells.push_back(cell);
    }

  const EnsembleProblem problem = build_problem(spec.bloch, spec.initial_state, spec.target, spec.weights);
  const bloch::ControlFn guess =
      hard_pulse(spec.initial_state, spec.target, spec.bloch.duration, spec.bloch.amplitude_bound);

  parallel_for(static_cast<std::ptrdiff_t>(table.cells.size()), [&](std::ptrdiff_t i) {
    ConvergenceCell& cell = table.cells[i];
    const auto t0 = std::chrono::steady_clock::now();
    try {
      Solved s = solve_single(problem, cell.N, param_orders(spec.bloch, cell.N_omega, spec.N_epsilon), guess, solver);
      const auto report = validate_pulse(spec.bloch, s.pulse.control_function(), spec.initial_state, spec.target,
                                         grid, {}, spec.validation.rk4_steps);
      cell.average = report.average;
      cell.worst = report.worst;
      cell.status = s.report.status;
      const auto checks = check_pulse(spec.bloch, s.pulse, repeat(spec.initial_state, s.pulse.param_samples.cols()),
                                      spec.validation.rk4_steps);
      cell.oracle_gap = checks.oracle_gap;
      cell.max_amplitude = checks.max_amplitude;
    } catch (const std::exception& e) {
      cell.average = cell.worst = std::numeric_limits<double>::quiet_NaN();
      cell.status = SolveStatus::infeasible;
      cell.error = e.what();
    }
    cell.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  });
  return table;
}

}  // namespace ensemble::studies
