#include "ensemble/solver.hpp"

#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <random>
#include <stdexcept>

namespace ensemble {

using Eigen::Index;
using Eigen::VectorXd;

std::string to_string(SolveStatus status) {
  switch (status) {
    case SolveStatus::optimal:
      return "optimal";
    case SolveStatus::feasible_stalled:
      return "feasible_stalled";
    case SolveStatus::infeasible:
      return "infeasible";
    case SolveStatus::iteration_cap:
      return "iteration_cap";
  }
  return "unknown";
}

NlpProblem NlpProblem::unconstrained(Index n, std::function<double(const VectorXd&)> f) {
  NlpProblem nlp;
  nlp.num_vars = n;
  nlp.lower = VectorXd::Constant(n, -std::numeric_limits<double>::infinity());
  nlp.upper = VectorXd::Constant(n, std::numeric_limits<double>::infinity());
  nlp.objective = std::move(f);
  return nlp;
}

void SolverConfig::validate() const {
  if (!(feasibility_tol > 0)) throw std::invalid_argument("solver.feasibility_tol must be > 0");
  if (!(optimality_tol > 0)) throw std::invalid_argument("solver.optimality_tol must be > 0");
  if (max_outer < 1) throw std::invalid_argument("solver.max_outer must be >= 1");
  if (max_inner < 1) throw std::invalid_argument("solver.max_inner must be >= 1");
  if (!(penalty_init > 0)) throw std::invalid_argument("solver.penalty_init must be > 0");
  if (!(penalty_growth > 1)) throw std::invalid_argument("solver.penalty_growth must be > 1");
  if (!(fd_step > 0)) throw std::invalid_argument("solver.fd_step must be > 0");
  if (lbfgs_memory < 1) throw std::invalid_argument("solver.lbfgs_memory must be >= 1");
  if (!(stall_tol >= 0)) throw std::invalid_argument("solver.stall_tol must be >= 0");
  if (!(penalty_max >= penalty_init)) throw std::invalid_argument("solver.penalty_max must be >= penalty_init");
  if (!(multiplier_clip > 0)) throw std::invalid_argument("solver.multiplier_clip must be > 0");
}

namespace {

VectorXd lower_bounds(const NlpProblem& nlp) {
  return nlp.lower.size() == nlp.num_vars
             ? nlp.lower
             : VectorXd::Constant(nlp.num_vars, -std::numeric_limits<double>::infinity());
}

VectorXd upper_bounds(const NlpProblem& nlp) {
  return nlp.upper.size() == nlp.num_vars
             ? nlp.upper
             : VectorXd::Constant(nlp.num_vars, std::numeric_limits<double>::infinity());
}

VectorXd eval_eq(const NlpProblem& nlp, const VectorXd& x) {
  VectorXd c;
  if (nlp.num_eq > 0) nlp.eq_constraints(x, c);
  return c.size() == nlp.num_eq ? c : VectorXd::Zero(nlp.num_eq);
}

VectorXd eval_ineq(const NlpProblem& nlp, const VectorXd& x) {
  VectorXd g;
  if (nlp.num_ineq > 0) nlp.ineq_constraints(x, g);
  return g.size() == nlp.num_ineq ? g : VectorXd::Zero(nlp.num_ineq);
}

// Forward-difference Jacobian of a vector function.
SparseMatrix fd_jacobian(const std::function<void(const VectorXd&, VectorXd&)>& fn, const VectorXd& x,
                         const VectorXd& base, double step) {
  std::vector<Eigen::Triplet<double>> entries;
  VectorXd xp = x, fp;
  for (Index i = 0; i < x.size(); ++i) {
    const double h = step * (1.0 + std::abs(x[i]));
    xp[i] = x[i] + h;
    fn(xp, fp);
    xp[i] = x[i];
    for (Index r = 0; r < base.size(); ++r) {
      const double v = (fp[r] - base[r]) / h;
      if (v != 0.0) entries.emplace_back(r, i, v);
    }
  }
  SparseMatrix J(base.size(), x.size());
  J.setFromTriplets(entries.begin(), entries.end());
  return J;
}

SparseMatrix eval_eq_jacobian(const NlpProblem& nlp, const VectorXd& x, const VectorXd& c, double step) {
  if (nlp.num_eq == 0) return SparseMatrix(0, nlp.num_vars);
  if (nlp.eq_jacobian) {
    SparseMatrix J;
    nlp.eq_jacobian(x, J);
    return J;
  }
  return fd_jacobian(nlp.eq_constraints, x, c, step);
}

SparseMatrix eval_ineq_jacobian(const NlpProblem& nlp, const VectorXd& x, const VectorXd& g,
                                double step) {
  if (nlp.num_ineq == 0) return SparseMatrix(0, nlp.num_vars);
  if (nlp.ineq_jacobian) {
    SparseMatrix J;
    nlp.ineq_jacobian(x, J);
    return J;
  }
  return fd_jacobian(nlp.ineq_constraints, x, g, step);
}

double bound_violation(const VectorXd& x, const VectorXd& lo, const VectorXd& hi) {
  double v = 0.0;
  for (Index i = 0; i < x.size(); ++i) v = std::max({v, lo[i] - x[i], x[i] - hi[i]});
  return v;
}

VectorXd project(const VectorXd& x, const VectorXd& lo, const VectorXd& hi) {
  return x.cwiseMax(lo).cwiseMin(hi);
}

// x - P(x - g): zero for a bound-constrained stationary point.
VectorXd projected_gradient(const VectorXd& x, const VectorXd& g, const VectorXd& lo, const VectorXd& hi) {
  return x - project(x - g, lo, hi);
}

// Augmented Lagrangian with PHR treatment of the inequalities:
//   f + lambda.c + rho/2 |c|^2 + sum (max(0, mu + rho g)^2 - mu^2) / (2 rho)
class AugmentedLagrangian {
 public:
  struct Point {
    VectorXd x;
    double f = 0.0;
    VectorXd c;
    VectorXd g;
    double value = 0.0;
    bool finite = false;
    bool has_gradient = false;
    VectorXd grad;
    SparseMatrix Jeq;
    SparseMatrix Jineq;
  };

  AugmentedLagrangian(const NlpProblem& nlp, const SolverConfig& config)
      : nlp_(nlp), config_(config) {
    lambda_ = VectorXd::Zero(nlp.num_eq);
    mu_ = VectorXd::Zero(nlp.num_ineq);
    rho_ = config.penalty_init;
  }

  Point evaluate(const VectorXd& x) {
    ++evals_;
    Point p;
    p.x = x;
    p.f = nlp_.objective(x);
    p.c = eval_eq(nlp_, x);
    p.g = eval_ineq(nlp_, x);
    p.finite = std::isfinite(p.f) && p.c.allFinite() && p.g.allFinite();
    if (!p.finite) {
      p.value = std::numeric_limits<double>::infinity();
      return p;
    }
    p.value = p.f + lambda_.dot(p.c) + 0.5 * rho_ * p.c.squaredNorm();
    for (Index i = 0; i < p.g.size(); ++i) {
      const double shifted = std::max(0.0, mu_[i] + rho_ * p.g[i]);
      p.value += (shifted * shifted - mu_[i] * mu_[i]) / (2.0 * rho_);
    }
    return p;
  }

  void add_gradient(Point& p) {
    if (p.has_gradient) return;
    VectorXd gf = objective_gradient(nlp_, p.x, config_.fd_step);
    p.Jeq = eval_eq_jacobian(nlp_, p.x, p.c, config_.fd_step);
    p.Jineq = eval_ineq_jacobian(nlp_, p.x, p.g, config_.fd_step);
    p.grad = gf;
    if (nlp_.num_eq > 0) p.grad += p.Jeq.transpose() * (lambda_ + rho_ * p.c);
    if (nlp_.num_ineq > 0) p.grad += p.Jineq.transpose() * shifted_ineq(p.g);
    p.has_gradient = p.grad.allFinite();
    if (!p.has_gradient) p.finite = false;
  }

  // Re-evaluates the merit value for the current multipliers and penalty.
  void refresh(Point& p) {
    const VectorXd x = p.x;
    p = evaluate(x);
    add_gradient(p);
  }

  VectorXd shifted_ineq(const VectorXd& g) const {
    return (mu_ + rho_ * g).cwiseMax(0.0);
  }

  // Gauss-Newton matrix of the penalty terms.
  SparseMatrix gauss_newton(const Point& p) const {
    const Index n = nlp_.num_vars;
    SparseMatrix M(n, n);
    if (nlp_.num_eq > 0) M = SparseMatrix(p.Jeq.transpose()) * p.Jeq;
    if (nlp_.num_ineq > 0) {
      // Inactive rows keep their structural entries with zero weight so the
      // sparsity pattern does not change between iterations.
      const VectorXd active = ((mu_ + rho_ * p.g).array() > 0.0).cast<double>();
      const SparseMatrix weighted = active.asDiagonal() * p.Jineq;
      M += SparseMatrix(p.Jineq.transpose()) * weighted;
    }
    M *= rho_;
    return M;
  }

  // Violation measure used by the outer loop (complementarity aware).
  double outer_violation(const Point& p) const {
    double v = p.c.size() ? p.c.lpNorm<Eigen::Infinity>() : 0.0;
    for (Index i = 0; i < p.g.size(); ++i) v = std::max(v, std::max(p.g[i], -mu_[i] / rho_));
    return v;
  }

  void update_multipliers(const Point& p) {
    const double clip = config_.multiplier_clip;
    lambda_ = (lambda_ + rho_ * p.c).cwiseMax(-clip).cwiseMin(clip);
    mu_ = shifted_ineq(p.g).cwiseMin(clip);
  }

  double& rho() { return rho_; }
  const VectorXd& lambda() const { return lambda_; }
  const VectorXd& mu() const { return mu_; }
  int evals() const { return evals_; }

 private:
  const NlpProblem& nlp_;
  const SolverConfig& config_;
  VectorXd lambda_;
  VectorXd mu_;
  double rho_ = 1.0;
  int evals_ = 0;
};

// Inverse-Hessian model: L-BFGS pairs on top of a factorized Gauss-Newton
// initial matrix rho J^T J + sigma I.
class InverseHessian {
 public:
  InverseHessian(int memory, bool precondition) : memory_(memory), precondition_(precondition) {}

  void reset() {
    s_.clear();
    y_.clear();
  }

  void factorize(const SparseMatrix& gauss_newton, double sigma) {
    sigma_ = sigma;
    ready_ = false;
    if (!precondition_) return;
    SparseMatrix A = gauss_newton;
    SparseMatrix I(A.rows(), A.cols());
    I.setIdentity();
    A += sigma * I;
    if (!analyzed_ || A.rows() != size_ || A.nonZeros() != pattern_nnz_) {
      ldlt_.analyzePattern(A);
      analyzed_ = true;
      size_ = A.rows();
      pattern_nnz_ = A.nonZeros();
    }
    ldlt_.factorize(A);
    ready_ = ldlt_.info() == Eigen::Success;
  }

  VectorXd apply_initial(const VectorXd& q) const {
    if (ready_) return ldlt_.solve(q);
    return q / sigma_;
  }

  void push(const VectorXd& s, const VectorXd& y) {
    if (static_cast<int>(s_.size()) == memory_) {
      s_.pop_front();
      y_.pop_front();
    }
    s_.push_back(s);
    y_.push_back(y);
  }

  VectorXd apply(const VectorXd& grad) const {
    VectorXd q = grad;
    const std::size_t k = s_.size();
    std::vector<double> alpha(k), rho(k);
    for (std::size_t i = k; i-- > 0;) {
      rho[i] = 1.0 / y_[i].dot(s_[i]);
      alpha[i] = rho[i] * s_[i].dot(q);
      q -= alpha[i] * y_[i];
    }
    VectorXd r = apply_initial(q);
    for (std::size_t i = 0; i < k; ++i) {
      const double beta = rho[i] * y_[i].dot(r);
      r += (alpha[i] - beta) * s_[i];
    }
    return r;
  }

  std::size_t pairs() const { return s_.size(); }

 private:
  int memory_;
  bool precondition_;
  std::deque<VectorXd> s_;
  std::deque<VectorXd> y_;
  Eigen::SimplicialLDLT<SparseMatrix> ldlt_;
  bool analyzed_ = false;
  bool ready_ = false;
  Index size_ = -1;
  Index pattern_nnz_ = -1;
  double sigma_ = 1.0;
};

struct InnerOutcome {
  int iterations = 0;
  bool converged = false;
};

InnerOutcome minimize_inner(AugmentedLagrangian& al, AugmentedLagrangian::Point& point,
                            const VectorXd& lo, const VectorXd& hi, double tolerance,
                            const SolverConfig& config, double& sigma) {
  InnerOutcome out;
  InverseHessian model(config.lbfgs_memory, config.precondition);
  al.add_gradient(point);
  if (!point.finite) return out;

  constexpr double kSigmaMin = 1e-6;
  constexpr double kSigmaMax = 1e10;
  constexpr double kArmijo = 1e-4;
  constexpr int kRefresh = 25;

  // The factorized initial matrix stays fixed between refreshes so the
  // L-BFGS pairs describe a single quasi-Newton model. Sigma acts as a
  // Levenberg damping term: raised after short steps, relaxed after full ones.
  double factored_sigma = sigma;
  int since_factor = 0;
  int full_steps = 0;
  model.factorize(al.gauss_newton(point), sigma);

  for (int it = 0; it < config.max_inner; ++it) {
    const VectorXd pg = projected_gradient(point.x, point.grad, lo, hi);
    if (pg.lpNorm<Eigen::Infinity>() <= tolerance) {
      out.converged = true;
      break;
    }
    ++out.iterations;

    const bool stale = since_factor >= kRefresh || sigma > 4.0 * factored_sigma ||
                       sigma < 0.0625 * factored_sigma;
    if (stale) {
      model.reset();
      model.factorize(al.gauss_newton(point), sigma);
      factored_sigma = sigma;
      since_factor = 0;
    }
    ++since_factor;

    // Variables held at a bound by the gradient stay fixed for this step.
    VectorXd free_grad = point.grad;
    std::vector<Index> fixed;
    for (Index i = 0; i < point.x.size(); ++i) {
      const bool at_lo = point.x[i] <= lo[i] && point.grad[i] > 0;
      const bool at_hi = point.x[i] >= hi[i] && point.grad[i] < 0;
      if (at_lo || at_hi) {
        fixed.push_back(i);
        free_grad[i] = 0.0;
      }
    }
    auto direction_from = [&](bool use_pairs) {
      VectorXd d = use_pairs ? VectorXd(-model.apply(free_grad)) : VectorXd(-model.apply_initial(free_grad));
      for (Index i : fixed) d[i] = 0.0;
      return d;
    };
    VectorXd d = direction_from(true);
    if (!(point.grad.dot(d) < 0) || !d.allFinite()) {
      model.reset();
      d = direction_from(false);
      if (!(point.grad.dot(d) < 0) || !d.allFinite()) d = -free_grad;
    }

    // Backtracking with safeguarded quadratic interpolation.
    double step = 1.0;
    bool accepted = false;
    AugmentedLagrangian::Point trial;
    const double slope = point.grad.dot(d);
    for (int ls = 0; ls < 40; ++ls) {
      const VectorXd xt = project(point.x + step * d, lo, hi);
      trial = al.evaluate(xt);
      const double predicted = point.grad.dot(xt - point.x);
      if (trial.finite && trial.value <= point.value + kArmijo * predicted) {
        accepted = true;
        break;
      }
      if (!trial.finite) {
        step *= 0.1;
        continue;
      }
      const double excess = trial.value - point.value - slope * step;
      const double next = excess > 0 ? -slope * step * step / (2.0 * excess) : 0.5 * step;
      step = std::clamp(next, 0.1 * step, 0.5 * step);
    }
    if (!accepted) {
      if (model.pairs() > 0 || since_factor > 1) {
        sigma = std::min(sigma * 10.0, kSigmaMax);
        since_factor = kRefresh;
        continue;
      }
      break;
    }
    al.add_gradient(trial);
    if (!trial.finite) break;

    if (step < 1.0) {
      full_steps = 0;
      if (step < 0.25) sigma = std::min(sigma * 4.0, kSigmaMax);
    } else if (++full_steps >= 3) {
      sigma = std::max(sigma * 0.25, kSigmaMin);
      full_steps = 0;
    }

    const VectorXd s = trial.x - point.x;
    const VectorXd y = trial.grad - point.grad;
    if (s.dot(y) > 1e-12 * s.norm() * y.norm()) model.push(s, y);
    point = std::move(trial);
  }
  return out;
}

}  // namespace

VectorXd objective_gradient(const NlpProblem& nlp, const VectorXd& x, double fd_step) {
  VectorXd g;
  if (nlp.gradient) {
    nlp.gradient(x, g);
    return g;
  }
  g.resize(x.size());
  const double f0 = nlp.objective(x);
  VectorXd xp = x;
  for (Index i = 0; i < x.size(); ++i) {
    const double h = fd_step * (1.0 + std::abs(x[i]));
    xp[i] = x[i] + h;
    g[i] = (nlp.objective(xp) - f0) / h;
    xp[i] = x[i];
  }
  return g;
}

double constraint_violation(const NlpProblem& nlp, const VectorXd& x) {
  double v = bound_violation(x, lower_bounds(nlp), upper_bounds(nlp));
  const VectorXd c = eval_eq(nlp, x);
  const VectorXd g = eval_ineq(nlp, x);
  if (c.size()) v = std::max(v, c.lpNorm<Eigen::Infinity>());
  if (g.size()) v = std::max(v, g.maxCoeff());
  return v;
}

double kkt_residual(const NlpProblem& nlp, const VectorXd& x, const VectorXd& eq_multipliers,
                    const VectorXd& ineq_multipliers, double fd_step) {
  if (eq_multipliers.size() != nlp.num_eq || ineq_multipliers.size() != nlp.num_ineq)
    throw std::invalid_argument("kkt_residual: multiplier size mismatch");
  const VectorXd c = eval_eq(nlp, x);
  const VectorXd g = eval_ineq(nlp, x);
  VectorXd stationarity = objective_gradient(nlp, x, fd_step);
  if (nlp.num_eq > 0) stationarity += eval_eq_jacobian(nlp, x, c, fd_step).transpose() * eq_multipliers;
  if (nlp.num_ineq > 0)
    stationarity += eval_ineq_jacobian(nlp, x, g, fd_step).transpose() * ineq_multipliers;
  const VectorXd lo = lower_bounds(nlp), hi = upper_bounds(nlp);
  double r = x.size() ? projected_gradient(x, stationarity, lo, hi).lpNorm<Eigen::Infinity>() : 0.0;
  r = std::max(r, bound_violation(x, lo, hi));
  if (c.size()) r = std::max(r, c.lpNorm<Eigen::Infinity>());
  for (Index i = 0; i < g.size(); ++i) {
    r = std::max({r, g[i], -ineq_multipliers[i], std::abs(ineq_multipliers[i] * g[i])});
  }
  return r;
}

SolveResult solve(const NlpProblem& nlp, const VectorXd& x0, const SolverConfig& config) {
  config.validate();
  if (x0.size() != nlp.num_vars) throw std::invalid_argument("solve: x0 has wrong length");
  if (!x0.allFinite()) throw std::invalid_argument("solve: x0 is not finite");
  if (!nlp.objective) throw std::invalid_argument("solve: NLP has no objective");
  if ((nlp.num_eq > 0 && !nlp.eq_constraints) || (nlp.num_ineq > 0 && !nlp.ineq_constraints))
    throw std::invalid_argument("solve: NLP constraint evaluators missing");

  const VectorXd lo = lower_bounds(nlp);
  const VectorXd hi = upper_bounds(nlp);
  VectorXd start = x0;
  if (config.seed != 0) {
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> noise(0.0, 1e-6);
    for (Index i = 0; i < start.size(); ++i) start[i] += noise(rng) * (1.0 + std::abs(start[i]));
  }
  start = project(start, lo, hi);

  AugmentedLagrangian al(nlp, config);
  SolveResult result;
  SolveReport& report = result.report;

  auto point = al.evaluate(start);
  if (!point.finite) {
    report.status = SolveStatus::infeasible;
    report.constraint_violation = std::numeric_limits<double>::infinity();
    report.kkt_residual = std::numeric_limits<double>::infinity();
    result.x = start;
    result.eq_multipliers = al.lambda();
    result.ineq_multipliers = al.mu();
    return result;
  }

  double& rho = al.rho();
  double inner_tol = 1.0 / rho;
  double viol_target = 1.0 / std::pow(rho, 0.1);
  double sigma = 1.0;
  double best_violation = std::numeric_limits<double>::infinity();
  int stalled = 0;
  int flat = 0;
  bool converged = false;
  bool gave_up = false;

  for (int outer = 0; outer < config.max_outer; ++outer) {
    ++report.outer_iters;
    const double tol = std::max(inner_tol, 0.5 * config.optimality_tol);
    const InnerOutcome inner = minimize_inner(al, point, lo, hi, tol, config, sigma);
    report.inner_iters += inner.iterations;
    if (!point.finite) {
      gave_up = true;
      break;
    }

    const double violation = al.outer_violation(point);
    const double plain = std::max(point.c.size() ? point.c.lpNorm<Eigen::Infinity>() : 0.0,
                                  point.g.size() ? std::max(point.g.maxCoeff(), 0.0) : 0.0);
    const double previous_f = report.objective_history.empty() ? point.f : report.objective_history.back();
    report.objective_history.push_back(point.f);
    report.violation_history.push_back(plain);

    // Feasible and no longer improving: further penalty growth only trades
    // objective for digits of feasibility. A level objective after an inner
    // run that met a loose tolerance is not a stall.
    const bool level = std::abs(point.f - previous_f) <= config.stall_tol * (1.0 + std::abs(point.f));
    const bool inner_limited = !inner.converged || tol <= config.optimality_tol;
    flat = (plain <= config.feasibility_tol && level && inner_limited && report.objective_history.size() > 1)
               ? flat + 1
               : 0;
    if (flat >= 2) break;

    if (violation <= std::max(viol_target, 0.5 * config.feasibility_tol)) {
      al.update_multipliers(point);
      const double kkt = kkt_residual(nlp, point.x, al.lambda(), al.mu(), config.fd_step);
      if (plain <= config.feasibility_tol && kkt <= config.optimality_tol) {
        converged = true;
        break;
      }
      viol_target = viol_target / std::pow(rho, 0.9);
      inner_tol = inner_tol / rho;
    } else if (rho < config.penalty_max) {
      rho = std::min(rho * config.penalty_growth, config.penalty_max);
      viol_target = 1.0 / std::pow(rho, 0.1);
      inner_tol = 1.0 / rho;
    } else {
      // Penalty at its cap: keep updating multipliers while the violation
      // still drops, stop once it stagnates.
      al.update_multipliers(point);
      inner_tol = std::max(inner_tol / 10.0, 0.5 * config.optimality_tol);
    }

    if (rho >= config.penalty_max) {
      stalled = violation < 0.9 * best_violation ? 0 : stalled + 1;
      if (stalled >= 3) break;
    }
    best_violation = std::min(best_violation, violation);
    al.refresh(point);
  }

  result.x = point.x;
  result.eq_multipliers = al.lambda();
  result.ineq_multipliers = al.mu();
  report.constraint_violation = constraint_violation(nlp, point.x);
  report.kkt_residual = kkt_residual(nlp, point.x, al.lambda(), al.mu(), config.fd_step);
  report.final_penalty = rho;
  report.function_evals = al.evals();
  const bool feasible = report.constraint_violation <= config.feasibility_tol;
  if (gave_up || !std::isfinite(report.constraint_violation)) {
    report.status = SolveStatus::infeasible;
  } else if (feasible && (converged || report.kkt_residual <= config.optimality_tol)) {
    report.status = SolveStatus::optimal;
  } else if (feasible) {
    report.status = SolveStatus::feasible_stalled;
  } else if (rho >= config.penalty_max) {
    report.status = SolveStatus::infeasible;
  } else {
    report.status = SolveStatus::iteration_cap;
  }
  return result;
}

}  // namespace ensemble
