// Augmented-Lagrangian NLP solver with a projected, preconditioned L-BFGS
// inner minimizer.

#ifndef ENSEMBLE_SOLVER_HPP
#define ENSEMBLE_SOLVER_HPP

#include "ensemble/nlp.hpp"

#include <cstdint>

namespace ensemble {

struct SolverConfig {
  double feasibility_tol = 1e-6;
  double optimality_tol = 1e-6;
  int max_outer = 50;
  int max_inner = 500;
  double penalty_init = 10.0;
  double penalty_growth = 10.0;
  /// Forward-difference step (scaled by 1 + |x_i|) when the NLP has no derivatives.
  double fd_step = 1e-7;
  /// Nonzero seeds a small deterministic perturbation of the starting point.
  std::uint64_t seed = 0;

  /// Relative objective change below which a feasible run counts as stalled
  /// (two consecutive outer iterations).
  double stall_tol = 1e-6;
  int lbfgs_memory = 20;
  double penalty_max = 1e10;
  double multiplier_clip = 1e8;
  /// Precondition the inner iteration with the factorized penalty
  /// Gauss-Newton matrix rho * J^T J + sigma * I.
  bool precondition = true;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

struct SolveResult {
  Eigen::VectorXd x;
  Eigen::VectorXd eq_multipliers;
  Eigen::VectorXd ineq_multipliers;
  SolveReport report;
};

SolveResult solve(const NlpProblem& nlp, const Eigen::VectorXd& x0, const SolverConfig& config = {});

/// Max norm of projected stationarity, constraint violation, dual
/// infeasibility and complementarity.
double kkt_residual(const NlpProblem& nlp, const Eigen::VectorXd& x,
                    const Eigen::VectorXd& eq_multipliers, const Eigen::VectorXd& ineq_multipliers,
                    double fd_step = 1e-7);

/// Max-norm violation of equalities, inequalities and bounds.
double constraint_violation(const NlpProblem& nlp, const Eigen::VectorXd& x);

/// Objective gradient, analytic when the NLP provides it.
Eigen::VectorXd objective_gradient(const NlpProblem& nlp, const Eigen::VectorXd& x,
                                   double fd_step = 1e-7);

}  // namespace ensemble

#endif  // ENSEMBLE_SOLVER_HPP
