// Generic nonlinear program consumed by the solver.
//
//   min f(x)  s.t.  c(x) = 0,  g(x) <= 0,  lower <= x <= upper

#ifndef ENSEMBLE_NLP_HPP
#define ENSEMBLE_NLP_HPP

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace ensemble {

using SparseMatrix = Eigen::SparseMatrix<double>;

/// Index map of a transcribed decision vector: states of every (time node,
/// parameter sample) pair, then controls per time node, then the optional
/// horizon.
struct VariableLayout {
  Eigen::Index nodes = 0;
  Eigen::Index samples = 1;
  Eigen::Index state_dim = 0;
  Eigen::Index control_dim = 0;
  bool free_horizon = false;

  Eigen::Index state_block() const { return nodes * state_dim; }
  Eigen::Index states_size() const { return samples * state_block(); }
  Eigen::Index controls_size() const { return nodes * control_dim; }
  Eigen::Index num_vars() const { return states_size() + controls_size() + (free_horizon ? 1 : 0); }

  Eigen::Index state_index(Eigen::Index node, Eigen::Index sample, Eigen::Index comp) const {
    return (sample * nodes + node) * state_dim + comp;
  }
  Eigen::Index control_index(Eigen::Index node, Eigen::Index comp) const {
    return states_size() + node * control_dim + comp;
  }
  Eigen::Index horizon_index() const { return states_size() + controls_size(); }
};

struct NlpProblem {
  Eigen::Index num_vars = 0;
  Eigen::Index num_eq = 0;
  Eigen::Index num_ineq = 0;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  std::function<double(const Eigen::VectorXd&)> objective;
  /// Optional; the solver falls back to forward differences.
  std::function<void(const Eigen::VectorXd&, Eigen::VectorXd&)> gradient;

  std::function<void(const Eigen::VectorXd&, Eigen::VectorXd&)> eq_constraints;
  std::function<void(const Eigen::VectorXd&, SparseMatrix&)> eq_jacobian;
  std::function<void(const Eigen::VectorXd&, Eigen::VectorXd&)> ineq_constraints;
  std::function<void(const Eigen::VectorXd&, SparseMatrix&)> ineq_jacobian;

  std::optional<VariableLayout> layout;

  /// Unbounded problem of the given size with no constraints.
  static NlpProblem unconstrained(Eigen::Index n, std::function<double(const Eigen::VectorXd&)> f);
};

enum class SolveStatus { optimal, feasible_stalled, infeasible, iteration_cap };

std::string to_string(SolveStatus status);

struct SolveReport {
  SolveStatus status = SolveStatus::iteration_cap;
  double kkt_residual = 0.0;
  double constraint_violation = 0.0;
  int outer_iters = 0;
  int inner_iters = 0;
  int function_evals = 0;
  double final_penalty = 0.0;
  std::vector<double> objective_history;
  std::vector<double> violation_history;
};

}  // namespace ensemble

#endif  // ENSEMBLE_NLP_HPP
