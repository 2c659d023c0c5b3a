// Multidimensional pseudospectral transcription of an ensemble optimal control
// problem into a nonlinear program.
//
// States are collocated at every LGL time node for every sample of a tensor
// LGL grid over the parameter box. The ensemble integral of the terminal cost
// uses the product LGL weights; time integrals use the LGL weights scaled by
// T/2. Dynamics are enforced as equalities at all N+1 nodes.

#ifndef ENSEMBLE_TRANSCRIPTION_HPP
#define ENSEMBLE_TRANSCRIPTION_HPP

#include "ensemble/nlp.hpp"
#include "ensemble/problem.hpp"
#include "ensemble/spectral.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace ensemble {

struct CollocationGrid {
  LglGrid<double> time_grid;
  /// Absent for free horizons: the map depends on the horizon variable.
  std::optional<AffineMap<double>> time_map;
  std::vector<LglGrid<double>> param_grids;
  std::vector<AffineMap<double>> param_maps;
  /// d x S parameter coordinates; the first parameter varies fastest.
  Eigen::MatrixXd samples;
  /// Product quadrature weights, one per sample.
  Eigen::VectorXd param_weights;

  Eigen::Index nodes() const { return time_grid.size(); }
  Eigen::Index sample_count() const { return param_weights.size(); }
  Eigen::VectorXd sample(Eigen::Index j) const { return samples.col(j); }
};

CollocationGrid build_grid(const EnsembleProblem& problem, int order,
                           const std::vector<int>& param_orders);

/// Layout implied by a problem/grid pair.
VariableLayout make_layout(const EnsembleProblem& problem, const CollocationGrid& grid);

NlpProblem transcribe(const EnsembleProblem& problem, const CollocationGrid& grid);

enum class GuessStrategy { zero_controls, given_controls, linear_state };

struct GuessOptions {
  GuessStrategy strategy = GuessStrategy::zero_controls;
  /// Control as a function of time; used by given_controls.
  std::function<void(double t, VecOut u)> controls;
  /// Endpoints for linear_state.
  Eigen::VectorXd initial_state;
  Eigen::VectorXd target_state;
  /// RK4 substeps per unit of the horizon used when simulating members.
  int steps = 2000;
};

Eigen::VectorXd initial_guess(const EnsembleProblem& problem, const CollocationGrid& grid,
                              const GuessOptions& options = {});

/// Collocation defect of one sample, (N+1) x n, using the physical time scaling.
Eigen::MatrixXd collocation_defect(const EnsembleProblem& problem, const CollocationGrid& grid,
                                   const Eigen::VectorXd& decision, Eigen::Index sample);

struct CostBreakdown {
  double terminal = 0.0;
  double running = 0.0;
  double total() const { return terminal + running; }
};

CostBreakdown evaluate_costs(const EnsembleProblem& problem, const CollocationGrid& grid,
                             const Eigen::VectorXd& decision);

struct PulseSolution {
  LglGrid<double> time_grid;
  AffineMap<double> time_map;
  std::vector<LglGrid<double>> param_grids;
  std::vector<AffineMap<double>> param_maps;
  Eigen::MatrixXd param_samples;

  /// (N+1) x m control samples at the time nodes.
  Eigen::MatrixXd controls;
  /// One (N+1) x n block per parameter sample.
  std::vector<Eigen::MatrixXd> states;
  double horizon = 0.0;
  double objective_value = 0.0;
  CostBreakdown costs;
  /// max over samples and components of the normalized discrete LGL norm
  /// sqrt(sum_k w_k R_k^2 / 2) of the defect R = D x - f; never exceeds the max norm.
  double dynamics_residual = 0.0;
  /// max abs defect over all nodes and samples.
  double dynamics_residual_max = 0.0;
  SolveReport solver_stats;

  Eigen::VectorXd node_times() const { return time_grid.mapped_nodes(time_map); }
  Eigen::VectorXd control_at(double t) const;
  Eigen::VectorXd state_at(double t, Eigen::Index sample) const;
  /// Tensor-product interpolation over the parameter grid as well.
  Eigen::VectorXd state_at(double t, const Eigen::VectorXd& s) const;
  Eigen::VectorXd terminal_state(Eigen::Index sample) const;
  /// Control as a callable for simulators.
  std::function<void(double, VecOut)> control_function() const;
};

PulseSolution extract_solution(const NlpProblem& nlp, const Eigen::VectorXd& decision,
                               const CollocationGrid& grid, const EnsembleProblem& problem);

/// Packs node-sampled states and controls into a decision vector.
Eigen::VectorXd pack_decision(const VariableLayout& layout, const std::vector<Eigen::MatrixXd>& states,
                              const Eigen::MatrixXd& controls, double horizon);

}  // namespace ensemble

#endif  // ENSEMBLE_TRANSCRIPTION_HPP
