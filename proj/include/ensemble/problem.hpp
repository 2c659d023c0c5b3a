// Continuous-time ensemble optimal control problem description.

#ifndef ENSEMBLE_PROBLEM_HPP
#define ENSEMBLE_PROBLEM_HPP

#include <Eigen/Dense>

#include <functional>
#include <limits>
#include <variant>
#include <vector>

namespace ensemble {

using ConstVec = Eigen::Ref<const Eigen::VectorXd>;
using VecOut = Eigen::Ref<Eigen::VectorXd>;
using MatOut = Eigen::Ref<Eigen::MatrixXd>;

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
  double width() const { return upper - lower; }
};

struct FixedHorizon {
  double duration = 1.0;
};

/// Terminal time as a decision variable bounded to [min_duration, max_duration].
struct FreeHorizon {
  double min_duration = 0.0;
  double max_duration = 1.0;
  double initial_duration = 1.0;
};

using Horizon = std::variant<FixedHorizon, FreeHorizon>;

/// Whether the running cost is shared by all ensemble members (control-only,
/// called with an empty state) or integrated over the parameter box as well.
enum class RunningCostScope { shared, ensemble };

// Callback signatures. Outputs are written into caller-owned storage.
using DynamicsFn = std::function<void(double t, ConstVec s, ConstVec x, ConstVec u, VecOut xdot)>;
using DynamicsJacobianFn =
    std::function<void(double t, ConstVec s, ConstVec x, ConstVec u, MatOut fx, MatOut fu)>;
using InitialStateFn = std::function<void(ConstVec s, VecOut x0)>;
using TerminalCostFn = std::function<double(double T, ConstVec x)>;
using TerminalGradientFn = std::function<void(double T, ConstVec x, VecOut grad)>;
using RunningCostFn = std::function<double(ConstVec x, ConstVec u)>;
using RunningGradientFn = std::function<void(ConstVec x, ConstVec u, VecOut gx, VecOut gu)>;
using EndpointFn = std::function<void(ConstVec x0, ConstVec xT, VecOut residual)>;
using PathFn = std::function<void(ConstVec x, ConstVec u, VecOut residual)>;

/// min  int_D phi(T, x(T,s)) ds + int_0^T L(x,u) dt
/// s.t. dx/dt = F(t, s, x, u),  x(0,s) = x0(s),  e(x(0,s), x(T,s)) = 0,
///      g(x, u) <= 0,  |u| <= A.
///
/// Optional derivative callbacks are used when present; otherwise the
/// transcription differentiates the callbacks numerically.
struct EnsembleProblem {
  int state_dim = 0;
  int control_dim = 0;
  std::vector<Interval> param_box;

  DynamicsFn dynamics;
  DynamicsJacobianFn dynamics_jacobian;

  /// Empty means the initial state is free (used when chaining stages).
  InitialStateFn initial_state;

  TerminalCostFn terminal_cost;
  TerminalGradientFn terminal_cost_gradient;

  RunningCostFn running_cost;
  RunningGradientFn running_cost_gradient;
  RunningCostScope running_cost_scope = RunningCostScope::shared;

  int endpoint_count = 0;
  EndpointFn endpoint_constraints;

  int path_count = 0;
  PathFn path_constraints;

  /// Bound on the Euclidean norm of the control vector.
  double control_bound = std::numeric_limits<double>::infinity();

  Horizon horizon = FixedHorizon{};
  double start_time = 0.0;

  bool free_horizon() const { return std::holds_alternative<FreeHorizon>(horizon); }
  int param_dim() const { return static_cast<int>(param_box.size()); }
  bool is_ensemble() const { return !param_box.empty(); }

  /// Duration used for fixed horizons and as the starting value for free ones.
  double nominal_duration() const;

  /// Throws std::invalid_argument describing the first malformed field.
  void validate() const;
};

}  // namespace ensemble

#endif  // ENSEMBLE_PROBLEM_HPP
