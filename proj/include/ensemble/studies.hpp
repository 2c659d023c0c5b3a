// Scripted Bloch ensemble studies: a robust inversion pulse, a three-stage
// transfer sequence, time-varying frequency transfers under three costs and
// an order/sample convergence sweep.
//
// Every reported score comes from RK4 re-simulation over a validation
// lattice, never from the collocation states.

#ifndef ENSEMBLE_STUDIES_HPP
#define ENSEMBLE_STUDIES_HPP

#include "ensemble/bloch.hpp"
#include "ensemble/io.hpp"
#include "ensemble/nlp.hpp"
#include "ensemble/solver.hpp"
#include "ensemble/transcription.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

namespace ensemble::studies {

using Eigen::Vector3d;

enum class StudyName { robust_pi, three_stage, time_varying, convergence };
enum class StageMode { concatenated, simultaneous };
enum class CostChoice { terminal_only, energy, time };
enum class InitialPulse { automatic, hard, chirp };

std::string to_string(StudyName v);
std::string to_string(StageMode v);
std::string to_string(CostChoice v);
std::string to_string(InitialPulse v);
StudyName parse_study_name(const std::string& s);
StageMode parse_stage_mode(const std::string& s);
CostChoice parse_cost_choice(const std::string& s);
InitialPulse parse_initial_pulse(const std::string& s);

/// Objective: terminal * (-<M(T), target>) averaged over the parameter box,
/// plus the time integral of energy * (u^2 + v^2) + time.
struct CostWeights {
  double terminal = 1.0;
  double energy = 1.0;
  double time = 0.0;
};

struct StageSpec {
  Vector3d initial = Vector3d::UnitZ();
  Vector3d target = Vector3d::UnitY();
  double duration_fraction = 1.0 / 3.0;
};

struct SweepSpec {
  std::vector<int> N;
  std::vector<int> N_omega;
};

struct ValidationSpec {
  /// Lattice sizes; 0 picks max(41, 4 N_omega + 1) and max(9, 4 N_epsilon + 1).
  int omega_points = 0;
  int epsilon_points = 0;
  int rk4_steps = 4000;
};

/// Thresholds on validated scores (projections on the target, higher is better).
struct Thresholds {
  std::optional<double> average;
  std::optional<double> worst;
};

struct StudySpec {
  StudyName name = StudyName::robust_pi;
  bloch::BlochParams bloch;
  int N = 32;
  int N_omega = 10;
  int N_epsilon = 4;
  CostWeights weights;
  Vector3d initial_state = Vector3d::UnitZ();
  Vector3d target = -Vector3d::UnitZ();
  std::vector<StageSpec> stages;
  SweepSpec sweep;
  /// Lower horizon bound for time_varying (free horizon on [min, bloch.duration]).
  double min_duration = 0.05;
  InitialPulse initial_pulse = InitialPulse::automatic;
  ValidationSpec validation;
  Thresholds thresholds;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

/// Desk-scale defaults for each study.
StudySpec robust_pi_spec();
StudySpec three_stage_spec();
StudySpec time_varying_spec();
StudySpec convergence_spec();
StudySpec default_spec(StudyName name);

/// Uniform validation lattice over the parameter box; degenerate axes collapse
/// to a single point (omega = 0 or epsilon = 1).
struct ValidationGrid {
  Eigen::VectorXd omega;
  Eigen::VectorXd epsilon;

  std::vector<bloch::Vector2d> points() const;  // omega fastest
};

ValidationGrid validation_grid(const bloch::BlochParams& params, int omega_points, int epsilon_points);
ValidationGrid validation_grid(const StudySpec& spec);

struct RobustnessReport {
  ValidationGrid grid;
  Vector3d target = Vector3d::UnitZ();
  /// omega x epsilon matrix of <M(T), target>.
  Eigen::MatrixXd scores;
  double average = 0.0;
  double worst = 0.0;
  bool passed = true;

  std::vector<io::ScoredPoint> rows() const;
};

/// Scores terminal states simulated on the lattice against the thresholds.
RobustnessReport make_report(const ValidationGrid& grid, const std::vector<Vector3d>& terminal,
                             const Vector3d& target, const Thresholds& thresholds);

/// Simulates one pulse from a common initial state over the lattice.
RobustnessReport validate_pulse(const bloch::BlochParams& params, const bloch::ControlFn& controls,
                                const Vector3d& initial, const Vector3d& target,
                                const ValidationGrid& grid, const Thresholds& thresholds,
                                int steps = 4000);

/// Checks that do not depend on the validation lattice.
struct PulseChecks {
  /// max |collocation terminal state - RK4 terminal state| over collocation samples.
  double oracle_gap = 0.0;
  /// max sqrt(u^2 + v^2) on a 10x oversampled grid of the control interpolant.
  double max_amplitude = 0.0;
  /// max_amplitude <= A (1 + 1e-3).
  bool amplitude_ok = true;
  /// int (u^2 + v^2) dt by LGL quadrature.
  double energy = 0.0;
};

PulseChecks check_pulse(const bloch::BlochParams& params, const PulseSolution& pulse,
                        const std::vector<Vector3d>& collocation_initial, int steps = 4000);

struct RobustPiResult {
  PulseSolution pulse;
  RobustnessReport report;
  PulseChecks checks;
};

RobustPiResult run_robust_pi(const StudySpec& spec, const SolverConfig& solver = {});

struct StageResult {
  PulseSolution pulse;
  /// Chained RK4 scores at this stage's boundary.
  RobustnessReport report;
  PulseChecks checks;
};

struct ThreeStageResult {
  StageMode mode = StageMode::simultaneous;
  std::vector<StageResult> stages;
  SolveReport solver;
  double worst() const;
};

ThreeStageResult run_three_stage(const StudySpec& spec, StageMode mode, const SolverConfig& solver = {});

/// Concatenated result, followed by the simultaneous one when requested; the
/// joint solve starts from the independent stage pulses.
std::vector<ThreeStageResult> run_three_stage_modes(const StudySpec& spec, const SolverConfig& solver = {},
                                                    bool simultaneous = true);

struct TimeVaryingResult {
  CostChoice choice = CostChoice::terminal_only;
  PulseSolution pulse;
  /// <M(T), target> from RK4 at the realized horizon (lattice average).
  double score = 0.0;
  RobustnessReport report;
  double horizon = 0.0;
  PulseChecks checks;
};

TimeVaryingResult run_time_varying(const StudySpec& spec, CostChoice choice, const SolverConfig& solver = {});

struct ConvergenceCell {
  int N = 0;
  int N_omega = 0;
  /// Average RK4 score over the validation lattice; NaN when the cell failed.
  double average = 0.0;
  double worst = 0.0;
  SolveStatus status = SolveStatus::iteration_cap;
  double oracle_gap = 0.0;
  double max_amplitude = 0.0;
  double seconds = 0.0;
  std::string error;
};

struct ConvergenceTable {
  std::vector<ConvergenceCell> cells;
  std::vector<io::ConvergenceRow> rows() const;
  /// Cell at the largest (N, N_omega) and the smallest one.
  const ConvergenceCell& largest() const;
  const ConvergenceCell& smallest() const;
};

ConvergenceTable run_convergence(const StudySpec& spec, const SolverConfig& solver = {});

/// Joins stage NLPs into one: variables and constraints are concatenated and
/// the terminal states of stage k are tied to the initial states of stage k+1
/// for every parameter sample.
NlpProblem link_stages(const std::vector<NlpProblem>& stages);

}  // namespace ensemble::studies

#endif  // ENSEMBLE_STUDIES_HPP
