// Dimensionless Bloch ensemble in the rotating frame:
//
//   dM/dt = [ w Oz + e u(t) Oy + e v(t) Ox ] M,   w in [-B, B], e in [1-delta, 1+delta]
//
// plus unit conversions to physical pulses and the iterated commutators of
// the drift with the u-control generator.

#ifndef ENSEMBLE_BLOCH_HPP
#define ENSEMBLE_BLOCH_HPP

#include "ensemble/problem.hpp"
#include "ensemble/transcription.hpp"

#include <Eigen/Dense>

#include <functional>
#include <vector>

namespace ensemble::bloch {

using Eigen::Matrix3d;
using Eigen::Vector2d;
using Eigen::Vector3d;

struct RotationGenerators {
  Matrix3d omega_x;
  Matrix3d omega_y;
  Matrix3d omega_z;
};

const RotationGenerators& generators();

inline Matrix3d commutator(const Matrix3d& a, const Matrix3d& b) { return a * b - b * a; }

struct BlochParams {
  /// Frequency half-band: w in [-B, B].
  double B = 1.0;
  /// rf inhomogeneity half-width: e in [1 - delta, 1 + delta].
  double delta = 0.0;
  double amplitude_bound = 2.0;
  double duration = 1.0;
  /// Additive time-varying frequency offset; empty means none.
  std::function<double(double)> frequency_profile;

  bool has_omega_axis() const { return B > 0.0; }
  bool has_epsilon_axis() const { return delta > 0.0; }
  /// Throws std::invalid_argument naming the offending field as bloch.<name>.
  void validate() const;
};

/// Maps a collocation parameter vector (only the non-degenerate axes) to (w, e).
Vector2d physical_parameters(const BlochParams& params, ConstVec s);

/// Right-hand side for s = (w, e) and control (u, v).
Vector3d bloch_rhs(const BlochParams& params, double t, const Vector2d& s, const Vector3d& M,
                   const Vector2d& u);

/// Generator matrix w_eff Oz + e u Oy + e v Ox.
Matrix3d bloch_generator(const BlochParams& params, double t, const Vector2d& s, const Vector2d& u);

/// Ensemble problem with analytic Jacobians, M(0) = initial, |(u,v)| <= A and
/// the parameter box built from the non-degenerate axes. Costs are left empty.
EnsembleProblem make_ensemble_problem(const BlochParams& params, const Vector3d& initial);

using ControlFn = std::function<void(double, VecOut)>;

/// Fixed-step RK4 terminal magnetization for each (w, e) sample.
std::vector<Vector3d> simulate(const BlochParams& params, const ControlFn& controls,
                               const Vector3d& initial, const std::vector<Vector2d>& samples,
                               int steps = 4000, double start_time = 0.0);

/// Same, with one initial state per sample.
std::vector<Vector3d> simulate(const BlochParams& params, const ControlFn& controls,
                               const std::vector<Vector3d>& initial,
                               const std::vector<Vector2d>& samples, int steps = 4000,
                               double start_time = 0.0);

/// k-fold iterated commutator ad^k_{w Oz}(Oy).
Matrix3d ad_chain(double omega, int k);

/// Closed form of ad_chain: (-1)^j w^(2j-1) Ox for k = 2j-1, (-1)^j w^(2j) Oy for k = 2j.
Matrix3d ad_chain_closed_form(double omega, int k);

/// Dimensionless control samples (rows: time, u, v).
struct PulseSamples {
  Eigen::VectorXd t;
  Eigen::MatrixXd controls;  // rows x 2
};

struct PhysicalSample {
  double t_seconds = 0.0;
  double amplitude_hz = 0.0;
  double phase_rad = 0.0;
};

struct PhysicalPulse {
  std::vector<PhysicalSample> samples;
  double nominal_amplitude_hz = 0.0;

  double duration_seconds() const;
};

/// t = tau / (2 pi A), amplitude = A |(u,v)|, phase = atan2(v, u).
PhysicalPulse to_physical(const PulseSamples& pulse, double nominal_amplitude_hz);
PhysicalPulse to_physical(const PulseSolution& pulse, double nominal_amplitude_hz);

PulseSamples from_physical(const PhysicalPulse& pulse, double nominal_amplitude_hz);

/// Node samples of a solved pulse.
PulseSamples samples_of(const PulseSolution& pulse);

}  // namespace ensemble::bloch

#endif  // ENSEMBLE_BLOCH_HPP
