#include "ensemble/bloch.hpp"

#include "ensemble/parallel.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ensemble::bloch {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

const RotationGenerators& generators() {
  static const RotationGenerators g = [] {
    RotationGenerators r;
    r.omega_x << 0, 0, 0,
                 0, 0, -1,
                 0, 1, 0;
    r.omega_y << 0, 0, 1,
                 0, 0, 0,
                 -1, 0, 0;
    r.omega_z << 0, -1, 0,
                 1, 0, 0,
                 0, 0, 0;
    return r;
  }();
  return g;
}

void BlochParams::validate() const {
  if (!std::isfinite(B) || B < 0.0) throw std::invalid_argument("bloch.B must be >= 0");
  if (!std::isfinite(delta) || delta < 0.0 || delta >= 1.0)
    throw std::invalid_argument("bloch.delta must lie in [0, 1)");
  if (!(amplitude_bound > 0.0) || !std::isfinite(amplitude_bound))
    throw std::invalid_argument("bloch.amplitude_bound must be > 0");
  if (!(duration > 0.0) || !std::isfinite(duration))
    throw std::invalid_argument("bloch.duration must be > 0");
}

Vector2d physical_parameters(const BlochParams& params, ConstVec s) {
  Vector2d out(0.0, 1.0);
  Index i = 0;
  if (params.has_omega_axis()) out[0] = s[i++];
  if (params.has_epsilon_axis()) out[1] = s[i++];
  return out;
}

namespace {

double effective_frequency(const BlochParams& params, double t, double omega) {
  return params.frequency_profile ? omega + params.frequency_profile(t) : omega;
}

// [w Oz + e u Oy + e v Ox] M written out.
inline Vector3d apply_generator(double w, double eu, double ev, const Vector3d& M) {
  return {-w * M[1] + eu * M[2], w * M[0] - ev * M[2], -eu * M[0] + ev * M[1]};
}

}  // namespace

Vector3d bloch_rhs(const BlochParams& params, double t, const Vector2d& s, const Vector3d& M,
                   const Vector2d& u) {
  const double w = effective_frequency(params, t, s[0]);
  return apply_generator(w, s[1] * u[0], s[1] * u[1], M);
}

Matrix3d bloch_generator(const BlochParams& params, double t, const Vector2d& s, const Vector2d& u) {
  const auto& g = generators();
  const double w = effective_frequency(params, t, s[0]);
  return w * g.omega_z + s[1] * u[0] * g.omega_y + s[1] * u[1] * g.omega_x;
}

EnsembleProblem make_ensemble_problem(const BlochParams& params, const Vector3d& initial) {
  params.validate();
  EnsembleProblem p;
  p.state_dim = 3;
  p.control_dim = 2;
  if (params.has_omega_axis()) p.param_box.push_back({-params.B, params.B});
  if (params.has_epsilon_axis()) p.param_box.push_back({1.0 - params.delta, 1.0 + params.delta});

  p.dynamics = [params](double t, ConstVec s, ConstVec x, ConstVec u, VecOut xdot) {
    const Vector2d se = physical_parameters(params, s);
    const double w = effective_frequency(params, t, se[0]);
    xdot = apply_generator(w, se[1] * u[0], se[1] * u[1], Vector3d(x));
  };
  p.dynamics_jacobian = [params](double t, ConstVec s, ConstVec x, ConstVec u, MatOut fx, MatOut fu) {
    const Vector2d se = physical_parameters(params, s);
    const auto& g = generators();
    const double w = effective_frequency(params, t, se[0]);
    fx = w * g.omega_z + se[1] * u[0] * g.omega_y + se[1] * u[1] * g.omega_x;
    const Vector3d M(x);
    fu.col(0) = se[1] * (g.omega_y * M);
    fu.col(1) = se[1] * (g.omega_x * M);
  };
  p.initial_state = [initial](ConstVec, VecOut x0) { x0 = initial; };
  p.control_bound = params.amplitude_bound;
  p.horizon = FixedHorizon{params.duration};
  return p;
}

std::vector<Vector3d> simulate(const BlochParams& params, const ControlFn& controls,
                               const std::vector<Vector3d>& initial,
                               const std::vector<Vector2d>& samples, int steps, double start_time) {
  params.validate();
  if (steps < 100) throw std::invalid_argument("simulate: steps must be >= 100");
  if (initial.size() != samples.size())
    throw std::invalid_argument("simulate: one initial state per sample required");

  // Controls and frequency offsets at every RK4 stage time, shared by all samples.
  const double h = params.duration / steps;
  const int points = 2 * steps + 1;
  std::vector<Vector2d> u(points);
  std::vector<double> offset(points, 0.0);
  Eigen::VectorXd buffer(2);
  for (int i = 0; i < points; ++i) {
    const double t = start_time + 0.5 * h * i;
    if (controls) {
      controls(t, buffer);
      if (!buffer.allFinite()) throw std::runtime_error("simulate: non-finite control value");
      u[i] = buffer;
    } else {
      u[i].setZero();
    }
    if (params.frequency_profile) offset[i] = params.frequency_profile(t);
  }

  std::vector<Vector3d> out(samples.size());
  parallel_for(static_cast<std::ptrdiff_t>(samples.size()), [&](std::ptrdiff_t j) {
    const double w = samples[j][0];
    const double e = samples[j][1];
    auto rhs = [&](int i, const Vector3d& M) {
      return apply_generator(w + offset[i], e * u[i][0], e * u[i][1], M);
    };
    Vector3d M = initial[j];
    for (int k = 0; k < steps; ++k) {
      const int i0 = 2 * k;
      const Vector3d k1 = rhs(i0, M);
      const Vector3d k2 = rhs(i0 + 1, M + 0.5 * h * k1);
      const Vector3d k3 = rhs(i0 + 1, M + 0.5 * h * k2);
      const Vector3d k4 = rhs(i0 + 2, M + h * k3);
      M += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    out[j] = M;
  });
  return out;
}

std::vector<Vector3d> simulate(const BlochParams& params, const ControlFn& controls,
                               const Vector3d& initial, const std::vector<Vector2d>& samples,
                               int steps, double start_time) {
  return simulate(params, controls, std::vector<Vector3d>(samples.size(), initial), samples, steps,
                  start_time);
}

Matrix3d ad_chain(double omega, int k) {
  if (k < 0) throw std::invalid_argument("ad_chain: k must be >= 0");
  const auto& g = generators();
  const Matrix3d drift = omega * g.omega_z;
  Matrix3d x = g.omega_y;
  for (int i = 0; i < k; ++i) x = commutator(drift, x);
  return x;
}

Matrix3d ad_chain_closed_form(double omega, int k) {
  if (k < 0) throw std::invalid_argument("ad_chain_closed_form: k must be >= 0");
  const auto& g = generators();
  if (k == 0) return g.omega_y;
  const int j = (k + 1) / 2;
  const double sign = (j % 2 == 0) ? 1.0 : -1.0;
  const double power = std::pow(omega, k);
  return (k % 2 == 1) ? Matrix3d(sign * power * g.omega_x) : Matrix3d(sign * power * g.omega_y);
}

double PhysicalPulse::duration_seconds() const {
  if (samples.empty()) return 0.0;
  return samples.back().t_seconds - samples.front().t_seconds;
}

PhysicalPulse to_physical(const PulseSamples& pulse, double nominal_amplitude_hz) {
  if (!(nominal_amplitude_hz > 0.0)) throw std::invalid_argument("to_physical: amplitude must be > 0");
  if (pulse.controls.rows() != pulse.t.size() || pulse.controls.cols() != 2)
    throw std::invalid_argument("to_physical: expected one (u, v) row per time sample");
  PhysicalPulse out;
  out.nominal_amplitude_hz = nominal_amplitude_hz;
  const double scale = 2.0 * std::numbers::pi * nominal_amplitude_hz;
  out.samples.reserve(pulse.t.size());
  for (Index i = 0; i < pulse.t.size(); ++i) {
    const double u = pulse.controls(i, 0);
    const double v = pulse.controls(i, 1);
    out.samples.push_back({pulse.t[i] / scale, nominal_amplitude_hz * std::hypot(u, v), std::atan2(v, u)});
  }
  return out;
}

PulseSamples samples_of(const PulseSolution& pulse) {
  PulseSamples s;
  s.t = pulse.node_times();
  s.controls = pulse.controls;
  return s;
}

PhysicalPulse to_physical(const PulseSolution& pulse, double nominal_amplitude_hz) {
  return to_physical(samples_of(pulse), nominal_amplitude_hz);
}

PulseSamples from_physical(const PhysicalPulse& pulse, double nominal_amplitude_hz) {
  if (!(nominal_amplitude_hz > 0.0)) throw std::invalid_argument("from_physical: amplitude must be > 0");
  const Index n = static_cast<Index>(pulse.samples.size());
  PulseSamples out;
  out.t.resize(n);
  out.controls.resize(n, 2);
  const double scale = 2.0 * std::numbers::pi * nominal_amplitude_hz;
  for (Index i = 0; i < n; ++i) {
    const auto& s = pulse.samples[i];
    const double a = s.amplitude_hz / nominal_amplitude_hz;
    out.t[i] = s.t_seconds * scale;
    out.controls(i, 0) = a * std::cos(s.phase_rad);
    out.controls(i, 1) = a * std::sin(s.phase_rad);
  }
  return out;
}

}  // namespace ensemble::bloch
