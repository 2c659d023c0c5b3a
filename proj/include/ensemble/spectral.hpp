// Legendre-Gauss-Lobatto machinery: nodes, quadrature weights, differentiation
// matrices and barycentric interpolation on affine-mapped intervals.
//
// Everything here is templated on the scalar type and header-only.

#ifndef ENSEMBLE_SPECTRAL_HPP
#define ENSEMBLE_SPECTRAL_HPP

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>

namespace ensemble {

inline constexpr int kMaxLglOrder = 256;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Value and first derivative of the Legendre polynomial L_N at t, computed by
/// the three-term recurrence. Endpoint values are returned exactly.
template <typename Scalar>
std::pair<Scalar, Scalar> legendre_eval(int order, Scalar t) {
  using std::abs;
  if (order < 0) throw std::invalid_argument("legendre_eval: order must be >= 0");
  if (abs(t) > Scalar(1) + Scalar(1e-12))
    throw std::domain_error("legendre_eval: |t| > 1");
  if (order == 0) return {Scalar(1), Scalar(0)};

  const Scalar n = Scalar(order);
  if (t == Scalar(1)) return {Scalar(1), n * (n + 1) / 2};
  if (t == Scalar(-1)) {
    const Scalar sign = (order % 2 == 0) ? Scalar(1) : Scalar(-1);
    // L_N'(-1) = (-1)^(N+1) N(N+1)/2
    return {sign, -sign * n * (n + 1) / 2};
  }

  Scalar prev = Scalar(1);  // L_0
  Scalar curr = t;          // L_1
  Scalar dprev = Scalar(0);
  Scalar dcurr = Scalar(1);
  for (int k = 1; k < order; ++k) {
    const Scalar kk = Scalar(k);
    const Scalar next = ((2 * kk + 1) * t * curr - kk * prev) / (kk + 1);
    // L'_{k+1} = L'_{k-1} + (2k+1) L_k
    const Scalar dnext = dprev + (2 * kk + 1) * curr;
    prev = curr;
    curr = next;
    dprev = dcurr;
    dcurr = dnext;
  }
  return {curr, dcurr};
}

/// Maps the reference interval [-1,1] onto [a,b].
template <typename Scalar>
struct AffineMap {
  Scalar a = Scalar(-1);
  Scalar b = Scalar(1);

  AffineMap() = default;
  AffineMap(Scalar lower, Scalar upper) : a(lower), b(upper) {
    if (!(upper > lower)) throw std::invalid_argument("AffineMap: requires b > a");
  }

  Scalar length() const { return b - a; }
  Scalar to_interval(Scalar tau) const { return a + (b - a) * (tau + 1) / 2; }
  Scalar to_reference(Scalar t) const { return (2 * t - a - b) / (b - a); }
  Scalar weight_scale() const { return (b - a) / 2; }
  Scalar derivative_scale() const { return 2 / (b - a); }
};

/// LGL nodes, quadrature weights, differentiation matrix and barycentric
/// interpolation weights on the reference interval.
template <typename Scalar>
struct LglGrid {
  int order = 0;
  Vector<Scalar> nodes;
  Vector<Scalar> weights;
  Matrix<Scalar> diff_matrix;
  Vector<Scalar> barycentric;

  Eigen::Index size() const { return nodes.size(); }

  Vector<Scalar> mapped_nodes(const AffineMap<Scalar>& map) const {
    Vector<Scalar> out(nodes.size());
    for (Eigen::Index k = 0; k < nodes.size(); ++k) out[k] = map.to_interval(nodes[k]);
    return out;
  }
};

namespace detail {

// Newton iteration for an interior root of L_N'. Uses the Legendre ODE for L_N''.
template <typename Scalar>
Scalar refine_lgl_node(int order, Scalar guess) {
  using std::abs;
  const Scalar nn1 = Scalar(order) * Scalar(order + 1);
  Scalar t = guess;
  for (int it = 0; it < 100; ++it) {
    const auto [value, slope] = legendre_eval<Scalar>(order, t);
    const Scalar curvature = (2 * t * slope - nn1 * value) / (1 - t * t);
    const Scalar step = slope / curvature;
    t -= step;
    if (abs(step) <= 16 * std::numeric_limits<Scalar>::epsilon()) {
      // one polishing step after the update has settled
      const auto [v2, s2] = legendre_eval<Scalar>(order, t);
      const Scalar c2 = (2 * t * s2 - nn1 * v2) / (1 - t * t);
      return t - s2 / c2;
    }
  }
  throw std::runtime_error("lgl_grid: node iteration did not converge for N=" +
                           std::to_string(order));
}

}  // namespace detail

/// Builds the (N+1)-point LGL grid. Nodes are exactly symmetric, the
/// differentiation matrix rows sum to zero exactly.
template <typename Scalar = double>
LglGrid<Scalar> lgl_grid(int order) {
  using std::cos;
  if (order < 1 || order > kMaxLglOrder)
    throw std::invalid_argument("lgl_grid: order must be in [1, " +
                                std::to_string(kMaxLglOrder) + "]");
  const int n = order;
  const Scalar pi = Scalar(3.14159265358979323846264338327950288L);

  LglGrid<Scalar> grid;
  grid.order = n;
  grid.nodes.resize(n + 1);
  grid.nodes[0] = Scalar(-1);
  grid.nodes[n] = Scalar(1);
  for (int k = 1; k <= n / 2; ++k) {
    if (2 * k == n) {
      grid.nodes[k] = Scalar(0);
      continue;
    }
    const Scalar t = detail::refine_lgl_node<Scalar>(n, -cos(pi * Scalar(k) / Scalar(n)));
    grid.nodes[k] = t;
    grid.nodes[n - k] = -t;
  }

  Vector<Scalar> legendre(n + 1);
  for (int k = 0; k <= n; ++k) legendre[k] = legendre_eval<Scalar>(n, grid.nodes[k]).first;

  const Scalar nn1 = Scalar(n) * Scalar(n + 1);
  grid.weights.resize(n + 1);
  for (int k = 0; k <= n; ++k) grid.weights[k] = 2 / (nn1 * legendre[k] * legendre[k]);

  grid.diff_matrix.setZero(n + 1, n + 1);
  for (int j = 0; j <= n; ++j) {
    Scalar row_sum = Scalar(0);
    for (int k = 0; k <= n; ++k) {
      if (j == k) continue;
      const Scalar value = legendre[j] / (legendre[k] * (grid.nodes[j] - grid.nodes[k]));
      grid.diff_matrix(j, k) = value;
      row_sum += value;
    }
    grid.diff_matrix(j, j) = -row_sum;
  }

  // l_k(t) = psi(t) / (N(N+1) L_N(t_k) (t - t_k)), so the barycentric weights
  // are proportional to 1 / L_N(t_k).
  grid.barycentric = legendre.cwiseInverse();
  return grid;
}

/// (b-a)/2 * sum values[k] * weights[k].
template <typename Derived, typename Scalar>
Scalar quadrature(const Eigen::MatrixBase<Derived>& values, const LglGrid<Scalar>& grid,
                  const AffineMap<Scalar>& map = {}) {
  if (values.size() != grid.size())
    throw std::invalid_argument("quadrature: expected " + std::to_string(grid.size()) +
                                " samples, got " + std::to_string(values.size()));
  return map.weight_scale() * grid.weights.dot(values.template cast<Scalar>());
}

/// 2/(b-a) * D * values.
template <typename Derived, typename Scalar>
Vector<Scalar> differentiate(const Eigen::MatrixBase<Derived>& values, const LglGrid<Scalar>& grid,
                             const AffineMap<Scalar>& map = {}) {
  if (values.size() != grid.size())
    throw std::invalid_argument("differentiate: expected " + std::to_string(grid.size()) +
                                " samples, got " + std::to_string(values.size()));
  return map.derivative_scale() * (grid.diff_matrix * values.template cast<Scalar>());
}

/// Lagrange basis values l_k(t) for all k at a point of [a,b].
template <typename Scalar>
Vector<Scalar> lagrange_basis(const LglGrid<Scalar>& grid, const AffineMap<Scalar>& map,
                              Scalar t) {
  using std::abs;
  const Scalar slack = Scalar(1e-9) * (Scalar(1) + abs(map.a) + abs(map.b));
  if (t < map.a - slack || t > map.b + slack)
    throw std::domain_error("interpolate: t outside [a,b]");
  Scalar tau = map.to_reference(t);
  if (tau < Scalar(-1)) tau = Scalar(-1);
  if (tau > Scalar(1)) tau = Scalar(1);

  Vector<Scalar> basis = Vector<Scalar>::Zero(grid.size());
  for (Eigen::Index k = 0; k < grid.size(); ++k) {
    if (tau == grid.nodes[k]) {
      basis[k] = Scalar(1);
      return basis;
    }
  }
  Scalar denom = Scalar(0);
  for (Eigen::Index k = 0; k < grid.size(); ++k) {
    basis[k] = grid.barycentric[k] / (tau - grid.nodes[k]);
    denom += basis[k];
  }
  return basis / denom;
}

/// Barycentric Lagrange evaluation of the node samples at t in [a,b].
template <typename Derived, typename Scalar>
Scalar interpolate(const Eigen::MatrixBase<Derived>& values, const LglGrid<Scalar>& grid,
                   const AffineMap<Scalar>& map, Scalar t) {
  if (values.size() != grid.size())
    throw std::invalid_argument("interpolate: expected " + std::to_string(grid.size()) +
                                " samples, got " + std::to_string(values.size()));
  return lagrange_basis(grid, map, t).dot(values.template cast<Scalar>());
}

/// Interpolation of several channels at once; samples are (N+1) x channels.
template <typename Scalar>
Vector<Scalar> interpolate_rows(const Matrix<Scalar>& samples, const LglGrid<Scalar>& grid,
                                const AffineMap<Scalar>& map, Scalar t) {
  return samples.transpose() * lagrange_basis(grid, map, t);
}

}  // namespace ensemble

#endif  // ENSEMBLE_SPECTRAL_HPP
