#include "ensemble/transcription.hpp"

#include "ensemble/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

namespace ensemble {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double EnsembleProblem::nominal_duration() const {
  if (const auto* fixed = std::get_if<FixedHorizon>(&horizon)) return fixed->duration;
  return std::get<FreeHorizon>(horizon).initial_duration;
}

void EnsembleProblem::validate() const {
  if (state_dim < 1) throw std::invalid_argument("problem.state_dim must be >= 1");
  if (control_dim < 0) throw std::invalid_argument("problem.control_dim must be >= 0");
  if (!dynamics) throw std::invalid_argument("problem.dynamics is not set");
  for (std::size_t i = 0; i < param_box.size(); ++i) {
    if (!(param_box[i].upper > param_box[i].lower))
      throw std::invalid_argument("problem.param_box[" + std::to_string(i) + "] is empty");
  }
  if (!(control_bound > 0.0)) throw std::invalid_argument("problem.control_bound must be > 0");
  if (endpoint_count < 0 || (endpoint_count > 0 && !endpoint_constraints))
    throw std::invalid_argument("problem.endpoint_constraints missing for endpoint_count > 0");
  if (path_count < 0 || (path_count > 0 && !path_constraints))
    throw std::invalid_argument("problem.path_constraints missing for path_count > 0");
  if (const auto* fixed = std::get_if<FixedHorizon>(&horizon)) {
    if (!(fixed->duration > 0.0)) throw std::invalid_argument("problem.horizon must be > 0");
  } else {
    const auto& free = std::get<FreeHorizon>(horizon);
    if (!(free.min_duration > 0.0) || !(free.max_duration >= free.min_duration))
      throw std::invalid_argument("problem.horizon bounds must satisfy 0 < T_min <= T_max");
    if (free.initial_duration < free.min_duration || free.initial_duration > free.max_duration)
      throw std::invalid_argument("problem.horizon initial duration outside bounds");
  }
}

CollocationGrid build_grid(const EnsembleProblem& problem, int order,
                           const std::vector<int>& param_orders) {
  if (order < 2) throw std::invalid_argument("build_grid: time order N must be >= 2");
  const auto d = problem.param_box.size();
  if (param_orders.size() != d)
    throw std::invalid_argument("build_grid: expected " + std::to_string(d) +
                                " parameter orders, got " + std::to_string(param_orders.size()));

  CollocationGrid grid;
  grid.time_grid = lgl_grid<double>(order);
  if (!problem.free_horizon()) {
    const double t0 = problem.start_time;
    grid.time_map = AffineMap<double>(t0, t0 + problem.nominal_duration());
  }

  Index count = 1;
  for (std::size_t i = 0; i < d; ++i) {
    if (param_orders[i] < 1)
      throw std::invalid_argument("build_grid: parameter order must be >= 1");
    grid.param_grids.push_back(lgl_grid<double>(param_orders[i]));
    grid.param_maps.emplace_back(problem.param_box[i].lower, problem.param_box[i].upper);
    count *= param_orders[i] + 1;
  }

  grid.samples.resize(static_cast<Index>(d), count);
  grid.param_weights.resize(count);
  for (Index j = 0; j < count; ++j) {
    Index rest = j;
    double weight = 1.0;
    for (std::size_t i = 0; i < d; ++i) {
      const auto& g = grid.param_grids[i];
      const Index r = rest % g.size();
      rest /= g.size();
      grid.samples(static_cast<Index>(i), j) = grid.param_maps[i].to_interval(g.nodes[r]);
      weight *= grid.param_maps[i].weight_scale() * g.weights[r];
    }
    grid.param_weights[j] = weight;
  }
  return grid;
}

VariableLayout make_layout(const EnsembleProblem& problem, const CollocationGrid& grid) {
  VariableLayout layout;
  layout.nodes = grid.nodes();
  layout.samples = grid.sample_count();
  layout.state_dim = problem.state_dim;
  layout.control_dim = problem.control_dim;
  layout.free_horizon = problem.free_horizon();
  return layout;
}

namespace {

constexpr double kCallbackStep = 6.0e-6;  // ~cbrt(machine epsilon)

double fd_step(double v) { return kCallbackStep * (1.0 + std::abs(v)); }

void check_finite(const VectorXd& v, const char* what) {
  if (!v.allFinite()) throw std::runtime_error(std::string("non-finite value from ") + what);
}

// Records (row, col) positions in emission order, then replays values into
// the compressed storage of a fixed-pattern sparse matrix.
class SparsePattern {
 public:
  void build(Index rows, Index cols, const std::vector<std::pair<Index, Index>>& entries) {
    std::vector<Eigen::Triplet<double>> triplets;
    triplets.reserve(entries.size());
    for (const auto& [r, c] : entries) triplets.emplace_back(r, c, 1.0);
    matrix_.resize(rows, cols);
    matrix_.setFromTriplets(triplets.begin(), triplets.end());
    matrix_.makeCompressed();
    if (matrix_.nonZeros() != static_cast<Index>(entries.size()))
      throw std::logic_error("SparsePattern: duplicate entries");
    positions_.resize(entries.size());
    const auto* outer = matrix_.outerIndexPtr();
    const auto* inner = matrix_.innerIndexPtr();
    for (std::size_t e = 0; e < entries.size(); ++e) {
      const auto [r, c] = entries[e];
      const auto* begin = inner + outer[c];
      const auto* end = inner + outer[c + 1];
      const auto* it = std::lower_bound(begin, end, static_cast<int>(r));
      positions_[e] = static_cast<int>(it - inner);
    }
  }

  void prepare(SparseMatrix& target) const {
    const bool same = target.rows() == matrix_.rows() && target.cols() == matrix_.cols() &&
                      target.isCompressed() && target.nonZeros() == matrix_.nonZeros() &&
                      std::equal(matrix_.outerIndexPtr(),
                                 matrix_.outerIndexPtr() + matrix_.outerSize() + 1,
                                 target.outerIndexPtr()) &&
                      std::equal(matrix_.innerIndexPtr(),
                                 matrix_.innerIndexPtr() + matrix_.nonZeros(),
                                 target.innerIndexPtr());
    if (!same) target = matrix_;
  }

  int position(std::size_t emission) const { return positions_[emission]; }
  std::size_t size() const { return positions_.size(); }

 private:
  SparseMatrix matrix_;
  std::vector<int> positions_;
};

struct PatternEmitter {
  std::vector<std::pair<Index, Index>>* entries;
  void operator()(Index r, Index c, double) { entries->emplace_back(r, c); }
};

struct ValueEmitter {
  double* values;
  const SparsePattern* pattern;
  std::size_t next;
  void operator()(Index, Index, double v) { values[pattern->position(next++)] = v; }
};

class CollocationModel {
 public:
  CollocationModel(const EnsembleProblem& problem, const CollocationGrid& grid)
      : problem_(problem), grid_(grid), layout_(make_layout(problem, grid)) {
    problem_.validate();
    n_ = problem_.state_dim;
    m_ = problem_.control_dim;
    nodes_ = layout_.nodes;
    samples_ = layout_.samples;
    if (grid_.samples.rows() != problem_.param_dim())
      throw std::invalid_argument("transcribe: grid does not match problem parameter dimension");

    has_initial_ = static_cast<bool>(problem_.initial_state);
    if (has_initial_) {
      initial_states_.resize(n_, samples_);
      for (Index j = 0; j < samples_; ++j) {
        VectorXd x0(n_);
        problem_.initial_state(grid_.samples.col(j), x0);
        check_finite(x0, "initial_state");
        initial_states_.col(j) = x0;
      }
    }
    has_bound_ = std::isfinite(problem_.control_bound) && m_ > 0;

    collocation_rows_ = samples_ * nodes_ * n_;
    initial_rows_ = has_initial_ ? samples_ * n_ : 0;
    endpoint_rows_ = samples_ * problem_.endpoint_count;
    num_eq_ = collocation_rows_ + initial_rows_ + endpoint_rows_;
    path_rows_ = samples_ * nodes_ * problem_.path_count;
    bound_rows_ = has_bound_ ? nodes_ : 0;
    num_ineq_ = path_rows_ + bound_rows_;

    VectorXd x = VectorXd::Zero(layout_.num_vars());
    if (layout_.free_horizon) x[layout_.horizon_index()] = problem_.nominal_duration();
    build_patterns(x);
  }

  const VariableLayout& layout() const { return layout_; }
  Index num_eq() const { return num_eq_; }
  Index num_ineq() const { return num_ineq_; }

  double horizon(const VectorXd& x) const {
    return layout_.free_horizon ? x[layout_.horizon_index()] : problem_.nominal_duration();
  }

  double node_time(Index k, double T) const {
    return problem_.start_time + 0.5 * T * (grid_.time_grid.nodes[k] + 1.0);
  }

  Eigen::Map<const RowMajorMatrix> state_block(const VectorXd& x, Index j) const {
    return {x.data() + j * layout_.state_block(), nodes_, n_};
  }
  Eigen::Map<const RowMajorMatrix> control_block(const VectorXd& x) const {
    return {x.data() + layout_.states_size(), nodes_, m_};
  }

  // ---- objective -------------------------------------------------------

  CostBreakdown costs(const VectorXd& x) const {
    const double T = horizon(x);
    const auto U = control_block(x);
    const VectorXd empty;
    std::vector<double> terminal(samples_, 0.0), running(samples_, 0.0);
    parallel_for(samples_, [&](std::ptrdiff_t j) {
      const auto X = state_block(x, j);
      const double W = grid_.param_weights[j];
      if (problem_.terminal_cost) terminal[j] = W * problem_.terminal_cost(T, X.row(nodes_ - 1).transpose());
      if (problem_.running_cost && problem_.running_cost_scope == RunningCostScope::ensemble) {
        double acc = 0.0;
        for (Index k = 0; k < nodes_; ++k)
          acc += grid_.time_grid.weights[k] *
                 problem_.running_cost(X.row(k).transpose(), U.row(k).transpose());
        running[j] = W * 0.5 * T * acc;
      }
    });
    CostBreakdown out;
    for (Index j = 0; j < samples_; ++j) {
      out.terminal += terminal[j];
      out.running += running[j];
    }
    if (problem_.running_cost && problem_.running_cost_scope == RunningCostScope::shared) {
      double acc = 0.0;
      for (Index k = 0; k < nodes_; ++k)
        acc += grid_.time_grid.weights[k] * problem_.running_cost(empty, U.row(k).transpose());
      out.running += 0.5 * T * acc;
    }
    return out;
  }

  double objective(const VectorXd& x) const { return costs(x).total(); }

  void gradient(const VectorXd& x, VectorXd& g) const {
    g.setZero(layout_.num_vars());
    const double T = horizon(x);
    const auto U = control_block(x);
    const VectorXd empty;
    // Per-sample contributions to the control and horizon gradient are reduced
    // in sample order afterwards.
    std::vector<VectorXd> control_parts(samples_);
    std::vector<double> horizon_parts(samples_, 0.0);
    parallel_for(samples_, [&](std::ptrdiff_t j) {
      const auto X = state_block(x, j);
      const double W = grid_.param_weights[j];
      if (problem_.terminal_cost) {
        const VectorXd xT = X.row(nodes_ - 1).transpose();
        VectorXd gx(n_);
        terminal_gradient(T, xT, gx);
        g.segment(layout_.state_index(nodes_ - 1, j, 0), n_) += W * gx;
        if (layout_.free_horizon) {
          const double h = fd_step(T);
          horizon_parts[j] += W * (problem_.terminal_cost(T + h, xT) - problem_.terminal_cost(T - h, xT)) /
                              (2.0 * h);
        }
      }
      if (problem_.running_cost && problem_.running_cost_scope == RunningCostScope::ensemble) {
        VectorXd cu = VectorXd::Zero(nodes_ * m_);
        double acc = 0.0;
        VectorXd gx(n_), gu(m_);
        for (Index k = 0; k < nodes_; ++k) {
          const double wk = grid_.time_grid.weights[k];
          const VectorXd xk = X.row(k).transpose();
          const VectorXd uk = U.row(k).transpose();
          running_gradient(xk, uk, gx, gu);
          const double scale = W * 0.5 * T * wk;
          g.segment(layout_.state_index(k, j, 0), n_) += scale * gx;
          cu.segment(k * m_, m_) += scale * gu;
          if (layout_.free_horizon) acc += wk * problem_.running_cost(xk, uk);
        }
        control_parts[j] = std::move(cu);
        horizon_parts[j] += W * 0.5 * acc;
      }
    });
    const Index uoff = layout_.states_size();
    for (Index j = 0; j < samples_; ++j) {
      if (control_parts[j].size() > 0) g.segment(uoff, nodes_ * m_) += control_parts[j];
      if (layout_.free_horizon) g[layout_.horizon_index()] += horizon_parts[j];
    }
    if (problem_.running_cost && problem_.running_cost_scope == RunningCostScope::shared) {
      VectorXd gx(0), gu(m_);
      double acc = 0.0;
      for (Index k = 0; k < nodes_; ++k) {
        const double wk = grid_.time_grid.weights[k];
        const VectorXd uk = U.row(k).transpose();
        running_gradient(empty, uk, gx, gu);
        g.segment(layout_.control_index(k, 0), m_) += 0.5 * T * wk * gu;
        if (layout_.free_horizon) acc += wk * problem_.running_cost(empty, uk);
      }
      if (layout_.free_horizon) g[layout_.horizon_index()] += 0.5 * acc;
    }
  }

  // ---- constraints -----------------------------------------------------

  /// (N+1) x n defect of sample j: (2/T) D X - F.
  MatrixXd defect(const VectorXd& x, Index j) const {
    const double T = horizon(x);
    const auto X = state_block(x, j);
    const auto U = control_block(x);
    MatrixXd R = (2.0 / T) * (grid_.time_grid.diff_matrix * X);
    VectorXd f(n_);
    const auto s = grid_.samples.col(j);
    for (Index k = 0; k < nodes_; ++k) {
      problem_.dynamics(node_time(k, T), s, X.row(k).transpose(), U.row(k).transpose(), f);
      R.row(k) -= f.transpose();
    }
    return R;
  }

  void eq(const VectorXd& x, VectorXd& c) const {
    c.resize(num_eq_);
    parallel_for(samples_, [&](std::ptrdiff_t j) {
      const MatrixXd R = defect(x, j);
      for (Index k = 0; k < nodes_; ++k)
        c.segment((j * nodes_ + k) * n_, n_) = R.row(k).transpose();
    });
    if (has_initial_) {
      for (Index j = 0; j < samples_; ++j)
        c.segment(collocation_rows_ + j * n_, n_) =
            state_block(x, j).row(0).transpose() - initial_states_.col(j);
    }
    if (problem_.endpoint_count > 0) {
      const Index ne = problem_.endpoint_count;
      VectorXd e(ne);
      for (Index j = 0; j < samples_; ++j) {
        const auto X = state_block(x, j);
        problem_.endpoint_constraints(X.row(0).transpose(), X.row(nodes_ - 1).transpose(), e);
        c.segment(collocation_rows_ + initial_rows_ + j * ne, ne) = e;
      }
    }
  }

  void ineq(const VectorXd& x, VectorXd& g) const {
    g.resize(num_ineq_);
    const auto U = control_block(x);
    if (problem_.path_count > 0) {
      const Index np = problem_.path_count;
      VectorXd r(np);
      for (Index j = 0; j < samples_; ++j) {
        const auto X = state_block(x, j);
        for (Index k = 0; k < nodes_; ++k) {
          problem_.path_constraints(X.row(k).transpose(), U.row(k).transpose(), r);
          g.segment((j * nodes_ + k) * np, np) = r;
        }
      }
    }
    if (has_bound_) {
      const double A2 = problem_.control_bound * problem_.control_bound;
      for (Index k = 0; k < nodes_; ++k) g[path_rows_ + k] = U.row(k).squaredNorm() - A2;
    }
  }

  void eq_jacobian(const VectorXd& x, SparseMatrix& J) const {
    eq_pattern_.prepare(J);
    double* values = J.valuePtr();
    parallel_for(samples_, [&](std::ptrdiff_t j) {
      ValueEmitter emit{values, &eq_pattern_, static_cast<std::size_t>(j) * per_sample_colloc_};
      emit_collocation(x, j, emit);
    });
    ValueEmitter emit{values, &eq_pattern_, static_cast<std::size_t>(samples_) * per_sample_colloc_};
    emit_boundary(x, emit);
  }

  void ineq_jacobian(const VectorXd& x, SparseMatrix& J) const {
    ineq_pattern_.prepare(J);
    ValueEmitter emit{J.valuePtr(), &ineq_pattern_, 0};
    emit_inequalities(x, emit);
  }

 private:
  void dynamics_jacobian(double t, ConstVec s, ConstVec x, ConstVec u, MatrixXd& fx,
                         MatrixXd& fu) const {
    fx.resize(n_, n_);
    fu.resize(n_, m_);
    if (problem_.dynamics_jacobian) {
      problem_.dynamics_jacobian(t, s, x, u, fx, fu);
      return;
    }
    VectorXd xp = x, up = u, fp(n_), fm(n_);
    for (Index i = 0; i < n_; ++i) {
      const double h = fd_step(x[i]);
      xp[i] = x[i] + h;
      problem_.dynamics(t, s, xp, u, fp);
      xp[i] = x[i] - h;
      problem_.dynamics(t, s, xp, u, fm);
      xp[i] = x[i];
      fx.col(i) = (fp - fm) / (2.0 * h);
    }
    for (Index i = 0; i < m_; ++i) {
      const double h = fd_step(u[i]);
      up[i] = u[i] + h;
      problem_.dynamics(t, s, x, up, fp);
      up[i] = u[i] - h;
      problem_.dynamics(t, s, x, up, fm);
      up[i] = u[i];
      fu.col(i) = (fp - fm) / (2.0 * h);
    }
  }

  VectorXd dynamics_time_derivative(double t, ConstVec s, ConstVec x, ConstVec u) const {
    const double h = fd_step(t);
    VectorXd fp(n_), fm(n_);
    problem_.dynamics(t + h, s, x, u, fp);
    problem_.dynamics(t - h, s, x, u, fm);
    return (fp - fm) / (2.0 * h);
  }

  void terminal_gradient(double T, const VectorXd& xT, VectorXd& gx) const {
    gx.resize(n_);
    if (problem_.terminal_cost_gradient) {
      problem_.terminal_cost_gradient(T, xT, gx);
      return;
    }
    VectorXd xp = xT;
    for (Index i = 0; i < n_; ++i) {
      const double h = fd_step(xT[i]);
      xp[i] = xT[i] + h;
      const double fp = problem_.terminal_cost(T, xp);
      xp[i] = xT[i] - h;
      const double fm = problem_.terminal_cost(T, xp);
      xp[i] = xT[i];
      gx[i] = (fp - fm) / (2.0 * h);
    }
  }

  void running_gradient(const VectorXd& x, const VectorXd& u, VectorXd& gx, VectorXd& gu) const {
    gx.resize(x.size());
    gu.resize(m_);
    if (problem_.running_cost_gradient) {
      problem_.running_cost_gradient(x, u, gx, gu);
      return;
    }
    VectorXd xp = x, up = u;
    for (Index i = 0; i < x.size(); ++i) {
      const double h = fd_step(x[i]);
      xp[i] = x[i] + h;
      const double fp = problem_.running_cost(xp, u);
      xp[i] = x[i] - h;
      const double fm = problem_.running_cost(xp, u);
      xp[i] = x[i];
      gx[i] = (fp - fm) / (2.0 * h);
    }
    for (Index i = 0; i < m_; ++i) {
      const double h = fd_step(u[i]);
      up[i] = u[i] + h;
      const double fp = problem_.running_cost(x, up);
      up[i] = u[i] - h;
      const double fm = problem_.running_cost(x, up);
      up[i] = u[i];
      gu[i] = (fp - fm) / (2.0 * h);
    }
  }

  template <typename Emit>
  void emit_collocation(const VectorXd& x, Index j, Emit& emit) const {
    const double T = horizon(x);
    const double scale = 2.0 / T;
    const auto& D = grid_.time_grid.diff_matrix;
    const auto X = state_block(x, j);
    const auto U = control_block(x);
    const auto s = grid_.samples.col(j);
    MatrixXd DX;
    if (layout_.free_horizon) DX = D * X;
    MatrixXd fx, fu;
    for (Index k = 0; k < nodes_; ++k) {
      const double t = node_time(k, T);
      const VectorXd xk = X.row(k).transpose();
      const VectorXd uk = U.row(k).transpose();
      dynamics_jacobian(t, s, xk, uk, fx, fu);
      VectorXd ft;
      if (layout_.free_horizon) ft = dynamics_time_derivative(t, s, xk, uk);
      for (Index c = 0; c < n_; ++c) {
        const Index row = (j * nodes_ + k) * n_ + c;
        for (Index kk = 0; kk < nodes_; ++kk) {
          double v = scale * D(k, kk);
          if (kk == k) v -= fx(c, c);
          emit(row, layout_.state_index(kk, j, c), v);
        }
        for (Index cc = 0; cc < n_; ++cc) {
          if (cc == c) continue;
          emit(row, layout_.state_index(k, j, cc), -fx(c, cc));
        }
        for (Index q = 0; q < m_; ++q) emit(row, layout_.control_index(k, q), -fu(c, q));
        if (layout_.free_horizon) {
          const double dtdT = 0.5 * (grid_.time_grid.nodes[k] + 1.0);
          emit(row, layout_.horizon_index(), -2.0 / (T * T) * DX(k, c) - ft[c] * dtdT);
        }
      }
    }
  }

  template <typename Emit>
  void emit_boundary(const VectorXd& x, Emit& emit) const {
    if (has_initial_) {
      for (Index j = 0; j < samples_; ++j)
        for (Index c = 0; c < n_; ++c)
          emit(collocation_rows_ + j * n_ + c, layout_.state_index(0, j, c), 1.0);
    }
    const Index ne = problem_.endpoint_count;
    if (ne == 0) return;
    VectorXd ep(ne), em(ne);
    for (Index j = 0; j < samples_; ++j) {
      const auto X = state_block(x, j);
      VectorXd x0 = X.row(0).transpose();
      VectorXd xT = X.row(nodes_ - 1).transpose();
      MatrixXd J0(ne, n_), JT(ne, n_);
      for (Index i = 0; i < n_; ++i) {
        const double h0 = fd_step(x0[i]);
        const double keep0 = x0[i];
        x0[i] = keep0 + h0;
        problem_.endpoint_constraints(x0, xT, ep);
        x0[i] = keep0 - h0;
        problem_.endpoint_constraints(x0, xT, em);
        x0[i] = keep0;
        J0.col(i) = (ep - em) / (2.0 * h0);
        const double hT = fd_step(xT[i]);
        const double keepT = xT[i];
        xT[i] = keepT + hT;
        problem_.endpoint_constraints(x0, xT, ep);
        xT[i] = keepT - hT;
        problem_.endpoint_constraints(x0, xT, em);
        xT[i] = keepT;
        JT.col(i) = (ep - em) / (2.0 * hT);
      }
      for (Index r = 0; r < ne; ++r) {
        const Index row = collocation_rows_ + initial_rows_ + j * ne + r;
        for (Index i = 0; i < n_; ++i) emit(row, layout_.state_index(0, j, i), J0(r, i));
        for (Index i = 0; i < n_; ++i) emit(row, layout_.state_index(nodes_ - 1, j, i), JT(r, i));
      }
    }
  }

  template <typename Emit>
  void emit_inequalities(const VectorXd& x, Emit& emit) const {
    const auto U = control_block(x);
    const Index np = problem_.path_count;
    if (np > 0) {
      VectorXd rp(np), rm(np);
      for (Index j = 0; j < samples_; ++j) {
        const auto X = state_block(x, j);
        for (Index k = 0; k < nodes_; ++k) {
          VectorXd xk = X.row(k).transpose();
          VectorXd uk = U.row(k).transpose();
          MatrixXd Jx(np, n_), Ju(np, m_);
          for (Index i = 0; i < n_; ++i) {
            const double h = fd_step(xk[i]);
            const double keep = xk[i];
            xk[i] = keep + h;
            problem_.path_constraints(xk, uk, rp);
            xk[i] = keep - h;
            problem_.path_constraints(xk, uk, rm);
            xk[i] = keep;
            Jx.col(i) = (rp - rm) / (2.0 * h);
          }
          for (Index i = 0; i < m_; ++i) {
            const double h = fd_step(uk[i]);
            const double keep = uk[i];
            uk[i] = keep + h;
            problem_.path_constraints(xk, uk, rp);
            uk[i] = keep - h;
            problem_.path_constraints(xk, uk, rm);
            uk[i] = keep;
            Ju.col(i) = (rp - rm) / (2.0 * h);
          }
          for (Index r = 0; r < np; ++r) {
            const Index row = (j * nodes_ + k) * np + r;
            for (Index i = 0; i < n_; ++i) emit(row, layout_.state_index(k, j, i), Jx(r, i));
            for (Index i = 0; i < m_; ++i) emit(row, layout_.control_index(k, i), Ju(r, i));
          }
        }
      }
    }
    if (has_bound_) {
      for (Index k = 0; k < nodes_; ++k)
        for (Index q = 0; q < m_; ++q)
          emit(path_rows_ + k, layout_.control_index(k, q), 2.0 * U(k, q));
    }
  }

  void build_patterns(const VectorXd& x) {
    std::vector<std::pair<Index, Index>> entries;
    PatternEmitter pe{&entries};
    for (Index j = 0; j < samples_; ++j) {
      const std::size_t before = entries.size();
      emit_collocation(x, j, pe);
      per_sample_colloc_ = entries.size() - before;
    }
    emit_boundary(x, pe);
    eq_pattern_.build(num_eq_, layout_.num_vars(), entries);

    entries.clear();
    emit_inequalities(x, pe);
    ineq_pattern_.build(num_ineq_, layout_.num_vars(), entries);
  }

  EnsembleProblem problem_;
  CollocationGrid grid_;
  VariableLayout layout_;
  Index n_ = 0, m_ = 0, nodes_ = 0, samples_ = 0;
  bool has_initial_ = false;
  bool has_bound_ = false;
  MatrixXd initial_states_;
  Index collocation_rows_ = 0, initial_rows_ = 0, endpoint_rows_ = 0, num_eq_ = 0;
  Index path_rows_ = 0, bound_rows_ = 0, num_ineq_ = 0;
  std::size_t per_sample_colloc_ = 0;
  SparsePattern eq_pattern_;
  SparsePattern ineq_pattern_;
};

// Fixed-step RK4 of one ensemble member, sampled at the mapped time nodes.
MatrixXd simulate_member(const EnsembleProblem& problem, const VectorXd& node_times, ConstVec s,
                         const VectorXd& x0, const std::function<void(double, VecOut)>& controls,
                         double max_step) {
  const Index n = problem.state_dim;
  const Index m = problem.control_dim;
  MatrixXd out(node_times.size(), n);
  VectorXd x = x0;
  out.row(0) = x.transpose();
  VectorXd u(m), k1(n), k2(n), k3(n), k4(n);
  auto rhs = [&](double t, const VectorXd& state, VectorXd& dx) {
    if (controls)
      controls(t, u);
    else
      u.setZero();
    problem.dynamics(t, s, state, u, dx);
  };
  for (Index k = 0; k + 1 < node_times.size(); ++k) {
    const double span = node_times[k + 1] - node_times[k];
    const int steps = std::max(1, static_cast<int>(std::ceil(span / max_step)));
    const double h = span / steps;
    double t = node_times[k];
    for (int i = 0; i < steps; ++i) {
      rhs(t, x, k1);
      rhs(t + 0.5 * h, x + 0.5 * h * k1, k2);
      rhs(t + 0.5 * h, x + 0.5 * h * k2, k3);
      rhs(t + h, x + h * k3, k4);
      x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      t += h;
    }
    if (!x.allFinite()) throw std::runtime_error("initial_guess: simulation produced non-finite state");
    out.row(k + 1) = x.transpose();
  }
  return out;
}

}  // namespace

NlpProblem transcribe(const EnsembleProblem& problem, const CollocationGrid& grid) {
  auto model = std::make_shared<const CollocationModel>(problem, grid);
  NlpProblem nlp;
  nlp.layout = model->layout();
  nlp.num_vars = model->layout().num_vars();
  nlp.num_eq = model->num_eq();
  nlp.num_ineq = model->num_ineq();
  nlp.lower = VectorXd::Constant(nlp.num_vars, -std::numeric_limits<double>::infinity());
  nlp.upper = VectorXd::Constant(nlp.num_vars, std::numeric_limits<double>::infinity());
  if (problem.free_horizon()) {
    const auto& free = std::get<FreeHorizon>(problem.horizon);
    nlp.lower[model->layout().horizon_index()] = free.min_duration;
    nlp.upper[model->layout().horizon_index()] = free.max_duration;
  }
  nlp.objective = [model](const VectorXd& x) { return model->objective(x); };
  nlp.gradient = [model](const VectorXd& x, VectorXd& g) { model->gradient(x, g); };
  nlp.eq_constraints = [model](const VectorXd& x, VectorXd& c) { model->eq(x, c); };
  nlp.eq_jacobian = [model](const VectorXd& x, SparseMatrix& J) { model->eq_jacobian(x, J); };
  nlp.ineq_constraints = [model](const VectorXd& x, VectorXd& g) { model->ineq(x, g); };
  nlp.ineq_jacobian = [model](const VectorXd& x, SparseMatrix& J) { model->ineq_jacobian(x, J); };
  return nlp;
}

MatrixXd collocation_defect(const EnsembleProblem& problem, const CollocationGrid& grid,
                            const VectorXd& decision, Index sample) {
  const CollocationModel model(problem, grid);
  if (decision.size() != model.layout().num_vars())
    throw std::invalid_argument("collocation_defect: decision length mismatch");
  return model.defect(decision, sample);
}

CostBreakdown evaluate_costs(const EnsembleProblem& problem, const CollocationGrid& grid,
                             const VectorXd& decision) {
  const CollocationModel model(problem, grid);
  if (decision.size() != model.layout().num_vars())
    throw std::invalid_argument("evaluate_costs: decision length mismatch");
  return model.costs(decision);
}

VectorXd pack_decision(const VariableLayout& layout, const std::vector<MatrixXd>& states,
                       const MatrixXd& controls, double horizon) {
  if (static_cast<Index>(states.size()) != layout.samples)
    throw std::invalid_argument("pack_decision: sample count mismatch");
  VectorXd x(layout.num_vars());
  for (Index j = 0; j < layout.samples; ++j) {
    if (states[j].rows() != layout.nodes || states[j].cols() != layout.state_dim)
      throw std::invalid_argument("pack_decision: state block shape mismatch");
    for (Index k = 0; k < layout.nodes; ++k)
      for (Index c = 0; c < layout.state_dim; ++c) x[layout.state_index(k, j, c)] = states[j](k, c);
  }
  if (controls.rows() != layout.nodes || controls.cols() != layout.control_dim)
    throw std::invalid_argument("pack_decision: control shape mismatch");
  for (Index k = 0; k < layout.nodes; ++k)
    for (Index q = 0; q < layout.control_dim; ++q) x[layout.control_index(k, q)] = controls(k, q);
  if (layout.free_horizon) x[layout.horizon_index()] = horizon;
  return x;
}

VectorXd initial_guess(const EnsembleProblem& problem, const CollocationGrid& grid,
                       const GuessOptions& options) {
  problem.validate();
  const VariableLayout layout = make_layout(problem, grid);
  const double T = problem.nominal_duration();
  const AffineMap<double> map(problem.start_time, problem.start_time + T);
  const VectorXd times = grid.time_grid.mapped_nodes(map);
  const Index n = problem.state_dim;
  const Index m = problem.control_dim;

  MatrixXd controls = MatrixXd::Zero(layout.nodes, m);
  std::function<void(double, VecOut)> control_fn;
  if (options.strategy == GuessStrategy::given_controls) {
    if (!options.controls) throw std::invalid_argument("initial_guess: given_controls needs a control function");
    control_fn = options.controls;
    VectorXd u(m);
    for (Index k = 0; k < layout.nodes; ++k) {
      control_fn(times[k], u);
      if (!u.allFinite()) throw std::runtime_error("initial_guess: non-finite control value");
      controls.row(k) = u.transpose();
    }
  }

  std::vector<MatrixXd> states(layout.samples);
  if (options.strategy == GuessStrategy::linear_state) {
    if (options.initial_state.size() != n || options.target_state.size() != n)
      throw std::invalid_argument("initial_guess: linear_state needs initial and target states of size n");
    MatrixXd block(layout.nodes, n);
    for (Index k = 0; k < layout.nodes; ++k) {
      const double a = 0.5 * (grid.time_grid.nodes[k] + 1.0);
      block.row(k) = ((1.0 - a) * options.initial_state + a * options.target_state).transpose();
    }
    std::fill(states.begin(), states.end(), block);
  } else {
    if (!problem.initial_state)
      throw std::invalid_argument("initial_guess: simulation strategies need an initial state");
    const double max_step = T / std::max(options.steps, 1);
    parallel_for(layout.samples, [&](std::ptrdiff_t j) {
      VectorXd x0(n);
      problem.initial_state(grid.samples.col(j), x0);
      states[j] = simulate_member(problem, times, grid.samples.col(j), x0, control_fn, max_step);
    });
  }
  return pack_decision(layout, states, controls, T);
}

// ---- PulseSolution -----------------------------------------------------

VectorXd PulseSolution::control_at(double t) const {
  return interpolate_rows<double>(controls, time_grid, time_map, t);
}

VectorXd PulseSolution::state_at(double t, Index sample) const {
  return interpolate_rows<double>(states.at(sample), time_grid, time_map, t);
}

VectorXd PulseSolution::state_at(double t, const VectorXd& s) const {
  if (s.size() != static_cast<Index>(param_grids.size()))
    throw std::invalid_argument("state_at: parameter dimension mismatch");
  const VectorXd tb = lagrange_basis(time_grid, time_map, t);
  std::vector<VectorXd> pb;
  for (std::size_t i = 0; i < param_grids.size(); ++i)
    pb.push_back(lagrange_basis(param_grids[i], param_maps[i], s[static_cast<Index>(i)]));
  VectorXd out = VectorXd::Zero(states.front().cols());
  for (std::size_t j = 0; j < states.size(); ++j) {
    double w = 1.0;
    Index rest = static_cast<Index>(j);
    for (const auto& b : pb) {
      w *= b[rest % b.size()];
      rest /= b.size();
    }
    if (w != 0.0) out += w * (states[j].transpose() * tb);
  }
  return out;
}

VectorXd PulseSolution::terminal_state(Index sample) const {
  const auto& X = states.at(sample);
  return X.row(X.rows() - 1).transpose();
}

std::function<void(double, VecOut)> PulseSolution::control_function() const {
  auto grid = time_grid;
  auto map = time_map;
  MatrixXd u = controls;
  return [grid, map, u](double t, VecOut out) { out = interpolate_rows<double>(u, grid, map, t); };
}

PulseSolution extract_solution(const NlpProblem& nlp, const VectorXd& decision,
                               const CollocationGrid& grid, const EnsembleProblem& problem) {
  if (decision.size() != nlp.num_vars)
    throw std::invalid_argument("extract_solution: decision length " + std::to_string(decision.size()) +
                                " != num_vars " + std::to_string(nlp.num_vars));
  const CollocationModel model(problem, grid);
  const VariableLayout& layout = model.layout();
  if (layout.num_vars() != nlp.num_vars)
    throw std::invalid_argument("extract_solution: problem/grid do not match the NLP layout");

  PulseSolution sol;
  sol.time_grid = grid.time_grid;
  sol.param_grids = grid.param_grids;
  sol.param_maps = grid.param_maps;
  sol.param_samples = grid.samples;
  sol.horizon = model.horizon(decision);
  sol.time_map = AffineMap<double>(problem.start_time, problem.start_time + sol.horizon);

  sol.controls = model.control_block(decision);
  sol.states.resize(layout.samples);
  double worst_weighted = 0.0;
  double worst_abs = 0.0;
  for (Index j = 0; j < layout.samples; ++j) {
    sol.states[j] = model.state_block(decision, j);
    const MatrixXd R = model.defect(decision, j);
    // Discrete LGL norm per component, normalized by the total weight 2.
    const VectorXd per_component = (grid.time_grid.weights.transpose() * R.cwiseAbs2()).transpose();
    const double weighted = std::sqrt(0.5 * per_component.maxCoeff());
    worst_weighted = std::max(worst_weighted, weighted);
    worst_abs = std::max(worst_abs, R.cwiseAbs().maxCoeff());
  }
  sol.dynamics_residual = worst_weighted;
  sol.dynamics_residual_max = worst_abs;
  sol.costs = model.costs(decision);
  sol.objective_value = sol.costs.total();
  return sol;
}

}  // namespace ensemble
