#pragma once

#include <aeqprop/core.hpp>
#include <aeqprop/relax.hpp>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <vector>

namespace aeqprop::verify {

// ---------------------------------------------------------------------------
// Nudge grids

/// Quadrature nodes in beta, strictly increasing.
class BetaGrid {
 public:
  explicit BetaGrid(std::vector<double> points) : points_(std::move(points)) {
    if (points_.empty()) throw DomainError("BetaGrid: no points");
    for (std::size_t i = 1; i < points_.size(); ++i)
      if (!(points_[i] > points_[i - 1])) throw DomainError("BetaGrid: points must be strictly increasing");
  }

  /// n evenly spaced nodes on [lo, hi]; a single node when lo == hi.
  static BetaGrid uniform(double lo, double hi, std::size_t n = 21) {
    if (lo == hi) return BetaGrid({lo});
    if (!(lo < hi) || n < 2) throw DomainError("BetaGrid::uniform: need lo < hi and at least two nodes");
    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i)
      p[i] = i + 1 == n ? hi : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    return BetaGrid(std::move(p));
  }

  [[nodiscard]] const std::vector<double>& points() const noexcept { return points_; }
  [[nodiscard]] std::size_t size() const noexcept { return points_.size(); }
  [[nodiscard]] double front() const { return points_.front(); }
  [[nodiscard]] double back() const { return points_.back(); }

 private:
  std::vector<double> points_;
};

// ---------------------------------------------------------------------------
// Loss and its finite-difference gradient

/// L(theta) = C(s_0(theta, x), y) at an exact free equilibrium.
[[nodiscard]] inline double loss(const EnergyModel& model, const ParamVector& theta, const Example& ex) {
  return model.cost(relax_exact(model, theta, ex, 0.0).state.values(), ex);
}

/// Central differences of the loss, re-relaxing the state at theta +- h e_k.
[[nodiscard]] inline Vec fd_loss_grad(const EnergyModel& model, const ParamVector& theta, const Example& ex,
                                      double h = 1e-5) {
  if (!(h > 0.0)) throw DomainError("fd_loss_grad: step must be positive");
  const auto base = relax_exact(model, theta, ex, 0.0).state;
  Vec g(theta.size());
  ParamVector probe = theta;
  for (Index k = 0; k < theta.size(); ++k) {
    const double keep = probe.values()[k];
    probe.values()[k] = keep + h;
    const double up = model.cost(relax_exact(model, probe, ex, 0.0, base).state.values(), ex);
    probe.values()[k] = keep - h;
    const double down = model.cost(relax_exact(model, probe, ex, 0.0, base).state.values(), ex);
    probe.values()[k] = keep;
    g[k] = (up - down) / (2.0 * h);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Free energy F(beta, theta) = min_s E + beta C

struct FreeEnergy {
  double value = 0.0;
  double cost = 0.0;  // C(s_beta)
  StateVector state;
};

[[nodiscard]] inline FreeEnergy free_energy_F(const EnergyModel& model, const ParamVector& theta, const Example& ex,
                                              double beta, const std::optional<StateVector>& warm = std::nullopt) {
  auto relaxed = relax_exact(model, theta, ex, beta, warm);
  const auto& s = relaxed.state.values();
  const double c = model.cost(s, ex);
  return {model.energy(theta.values(), ex, s) + beta * c, c, std::move(relaxed.state)};
}

/// dF/dtheta(beta, theta) = dE/dtheta at the nudged equilibrium.
[[nodiscard]] inline Vec free_energy_grad_theta(const EnergyModel& model, const ParamVector& theta,
                                                const Example& ex, double beta) {
  const auto relaxed = relax_exact(model, theta, ex, beta);
  return model.grad_theta_energy(theta.values(), ex, relaxed.state.values());
}

// ---------------------------------------------------------------------------
// Lyapunov function

struct LyapunovValue {
  double integral = 0.0;      // trapezoid average of C(s_beta') over the grid
  double f_difference = 0.0;  // (F(b2) - F(b1)) / (b2 - b1)
  double quad_error = 0.0;    // estimated trapezoid error
  std::vector<double> costs;  // C(s_beta') at the grid nodes
  std::vector<double> free_energies;
};

namespace detail {

inline double trapezoid(const std::vector<double>& x, const std::vector<double>& f, std::size_t stride) {
  double acc = 0.0;
  for (std::size_t i = stride; i < x.size(); i += stride) acc += 0.5 * (x[i] - x[i - stride]) * (f[i] + f[i - stride]);
  return acc;
}

}  // namespace detail

/// L_{b1;b2}(theta) = 1/(b2 - b1) * integral of C(s_beta') over [b1, b2],
/// by trapezoid quadrature over `grid`, together with the free-energy chord
/// slope and an error estimate (Richardson against every other node when the
/// node count is odd, second differences otherwise).
[[nodiscard]] inline LyapunovValue lyapunov_value(const EnergyModel& model, const ParamVector& theta,
                                                  const Example& ex, double beta1, double beta2,
                                                  const BetaGrid& grid) {
  const auto& b = grid.points();
  if (std::abs(grid.front() - beta1) > 1e-12 || std::abs(grid.back() - beta2) > 1e-12)
    throw DomainError("lyapunov_value: grid must span [beta1, beta2]");
  LyapunovValue out;
  std::optional<StateVector> warm;
  for (double beta : b) {
    auto F = free_energy_F(model, theta, ex, beta, warm);
    out.costs.push_back(F.cost);
    out.free_energies.push_back(F.value);
    warm = std::move(F.state);
  }
  if (b.size() == 1) {
    out.integral = out.f_difference = out.costs.front();
    return out;
  }
  const double width = beta2 - beta1;
  out.integral = detail::trapezoid(b, out.costs, 1) / width;
  out.f_difference = (out.free_energies.back() - out.free_energies.front()) / width;
  if (b.size() >= 3 && b.size() % 2 == 1) {
    out.quad_error = std::abs(out.integral - detail::trapezoid(b, out.costs, 2) / width) / 3.0;
  } else if (b.size() >= 3) {
    double acc = 0.0;
    for (std::size_t i = 1; i + 1 < b.size(); ++i) {
      const double h = 0.5 * (b[i + 1] - b[i - 1]);
      const double second = (out.costs[i + 1] - 2.0 * out.costs[i] + out.costs[i - 1]) / (h * h);
      acc += std::abs(second) * h * h * h / 12.0;
    }
    out.quad_error = acc / width;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Eqprop gradient estimator and the Lyapunov gradient

/// (dE/dtheta(s_beta) - dE/dtheta(s_0)) / beta from two relaxations.
[[nodiscard]] inline Vec eqprop_estimator(const EnergyModel& model, const ParamVector& theta, const Example& ex,
                                          double beta) {
  if (beta == 0.0) throw DomainError("eqprop_estimator: beta must be non-zero");
  const auto free = relax_exact(model, theta, ex, 0.0);
  const auto nudged = relax_exact(model, theta, ex, beta, free.state);
  return (model.grad_theta_energy(theta.values(), ex, nudged.state.values()) -
          model.grad_theta_energy(theta.values(), ex, free.state.values())) /
         beta;
}

/// Gradient of L_{b1;b2} through the free-energy chord.
[[nodiscard]] inline Vec lyapunov_gradient(const EnergyModel& model, const ParamVector& theta, const Example& ex,
                                           double beta1, double beta2) {
  return (free_energy_grad_theta(model, theta, ex, beta2) - free_energy_grad_theta(model, theta, ex, beta1)) /
         (beta2 - beta1);
}

// ---------------------------------------------------------------------------
// Riemannian metric

struct MetricEstimate {
  /// Hessian of theta -> min_s [U(u, theta)/eps + E + beta1 C] at theta_prev.
  Eigen::MatrixXd hessian;
  /// eps^(1/2) H eps^(1/2); equals eps * H for a scalar eps.
  Eigen::MatrixXd metric;
  ControlVector control;
  double min_eigenvalue = 0.0;
  double asymmetry = 0.0;
  bool positive_definite = false;
};

/// Finite-difference Hessian (central differences of the envelope gradient,
/// then symmetrized) at the control u_t produced by analytic homeostasis.
[[nodiscard]] inline MetricEstimate riemannian_metric(const EnergyModel& model, const ParamVector& theta,
                                                      const Example& ex, double beta1, const CouplingSpec& coupling,
                                                      double h = 1e-4) {
  if (theta.size() > 400) throw DomainError("riemannian_metric: restricted to at most 400 parameters");
  auto homeo = homeostatic_control_analytic(model, theta, ex, beta1, coupling, precise_coord());
  const Vec& u = homeo.u.values();
  auto grad = [&](const Vec& th) {
    ParamVector p(theta.layout_ptr(), th);
    return Vec(coupling.grad_theta(u, th) + free_energy_grad_theta(model, p, ex, beta1));
  };
  const Index n = theta.size();
  Eigen::MatrixXd H(n, n);
  Vec probe = theta.values();
  for (Index j = 0; j < n; ++j) {
    const double keep = probe[j];
    probe[j] = keep + h;
    const Vec up = grad(probe);
    probe[j] = keep - h;
    const Vec down = grad(probe);
    probe[j] = keep;
    H.col(j) = (up - down) / (2.0 * h);
  }
  MetricEstimate out{Eigen::MatrixXd(), Eigen::MatrixXd(), std::move(homeo.u)};
  out.asymmetry = (H - H.transpose()).cwiseAbs().maxCoeff();
  out.hessian = 0.5 * (H + H.transpose());
  const Vec root = coupling.epsilon().cwiseSqrt();
  out.metric = root.asDiagonal() * out.hessian * root.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(out.hessian, Eigen::EigenvaluesOnly);
  out.min_eigenvalue = eig.eigenvalues().minCoeff();
  out.positive_definite = out.min_eigenvalue > 0.0;
  return out;
}

/// Predicted parameter step theta_t - theta_{t-1} = -(b2 - b1) H^{-1} dL_{b1;b2}.
[[nodiscard]] inline Vec riemannian_step(const MetricEstimate& metric, const Vec& lyapunov_grad, double spread) {
  return -spread * metric.hessian.ldlt().solve(lyapunov_grad);
}

}  // namespace aeqprop::verify
