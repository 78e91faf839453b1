#pragma once

#include <aeqprop/core.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <variant>

namespace aeqprop {

// ---------------------------------------------------------------------------
// Scalar quadratic minimization on an interval

/// Minimizer of a z^2 + b z over [p, q] (either bound may be infinite).
/// A zero curvature is accepted when the linear slope runs into a finite
/// bound; a negative curvature is always rejected.
[[nodiscard]] inline double quadratic_box_min(double a, double b, double p, double q) {
  if (!(p <= q)) throw DomainError("quadratic_box_min: empty interval");
  if (a > 0.0) return std::min(std::max(p, -b / (2.0 * a)), q);
  if (a == 0.0) {
    if (b > 0.0 && std::isfinite(p)) return p;
    if (b < 0.0 && std::isfinite(q)) return q;
    if (b == 0.0) return std::min(std::max(p, 0.0), q);
  }
  std::ostringstream msg;
  msg << "quadratic_box_min: no minimizer for curvature a=" << a << ", slope b=" << b << " on [" << p << ", " << q
      << "]";
  throw CurvatureError(msg.str());
}

// ---------------------------------------------------------------------------
// Configurations

enum class SweepOrder { forward, backward };

struct CoordConfig {
  Index max_iters = 100;
  double threshold = 1e-3;  // xi, on the L1 change of one full iteration
  SweepOrder order = SweepOrder::forward;
  /// Evaluate the global energy around every update and count increases.
  bool check_monotone = false;
};

/// Settings for near-exact equilibria used by oracles and tests.
[[nodiscard]] inline CoordConfig precise_coord(Index max_iters = 200000, double threshold = 1e-14) {
  CoordConfig cfg;
  cfg.max_iters = max_iters;
  cfg.threshold = threshold;
  return cfg;
}

struct GradFlowConfig {
  Index n_steps = 50;
  double eta_s0 = 1.0;
  double eta_theta0 = 1.0;  // multiplier on eps: eta_theta = eta_theta0 * eps
  double accept_grow = 1.05;
  double reject_shrink = 0.5;
  double tie_tolerance = 1e-14;
  std::uint64_t seed = 0;
  bool record_energies = false;
};

using RelaxerConfig = std::variant<CoordConfig, GradFlowConfig>;

struct ThresholdState {
  double xi = 1e-3;
  double gamma = 0.01;
};

inline constexpr double kThresholdFloor = 1e-12;

/// xi <- min(xi, gamma * mu), floored at 1e-12.
[[nodiscard]] inline ThresholdState update_threshold(ThresholdState ts, double mu) {
  if (!(mu >= 0.0)) throw DomainError("update_threshold: mean phase gap must be non-negative");
  ts.xi = std::max(std::min(ts.xi, ts.gamma * mu), kThresholdFloor);
  return ts;
}

// ---------------------------------------------------------------------------
// Coordinate relaxation

/// Parameters float in the relaxation with the control clamped at `u`.
struct FloatingParams {
  const ControlVector& u;
  const CouplingSpec& coupling;
};

namespace detail {

struct CoordProblem {
  const EnergyModel& model;
  const Example& ex;
  double beta;
  const Layout& state_layout;
  const FloatingParams* floating;

  [[nodiscard]] double energy(const Vec& theta, const Vec& s) const {
    double e = nudged_energy(model, theta, ex, s, beta);
    if (floating) e += floating->coupling.energy(floating->u.values(), theta);
    return e;
  }
};

inline bool energy_rose(double before, double after) {
  return after > before + 1e-12 * std::max(1.0, std::abs(before));
}

inline void relax_state_segment(const CoordProblem& P, const Segment& seg, const Vec& theta, Vec& s) {
  const Vec g = P.model.grad_s_total_segment(theta, P.ex, s, P.beta, seg);
  Vec h = P.model.curvature_s_energy(theta, P.ex, s).segment(seg.offset, seg.size);
  if (P.beta != 0.0) h += P.beta * P.model.curvature_s_cost(s, P.ex).segment(seg.offset, seg.size);
  auto z = s.segment(seg.offset, seg.size);
  for (Index i = 0; i < seg.size; ++i) {
    const double a = 0.5 * h[i];
    const double b = g[i] - h[i] * z[i];
    z[i] = quadratic_box_min(a, b, seg.lower, seg.upper);
  }
}

inline Vec param_gradient(const CoordProblem& P, const Vec& theta, const Vec& s) {
  return P.model.grad_theta_energy(theta, P.ex, s) + P.floating->coupling.grad_theta(P.floating->u.values(), theta);
}

inline Vec param_curvature(const CoordProblem& P, const Vec& theta, const Vec& s) {
  Vec h = P.model.curvature_theta_energy(theta, P.ex, s) +
          P.floating->coupling.curvature_theta(P.floating->u.values(), theta);
  if (!(h.array() > 0.0).all()) throw CurvatureError("coordinate relaxation: non-positive parameter curvature");
  return h;
}

inline void relax_params(const CoordProblem& P, const CoordConfig& cfg, Vec& theta, const Vec& s, Index& violations) {
  // Decoupled parameters are independent slices: one simultaneous closed-form update is exact.
  if (P.model.params_decoupled()) {
    theta -= param_gradient(P, theta, s).cwiseQuotient(param_curvature(P, theta, s));
    return;
  }
  for (Index j = 0; j < theta.size(); ++j) {
    const double before = cfg.check_monotone ? P.energy(theta, s) : 0.0;
    const double g = param_gradient(P, theta, s)[j];
    const double h = param_curvature(P, theta, s)[j];
    theta[j] = quadratic_box_min(0.5 * h, g - h * theta[j], -kInf, kInf);
    if (cfg.check_monotone && energy_rose(before, P.energy(theta, s))) ++violations;
  }
}

}  // namespace detail

/// Exact block-coordinate minimization of E + beta*C (+ U/eps when the
/// parameters float). Each state segment is set to its closed-form box
/// minimizer given the others; floating parameters follow each sweep.
/// Stops when the L1 change of one iteration drops below the threshold.
[[nodiscard]] inline RelaxOutcome relax_coordinate(const EnergyModel& model, const ParamVector& theta0,
                                                   const Example& ex, double beta, const CoordConfig& cfg,
                                                   const std::optional<StateVector>& warm_start = std::nullopt,
                                                   const std::optional<FloatingParams>& floating = std::nullopt) {
  if (!model.exact_coordinate()) throw StructuralError("relax_coordinate: model does not support exact coordinate updates");
  if (!(cfg.threshold > 0.0)) throw DomainError("relax_coordinate: threshold must be positive");
  auto layout = model.state_layout(ex.batch);
  Vec s = warm_start ? warm_start->values() : model.initial_state(ex);
  detail::check_sizes(model, theta0.values(), s, ex);
  clamp_to_bounds(*layout, s);
  Vec theta = theta0.values();

  const FloatingParams* fp = floating ? &*floating : nullptr;
  detail::CoordProblem P{model, ex, beta, *layout, fp};

  std::vector<std::size_t> order(layout->count());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  if (cfg.order == SweepOrder::backward) std::reverse(order.begin(), order.end());

  RelaxOutcome out;
  for (Index iter = 0; iter < cfg.max_iters; ++iter) {
    const Vec s_prev = s;
    const Vec theta_prev = fp ? theta : Vec();
    for (std::size_t k : order) {
      const double before = cfg.check_monotone ? P.energy(theta, s) : 0.0;
      detail::relax_state_segment(P, (*layout)[k], theta, s);
      if (cfg.check_monotone && detail::energy_rose(before, P.energy(theta, s))) ++out.monotone_violations;
    }
    if (fp) {
      const double before = cfg.check_monotone ? P.energy(theta, s) : 0.0;
      detail::relax_params(P, cfg, theta, s, out.monotone_violations);
      if (cfg.check_monotone && detail::energy_rose(before, P.energy(theta, s))) ++out.monotone_violations;
    }
    out.iterations = iter + 1;
    out.residual = (s - s_prev).lpNorm<1>() + (fp ? (theta - theta_prev).lpNorm<1>() : 0.0);
    if (!std::isfinite(out.residual)) throw NumericError("relax_coordinate: state became non-finite");
    if (out.residual < cfg.threshold) {
      out.converged = true;
      break;
    }
  }
  out.energy = P.energy(theta, s);
  out.state = StateVector(layout, std::move(s));
  if (fp) {
    out.params = ParamVector(theta0.layout_ptr(), std::move(theta));
    out.control = fp->u;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient-flow relaxation with a proportional controller on u

enum class GradFlowMode {
  homeostatic,   // u steered toward keeping theta at a target
  clamped_u,     // u frozen, theta floats
  frozen_theta,  // only s moves
};

struct GradFlowOutcome {
  RelaxOutcome relax;
  /// |theta_end - theta_target| in homeostatic mode.
  double controller_residual = 0.0;
  /// Energies after each accepted s/theta step (when recorded).
  std::vector<double> accepted_energies;
  Index accepted_steps = 0;
  Index rejected_steps = 0;
};

/// Relaxation by adaptive gradient descent on the global energy:
///   s     <- s - eta_s grad_s(E + beta C)
///   theta <- theta - eta_theta grad_theta(U/eps + E)
///   u     <- u + eta_u (theta_target - theta),   eta_u = eta_theta / (4 eps)
/// A step is kept when the energy decreases (step size x1.05), undone when
/// it increases (x0.5) and, when the energy is unchanged, kept with the step
/// size multiplied or divided by 1.05 at random. The u step runs only after
/// an accepted theta step.
[[nodiscard]] inline GradFlowOutcome relax_gradflow(const EnergyModel& model, const CouplingSpec& coupling,
                                                    const ControlVector& u0, const ParamVector& theta0,
                                                    const Example& ex, double beta, const GradFlowConfig& cfg,
                                                    GradFlowMode mode,
                                                    const std::optional<ParamVector>& theta_target = std::nullopt,
                                                    const std::optional<StateVector>& warm_start = std::nullopt) {
  if (!(cfg.eta_s0 > 0.0) || !(cfg.eta_theta0 > 0.0)) throw DomainError("relax_gradflow: step sizes must be positive");
  if (mode == GradFlowMode::homeostatic && !theta_target)
    throw StructuralError("relax_gradflow: homeostatic mode needs a target parameter");
  auto layout = model.state_layout(ex.batch);
  Vec s = warm_start ? warm_start->values() : model.initial_state(ex);
  Vec theta = theta0.values();
  Vec u = u0.values();
  detail::check_sizes(model, theta, s, ex);
  clamp_to_bounds(*layout, s);
  const Vec& eps = coupling.epsilon();
  const Vec target = theta_target ? theta_target->values() : Vec();

  std::mt19937_64 rng(cfg.seed);
  std::bernoulli_distribution coin(0.5);
  double eta_s = cfg.eta_s0;
  double eta_theta = cfg.eta_theta0;

  GradFlowOutcome out;
  auto total = [&](const Vec& th, const Vec& st) { return detail::total_energy(model, coupling, u, th, ex, st, beta); };
  auto fail = [&](const char* where, double value) {
    std::ostringstream msg;
    msg << "relax_gradflow: non-finite energy after " << where << " step (value " << value << ", eta_s " << eta_s
        << ", eta_theta " << eta_theta << ", |theta| " << theta.norm() << ", |s| " << s.norm() << ")";
    throw NumericError(msg.str());
  };
  // Returns true when the step is kept.
  auto decide = [&](double before, double after, double& eta) {
    if (std::abs(after - before) <= cfg.tie_tolerance) {
      eta = coin(rng) ? eta * cfg.accept_grow : eta / cfg.accept_grow;
      return true;
    }
    if (after < before) {
      eta *= cfg.accept_grow;
      return true;
    }
    eta *= cfg.reject_shrink;
    return false;
  };

  double energy = total(theta, s);
  if (!std::isfinite(energy)) fail("initial", energy);
  Vec s_last_change = Vec::Zero(s.size());
  double last_change = 0.0;

  for (Index step = 0; step < cfg.n_steps; ++step) {
    last_change = 0.0;
    {
      Vec g = model.grad_s_energy(theta, ex, s);
      if (beta != 0.0) g += beta * model.grad_s_cost(s, ex);
      Vec trial = s - eta_s * g;
      clamp_to_bounds(*layout, trial);
      const double e_try = total(theta, trial);
      if (!std::isfinite(e_try)) fail("state", e_try);
      if (decide(energy, e_try, eta_s)) {
        last_change += (trial - s).lpNorm<1>();
        s = std::move(trial);
        energy = e_try;
        ++out.accepted_steps;
        if (cfg.record_energies) out.accepted_energies.push_back(energy);
      } else {
        ++out.rejected_steps;
      }
    }
    if (mode == GradFlowMode::frozen_theta) continue;
    bool theta_accepted = false;
    {
      const Vec g = coupling.grad_theta(u, theta) + model.grad_theta_energy(theta, ex, s);
      Vec trial = theta - eta_theta * eps.cwiseProduct(g);
      const double e_try = total(trial, s);
      if (!std::isfinite(e_try)) fail("parameter", e_try);
      if (decide(energy, e_try, eta_theta)) {
        last_change += (trial - theta).lpNorm<1>();
        theta = std::move(trial);
        energy = e_try;
        theta_accepted = true;
        ++out.accepted_steps;
        if (cfg.record_energies) out.accepted_energies.push_back(energy);
      } else {
        ++out.rejected_steps;
      }
    }
    if (mode == GradFlowMode::homeostatic && theta_accepted) {
      u += (eta_theta / 4.0) * (target - theta);
      energy = total(theta, s);
      if (!std::isfinite(energy)) fail("control", energy);
    }
  }

  out.relax.iterations = cfg.n_steps;
  out.relax.residual = last_change;
  out.relax.converged = last_change < 1e-10;
  out.relax.energy = energy;
  out.relax.state = StateVector(layout, std::move(s));
  if (mode != GradFlowMode::frozen_theta) out.relax.params = ParamVector(theta0.layout_ptr(), theta);
  out.relax.control = ControlVector(u0.layout_ptr(), std::move(u));
  if (mode == GradFlowMode::homeostatic) out.controller_residual = (theta - target).norm();
  return out;
}

/// Jacobian of the continuous-time (theta, u) dynamics of the controller
/// loop for a bare quadratic coupling: d theta = (u - theta)/eps,
/// du = (theta_target - theta)/(4 eps), in units of eta_theta.
[[nodiscard]] inline Eigen::Matrix2d controller_linearization(double eps) {
  Eigen::Matrix2d J;
  J << -1.0 / eps, 1.0 / eps, -1.0 / (4.0 * eps), 0.0;
  return J;
}

// ---------------------------------------------------------------------------
// State relaxation with parameters held fixed

/// Equilibrium of E + beta*C over s with theta fixed, using the configured
/// engine (exact coordinate sweeps when the model allows it).
[[nodiscard]] inline RelaxOutcome relax_state(const EnergyModel& model, const ParamVector& theta, const Example& ex,
                                              double beta, const RelaxerConfig& relaxer,
                                              const std::optional<StateVector>& warm_start = std::nullopt) {
  if (const auto* coord = std::get_if<CoordConfig>(&relaxer); coord && model.exact_coordinate())
    return relax_coordinate(model, theta, ex, beta, *coord, warm_start);
  GradFlowConfig gf = std::holds_alternative<GradFlowConfig>(relaxer) ? std::get<GradFlowConfig>(relaxer)
                                                                     : GradFlowConfig{};
  const CouplingSpec unit = CouplingSpec::scalar(1.0, theta.size());
  ControlVector u(theta.layout_ptr(), theta.values());
  return relax_gradflow(model, unit, u, theta, ex, beta, gf, GradFlowMode::frozen_theta, std::nullopt, warm_start)
      .relax;
}

/// Exact equilibrium for oracles: coordinate sweeps to machine precision, or
/// a long gradient flow when the model has no exact coordinate updates.
[[nodiscard]] inline RelaxOutcome relax_exact(const EnergyModel& model, const ParamVector& theta, const Example& ex,
                                              double beta, const std::optional<StateVector>& warm_start = std::nullopt) {
  if (model.exact_coordinate()) return relax_coordinate(model, theta, ex, beta, precise_coord(), warm_start);
  GradFlowConfig gf;
  gf.n_steps = 20000;
  return relax_state(model, theta, ex, beta, gf, warm_start);
}

// ---------------------------------------------------------------------------
// Analytic homeostatic control

struct HomeostaticResult {
  ControlVector u;
  RelaxOutcome relax;
};

/// Relaxes s with theta frozen at theta_fix under nudge beta, then sets the
/// control so that theta_fix is stationary: u = theta + eps * dE/dtheta for
/// the quadratic coupling.
[[nodiscard]] inline HomeostaticResult homeostatic_control_analytic(
    const EnergyModel& model, const ParamVector& theta_fix, const Example& ex, double beta,
    const CouplingSpec& coupling, const RelaxerConfig& relaxer,
    const std::optional<StateVector>& warm_start = std::nullopt) {
  if (coupling.size() != theta_fix.size()) throw StructuralError("homeostatic control: coupling size mismatch");
  RelaxOutcome relaxed = relax_state(model, theta_fix, ex, beta, relaxer, warm_start);
  const Vec grad = model.grad_theta_energy(theta_fix.values(), ex, relaxed.state.values());
  ControlVector u(theta_fix.layout_ptr(), coupling.control_for(theta_fix.values(), grad));
  return {std::move(u), std::move(relaxed)};
}

}  // namespace aeqprop
