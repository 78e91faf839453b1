#pragma once

#include <aeqprop/core.hpp>
#include <aeqprop/relax.hpp>
#include <aeqprop/verify/oracles.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace aeqprop {

enum class HomeostaticMode {
  controller,  // proportional controller on u during a gradient-flow relaxation
  analytic,    // relax s with theta frozen, then solve for u in closed form
};

struct AeqpropConfig {
  NudgeVariant variant = NudgeVariant::optimistic(0.01);
  CouplingSpec coupling;
  HomeostaticMode homeostatic = HomeostaticMode::analytic;
  RelaxerConfig relaxer = CoordConfig{};
  double lr_decay = 1.0;  // eps <- lr_decay * eps after every epoch
  std::uint64_t seed = 0;
  /// Adapt the coordinate threshold between epochs from the mean phase gap.
  bool adaptive_threshold = false;
  ThresholdState threshold{};
  /// Evaluate L_{b1;b2} before and after every step.
  bool verify_lyapunov = false;
  std::size_t lyapunov_nodes = 21;
  /// Extra beta = 0 relaxation to measure the loss when beta1 != 0.
  bool monitor_phase = true;
  double divergence_limit = 1e8;

  void validate(Index n_params) const {
    if (coupling.size() != n_params)
      throw StructuralError("AeqpropConfig: coupling has " + std::to_string(coupling.size()) + " strengths for " +
                            std::to_string(n_params) + " parameters");
    if (!(lr_decay > 0.0)) throw DomainError("AeqpropConfig: lr_decay must be positive");
  }
};

struct StepRecord {
  Index step = 0;
  double loss = std::numeric_limits<double>::quiet_NaN();
  double lyapunov_before = std::numeric_limits<double>::quiet_NaN();
  double lyapunov_after = std::numeric_limits<double>::quiet_NaN();
  double lyapunov_bound = std::numeric_limits<double>::quiet_NaN();
  double dtheta_norm = 0.0;
  double phase_gap = 0.0;
  double controller_residual = 0.0;
  Index iterations = 0;
  bool converged = true;
  bool diverged = false;
  std::string note;

  [[nodiscard]] bool lyapunov_violated() const {
    return std::isfinite(lyapunov_before) && lyapunov_after > lyapunov_before + lyapunov_bound;
  }
};

struct EpochRecord {
  Index epoch = 0;
  double mean_loss = std::numeric_limits<double>::quiet_NaN();
  double train_error = std::numeric_limits<double>::quiet_NaN();
  double test_error = std::numeric_limits<double>::quiet_NaN();
  double xi = std::numeric_limits<double>::quiet_NaN();
  double mean_phase_gap = 0.0;
};

struct TrainTrace {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

struct TrainResult {
  ParamVector theta;
  TrainTrace trace;
  bool diverged = false;
};

struct StepResult {
  ParamVector theta;
  StepRecord record;
  ControlVector control;
  StateVector state_first;   // equilibrium of the homeostatic phase
  StateVector state_second;  // equilibrium of the clamped phase
};

namespace detail {

inline RelaxerConfig with_order(RelaxerConfig r, double beta) {
  if (auto* c = std::get_if<CoordConfig>(&r)) c->order = beta != 0.0 ? SweepOrder::backward : SweepOrder::forward;
  return r;
}

inline GradFlowConfig gradflow_of(const RelaxerConfig& r, std::uint64_t seed) {
  GradFlowConfig g = std::holds_alternative<GradFlowConfig>(r) ? std::get<GradFlowConfig>(r) : GradFlowConfig{};
  g.seed ^= seed;
  return g;
}

inline bool diverging(double limit, const Vec& theta, double energy) {
  return !theta.allFinite() || !std::isfinite(energy) || theta.norm() > limit || std::abs(energy) > limit;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t step) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (step + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// One training step.
///   1. With nudge beta1, find the control u_t that keeps theta at theta_prev
///      while the state equilibrates (homeostatic phase).
///   2. Clamp u_t, switch the nudge to beta2 and let (s, theta) equilibrate;
///      the new equilibrium value of theta is theta_t.
/// Only equilibria are observed; no gradient of E or C is read by the step
/// itself (the analytic homeostatic mode stands in for an ideal controller).
[[nodiscard]] inline StepResult aeqprop_step(const EnergyModel& model, const ParamVector& theta_prev,
                                             const Example& ex, const AeqpropConfig& cfg, Index step_index = 0,
                                             const std::optional<ControlVector>& u_prev = std::nullopt) {
  cfg.validate(theta_prev.size());
  const double b1 = cfg.variant.beta1;
  const double b2 = cfg.variant.beta2;
  const std::uint64_t seed = detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(step_index));

  StepResult out{theta_prev, StepRecord{}, ControlVector(theta_prev.layout_ptr(), theta_prev.values()),
                 StateVector(), StateVector()};
  out.record.step = step_index;
  auto flag_divergence = [&](const std::string& phase, const std::exception& e) {
    out.record.diverged = true;
    out.record.note = phase + ": " + e.what();
    return std::move(out);
  };

  // Phase A: homeostatic equilibration under beta1.
  ParamVector theta_start = theta_prev;
  try {
    if (cfg.homeostatic == HomeostaticMode::analytic) {
      auto h = homeostatic_control_analytic(model, theta_prev, ex, b1, cfg.coupling, detail::with_order(cfg.relaxer, b1));
      out.control = std::move(h.u);
      out.state_first = std::move(h.relax.state);
      out.record.iterations += h.relax.iterations;
      out.record.converged = out.record.converged && h.relax.converged;
    } else {
      ControlVector u0 = u_prev ? *u_prev : ControlVector(theta_prev.layout_ptr(), theta_prev.values());
      auto g = relax_gradflow(model, cfg.coupling, u0, theta_prev, ex, b1, detail::gradflow_of(cfg.relaxer, seed),
                              GradFlowMode::homeostatic, theta_prev);
      out.control = std::move(*g.relax.control);
      out.state_first = std::move(g.relax.state);
      theta_start = std::move(*g.relax.params);
      out.record.controller_residual = g.controller_residual;
      out.record.iterations += g.relax.iterations;
    }
  } catch (const CurvatureError& e) {
    return flag_divergence("homeostatic phase", e);
  } catch (const NumericError& e) {
    return flag_divergence("homeostatic phase", e);
  }

  // Loss of the current parameters, C(s_0(theta_prev)).
  try {
    if (b1 == 0.0) {
      out.record.loss = model.cost(out.state_first.values(), ex);
    } else if (cfg.monitor_phase) {
      const auto free = relax_state(model, theta_prev, ex, 0.0, detail::with_order(cfg.relaxer, 0.0));
      out.record.loss = model.cost(free.state.values(), ex);
    }
  } catch (const std::runtime_error& e) {
    return flag_divergence("monitoring phase", e);
  }

  // Phase B: clamped control, nudge beta2, parameters float.
  double energy = 0.0;
  try {
    const RelaxerConfig relaxer = detail::with_order(cfg.relaxer, b2);
    if (const auto* coord = std::get_if<CoordConfig>(&relaxer); coord && model.exact_coordinate()) {
      auto r = relax_coordinate(model, theta_start, ex, b2, *coord, out.state_first,
                                FloatingParams{out.control, cfg.coupling});
      out.theta = std::move(*r.params);
      out.state_second = std::move(r.state);
      out.record.iterations += r.iterations;
      out.record.converged = out.record.converged && r.converged;
      energy = r.energy;
    } else {
      auto g = relax_gradflow(model, cfg.coupling, out.control, theta_start, ex, b2,
                              detail::gradflow_of(cfg.relaxer, seed + 1), GradFlowMode::clamped_u, std::nullopt,
                              out.state_first);
      out.theta = std::move(*g.relax.params);
      out.state_second = std::move(g.relax.state);
      out.record.iterations += g.relax.iterations;
      energy = g.relax.energy;
    }
  } catch (const CurvatureError& e) {
    return flag_divergence("clamped phase", e);
  } catch (const NumericError& e) {
    return flag_divergence("clamped phase", e);
  }

  out.record.dtheta_norm = (out.theta.values() - theta_prev.values()).norm();
  out.record.phase_gap = (out.state_second.values() - out.state_first.values()).lpNorm<1>();
  if (detail::diverging(cfg.divergence_limit, out.theta.values(), energy) ||
      (std::isfinite(out.record.loss) && std::abs(out.record.loss) > cfg.divergence_limit)) {
    out.record.diverged = true;
    out.record.note = "parameters or energy beyond divergence limit";
    return out;
  }

  if (cfg.verify_lyapunov) {
    const auto grid = verify::BetaGrid::uniform(b1, b2, cfg.lyapunov_nodes);
    const auto before = verify::lyapunov_value(model, theta_prev, ex, b1, b2, grid);
    const auto after = verify::lyapunov_value(model, out.theta, ex, b1, b2, grid);
    out.record.lyapunov_before = before.integral;
    out.record.lyapunov_after = after.integral;
    out.record.lyapunov_bound = before.quad_error + after.quad_error +
                                1e-12 * std::max(1.0, std::abs(before.integral));
  }
  return out;
}

/// Supplies the mini-batches of one epoch (already shuffled).
using BatchSource = std::function<std::vector<Example>(Index epoch)>;
/// Optional per-epoch evaluation: returns (train error, test error).
using EpochEvaluator = std::function<std::pair<double, double>(const ParamVector&, Index epoch)>;
/// Optional observer called after every step.
using StepObserver = std::function<void(const StepRecord&, const ParamVector&)>;

/// Repeats aeqprop_step over every batch of every epoch. After each epoch the
/// coupling strengths decay by lr_decay and, when enabled, the coordinate
/// threshold follows xi <- min(xi, gamma * mean phase gap). A divergent step
/// stops the run; the partial trace is kept.
[[nodiscard]] inline TrainResult train(const EnergyModel& model, const ParamVector& theta0, const BatchSource& data,
                                       AeqpropConfig cfg, Index epochs, const EpochEvaluator& evaluate = {},
                                       const StepObserver& observe = {}) {
  cfg.validate(theta0.size());
  TrainResult out{theta0, {}, false};
  std::optional<ControlVector> u;
  Index step = 0;
  if (cfg.adaptive_threshold)
    if (auto* c = std::get_if<CoordConfig>(&cfg.relaxer)) c->threshold = cfg.threshold.xi;

  for (Index epoch = 0; epoch < epochs; ++epoch) {
    const auto batches = data(epoch);
    double gap_sum = 0.0, loss_sum = 0.0;
    Index loss_count = 0;
    for (const auto& ex : batches) {
      auto r = aeqprop_step(model, out.theta, ex, cfg, step++, u);
      if (observe) observe(r.record, r.theta);
      out.trace.steps.push_back(r.record);
      if (r.record.diverged) {
        out.diverged = true;
        return out;
      }
      gap_sum += r.record.phase_gap;
      if (std::isfinite(r.record.loss)) {
        loss_sum += r.record.loss;
        ++loss_count;
      }
      out.theta = std::move(r.theta);
      u = std::move(r.control);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean_phase_gap = batches.empty() ? 0.0 : gap_sum / static_cast<double>(batches.size());
    if (loss_count > 0) rec.mean_loss = loss_sum / static_cast<double>(loss_count);
    if (evaluate) std::tie(rec.train_error, rec.test_error) = evaluate(out.theta, epoch);
    cfg.coupling = cfg.coupling.scaled(cfg.lr_decay);
    if (cfg.adaptive_threshold) {
      cfg.threshold = update_threshold(cfg.threshold, rec.mean_phase_gap);
      if (auto* c = std::get_if<CoordConfig>(&cfg.relaxer)) c->threshold = cfg.threshold.xi;
    }
    rec.xi = cfg.threshold.xi;
    out.trace.epochs.push_back(rec);
  }
  return out;
}

/// Plain SGD on the loss with per-component learning rate `lr` (eps * beta
/// for the equivalent coupling). Uses the model's closed-form loss gradient
/// when it has one, central differences otherwise.
[[nodiscard]] inline TrainResult sgd_baseline(const EnergyModel& model, const ParamVector& theta0,
                                              const BatchSource& data, Vec lr, Index epochs, double lr_decay = 1.0,
                                              double divergence_limit = 1e8) {
  if (lr.size() != theta0.size()) throw StructuralError("sgd_baseline: learning-rate vector size mismatch");
  TrainResult out{theta0, {}, false};
  Index step = 0;
  for (Index epoch = 0; epoch < epochs; ++epoch) {
    double loss_sum = 0.0;
    const auto batches = data(epoch);
    for (const auto& ex : batches) {
      StepRecord rec;
      rec.step = step++;
      const auto free = model.free_equilibrium(out.theta.values(), ex);
      rec.loss = free ? model.cost(*free, ex) : verify::loss(model, out.theta, ex);
      const auto closed = model.loss_gradient(out.theta.values(), ex);
      const Vec grad = closed ? *closed : verify::fd_loss_grad(model, out.theta, ex);
      const Vec delta = -lr.cwiseProduct(grad);
      out.theta.values() += delta;
      rec.dtheta_norm = delta.norm();
      if (detail::diverging(divergence_limit, out.theta.values(), rec.loss)) {
        rec.diverged = true;
        rec.note = "parameters or loss beyond divergence limit";
        out.trace.steps.push_back(rec);
        out.diverged = true;
        return out;
      }
      loss_sum += rec.loss;
      out.trace.steps.push_back(rec);
    }
    EpochRecord e;
    e.epoch = epoch;
    if (!batches.empty()) e.mean_loss = loss_sum / static_cast<double>(batches.size());
    out.trace.epochs.push_back(e);
    lr *= lr_decay;
  }
  return out;
}

/// Classic two-measurement Eqprop gradient estimate; see verify::eqprop_estimator.
[[nodiscard]] inline Vec eqprop_estimator(const EnergyModel& model, const ParamVector& theta, const Example& ex,
                                          double beta) {
  return verify::eqprop_estimator(model, theta, ex, beta);
}

}  // namespace aeqprop
