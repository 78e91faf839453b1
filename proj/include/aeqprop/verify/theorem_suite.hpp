#pragma once

#include <aeqprop/core.hpp>
#include <aeqprop/relax.hpp>
#include <aeqprop/train.hpp>
#include <aeqprop/verify/oracles.hpp>

#include <json.hpp>

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace aeqprop::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  bool vacuous = false;
  std::string detail;
  std::map<std::string, double> measured;
};

struct SuiteReport {
  std::vector<CheckResult> checks;

  [[nodiscard]] bool all_passed() const {
    for (const auto& c : checks)
      if (!c.passed) return false;
    return true;
  }
  [[nodiscard]] int failures() const {
    int n = 0;
    for (const auto& c : checks) n += c.passed ? 0 : 1;
    return n;
  }
  [[nodiscard]] const CheckResult* find(const std::string& name) const {
    for (const auto& c : checks)
      if (c.name == name) return &c;
    return nullptr;
  }
};

/// Tolerances and probe points. The scaling windows bracket the expected
/// convergence order of each halving study: 2 for first order, 4 for second.
struct SuiteConfig {
  double eps = 1e-2;
  double beta = 1e-2;
  double first_order_lo = 1.6, first_order_hi = 2.6;
  double second_order_lo = 3.0, second_order_hi = 5.0;

  /// Taylor studies isolate the nudge order with a tiny coupling.
  double taylor_eps = 1e-7;
  double taylor_beta = 0.1;

  Index lyapunov_steps = 20;
  double lyapunov_eps = 0.1;
  double lyapunov_beta = 0.1;
  std::size_t lyapunov_nodes = 21;

  double bound_beta = 0.5;
  double bound_slack = 1e-8;

  double scan_lo = -0.5, scan_hi = 0.5;
  std::size_t scan_nodes = 21;
  double scan_tol = 1e-8;

  double dF_step = 1e-4;
  double dF_tol = 1e-3;

  double metric_eps = 0.1;
  double metric_beta = 0.1;
  /// Two coupling strengths for the per-segment step-size check.
  double segment_eps_a = 1e-3;
  double segment_eps_b = 4e-3;
  double segment_beta = 1e-2;
  double segment_tol = 0.05;

  /// Below this every compared quantity counts as zero (vacuous pass).
  double zero_floor = 1e-13;
};

namespace detail {

inline double rel_error(const Vec& a, const Vec& ref) {
  return (a - ref).norm() / std::max(ref.norm(), std::numeric_limits<double>::min());
}

inline AeqpropConfig exact_step_config(NudgeVariant variant, CouplingSpec coupling) {
  AeqpropConfig cfg;
  cfg.variant = variant;
  cfg.coupling = std::move(coupling);
  cfg.homeostatic = HomeostaticMode::analytic;
  cfg.relaxer = precise_coord();
  cfg.monitor_phase = false;
  return cfg;
}

/// theta_{t-1} - theta_t from one exact step.
inline Vec step_delta(const EnergyModel& model, const ParamVector& theta, const Example& ex, NudgeVariant v,
                      const CouplingSpec& coupling) {
  const auto r = aeqprop_step(model, theta, ex, exact_step_config(v, coupling));
  if (r.record.diverged) throw NumericError("step diverged: " + r.record.note);
  return theta.values() - r.theta.values();
}

/// Ratio of two error magnitudes checked against [lo, hi]; passes vacuously
/// when both are at the floating-point floor.
inline void judge_ratio(CheckResult& c, double coarse, double fine, double lo, double hi, double floor) {
  c.measured["error_coarse"] = coarse;
  c.measured["error_fine"] = fine;
  if (coarse <= floor && fine <= floor) {
    c.passed = c.vacuous = true;
    c.detail = "both errors at the floor";
    return;
  }
  const double ratio = coarse / std::max(fine, std::numeric_limits<double>::min());
  c.measured["ratio"] = ratio;
  c.passed = std::isfinite(ratio) && ratio >= lo && ratio <= hi;
  std::ostringstream os;
  os << "ratio " << ratio << " expected in [" << lo << ", " << hi << "]";
  c.detail = os.str();
}

template <class F>
CheckResult guarded(const std::string& name, F&& body) {
  CheckResult c;
  c.name = name;
  try {
    body(c);
  } catch (const std::exception& e) {
    c.passed = false;
    c.detail = std::string("exception: ") + e.what();
  }
  return c;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Individual checks. Each takes one or more seeded instances (theta, example).

struct Instance {
  ParamVector theta;
  Example ex;
};

/// Optimistic step against the loss gradient: relative error at (eps, beta)
/// and at (eps/2, beta/2) must shrink at first order.
[[nodiscard]] inline CheckResult check_sgd_equivalence(const EnergyModel& model, const std::vector<Instance>& inst,
                                                       const SuiteConfig& cfg) {
  return detail::guarded("theorem1_sgd_equivalence", [&](CheckResult& c) {
    double coarse = 0.0, fine = 0.0;
    for (const auto& in : inst) {
      const Vec g = fd_loss_grad(model, in.theta, in.ex);
      const Index n = in.theta.size();
      auto err = [&](double eps, double beta) {
        const Vec d = detail::step_delta(model, in.theta, in.ex, NudgeVariant::optimistic(beta),
                                         CouplingSpec::scalar(eps, n)) /
                      (eps * beta);
        return g.norm() <= cfg.zero_floor ? d.norm() : detail::rel_error(d, g);
      };
      coarse = std::max(coarse, err(cfg.eps, cfg.beta));
      fine = std::max(fine, err(cfg.eps / 2, cfg.beta / 2));
    }
    detail::judge_ratio(c, coarse, fine, cfg.first_order_lo, cfg.first_order_hi, cfg.zero_floor);
  });
}

/// Repeated steps on a fixed example never raise the Lyapunov function
/// beyond the quadrature error bound, for every nudging variant.
[[nodiscard]] inline CheckResult check_lyapunov_decrease(const EnergyModel& model, const std::vector<Instance>& inst,
                                                         const SuiteConfig& cfg) {
  return detail::guarded("theorem2_lyapunov_decrease", [&](CheckResult& c) {
    Index violations = 0, steps = 0;
    double worst = -kInf;
    const double b = cfg.lyapunov_beta;
    for (const auto& v : {NudgeVariant::optimistic(b), NudgeVariant::pessimistic(b), NudgeVariant::centered(b)}) {
      for (const auto& in : inst) {
        auto scfg = detail::exact_step_config(v, CouplingSpec::scalar(cfg.lyapunov_eps, in.theta.size()));
        scfg.verify_lyapunov = true;
        scfg.lyapunov_nodes = cfg.lyapunov_nodes;
        ParamVector theta = in.theta;
        for (Index t = 0; t < cfg.lyapunov_steps; ++t) {
          auto r = aeqprop_step(model, theta, in.ex, scfg, t);
          if (r.record.diverged) throw NumericError("step diverged: " + r.record.note);
          worst = std::max(worst, r.record.lyapunov_after - r.record.lyapunov_before - r.record.lyapunov_bound);
          violations += r.record.lyapunov_violated() ? 1 : 0;
          ++steps;
          theta = std::move(r.theta);
        }
      }
    }
    c.measured["steps"] = static_cast<double>(steps);
    c.measured["violations"] = static_cast<double>(violations);
    c.measured["worst_excess"] = worst;
    c.passed = violations == 0;
    c.detail = std::to_string(violations) + " violations in " + std::to_string(steps) + " steps";
  });
}

/// L_{0;beta} <= C(s_0) <= L_{-beta;0}, through the free-energy chord.
[[nodiscard]] inline CheckResult check_loss_bounds(const EnergyModel& model, const std::vector<Instance>& inst,
                                                   const SuiteConfig& cfg) {
  return detail::guarded("loss_bounds", [&](CheckResult& c) {
    double min_slack = kInf;
    const double b = cfg.bound_beta;
    for (const auto& in : inst) {
      const auto f0 = free_energy_F(model, in.theta, in.ex, 0.0);
      const auto fp = free_energy_F(model, in.theta, in.ex, b, f0.state);
      const auto fm = free_energy_F(model, in.theta, in.ex, -b, f0.state);
      const double upper = (f0.value - fm.value) / b;  // L_{-beta;0}
      const double lower = (fp.value - f0.value) / b;  // L_{0;beta}
      min_slack = std::min({min_slack, f0.cost - lower, upper - f0.cost});
    }
    c.measured["min_slack"] = min_slack;
    c.passed = min_slack >= -cfg.bound_slack;
    c.detail = "minimum slack " + std::to_string(min_slack);
  });
}

/// On one beta grid: C(s_beta) non-increasing, F concave, and the two
/// observations agree.
[[nodiscard]] inline CheckResult check_monotone_concave(const EnergyModel& model, const std::vector<Instance>& inst,
                                                        const SuiteConfig& cfg) {
  return detail::guarded("monotone_cost_concave_free_energy", [&](CheckResult& c) {
    const auto grid = BetaGrid::uniform(cfg.scan_lo, cfg.scan_hi, cfg.scan_nodes);
    const auto& b = grid.points();
    Index mono = 0, conc = 0;
    double worst_rise = -kInf, worst_convexity = -kInf;
    for (const auto& in : inst) {
      // Lowest-energy equilibrium among a cold start and warm starts swept from either end of the grid.
      std::vector<double> C(b.size()), F(b.size());
      for (std::size_t i = 0; i < b.size(); ++i) {
        const auto f = free_energy_F(model, in.theta, in.ex, b[i]);
        C[i] = f.cost;
        F[i] = f.value;
      }
      const auto sweep = [&](bool forward) {
        std::optional<StateVector> warm;
        for (std::size_t k = 0; k < b.size(); ++k) {
          const std::size_t i = forward ? k : b.size() - 1 - k;
          auto f = free_energy_F(model, in.theta, in.ex, b[i], warm);
          if (f.value < F[i]) {
            F[i] = f.value;
            C[i] = f.cost;
          }
          warm = std::move(f.state);
        }
      };
      sweep(true);
      sweep(false);
      for (std::size_t i = 1; i < b.size(); ++i) {
        const double rise = C[i] - C[i - 1];
        worst_rise = std::max(worst_rise, rise);
        mono += rise > cfg.scan_tol ? 1 : 0;
      }
      for (std::size_t i = 1; i + 1 < b.size(); ++i) {
        const double w = (b[i] - b[i - 1]) / (b[i + 1] - b[i - 1]);
        const double chord = (1.0 - w) * F[i - 1] + w * F[i + 1];
        const double convexity = chord - F[i];
        worst_convexity = std::max(worst_convexity, convexity);
        conc += convexity > cfg.scan_tol ? 1 : 0;
      }
    }
    c.measured["monotone_violations"] = static_cast<double>(mono);
    c.measured["concavity_violations"] = static_cast<double>(conc);
    c.measured["worst_rise"] = worst_rise;
    c.measured["worst_convexity"] = worst_convexity;
    c.passed = mono == 0 && conc == 0;
    c.detail = std::to_string(mono) + " monotonicity and " + std::to_string(conc) + " concavity violations";
  });
}

/// dF/dbeta by central differences against C(s_beta).
[[nodiscard]] inline CheckResult check_free_energy_derivative(const EnergyModel& model,
                                                              const std::vector<Instance>& inst,
                                                              const SuiteConfig& cfg) {
  return detail::guarded("free_energy_derivative", [&](CheckResult& c) {
    double worst = 0.0;
    const double h = cfg.dF_step;
    for (const auto& in : inst) {
      for (double beta : {cfg.scan_lo, 0.0, cfg.scan_hi}) {
        const auto mid = free_energy_F(model, in.theta, in.ex, beta);
        const double up = free_energy_F(model, in.theta, in.ex, beta + h, mid.state).value;
        const double down = free_energy_F(model, in.theta, in.ex, beta - h, mid.state).value;
        const double slope = (up - down) / (2.0 * h);
        const double scale = std::abs(mid.cost);
        const double err = scale <= cfg.zero_floor ? std::abs(slope) : std::abs(slope - mid.cost) / scale;
        worst = std::max(worst, err);
      }
    }
    c.measured["worst_relative_error"] = worst;
    c.passed = worst < cfg.dF_tol;
    c.detail = "worst relative error " + std::to_string(worst);
  });
}

/// Trapezoid integral and free-energy chord agree within twice the
/// quadrature error estimate.
[[nodiscard]] inline CheckResult check_quadrature_consistency(const EnergyModel& model,
                                                              const std::vector<Instance>& inst,
                                                              const SuiteConfig& cfg) {
  return detail::guarded("quadrature_consistency", [&](CheckResult& c) {
    double worst = -kInf;
    Index bad = 0;
    for (const auto& in : inst) {
      for (auto [b1, b2] : {std::pair{0.0, cfg.bound_beta}, std::pair{-cfg.bound_beta, 0.0},
                            std::pair{-cfg.bound_beta / 2, cfg.bound_beta / 2}}) {
        const auto L = lyapunov_value(model, in.theta, in.ex, b1, b2, BetaGrid::uniform(b1, b2, cfg.scan_nodes));
        const double gap = std::abs(L.integral - L.f_difference);
        const double allowed = 2.0 * L.quad_error + 1e-12 * std::max(1.0, std::abs(L.integral));
        worst = std::max(worst, gap - allowed);
        bad += gap > allowed ? 1 : 0;
      }
    }
    c.measured["violations"] = static_cast<double>(bad);
    c.measured["worst_excess"] = worst;
    c.passed = bad == 0;
    c.detail = std::to_string(bad) + " disagreements";
  });
}

/// Lyapunov function against the loss: first order in beta for the
/// one-sided variant, second order for the centered one.
[[nodiscard]] inline CheckResult check_taylor_lyapunov(const EnergyModel& model, const std::vector<Instance>& inst,
                                                       const SuiteConfig& cfg) {
  return detail::guarded("taylor_lyapunov", [&](CheckResult& c) {
    double oc = 0.0, of = 0.0, cc = 0.0, cf = 0.0;
    auto chord = [&](const Instance& in, double b1, double b2) {
      return (free_energy_F(model, in.theta, in.ex, b2).value - free_energy_F(model, in.theta, in.ex, b1).value) /
             (b2 - b1);
    };
    const double b = cfg.taylor_beta;
    for (const auto& in : inst) {
      const double L = free_energy_F(model, in.theta, in.ex, 0.0).cost;
      oc = std::max(oc, std::abs(chord(in, 0.0, b) - L));
      of = std::max(of, std::abs(chord(in, 0.0, b / 2) - L));
      cc = std::max(cc, std::abs(chord(in, -b / 2, b / 2) - L));
      cf = std::max(cf, std::abs(chord(in, -b / 4, b / 4) - L));
    }
    CheckResult one, two;
    detail::judge_ratio(one, oc, of, cfg.first_order_lo, cfg.first_order_hi, cfg.zero_floor);
    detail::judge_ratio(two, cc, cf, cfg.second_order_lo, cfg.second_order_hi, cfg.zero_floor);
    for (const auto& [k, v] : one.measured) c.measured["optimistic_" + k] = v;
    for (const auto& [k, v] : two.measured) c.measured["centered_" + k] = v;
    c.passed = one.passed && two.passed;
    c.vacuous = one.vacuous && two.vacuous;
    c.detail = "optimistic: " + one.detail + "; centered: " + two.detail;
  });
}

/// Step direction against the loss gradient for the optimistic and centered
/// variants at a tiny coupling, as beta halves.
[[nodiscard]] inline CheckResult check_taylor_step(const EnergyModel& model, const std::vector<Instance>& inst,
                                                   const SuiteConfig& cfg) {
  return detail::guarded("taylor_step", [&](CheckResult& c) {
    double oc = 0.0, of = 0.0, cc = 0.0, cf = 0.0;
    const double eps = cfg.taylor_eps, b = cfg.taylor_beta;
    for (const auto& in : inst) {
      const Vec g = fd_loss_grad(model, in.theta, in.ex);
      const auto coupling = CouplingSpec::scalar(eps, in.theta.size());
      auto err = [&](NudgeVariant v) {
        const Vec d = detail::step_delta(model, in.theta, in.ex, v, coupling) / (eps * v.spread());
        return g.norm() <= cfg.zero_floor ? d.norm() : detail::rel_error(d, g);
      };
      oc = std::max(oc, err(NudgeVariant::optimistic(b)));
      of = std::max(of, err(NudgeVariant::optimistic(b / 2)));
      cc = std::max(cc, err(NudgeVariant::centered(b)));
      cf = std::max(cf, err(NudgeVariant::centered(b / 2)));
    }
    CheckResult one, two;
    detail::judge_ratio(one, oc, of, cfg.first_order_lo, cfg.first_order_hi, cfg.zero_floor);
    detail::judge_ratio(two, cc, cf, cfg.second_order_lo, cfg.second_order_hi, cfg.zero_floor);
    for (const auto& [k, v] : one.measured) c.measured["optimistic_" + k] = v;
    for (const auto& [k, v] : two.measured) c.measured["centered_" + k] = v;
    c.passed = one.passed && two.passed;
    c.vacuous = one.vacuous && two.vacuous;
    c.detail = "optimistic: " + one.detail + "; centered: " + two.detail;
  });
}

/// Relative residual of the Riemannian step prediction at (eps, beta) and
/// at the halved pair; the metric estimate must be positive definite.
[[nodiscard]] inline CheckResult check_riemannian_step(const EnergyModel& model, const std::vector<Instance>& inst,
                                                       const SuiteConfig& cfg) {
  return detail::guarded("theorem3_riemannian_step", [&](CheckResult& c) {
    if (!inst.empty() && inst.front().theta.size() > 400) {
      c.passed = c.vacuous = true;
      c.detail = "skipped: more than 400 parameters";
      return;
    }
    double coarse = 0.0, fine = 0.0, min_eig = kInf;
    auto residual = [&](const Instance& in, double eps, double beta) {
      const auto coupling = CouplingSpec::scalar(eps, in.theta.size());
      const auto v = NudgeVariant::optimistic(beta);
      const Vec measured = -detail::step_delta(model, in.theta, in.ex, v, coupling);
      const auto metric = riemannian_metric(model, in.theta, in.ex, v.beta1, coupling);
      min_eig = std::min(min_eig, metric.min_eigenvalue);
      const Vec predicted =
          riemannian_step(metric, lyapunov_gradient(model, in.theta, in.ex, v.beta1, v.beta2), v.spread());
      return measured.norm() <= cfg.zero_floor ? predicted.norm() : detail::rel_error(predicted, measured);
    };
    for (const auto& in : inst) {
      coarse = std::max(coarse, residual(in, cfg.metric_eps, cfg.metric_beta));
      fine = std::max(fine, residual(in, cfg.metric_eps / 2, cfg.metric_beta / 2));
    }
    c.measured["min_eigenvalue"] = min_eig;
    detail::judge_ratio(c, coarse, fine, cfg.second_order_lo, cfg.second_order_hi, cfg.zero_floor);
    if (!(min_eig > 0.0)) {
      c.passed = false;
      c.detail += "; metric not positive definite";
    }
  });
}

/// With one coupling strength per parameter segment, the effective step size
/// of each segment is proportional to its strength.
[[nodiscard]] inline CheckResult check_segment_step_sizes(const EnergyModel& model, const std::vector<Instance>& inst,
                                                          const SuiteConfig& cfg) {
  return detail::guarded("per_segment_step_sizes", [&](CheckResult& c) {
    double worst = 0.0;
    bool any = false;
    for (const auto& in : inst) {
      const auto& layout = in.theta.layout();
      if (layout.count() < 2) continue;
      std::vector<double> eps(layout.count());
      for (std::size_t k = 0; k < eps.size(); ++k) eps[k] = k % 2 == 0 ? cfg.segment_eps_a : cfg.segment_eps_b;
      const auto coupling = CouplingSpec::per_segment(layout, eps);
      const auto v = NudgeVariant::optimistic(cfg.segment_beta);
      const Vec d = detail::step_delta(model, in.theta, in.ex, v, coupling);
      const Vec g = fd_loss_grad(model, in.theta, in.ex);
      for (std::size_t k = 0; k < eps.size(); ++k) {
        const auto& seg = layout.segments()[k];
        const double gg = g.segment(seg.offset, seg.size).squaredNorm();
        if (gg <= cfg.zero_floor) continue;
        const double rate = d.segment(seg.offset, seg.size).dot(g.segment(seg.offset, seg.size)) / (v.spread() * gg);
        const double err = std::abs(rate / eps[k] - 1.0);
        c.measured["rate_over_eps_" + seg.name] = rate / eps[k];
        worst = std::max(worst, err);
        any = true;
      }
    }
    c.measured["worst_relative_deviation"] = worst;
    c.vacuous = !any;
    c.passed = worst <= cfg.segment_tol;
    c.detail = any ? "worst deviation " + std::to_string(worst) : "no segment with a non-zero gradient";
  });
}

/// Runs every check on the given instances.
[[nodiscard]] inline SuiteReport theorem_suite(const EnergyModel& model, const std::vector<Instance>& instances,
                                               const SuiteConfig& cfg = {}) {
  SuiteReport r;
  r.checks.push_back(check_sgd_equivalence(model, instances, cfg));
  r.checks.push_back(check_lyapunov_decrease(model, instances, cfg));
  r.checks.push_back(check_loss_bounds(model, instances, cfg));
  r.checks.push_back(check_monotone_concave(model, instances, cfg));
  r.checks.push_back(check_free_energy_derivative(model, instances, cfg));
  r.checks.push_back(check_quadrature_consistency(model, instances, cfg));
  r.checks.push_back(check_taylor_lyapunov(model, instances, cfg));
  r.checks.push_back(check_taylor_step(model, instances, cfg));
  r.checks.push_back(check_riemannian_step(model, instances, cfg));
  r.checks.push_back(check_segment_step_sizes(model, instances, cfg));
  return r;
}

[[nodiscard]] inline nlohmann::json to_json(const SuiteReport& r) {
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : r.checks) {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [k, v] : c.measured) m[k] = std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
    checks.push_back({{"name", c.name},
                      {"status", c.passed ? "pass" : "fail"},
                      {"vacuous", c.vacuous},
                      {"detail", c.detail},
                      {"measured", m}});
  }
  return {{"passed", r.all_passed()}, {"failures", r.failures()}, {"checks", checks}};
}

}  // namespace aeqprop::verify
