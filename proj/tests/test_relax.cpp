#include <aeqprop/models/hopfield.hpp>
#include <aeqprop/models/linreg.hpp>
#include <aeqprop/relax.hpp>

#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include "test_util.hpp"

using namespace aeqprop;
using namespace aeqprop::models;
using namespace testutil;

namespace {

Example linreg_example(double z, double y) { return Example{Vec::Constant(1, z), Vec::Constant(1, y), 1}; }

struct HopfieldCase {
  HopfieldModel model = HopfieldModel::dense(2, {3}, 2);
  ParamVector theta;
  Example ex;
};

HopfieldCase hopfield_case(std::uint64_t seed, double scale = 0.7) {
  HopfieldCase c;
  std::mt19937_64 rng(seed);
  c.theta = ParamVector(c.model.param_layout(), randn(c.model.param_layout()->size(), rng, scale));
  c.ex = Example{uniform(2, rng, 0.0, 1.0), Vec::Unit(2, seed % 2), 1};
  return c;
}

/// Projected gradient descent on E + beta C for the dense 2-3-2 network,
/// written out by hand from the energy definition.
Vec descent_oracle(const HopfieldCase& c, double beta) {
  const Vec& th = c.theta.values();
  Eigen::Map<const Eigen::MatrixXd> W1(th.data(), 3, 2);
  const Vec b1 = th.segment(6, 3);
  Eigen::Map<const Eigen::MatrixXd> W2(th.data() + 9, 2, 3);
  const Vec b2 = th.segment(15, 2);
  Vec s1 = Vec::Zero(3), s2 = Vec::Zero(2);
  for (int it = 0; it < 200000; ++it) {
    const Vec g1 = s1 - b1 - W1 * c.ex.x - W2.transpose() * s2;
    const Vec g2 = s2 - b2 - W2 * s1 + 2.0 * beta * (s2 - c.ex.y);
    const Vec n1 = (s1 - 0.1 * g1).cwiseMax(0.0).cwiseMin(1.0);
    const Vec n2 = (s2 - 0.1 * g2).cwiseMax(-1.0).cwiseMin(2.0);
    const double change = (n1 - s1).lpNorm<1>() + (n2 - s2).lpNorm<1>();
    s1 = n1;
    s2 = n2;
    if (change < 1e-13) break;
  }
  Vec s(5);
  s << s1, s2;
  return s;
}

void expect_box_kkt(const EnergyModel& m, const Vec& theta, const Example& ex, const Vec& s, double beta) {
  const auto layout = m.state_layout(ex.batch);
  const Vec g = m.grad_s_energy(theta, ex, s) + beta * m.grad_s_cost(s, ex);
  const Vec lo = layout->lower_bounds(), hi = layout->upper_bounds();
  for (Index i = 0; i < s.size(); ++i) {
    if (s[i] <= lo[i]) {
      EXPECT_GE(g[i], -1e-6) << "unit " << i;
    } else if (s[i] >= hi[i]) {
      EXPECT_LE(g[i], 1e-6) << "unit " << i;
    } else {
      EXPECT_NEAR(g[i], 0.0, 1e-6) << "unit " << i;
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Scalar box minimization

TEST(QuadraticBoxMin, Examples) {
  EXPECT_EQ(quadratic_box_min(1.0, -2.0, -kInf, kInf), 1.0);
  EXPECT_EQ(quadratic_box_min(0.5, 2.0, 0.0, 1.0), 0.0);
  EXPECT_EQ(quadratic_box_min(1.0, -10.0, 0.0, 1.0), 1.0);
  EXPECT_EQ(quadratic_box_min(0.0, 1.0, -1.0, 2.0), -1.0);
  EXPECT_EQ(quadratic_box_min(0.0, -1.0, -1.0, 2.0), 2.0);
  EXPECT_THROW((void)quadratic_box_min(-1.0, 0.0, 0.0, 1.0), CurvatureError);
  EXPECT_THROW((void)quadratic_box_min(0.0, 1.0, -kInf, kInf), CurvatureError);
  EXPECT_THROW((void)quadratic_box_min(1.0, 0.0, 1.0, 0.0), DomainError);
}

TEST(QuadraticBoxMin, MatchesGridScan) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> ua(0.05, 3.0), ub(-6.0, 6.0), ubox(-3.0, 3.0);
  for (int trial = 0; trial < 8; ++trial) {
    const double a = ua(rng), b = ub(rng);
    double p = ubox(rng), q = ubox(rng);
    if (p > q) std::swap(p, q);
    const int n = 1000000;
    const double h = (q - p) / (n - 1);
    double best = p, best_v = INFINITY;
    for (int i = 0; i < n; ++i) {
      const double z = p + h * i;
      const double v = a * z * z + b * z;
      if (v < best_v) best_v = v, best = z;
    }
    EXPECT_NEAR(quadratic_box_min(a, b, p, q), best, h);
  }
}

// ---------------------------------------------------------------------------
// Coordinate relaxation

TEST(RelaxCoordinate, ZeroParameterHopfieldInOneSweep) {
  const HopfieldModel m({2, 1, 1}, {LayerSpec{{3, 1, 1}, 0.25, 1.0, DenseLink{}},
                                    LayerSpec{{2, 1, 1}, -1.0, 2.0, DenseLink{}}});
  const ParamVector theta(m.param_layout());
  const Example ex{Vec::Constant(2, 0.4), Vec::Zero(2), 1};
  CoordConfig cfg;
  cfg.max_iters = 1;
  const StateVector start(m.state_layout(1), Vec::Constant(5, 0.9));
  const auto r = relax_coordinate(m, theta, ex, 0.0, cfg, start);
  EXPECT_EQ(r.state.values(), (Vec(5) << 0.25, 0.25, 0.25, 0.0, 0.0).finished());
}

TEST(RelaxCoordinate, LinregExactAfterOneSweep) {
  const LinRegModel m;
  std::mt19937_64 rng(2);
  const ParamVector theta(m.param_layout(), randn(21, rng, 0.3));
  const auto ex = linreg_example(0.37, 0.5);
  CoordConfig cfg;
  cfg.max_iters = 1;
  for (double beta : {0.0, 0.4}) {
    const double p = m.predict(theta.values(), ex)[0];
    const auto r = relax_coordinate(m, theta, ex, beta, cfg);
    EXPECT_NEAR(r.state.values()[0], (p + beta * 0.5) / (1.0 + beta), 1e-15);
  }
}

TEST(RelaxCoordinate, MatchesIndependentDescent) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    // Weights small enough for the state energy to be strictly convex.
    const auto c = hopfield_case(seed, 0.3);
    for (double beta : {0.0, 0.5}) {
      const auto r = relax_coordinate(c.model, c.theta, c.ex, beta, precise_coord());
      EXPECT_TRUE(r.converged);
      EXPECT_LT((r.state.values() - descent_oracle(c, beta)).cwiseAbs().maxCoeff(), 1e-6);
      expect_box_kkt(c.model, c.theta.values(), c.ex, r.state.values(), beta);
    }
  }
}

TEST(RelaxCoordinate, EnergyNeverRisesAcrossUpdates) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto c = hopfield_case(seed, 1.5);
    CoordConfig cfg = precise_coord(500);
    cfg.check_monotone = true;
    cfg.order = seed % 2 ? SweepOrder::backward : SweepOrder::forward;
    const auto fixed = relax_coordinate(c.model, c.theta, c.ex, 0.3, cfg);
    EXPECT_EQ(fixed.monotone_violations, 0);
    const auto coupling = CouplingSpec::scalar(0.2, c.theta.size());
    const ControlVector u(c.theta.layout_ptr(), c.theta.values() * 0.5);
    const auto floating = relax_coordinate(c.model, c.theta, c.ex, 0.3, cfg, std::nullopt, FloatingParams{u, coupling});
    EXPECT_EQ(floating.monotone_violations, 0);
    ASSERT_TRUE(floating.params.has_value());
  }
}

TEST(RelaxCoordinate, UnconvergedIsFlaggedNotThrown) {
  const auto c = hopfield_case(3, 2.0);
  CoordConfig cfg = precise_coord(1);
  const auto r = relax_coordinate(c.model, c.theta, c.ex, 0.0, cfg);
  EXPECT_EQ(r.iterations, 1);
  EXPECT_FALSE(r.converged);
}

TEST(RelaxCoordinate, Errors) {
  const auto c = hopfield_case(0);
  CoordConfig bad;
  bad.threshold = 0.0;
  EXPECT_THROW((void)relax_coordinate(c.model, c.theta, c.ex, 0.0, bad), DomainError);
  // Output curvature 1 + 2 beta vanishes at -1/2 and turns negative below.
  EXPECT_THROW((void)relax_coordinate(c.model, c.theta, c.ex, -0.7, CoordConfig{}), CurvatureError);
  SineModel sine;
  EXPECT_NO_THROW((void)relax_coordinate(sine, ParamVector(sine.param_layout()), Example{Vec(), Vec::Zero(1), 1}, 0.0,
                                         CoordConfig{}));
}

// ---------------------------------------------------------------------------
// Gradient flow

TEST(Controller, CriticallyDamped) {
  for (double eps : {0.01, 0.1, 1.0}) {
    Eigen::EigenSolver<Eigen::Matrix2d> es(controller_linearization(eps));
    for (int i = 0; i < 2; ++i) {
      EXPECT_NEAR(es.eigenvalues()[i].real(), -1.0 / (2.0 * eps), 1e-6 / eps);
      EXPECT_NEAR(es.eigenvalues()[i].imag(), 0.0, 1e-6 / eps);
    }
  }
}

TEST(RelaxGradflow, ClampedControlPullsThetaWithoutOvershoot) {
  const NullModel m(3);
  const auto coupling = CouplingSpec::scalar(0.1, 3);
  const ParamVector theta0(m.param_layout(), (Vec(3) << 1.0, -2.0, 0.5).finished());
  const ControlVector u(m.param_layout(), Vec::Zero(3));
  const Example ex{Vec(), Vec::Zero(1), 1};
  double prev = INFINITY;
  for (Index n = 1; n <= 40; ++n) {
    GradFlowConfig cfg;
    cfg.n_steps = n;
    const auto r = relax_gradflow(m, coupling, u, theta0, ex, 0.0, cfg, GradFlowMode::clamped_u);
    const Vec& th = r.relax.params->values();
    EXPECT_TRUE((th.array() * theta0.values().array() >= 0.0).all()) << "sign flip after " << n << " steps";
    EXPECT_LE(th.norm(), prev);
    prev = th.norm();
  }
  EXPECT_LT(prev, 1e-3 * theta0.values().norm());
}

TEST(RelaxGradflow, HomeostaticModeHoldsTheTarget) {
  const NullModel m(3);
  const auto coupling = CouplingSpec::scalar(0.1, 3);
  const ParamVector target(m.param_layout(), (Vec(3) << 0.3, 0.3, -0.1).finished());
  const ParamVector theta0(m.param_layout(), (Vec(3) << 1.0, -1.0, 0.5).finished());
  const ControlVector u0(m.param_layout(), theta0.values());
  GradFlowConfig cfg;
  cfg.n_steps = 2000;
  const auto r = relax_gradflow(m, coupling, u0, theta0, Example{Vec(), Vec::Zero(1), 1}, 0.0, cfg,
                                GradFlowMode::homeostatic, target);
  EXPECT_LT(r.controller_residual, 1e-3 * (theta0.values() - target.values()).norm());
}

TEST(RelaxGradflow, AcceptedEnergiesNonIncreasing) {
  const auto c = hopfield_case(4);
  const auto coupling = CouplingSpec::scalar(0.1, c.theta.size());
  const auto h = homeostatic_control_analytic(c.model, c.theta, c.ex, 0.0, coupling, precise_coord());
  for (double beta : {0.0, 0.5}) {
    GradFlowConfig cfg;
    cfg.n_steps = 300;
    cfg.record_energies = true;
    const auto r = relax_gradflow(c.model, coupling, h.u, c.theta, c.ex, beta, cfg, GradFlowMode::clamped_u);
    ASSERT_FALSE(r.accepted_energies.empty());
    for (std::size_t i = 1; i < r.accepted_energies.size(); ++i)
      EXPECT_LE(r.accepted_energies[i], r.accepted_energies[i - 1] + cfg.tie_tolerance) << "step " << i;
  }
}

TEST(RelaxGradflow, LinregReachesClosedForm) {
  const LinRegModel m;
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const ParamVector theta(m.param_layout(), randn(21, rng, 0.3));
    const auto ex = linreg_example(uniform(1, rng, -1, 1)[0], randn(1, rng)[0]);
    const auto r = relax_state(m, theta, ex, 0.0, GradFlowConfig{});
    EXPECT_NEAR(r.state.values()[0], m.predict(theta.values(), ex)[0], 1e-3);
  }
}

TEST(RelaxGradflow, NonFiniteEnergyIsANumericError) {
  const LinRegModel m;
  const ParamVector theta(m.param_layout(), Vec::Constant(21, 1e200));
  const ControlVector u(theta.layout_ptr(), theta.values());
  EXPECT_THROW((void)relax_gradflow(m, CouplingSpec::scalar(0.1, 21), u, theta, linreg_example(0.1, 0.0), 0.0,
                                    GradFlowConfig{}, GradFlowMode::clamped_u),
               NumericError);
}

// ---------------------------------------------------------------------------
// Homeostatic control

TEST(HomeostaticAnalytic, StationaryAtFreeEquilibrium) {
  const LinRegModel m;
  ParamVector theta(m.param_layout());
  theta.values()[0] = 1.0;
  const auto h = homeostatic_control_analytic(m, theta, linreg_example(0.0, -3.0), 0.0,
                                              CouplingSpec::scalar(0.5, theta.size()), CoordConfig{});
  EXPECT_NEAR(h.relax.state.values()[0], 1.0, 1e-15);
  EXPECT_EQ(h.u.values(), theta.values());
  const NullModel null(4);
  const ParamVector t(null.param_layout(), Vec::LinSpaced(4, -1, 1));
  EXPECT_EQ(homeostatic_control_analytic(null, t, Example{Vec(), Vec::Zero(1), 1}, 0.7,
                                         CouplingSpec::scalar(0.1, 4), CoordConfig{})
                .u.values(),
            t.values());
}

TEST(HomeostaticAnalytic, FloatingRelaxationStaysPut) {
  const LinRegModel lin(10, true);
  std::mt19937_64 rng(6);
  std::vector<std::pair<const EnergyModel*, std::pair<ParamVector, Example>>> cases;
  cases.push_back({&lin, {ParamVector(lin.param_layout(), randn(21, rng, 0.3)), linreg_example(0.2, 0.9)}});
  const auto hc = hopfield_case(7);
  cases.push_back({&hc.model, {hc.theta, hc.ex}});
  for (const auto& [model, inst] : cases) {
    const auto& [theta, ex] = inst;
    const auto coupling = CouplingSpec::scalar(0.1, theta.size());
    for (double beta : {0.0, 0.3}) {
      const auto h = homeostatic_control_analytic(*model, theta, ex, beta, coupling, precise_coord());
      const auto r = relax_coordinate(*model, theta, ex, beta, precise_coord(), h.relax.state,
                                      FloatingParams{h.u, coupling});
      EXPECT_LT((r.params->values() - theta.values()).norm(), 1e-8);
    }
  }
}

TEST(HomeostaticModes, ControllerAndAnalyticAgree) {
  const LinRegModel m;
  std::mt19937_64 rng(8);
  const auto coupling = CouplingSpec::scalar(0.1, 21);
  for (int trial = 0; trial < 3; ++trial) {
    const ParamVector theta(m.param_layout(), randn(21, rng, 0.3));
    const auto ex = linreg_example(uniform(1, rng, -1, 1)[0], randn(1, rng)[0]);
    const auto analytic = homeostatic_control_analytic(m, theta, ex, 0.0, coupling, precise_coord());
    GradFlowConfig cfg;
    cfg.n_steps = 3000;
    const ControlVector u0(theta.layout_ptr(), theta.values());
    const auto ctrl = relax_gradflow(m, coupling, u0, theta, ex, 0.0, cfg, GradFlowMode::homeostatic, theta);
    const double beta = 0.05;
    auto clamped = [&](const ControlVector& u) {
      return relax_coordinate(m, theta, ex, beta, precise_coord(), std::nullopt, FloatingParams{u, coupling})
          .params->values();
    };
    EXPECT_LT((clamped(*ctrl.relax.control) - clamped(analytic.u)).norm(), 1e-3);
  }
}

// ---------------------------------------------------------------------------
// Threshold schedule and the cost monotonicity lemma

TEST(Threshold, Schedule) {
  const ThresholdState ts{1e-3, 0.01};
  EXPECT_DOUBLE_EQ(update_threshold(ts, 0.05).xi, 5e-4);
  EXPECT_EQ(update_threshold(ts, 1e6).xi, 1e-3);
  EXPECT_EQ(update_threshold(ts, 0.0).xi, kThresholdFloor);
  EXPECT_THROW((void)update_threshold(ts, -1.0), DomainError);
}

TEST(MonotoneCost, NonIncreasingInBeta) {
  const LinRegModel lin;
  std::mt19937_64 rng(9);
  const ParamVector lt(lin.param_layout(), randn(21, rng, 0.3));
  const auto lex = linreg_example(0.6, -1.0);
  const auto hc = hopfield_case(10, 1.2);
  for (int which = 0; which < 2; ++which) {
    const EnergyModel& m = which ? static_cast<const EnergyModel&>(hc.model) : lin;
    const ParamVector& th = which ? hc.theta : lt;
    const Example& ex = which ? hc.ex : lex;
    double prev = INFINITY;
    for (int i = 0; i <= 20; ++i) {
      const double beta = -0.5 + 0.05 * i;
      const double c = m.cost(relax_exact(m, th, ex, beta).state.values(), ex);
      EXPECT_LE(c, prev + 1e-10) << "beta " << beta;
      prev = c;
    }
  }
}
