#include <aeqprop/core.hpp>
#include <aeqprop/models/features.hpp>
#include <aeqprop/models/linreg.hpp>
#include <aeqprop/relax.hpp>

#include <gtest/gtest.h>

#include <random>

using namespace aeqprop;

namespace {

Example linreg_example(double z, double y) { return Example{Vec::Constant(1, z), Vec::Constant(1, y), 1}; }

ParamVector unit_bias(const models::LinRegModel& m) {
  ParamVector theta(m.param_layout());
  theta.values()[0] = 1.0;
  return theta;
}

StateVector scalar_state(const models::LinRegModel& m, double s) {
  return StateVector(m.state_layout(1), Vec::Constant(1, s));
}

}  // namespace

TEST(Layout, SegmentsAreContiguous) {
  Layout l;
  l.add("w1", {3, 2}).add("b1", {3}).add("empty", {});
  EXPECT_EQ(l.size(), 9);
  EXPECT_EQ(l.find("b1").offset, 6);
  EXPECT_EQ(l.find("empty").size, 0);
  EXPECT_THROW(l.add("w1", {1}), StructuralError);
  EXPECT_THROW((void)l.find("nope"), StructuralError);
  EXPECT_THROW(Layout().add("bad", {1}, 1.0, 0.0), StructuralError);
}

TEST(Layout, BroadcastAndBounds) {
  Layout l;
  l.add("a", {2}, 0.0, 1.0).add("b", {1});
  EXPECT_EQ(l.broadcast({0.5, 2.0}), (Vec(3) << 0.5, 0.5, 2.0).finished());
  EXPECT_THROW(l.broadcast({1.0}), StructuralError);
  Vec s(3);
  s << -1.0, 2.0, 1e300;
  EXPECT_FALSE(within_bounds(l, s));
  clamp_to_bounds(l, s);
  EXPECT_EQ(s, (Vec(3) << 0.0, 1.0, 1e300).finished());
  EXPECT_TRUE(within_bounds(l, s));
}

TEST(FlatVector, RejectsSizeMismatchAndExposesSegments) {
  auto l = std::make_shared<Layout>();
  l->add("w", {2}).add("b", {1});
  EXPECT_THROW(ParamVector(l, Vec::Zero(2)), StructuralError);
  ParamVector p(l, (Vec(3) << 1, 2, 3).finished());
  EXPECT_EQ(p.segment("b")[0], 3.0);
  p.segment("w")[1] = 5.0;
  EXPECT_EQ(p.values()[1], 5.0);
  EXPECT_TRUE(p.all_finite());
  p.values()[0] = std::nan("");
  EXPECT_FALSE(p.all_finite());
}

TEST(NudgeVariant, Schedules) {
  EXPECT_EQ(NudgeVariant::optimistic(0.2).beta1, 0.0);
  EXPECT_EQ(NudgeVariant::pessimistic(0.2).beta1, -0.2);
  EXPECT_EQ(NudgeVariant::pessimistic(0.2).beta2, 0.0);
  EXPECT_EQ(NudgeVariant::centered(0.2).beta1, -0.1);
  EXPECT_DOUBLE_EQ(NudgeVariant::centered(0.2).spread(), 0.2);
  EXPECT_THROW(NudgeVariant(0.1, 0.1), DomainError);
  EXPECT_THROW(NudgeVariant::optimistic(-1.0), DomainError);
}

TEST(CouplingSpec, QuadraticFormPerComponent) {
  const auto c = CouplingSpec((Vec(2) << 0.5, 2.0).finished());
  const Vec u = (Vec(2) << 1.0, 1.0).finished();
  const Vec th = (Vec(2) << 0.0, 3.0).finished();
  EXPECT_DOUBLE_EQ(c.energy(u, th), 0.5 * 1.0 / 0.5 + 0.5 * 4.0 / 2.0);
  EXPECT_EQ(c.grad_theta(u, th), (Vec(2) << -2.0, 1.0).finished());
  EXPECT_EQ(c.curvature_theta(u, th), (Vec(2) << 2.0, 0.5).finished());
  const Vec g = (Vec(2) << 0.3, -0.7).finished();
  const Vec uc = c.control_for(th, g);
  EXPECT_NEAR((c.grad_theta(uc, th) + g).norm(), 0.0, 1e-15);
  EXPECT_THROW(CouplingSpec::scalar(0.0, 2), DomainError);
  EXPECT_THROW(CouplingSpec::scalar(-1.0, 2), DomainError);
}

TEST(GlobalEnergy, CouplingAndNudgeVanish) {
  const models::LinRegModel m;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  ParamVector theta(m.param_layout());
  for (Index k = 0; k < theta.size(); ++k) theta.values()[k] = n(rng);
  const ControlVector u(theta.layout_ptr(), theta.values());
  const auto ex = linreg_example(0.3, -0.4);
  const auto s = scalar_state(m, 0.7);
  const double e = global_energy(u, theta, s, ex, CouplingSpec::scalar(0.1, theta.size()), 0.0, m);
  EXPECT_EQ(e, m.energy(theta.values(), ex, s.values()));
}

TEST(GlobalEnergy, AllZero) {
  const models::LinRegModel m;
  const ParamVector theta(m.param_layout());
  const ControlVector u(theta.layout_ptr());
  EXPECT_EQ(global_energy(u, theta, scalar_state(m, 0.0), linreg_example(0.9, 0.0),
                          CouplingSpec::scalar(1.0, theta.size()), 0.3, m),
            0.0);
}

TEST(GlobalEnergy, HandComputedLinregValue) {
  const models::LinRegModel m;
  const auto theta = unit_bias(m);
  const ControlVector u(theta.layout_ptr(), theta.values());
  const double e = global_energy(u, theta, scalar_state(m, 2.0), linreg_example(0.0, 1.0),
                                 CouplingSpec::scalar(0.5, theta.size()), 0.1, m);
  EXPECT_NEAR(e, 0.55, 1e-15);
}

TEST(GlobalEnergy, Errors) {
  const models::LinRegModel m;
  const ParamVector theta(m.param_layout());
  const ControlVector u(theta.layout_ptr());
  const auto coupling = CouplingSpec::scalar(1.0, theta.size());
  StateVector wrong(std::make_shared<Layout>(Layout().add("s", {2})), Vec::Zero(2));
  EXPECT_THROW((void)global_energy(u, theta, wrong, linreg_example(0.0, 0.0), coupling, 0.0, m), StructuralError);
  EXPECT_THROW((void)global_energy(u, theta, scalar_state(m, 1e200), linreg_example(0.0, 1e200), coupling, 1.0, m),
               NumericError);
  const ControlVector short_u(std::make_shared<Layout>(Layout().add("bias", {1})));
  EXPECT_THROW((void)global_energy(short_u, theta, scalar_state(m, 0.0), linreg_example(0.0, 0.0), coupling, 0.0, m),
               StructuralError);
}

TEST(GlobalEnergy, AdditiveAndSymmetricInControl) {
  const models::LinRegModel m;
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    ParamVector theta(m.param_layout());
    ControlVector u(theta.layout_ptr());
    Vec eps(theta.size());
    for (Index k = 0; k < theta.size(); ++k) {
      theta.values()[k] = n(rng);
      u.values()[k] = n(rng);
      eps[k] = 0.1 + std::abs(n(rng));
    }
    const auto coupling = CouplingSpec(eps);
    const auto ex = linreg_example(std::tanh(n(rng)), n(rng));
    const auto s = scalar_state(m, n(rng));
    const double beta = n(rng);
    const double whole = global_energy(u, theta, s, ex, coupling, beta, m);
    const double parts = coupling.energy(u.values(), theta.values()) + m.energy(theta.values(), ex, s.values()) +
                         beta * m.cost(s.values(), ex);
    EXPECT_NEAR(whole, parts, 1e-13 * std::max(1.0, std::abs(whole)));
    EXPECT_DOUBLE_EQ(coupling.energy(u.values(), theta.values()), coupling.energy(theta.values(), u.values()));
  }
}

TEST(LiftNudge, ZeroIsIdentity) {
  auto m = std::make_shared<models::LinRegModel>();
  EXPECT_EQ(lift_nudge(m, 0.0).get(), m.get());
}

TEST(LiftNudge, EnergyAddsScaledCostAndComposes) {
  auto m = std::make_shared<models::LinRegModel>(10, true);
  const auto once = lift_nudge(lift_nudge(m, 0.3), -0.1);
  const auto direct = lift_nudge(m, 0.2);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  ParamVector theta(m->param_layout());
  for (Index k = 0; k < theta.size(); ++k) theta.values()[k] = n(rng);
  const auto ex = linreg_example(0.25, 0.8);
  const Vec s = Vec::Constant(1, 1.7);
  const double base = m->energy(theta.values(), ex, s) + 0.2 * m->cost(s, ex);
  EXPECT_DOUBLE_EQ(direct->energy(theta.values(), ex, s), base);
  EXPECT_NEAR(once->energy(theta.values(), ex, s), base, 1e-14 * std::abs(base));
  EXPECT_EQ(once->cost(s, ex), m->cost(s, ex));
}

TEST(LiftNudge, EquilibriumShiftsTheNudge) {
  // Plain linreg: argmin_s 1/2 (s - p)^2 + b/2 (s - y)^2 = (p + b y) / (1 + b).
  auto m = std::make_shared<models::LinRegModel>();
  const auto lifted = lift_nudge(m, 0.4);
  ParamVector theta(m->param_layout());
  theta.values().setLinSpaced(-0.5, 0.5);
  const auto ex = linreg_example(-0.6, 2.0);
  const double p = m->predict(theta.values(), ex)[0];
  for (double beta : {-0.2, 0.0, 0.3}) {
    const auto r = relax_exact(*lifted, theta, ex, beta);
    const double b = 0.4 + beta;
    EXPECT_NEAR(r.state.values()[0], (p + b * 2.0) / (1.0 + b), 1e-12);
  }
}
