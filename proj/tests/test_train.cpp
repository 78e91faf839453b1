#include <aeqprop/data/datasets.hpp>
#include <aeqprop/models/linreg.hpp>
#include <aeqprop/train.hpp>
#include <aeqprop/verify/oracles.hpp>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace aeqprop;
using namespace aeqprop::models;
using namespace testutil;

namespace {

Example linreg_example(double z, double y) { return Example{Vec::Constant(1, z), Vec::Constant(1, y), 1}; }

AeqpropConfig exact_config(NudgeVariant variant, double eps, Index n_params) {
  AeqpropConfig cfg;
  cfg.variant = variant;
  cfg.coupling = CouplingSpec::scalar(eps, n_params);
  cfg.homeostatic = HomeostaticMode::analytic;
  cfg.relaxer = precise_coord();
  cfg.monitor_phase = false;
  return cfg;
}

Vec step_delta(const EnergyModel& m, const ParamVector& theta, const Example& ex, const AeqpropConfig& cfg) {
  const auto r = aeqprop_step(m, theta, ex, cfg);
  EXPECT_FALSE(r.record.diverged) << r.record.note;
  return r.theta.values() - theta.values();
}

BatchSource stream(std::uint64_t target_seed, std::uint64_t sample_seed, std::size_t n) {
  const data::RegressionStream s{sample_target(target_seed), sample_seed};
  const auto samples = s.draw(n);
  return [samples](Index) { return samples; };
}

double tail_mean(const std::vector<StepRecord>& steps, std::size_t window) {
  double acc = 0.0;
  for (std::size_t i = steps.size() - window; i < steps.size(); ++i) acc += steps[i].loss;
  return acc / static_cast<double>(window);
}

}  // namespace

TEST(AeqpropStep, NoMotionAtZeroGradient) {
  const LinRegModel m;
  std::mt19937_64 rng(1);
  const ParamVector theta(m.param_layout(), randn(21, rng, 0.3));
  auto ex = linreg_example(0.4, 0.0);
  ex.y = m.predict(theta.values(), ex);
  for (auto variant : {NudgeVariant::optimistic(0.5), NudgeVariant::pessimistic(0.5), NudgeVariant::centered(0.5)})
    EXPECT_LT(step_delta(m, theta, ex, exact_config(variant, 0.5, 21)).norm(), 1e-12);
}

TEST(AeqpropStep, FirstOrderSgdEquivalence) {
  // Relative error of delta / (eps beta) against -grad L is O(eps + beta); the
  // constant is calibrated at 1e-2 and then required to hold at 1e-3.
  const LinRegModel m;
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 3; ++trial) {
    const ParamVector theta(m.param_layout(), randn(21, rng, 0.3));
    const auto ex = linreg_example(uniform(1, rng, -1, 1)[0], randn(1, rng)[0]);
    const Vec grad = verify::fd_loss_grad(m, theta, ex);
    auto error = [&](double eb) {
      const Vec d = step_delta(m, theta, ex, exact_config(NudgeVariant::optimistic(eb), eb, 21));
      return rel_err(-d / (eb * eb), grad);
    };
    const double kappa = error(1e-2) / (2 * 1e-2);
    EXPECT_LT(error(1e-3), 2.0 * (2 * 1e-3) * kappa);
  }
}

TEST(AeqpropStep, PessimisticWithoutStabilizerDiverges) {
  const LinRegModel m;
  std::mt19937_64 rng(3);
  const ParamVector theta(m.param_layout(), randn(21, rng, 0.3));
  const auto r = aeqprop_step(m, theta, linreg_example(0.2, 1.0), exact_config(NudgeVariant::pessimistic(1.5), 0.1, 21));
  EXPECT_TRUE(r.record.diverged);
  EXPECT_NE(r.record.note.find("homeostatic"), std::string::npos);

  const LinRegModel stabilized(10, true);
  const auto ok = aeqprop_step(stabilized, theta, linreg_example(0.2, 1.0),
                               exact_config(NudgeVariant::pessimistic(1.5), 0.1, 21));
  EXPECT_FALSE(ok.record.diverged);

  AeqpropConfig cfg = exact_config(NudgeVariant::pessimistic(1.5), 0.1, 21);
  const auto run = train(m, theta, stream(0, 1, 10), cfg, 1);
  EXPECT_TRUE(run.diverged);
  EXPECT_EQ(run.trace.steps.size(), 1u);
  EXPECT_EQ(run.theta.values(), theta.values());
}

TEST(AeqpropStep, LyapunovVerifiedEachStep) {
  for (bool stabilized : {false, true}) {
    const LinRegModel m(10, stabilized);
    for (auto variant : {NudgeVariant::optimistic(0.5), NudgeVariant::pessimistic(0.5), NudgeVariant::centered(0.5)}) {
      if (!stabilized && variant.beta1 < -0.4) continue;
      AeqpropConfig cfg = exact_config(variant, 0.5, 21);
      cfg.verify_lyapunov = true;
      const auto run = train(m, ParamVector(m.param_layout()), stream(0, 2, 30), cfg, 1);
      ASSERT_FALSE(run.diverged);
      for (const auto& s : run.trace.steps) {
        EXPECT_TRUE(std::isfinite(s.lyapunov_before));
        EXPECT_FALSE(s.lyapunov_violated()) << "step " << s.step;
      }
    }
  }
}

TEST(AeqpropStep, MonitoringPhaseReportsTheLoss) {
  const LinRegModel m(10, true);
  std::mt19937_64 rng(4);
  const ParamVector theta(m.param_layout(), randn(21, rng, 0.3));
  const auto ex = linreg_example(-0.3, 0.7);
  AeqpropConfig cfg = exact_config(NudgeVariant::centered(0.4), 0.1, 21);
  EXPECT_TRUE(std::isnan(aeqprop_step(m, theta, ex, cfg).record.loss));
  cfg.monitor_phase = true;
  EXPECT_NEAR(aeqprop_step(m, theta, ex, cfg).record.loss, verify::loss(m, theta, ex), 1e-12);
}

TEST(AeqpropStep, VariantEqualsLiftedOptimistic) {
  auto m = std::make_shared<LinRegModel>(10, true);
  const double beta = 0.3;
  for (auto variant : {NudgeVariant::pessimistic(beta), NudgeVariant::centered(beta), NudgeVariant(0.1, 0.5)}) {
    const auto lifted = lift_nudge(m, variant.beta1);
    const auto data = stream(1, 3, 20);
    const auto a = train(*m, ParamVector(m->param_layout()), data, exact_config(variant, 0.2, 21), 1);
    const auto b = train(*lifted, ParamVector(m->param_layout()), data,
                         exact_config(NudgeVariant::optimistic(variant.spread()), 0.2, 21), 1);
    EXPECT_LT((a.theta.values() - b.theta.values()).norm(), 1e-10);
  }
}

TEST(AeqpropStep, PerSegmentCouplingScalesThatSegment) {
  const LinRegModel m;
  std::mt19937_64 rng(5);
  const ParamVector theta(m.param_layout(), randn(21, rng, 0.3));
  const auto ex = linreg_example(0.55, -1.2);
  const double eps = 1e-3, beta = 1e-2;
  auto cfg = exact_config(NudgeVariant::optimistic(beta), eps, 21);
  const Vec base = step_delta(m, theta, ex, cfg);
  cfg.coupling = CouplingSpec::per_segment(*m.param_layout(), {eps, 2 * eps});
  const Vec doubled = step_delta(m, theta, ex, cfg);
  const auto& w = m.param_layout()->find("weights");
  EXPECT_NEAR(doubled.segment(w.offset, w.size).norm() / base.segment(w.offset, w.size).norm(), 2.0, 0.1);
  EXPECT_NEAR(doubled[0] / base[0], 1.0, 0.05);
}

TEST(AeqpropStep, CouplingSizeMismatchIsStructural) {
  const LinRegModel m;
  auto cfg = exact_config(NudgeVariant::optimistic(0.1), 0.1, 5);
  EXPECT_THROW((void)aeqprop_step(m, ParamVector(m.param_layout()), linreg_example(0, 0), cfg), StructuralError);
}

TEST(Train, ZeroEpochs) {
  const LinRegModel m;
  std::mt19937_64 rng(6);
  const ParamVector theta(m.param_layout(), randn(21, rng));
  const auto run = train(m, theta, stream(0, 1, 5), exact_config(NudgeVariant::optimistic(0.1), 0.1, 21), 0);
  EXPECT_EQ(run.theta.values(), theta.values());
  EXPECT_TRUE(run.trace.steps.empty());
  EXPECT_FALSE(run.diverged);
}

TEST(Train, DecaysCouplingAndThreshold) {
  const LinRegModel m;
  AeqpropConfig cfg = exact_config(NudgeVariant::optimistic(0.1), 0.1, 21);
  cfg.relaxer = CoordConfig{};
  cfg.adaptive_threshold = true;
  cfg.lr_decay = 0.5;
  const auto run = train(m, ParamVector(m.param_layout()), stream(0, 1, 20), cfg, 3);
  ASSERT_EQ(run.trace.epochs.size(), 3u);
  for (const auto& e : run.trace.epochs) {
    EXPECT_GT(e.mean_phase_gap, 0.0);
    EXPECT_LE(e.xi, 1e-3);
    EXPECT_GE(e.xi, kThresholdFloor);
  }
  // The second epoch runs at half the coupling, so the parameters move less.
  double first = 0.0, second = 0.0;
  for (std::size_t i = 0; i < 20; ++i) first += run.trace.steps[i].dtheta_norm, second += run.trace.steps[20 + i].dtheta_norm;
  EXPECT_LT(second, 0.75 * first);
}

TEST(Train, TracksSgdAtSmallNudge) {
  const LinRegModel m;
  const auto data = stream(0, 1, 1000);
  const ParamVector theta0(m.param_layout());
  AeqpropConfig cfg = exact_config(NudgeVariant::optimistic(0.01), 0.01, 21);
  cfg.relaxer = CoordConfig{};
  const auto ae = train(m, theta0, data, cfg, 1);
  const auto sgd = sgd_baseline(m, theta0, data, Vec::Constant(21, 1e-4), 1);
  const double ratio = tail_mean(ae.trace.steps, 100) / tail_mean(sgd.trace.steps, 100);
  EXPECT_GE(ratio, 0.8);
  EXPECT_LE(ratio, 1.25);
}

TEST(Train, BitIdenticalReruns) {
  const LinRegModel m(10, true);
  AeqpropConfig cfg = exact_config(NudgeVariant::centered(0.5), 0.1, 21);
  cfg.homeostatic = HomeostaticMode::controller;
  cfg.relaxer = GradFlowConfig{};
  cfg.seed = 99;
  cfg.monitor_phase = true;
  const auto a = train(m, ParamVector(m.param_layout()), stream(2, 3, 40), cfg, 2);
  const auto b = train(m, ParamVector(m.param_layout()), stream(2, 3, 40), cfg, 2);
  ASSERT_EQ(a.trace.steps.size(), b.trace.steps.size());
  EXPECT_EQ(a.theta.values(), b.theta.values());
  for (std::size_t i = 0; i < a.trace.steps.size(); ++i) {
    EXPECT_EQ(std::memcmp(&a.trace.steps[i].loss, &b.trace.steps[i].loss, sizeof(double)), 0);
    EXPECT_EQ(a.trace.steps[i].dtheta_norm, b.trace.steps[i].dtheta_norm);
  }
}

TEST(SgdBaseline, FrozenCases) {
  const LinRegModel m;
  std::mt19937_64 rng(7);
  const ParamVector theta(m.param_layout(), randn(21, rng, 0.3));
  auto ex = linreg_example(0.1, 0.0);
  ex.y = m.predict(theta.values(), ex);
  const auto exact_fit = sgd_baseline(m, theta, [&](Index) { return std::vector<Example>{ex, ex}; },
                                      Vec::Constant(21, 0.5), 3);
  EXPECT_LT((exact_fit.theta.values() - theta.values()).norm(), 1e-15);
  const auto frozen = sgd_baseline(m, theta, stream(0, 1, 50), Vec::Zero(21), 2);
  EXPECT_EQ(frozen.theta.values(), theta.values());
  EXPECT_EQ(frozen.trace.steps.size(), 100u);
  EXPECT_THROW((void)sgd_baseline(m, theta, stream(0, 1, 5), Vec::Zero(3), 1), StructuralError);
}

TEST(SgdBaseline, ClosedFormMatchesOracle) {
  const LinRegModel m;
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    const ParamVector theta(m.param_layout(), randn(21, rng, 0.3));
    const auto ex = linreg_example(uniform(1, rng, -1, 1)[0], randn(1, rng)[0]);
    const Vec phi = fourier_features(ex.x[0], 10);
    const Vec by_hand = (theta.values().dot(phi) - ex.y[0]) * phi;
    EXPECT_LT(rel_err(*m.loss_gradient(theta.values(), ex), by_hand), 1e-14);
    EXPECT_LT(rel_err(verify::fd_loss_grad(m, theta, ex), by_hand), 1e-8);
  }
}

TEST(SgdBaseline, DivergesAtLargeRate) {
  const LinRegModel m;
  const auto run = sgd_baseline(m, ParamVector(m.param_layout()), stream(0, 1, 1000), Vec::Constant(21, 0.25), 1);
  EXPECT_TRUE(run.diverged);
  EXPECT_LT(run.trace.steps.size(), 1000u);
}

TEST(EqpropEstimator, SmallNudgeApproximatesLossGradient) {
  const LinRegModel m;
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    const ParamVector theta(m.param_layout(), randn(21, rng, 0.3));
    const auto ex = linreg_example(uniform(1, rng, -1, 1)[0], randn(1, rng)[0]);
    EXPECT_LT(rel_err(eqprop_estimator(m, theta, ex, 1e-4), verify::fd_loss_grad(m, theta, ex)), 1e-2);
  }
}

TEST(EqpropEstimator, IsTheLyapunovGradient) {
  // F(b) = b/(2(1+b)) (p - y)^2 for plain linreg, so dL_{0;b}/dtheta = (p - y) phi / (1 + b).
  const LinRegModel m;
  std::mt19937_64 rng(10);
  for (double beta : {0.05, 0.5, 2.0}) {
    const ParamVector theta(m.param_layout(), randn(21, rng, 0.3));
    const auto ex = linreg_example(uniform(1, rng, -1, 1)[0], randn(1, rng)[0]);
    const Vec phi = fourier_features(ex.x[0], 10);
    const Vec closed = (theta.values().dot(phi) - ex.y[0]) * phi / (1.0 + beta);
    EXPECT_LT(rel_err(eqprop_estimator(m, theta, ex, beta), closed), 1e-6);
    EXPECT_LT(rel_err(verify::lyapunov_gradient(m, theta, ex, 0.0, beta), closed), 1e-6);
  }
}

TEST(EqpropEstimator, ZeroWhenCostIgnoresTheState) {
  const NullModel m(4);
  const ParamVector theta(m.param_layout(), Vec::Ones(4));
  EXPECT_TRUE(eqprop_estimator(m, theta, Example{Vec(), Vec::Zero(1), 1}, 0.3).isZero());
  EXPECT_THROW((void)eqprop_estimator(m, theta, Example{Vec(), Vec::Zero(1), 1}, 0.0), DomainError);
}
