#pragma once

#include <aeqprop/core.hpp>
#include <aeqprop/models/features.hpp>

namespace aeqprop::models {

/// Linear regression on Fourier features as an energy model:
///   E = 1/2 (s - theta . phi(x))^2   [+ s^2 when regularize_state]
///   C = 1/2 (s - y)^2
/// Batches are independent replicas; E and C are averaged over the batch.
class LinRegModel final : public EnergyModel {
 public:
  explicit LinRegModel(Index n_freq = 10, bool regularize_state = false)
      : n_freq_(n_freq), regularize_(regularize_state) {
    if (n_freq < 0) throw DomainError("LinRegModel: negative frequency count");
    auto layout = std::make_shared<Layout>();
    layout->add("bias", {1}).add("weights", {2 * n_freq});
    params_ = std::move(layout);
  }

  [[nodiscard]] Index n_freq() const noexcept { return n_freq_; }
  [[nodiscard]] Index feature_count() const noexcept { return 2 * n_freq_ + 1; }
  [[nodiscard]] bool regularize_state() const noexcept { return regularize_; }

  LayoutPtr param_layout() const override { return params_; }

  LayoutPtr state_layout(Index batch) const override {
    auto layout = std::make_shared<Layout>();
    layout->add("s", {batch});
    return layout;
  }

  /// Feature matrix, one column per replica.
  [[nodiscard]] Eigen::MatrixXd features(const Example& ex) const {
    check_example(ex);
    Eigen::MatrixXd phi(feature_count(), ex.batch);
    for (Index b = 0; b < ex.batch; ++b) phi.col(b) = fourier_features(ex.x[b], n_freq_);
    return phi;
  }

  /// theta . phi(x) per replica.
  [[nodiscard]] Vec predict(const Vec& theta, const Example& ex) const { return features(ex).transpose() * theta; }

  double energy(const Vec& theta, const Example& ex, const Vec& s) const override {
    const Vec r = s - predict(theta, ex);
    double e = 0.5 * r.squaredNorm();
    if (regularize_) e += s.squaredNorm();
    return e / static_cast<double>(ex.batch);
  }

  double cost(const Vec& s, const Example& ex) const override {
    check_example(ex);
    return 0.5 * (s - ex.y).squaredNorm() / static_cast<double>(ex.batch);
  }

  Vec grad_s_energy(const Vec& theta, const Example& ex, const Vec& s) const override {
    Vec g = s - predict(theta, ex);
    if (regularize_) g += 2.0 * s;
    return g / static_cast<double>(ex.batch);
  }

  Vec grad_theta_energy(const Vec& theta, const Example& ex, const Vec& s) const override {
    const auto phi = features(ex);
    const Vec r = s - phi.transpose() * theta;
    return -(phi * r) / static_cast<double>(ex.batch);
  }

  Vec grad_s_cost(const Vec& s, const Example& ex) const override {
    check_example(ex);
    return (s - ex.y) / static_cast<double>(ex.batch);
  }

  bool exact_coordinate() const override { return true; }

  Vec curvature_s_energy(const Vec&, const Example& ex, const Vec&) const override {
    return Vec::Constant(ex.batch, (regularize_ ? 3.0 : 1.0) / static_cast<double>(ex.batch));
  }
  Vec curvature_s_cost(const Vec&, const Example& ex) const override {
    return Vec::Constant(ex.batch, 1.0 / static_cast<double>(ex.batch));
  }
  Vec curvature_theta_energy(const Vec&, const Example& ex, const Vec&) const override {
    return features(ex).array().square().rowwise().sum().matrix() / static_cast<double>(ex.batch);
  }

  std::optional<Vec> free_equilibrium(const Vec& theta, const Example& ex) const override {
    Vec p = predict(theta, ex);
    if (regularize_) p /= 3.0;
    return p;
  }

  std::optional<Vec> loss_gradient(const Vec& theta, const Example& ex) const override {
    const auto phi = features(ex);
    const double shrink = regularize_ ? 1.0 / 3.0 : 1.0;
    const Vec r = shrink * (phi.transpose() * theta) - ex.y;
    return shrink * (phi * r) / static_cast<double>(ex.batch);
  }

 private:
  void check_example(const Example& ex) const {
    if (ex.x.size() != ex.batch || ex.y.size() != ex.batch)
      throw StructuralError("LinRegModel: example must carry one scalar input and target per replica");
  }

  Index n_freq_;
  bool regularize_;
  LayoutPtr params_;
};

}  // namespace aeqprop::models
