#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace aeqprop {

using Index = Eigen::Index;
using Vec = Eigen::VectorXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Errors

struct StructuralError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

/// Raised when a scalar slice of the energy has no minimizer on its interval
/// (non-positive curvature with an open direction of descent).
struct CurvatureError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Layouts

struct Segment {
  std::string name;
  Index offset = 0;
  Index size = 0;
  std::vector<Index> shape;
  double lower = -kInf;
  double upper = kInf;
};

/// Named, contiguous segments of a flat vector. Segment names are stable so
/// configs and traces can refer to "w1", "b2", "s1", ...
class Layout {
 public:
  Layout() = default;

  Layout& add(std::string name, std::vector<Index> shape, double lower = -kInf,
              double upper = kInf) {
    if (lower > upper) throw StructuralError("segment '" + name + "': lower bound above upper bound");
    for (const auto& s : segments_)
      if (s.name == name) throw StructuralError("duplicate segment '" + name + "'");
    Index n = std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
    if (shape.empty()) n = 0;
    segments_.push_back(Segment{std::move(name), total_, n, std::move(shape), lower, upper});
    total_ += n;
    return *this;
  }

  [[nodiscard]] Index size() const noexcept { return total_; }
  [[nodiscard]] const std::vector<Segment>& segments() const noexcept { return segments_; }
  [[nodiscard]] std::size_t count() const noexcept { return segments_.size(); }
  [[nodiscard]] const Segment& operator[](std::size_t i) const { return segments_.at(i); }

  [[nodiscard]] const Segment& find(const std::string& name) const {
    for (const auto& s : segments_)
      if (s.name == name) return s;
    throw StructuralError("no segment named '" + name + "'");
  }

  [[nodiscard]] bool contains(const std::string& name) const {
    for (const auto& s : segments_)
      if (s.name == name) return true;
    return false;
  }

  /// Per-entry lower/upper bounds expanded from the per-segment boxes.
  [[nodiscard]] Vec lower_bounds() const { return expand([](const Segment& s) { return s.lower; }); }
  [[nodiscard]] Vec upper_bounds() const { return expand([](const Segment& s) { return s.upper; }); }

  /// Broadcasts one scalar per segment to a full-length vector.
  [[nodiscard]] Vec broadcast(const std::vector<double>& per_segment) const {
    if (per_segment.size() != segments_.size())
      throw StructuralError("broadcast: expected " + std::to_string(segments_.size()) + " values, got " +
                            std::to_string(per_segment.size()));
    Vec out(total_);
    for (std::size_t k = 0; k < segments_.size(); ++k)
      out.segment(segments_[k].offset, segments_[k].size).setConstant(per_segment[k]);
    return out;
  }

  [[nodiscard]] bool same_shape(const Layout& other) const {
    if (segments_.size() != other.segments_.size() || total_ != other.total_) return false;
    for (std::size_t k = 0; k < segments_.size(); ++k)
      if (segments_[k].size != other.segments_[k].size || segments_[k].name != other.segments_[k].name)
        return false;
    return true;
  }

 private:
  template <class F>
  Vec expand(F f) const {
    Vec out(total_);
    for (const auto& s : segments_) out.segment(s.offset, s.size).setConstant(f(s));
    return out;
  }

  std::vector<Segment> segments_;
  Index total_ = 0;
};

using LayoutPtr = std::shared_ptr<const Layout>;

/// Flat vector tagged with its role and carrying its segment layout.
template <class Tag>
class FlatVector {
 public:
  FlatVector() : layout_(std::make_shared<Layout>()) {}

  explicit FlatVector(LayoutPtr layout) : layout_(std::move(layout)), values_(Vec::Zero(layout_->size())) {}

  FlatVector(LayoutPtr layout, Vec values) : layout_(std::move(layout)), values_(std::move(values)) {
    if (values_.size() != layout_->size())
      throw StructuralError("vector of length " + std::to_string(values_.size()) + " does not match layout of length " +
                            std::to_string(layout_->size()));
  }

  [[nodiscard]] const Layout& layout() const noexcept { return *layout_; }
  [[nodiscard]] const LayoutPtr& layout_ptr() const noexcept { return layout_; }
  [[nodiscard]] const Vec& values() const noexcept { return values_; }
  [[nodiscard]] Vec& values() noexcept { return values_; }
  [[nodiscard]] Index size() const noexcept { return values_.size(); }

  [[nodiscard]] auto segment(const std::string& name) const {
    const auto& s = layout_->find(name);
    return values_.segment(s.offset, s.size);
  }
  [[nodiscard]] auto segment(const std::string& name) {
    const auto& s = layout_->find(name);
    return values_.segment(s.offset, s.size);
  }

  [[nodiscard]] bool all_finite() const { return values_.allFinite(); }

 private:
  LayoutPtr layout_;
  Vec values_;
};

using ParamVector = FlatVector<struct ParamTag>;
using StateVector = FlatVector<struct StateTag>;
using ControlVector = FlatVector<struct ControlTag>;

/// True when every entry of `s` lies inside the box of its segment.
[[nodiscard]] inline bool within_bounds(const Layout& layout, const Vec& s, double slack = 0.0) {
  for (const auto& seg : layout.segments()) {
    auto v = s.segment(seg.offset, seg.size);
    if ((v.array() < seg.lower - slack).any() || (v.array() > seg.upper + slack).any()) return false;
  }
  return true;
}

/// Projects onto the per-segment boxes; infinite bounds leave entries untouched.
inline void clamp_to_bounds(const Layout& layout, Vec& s) {
  for (const auto& seg : layout.segments()) {
    auto v = s.segment(seg.offset, seg.size);
    v = v.cwiseMax(seg.lower).cwiseMin(seg.upper);
  }
}

// ---------------------------------------------------------------------------
// Examples (input/target pairs, possibly batched)

/// One training example or a mini-batch of `batch` replicas laid out
/// back to back in `x` and `y`.
struct Example {
  Vec x;
  Vec y;
  Index batch = 1;
};

// ---------------------------------------------------------------------------
// Energy model contract

/// The simulated physics: E(theta, x, s), C(s, y) and their partial
/// derivatives. The training procedure never calls these directly; only the
/// relaxation engines (standing in for the physical system) and the oracles do.
class EnergyModel {
 public:
  virtual ~EnergyModel() = default;

  [[nodiscard]] virtual LayoutPtr param_layout() const = 0;
  [[nodiscard]] virtual LayoutPtr state_layout(Index batch) const = 0;

  [[nodiscard]] virtual double energy(const Vec& theta, const Example& ex, const Vec& s) const = 0;
  [[nodiscard]] virtual double cost(const Vec& s, const Example& ex) const = 0;

  [[nodiscard]] virtual Vec grad_s_energy(const Vec& theta, const Example& ex, const Vec& s) const = 0;
  [[nodiscard]] virtual Vec grad_theta_energy(const Vec& theta, const Example& ex, const Vec& s) const = 0;
  [[nodiscard]] virtual Vec grad_s_cost(const Vec& s, const Example& ex) const = 0;

  // -- exact coordinate relaxation support ---------------------------------
  //
  // A model that returns true from exact_coordinate() guarantees that E and C
  // are quadratic in every scalar state and parameter variable, and supplies
  // the per-variable second derivatives. Units inside one state segment must
  // not interact, so a whole segment can be minimized in one shot.

  [[nodiscard]] virtual bool exact_coordinate() const { return false; }

  [[nodiscard]] virtual Vec curvature_s_energy(const Vec& /*theta*/, const Example& /*ex*/, const Vec& /*s*/) const {
    throw StructuralError("model does not supply state curvatures");
  }
  [[nodiscard]] virtual Vec curvature_s_cost(const Vec& /*s*/, const Example& /*ex*/) const {
    throw StructuralError("model does not supply cost curvatures");
  }
  [[nodiscard]] virtual Vec curvature_theta_energy(const Vec& /*theta*/, const Example& /*ex*/,
                                                   const Vec& /*s*/) const {
    throw StructuralError("model does not supply parameter curvatures");
  }

  /// E contains no products of two distinct parameters.
  [[nodiscard]] virtual bool params_decoupled() const { return false; }

  /// Gradient of E + beta*C restricted to state segment `seg`. Models may
  /// override this to avoid computing the full gradient.
  [[nodiscard]] virtual Vec grad_s_total_segment(const Vec& theta, const Example& ex, const Vec& s, double beta,
                                                 const Segment& seg) const {
    Vec g = grad_s_energy(theta, ex, s);
    if (beta != 0.0) g += beta * grad_s_cost(s, ex);
    return g.segment(seg.offset, seg.size);
  }

  /// Closed-form gradient of the loss C(s(theta, x), y), when the model has one.
  [[nodiscard]] virtual std::optional<Vec> loss_gradient(const Vec& /*theta*/, const Example& /*ex*/) const {
    return std::nullopt;
  }

  /// Free equilibrium in closed form, when the model has one.
  [[nodiscard]] virtual std::optional<Vec> free_equilibrium(const Vec& /*theta*/, const Example& /*ex*/) const {
    return std::nullopt;
  }

  /// Starting point for relaxations: projection of 0 onto the state boxes.
  [[nodiscard]] virtual Vec initial_state(const Example& ex) const {
    auto layout = state_layout(ex.batch);
    Vec s = Vec::Zero(layout->size());
    clamp_to_bounds(*layout, s);
    return s;
  }
};

using ModelPtr = std::shared_ptr<const EnergyModel>;

// ---------------------------------------------------------------------------
// Nudging

struct NudgeVariant {
  double beta1 = 0.0;
  double beta2 = 0.0;

  NudgeVariant(double b1, double b2) : beta1(b1), beta2(b2) {
    if (!(b1 < b2)) throw DomainError("nudge variant requires beta1 < beta2");
  }

  static NudgeVariant optimistic(double beta) { return {0.0, beta}; }
  static NudgeVariant pessimistic(double beta) { return {-beta, 0.0}; }
  static NudgeVariant centered(double beta) { return {-beta / 2, beta / 2}; }

  [[nodiscard]] double spread() const noexcept { return beta2 - beta1; }
};

// ---------------------------------------------------------------------------
// Coupling between control knobs u and parameters theta

/// Separable coupling potential rho(u_k, theta_k) applied per component and
/// scaled by 1/eps_k. The default is rho = (u - theta)^2 / 2.
struct CustomCoupling {
  std::function<double(double u, double theta)> value;
  std::function<double(double u, double theta)> dtheta;
  std::function<double(double u, double theta)> d2theta;
  /// Returns u such that dtheta(u, theta) == target.
  std::function<double(double theta, double target)> solve_control;
};

class CouplingSpec {
 public:
  CouplingSpec() = default;

  explicit CouplingSpec(Vec epsilon, std::optional<CustomCoupling> custom = std::nullopt)
      : epsilon_(std::move(epsilon)), custom_(std::move(custom)) {
    if (!(epsilon_.array() > 0.0).all() || !epsilon_.allFinite())
      throw DomainError("coupling strengths must be positive and finite");
  }

  static CouplingSpec scalar(double eps, Index n) { return CouplingSpec(Vec::Constant(n, eps)); }

  static CouplingSpec per_segment(const Layout& layout, const std::vector<double>& eps) {
    return CouplingSpec(layout.broadcast(eps));
  }

  [[nodiscard]] const Vec& epsilon() const noexcept { return epsilon_; }
  [[nodiscard]] bool quadratic() const noexcept { return !custom_.has_value(); }
  [[nodiscard]] Index size() const noexcept { return epsilon_.size(); }

  /// Coupling energy sum_k rho(u_k, theta_k) / eps_k.
  [[nodiscard]] double energy(const Vec& u, const Vec& theta) const {
    check(u, theta);
    if (quadratic()) return 0.5 * ((u - theta).array().square() / epsilon_.array()).sum();
    double acc = 0.0;
    for (Index k = 0; k < u.size(); ++k) acc += custom_->value(u[k], theta[k]) / epsilon_[k];
    return acc;
  }

  [[nodiscard]] Vec grad_theta(const Vec& u, const Vec& theta) const {
    check(u, theta);
    if (quadratic()) return ((theta - u).array() / epsilon_.array()).matrix();
    Vec g(u.size());
    for (Index k = 0; k < u.size(); ++k) g[k] = custom_->dtheta(u[k], theta[k]) / epsilon_[k];
    return g;
  }

  [[nodiscard]] Vec curvature_theta(const Vec& u, const Vec& theta) const {
    check(u, theta);
    if (quadratic()) return epsilon_.cwiseInverse();
    Vec h(u.size());
    for (Index k = 0; k < u.size(); ++k) h[k] = custom_->d2theta(u[k], theta[k]) / epsilon_[k];
    return h;
  }

  /// Control value making theta stationary when the rest of the energy has
  /// gradient `grad_rest` with respect to theta.
  [[nodiscard]] Vec control_for(const Vec& theta, const Vec& grad_rest) const {
    if (theta.size() != epsilon_.size() || grad_rest.size() != epsilon_.size())
      throw StructuralError("control_for: size mismatch");
    if (quadratic()) return theta + epsilon_.cwiseProduct(grad_rest);
    Vec u(theta.size());
    for (Index k = 0; k < theta.size(); ++k) u[k] = custom_->solve_control(theta[k], -epsilon_[k] * grad_rest[k]);
    return u;
  }

  [[nodiscard]] CouplingSpec scaled(double factor) const { return CouplingSpec(epsilon_ * factor, custom_); }

 private:
  void check(const Vec& u, const Vec& theta) const {
    if (u.size() != epsilon_.size() || theta.size() != epsilon_.size())
      throw StructuralError("coupling: control/parameter size mismatch with epsilon (" +
                            std::to_string(epsilon_.size()) + ")");
  }

  Vec epsilon_;
  std::optional<CustomCoupling> custom_;
};

// ---------------------------------------------------------------------------
// Relaxation outcome

struct RelaxOutcome {
  StateVector state;
  std::optional<ParamVector> params;
  std::optional<ControlVector> control;
  Index iterations = 0;
  double residual = 0.0;
  double energy = 0.0;
  bool converged = false;
  /// Single-variable updates that raised the energy (only counted when checked).
  Index monotone_violations = 0;
};

// ---------------------------------------------------------------------------
// Global energy

namespace detail {

inline void check_sizes(const EnergyModel& model, const Vec& theta, const Vec& s, const Example& ex) {
  if (theta.size() != model.param_layout()->size())
    throw StructuralError("parameter vector has length " + std::to_string(theta.size()) + ", model expects " +
                          std::to_string(model.param_layout()->size()));
  if (s.size() != model.state_layout(ex.batch)->size())
    throw StructuralError("state vector has length " + std::to_string(s.size()) + ", model expects " +
                          std::to_string(model.state_layout(ex.batch)->size()));
}

/// E + beta*C on raw vectors.
inline double nudged_energy(const EnergyModel& model, const Vec& theta, const Example& ex, const Vec& s,
                            double beta) {
  double e = model.energy(theta, ex, s);
  if (beta != 0.0) e += beta * model.cost(s, ex);
  return e;
}

inline double total_energy(const EnergyModel& model, const CouplingSpec& coupling, const Vec& u, const Vec& theta,
                           const Example& ex, const Vec& s, double beta) {
  return coupling.energy(u, theta) + nudged_energy(model, theta, ex, s, beta);
}

}  // namespace detail

/// U(u, theta)/eps + E(theta, x, s) + beta * C(s, y).
[[nodiscard]] inline double global_energy(const ControlVector& u, const ParamVector& theta, const StateVector& s,
                                          const Example& ex, const CouplingSpec& coupling, double beta,
                                          const EnergyModel& model) {
  if (!u.layout().same_shape(theta.layout())) throw StructuralError("control and parameter layouts differ");
  detail::check_sizes(model, theta.values(), s.values(), ex);
  const double value = detail::total_energy(model, coupling, u.values(), theta.values(), ex, s.values(), beta);
  if (!std::isfinite(value)) throw NumericError("global energy is not finite");
  return value;
}

// ---------------------------------------------------------------------------
// Nudge lifting

/// E' = E + beta0 * C with the cost unchanged. Running nudges (b1, b2) on a
/// model is the same as running (0, b2 - b1) on the model lifted by b1.
class LiftedModel final : public EnergyModel {
 public:
  LiftedModel(ModelPtr base, double beta0) : base_(std::move(base)), beta0_(beta0) {}

  [[nodiscard]] const ModelPtr& base() const noexcept { return base_; }
  [[nodiscard]] double beta0() const noexcept { return beta0_; }

  LayoutPtr param_layout() const override { return base_->param_layout(); }
  LayoutPtr state_layout(Index batch) const override { return base_->state_layout(batch); }

  double energy(const Vec& theta, const Example& ex, const Vec& s) const override {
    return base_->energy(theta, ex, s) + beta0_ * base_->cost(s, ex);
  }
  double cost(const Vec& s, const Example& ex) const override { return base_->cost(s, ex); }

  Vec grad_s_energy(const Vec& theta, const Example& ex, const Vec& s) const override {
    return base_->grad_s_energy(theta, ex, s) + beta0_ * base_->grad_s_cost(s, ex);
  }
  Vec grad_theta_energy(const Vec& theta, const Example& ex, const Vec& s) const override {
    return base_->grad_theta_energy(theta, ex, s);
  }
  Vec grad_s_cost(const Vec& s, const Example& ex) const override { return base_->grad_s_cost(s, ex); }

  bool exact_coordinate() const override { return base_->exact_coordinate(); }
  Vec curvature_s_energy(const Vec& theta, const Example& ex, const Vec& s) const override {
    return base_->curvature_s_energy(theta, ex, s) + beta0_ * base_->curvature_s_cost(s, ex);
  }
  Vec curvature_s_cost(const Vec& s, const Example& ex) const override { return base_->curvature_s_cost(s, ex); }
  Vec curvature_theta_energy(const Vec& theta, const Example& ex, const Vec& s) const override {
    return base_->curvature_theta_energy(theta, ex, s);
  }
  bool params_decoupled() const override { return base_->params_decoupled(); }

  Vec grad_s_total_segment(const Vec& theta, const Example& ex, const Vec& s, double beta,
                           const Segment& seg) const override {
    return base_->grad_s_total_segment(theta, ex, s, beta + beta0_, seg);
  }

  Vec initial_state(const Example& ex) const override { return base_->initial_state(ex); }

 private:
  ModelPtr base_;
  double beta0_;
};

/// Returns the model with energy E + beta0*C. Lifting an already lifted model
/// folds the offsets together.
[[nodiscard]] inline ModelPtr lift_nudge(ModelPtr model, double beta0) {
  if (beta0 == 0.0) return model;
  if (auto lifted = std::dynamic_pointer_cast<const LiftedModel>(model))
    return std::make_shared<LiftedModel>(lifted->base(), lifted->beta0() + beta0);
  return std::make_shared<LiftedModel>(std::move(model), beta0);
}

}  // namespace aeqprop
