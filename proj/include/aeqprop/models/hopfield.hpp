#pragma once

#include <aeqprop/core.hpp>

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <variant>
#include <vector>

namespace aeqprop::models {

/// Dense interaction E_k = -s_k^T W_k s_{k-1}, W_k stored as (out x in).
struct DenseLink {};

/// Convolutional interaction E_k = -s_k . Pool(w_k * s_{k-1}): valid
/// cross-correlation with a square kernel, then non-overlapping average
/// pooling. Kernel stored as (out_channels, in_channels, k, k).
struct ConvLink {
  Index kernel = 5;
  Index pool = 2;
};

using Link = std::variant<DenseLink, ConvLink>;

/// Tensor shape (channels, height, width). Dense layers use (units, 1, 1).
struct Shape3 {
  Index c = 1, h = 1, w = 1;
  [[nodiscard]] Index size() const noexcept { return c * h * w; }
  bool operator==(const Shape3&) const = default;
};

struct LayerSpec {
  Shape3 shape;
  double lower = 0.0;
  double upper = 1.0;
  Link link = DenseLink{};  // interaction with the layer below
};

namespace conv {

/// Valid cross-correlation followed by average pooling, one replica.
/// `in` has shape `is`, output has shape `os`.
inline void forward(const double* in, const Shape3& is, const double* kernel, Index k, Index pool, double* out,
                    const Shape3& os) {
  const double scale = 1.0 / static_cast<double>(pool * pool);
  for (Index o = 0; o < os.c; ++o)
    for (Index i = 0; i < os.h; ++i)
      for (Index j = 0; j < os.w; ++j) {
        double acc = 0.0;
        for (Index di = 0; di < pool; ++di)
          for (Index dj = 0; dj < pool; ++dj) {
            const Index y0 = i * pool + di, x0 = j * pool + dj;
            for (Index c = 0; c < is.c; ++c) {
              const double* w = kernel + ((o * is.c + c) * k) * k;
              const double* src = in + c * is.h * is.w;
              for (Index p = 0; p < k; ++p) {
                const double* row = src + (y0 + p) * is.w + x0;
                const double* wr = w + p * k;
                for (Index q = 0; q < k; ++q) acc += wr[q] * row[q];
              }
            }
          }
        out[(o * os.h + i) * os.w + j] = acc * scale;
      }
}

/// Adjoint of forward() with respect to the input: accumulates into in_grad.
inline void adjoint_input(const double* g, const Shape3& os, const double* kernel, Index k, Index pool,
                          double* in_grad, const Shape3& is) {
  const double scale = 1.0 / static_cast<double>(pool * pool);
  for (Index o = 0; o < os.c; ++o)
    for (Index i = 0; i < os.h; ++i)
      for (Index j = 0; j < os.w; ++j) {
        const double gv = g[(o * os.h + i) * os.w + j] * scale;
        if (gv == 0.0) continue;
        for (Index di = 0; di < pool; ++di)
          for (Index dj = 0; dj < pool; ++dj) {
            const Index y0 = i * pool + di, x0 = j * pool + dj;
            for (Index c = 0; c < is.c; ++c) {
              const double* w = kernel + ((o * is.c + c) * k) * k;
              double* dst = in_grad + c * is.h * is.w;
              for (Index p = 0; p < k; ++p) {
                double* row = dst + (y0 + p) * is.w + x0;
                const double* wr = w + p * k;
                for (Index q = 0; q < k; ++q) row[q] += gv * wr[q];
              }
            }
          }
      }
}

/// Adjoint of forward() with respect to the kernel: accumulates into kgrad.
inline void adjoint_kernel(const double* g, const Shape3& os, const double* in, const Shape3& is, Index k,
                           Index pool, double* kgrad) {
  const double scale = 1.0 / static_cast<double>(pool * pool);
  for (Index o = 0; o < os.c; ++o)
    for (Index i = 0; i < os.h; ++i)
      for (Index j = 0; j < os.w; ++j) {
        const double gv = g[(o * os.h + i) * os.w + j] * scale;
        if (gv == 0.0) continue;
        for (Index di = 0; di < pool; ++di)
          for (Index dj = 0; dj < pool; ++dj) {
            const Index y0 = i * pool + di, x0 = j * pool + dj;
            for (Index c = 0; c < is.c; ++c) {
              double* w = kgrad + ((o * is.c + c) * k) * k;
              const double* src = in + c * is.h * is.w;
              for (Index p = 0; p < k; ++p) {
                const double* row = src + (y0 + p) * is.w + x0;
                double* wr = w + p * k;
                for (Index q = 0; q < k; ++q) wr[q] += gv * row[q];
              }
            }
          }
      }
}

}  // namespace conv

/// Layered Hopfield-like network
///   E = sum_k 1/2 |s_k|^2 + sum_k E_k(w_k, s_{k-1}, s_k) - sum_k b_k^T s_k,
///   C = |s_N - y|^2,
/// with s_0 = x and every layer confined to its box [lower, upper].
/// Parameters are laid out as w1, b1, w2, b2, ...; states as s1, s2, ...
/// Batches are independent replicas averaged in E and C.
class HopfieldModel final : public EnergyModel {
 public:
  HopfieldModel(Shape3 input, std::vector<LayerSpec> layers) : input_(input), layers_(std::move(layers)) {
    if (layers_.empty()) throw StructuralError("HopfieldModel: at least one layer required");
    auto params = std::make_shared<Layout>();
    Shape3 below = input_;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const auto& L = layers_[k];
      const std::string idx = std::to_string(k + 1);
      if (L.lower > L.upper) throw StructuralError("HopfieldModel: layer " + idx + " has an empty box");
      if (const auto* c = std::get_if<ConvLink>(&L.link)) {
        const Index hc = below.h - c->kernel + 1, wc = below.w - c->kernel + 1;
        if (hc <= 0 || wc <= 0 || hc % c->pool != 0 || wc % c->pool != 0 || hc / c->pool != L.shape.h ||
            wc / c->pool != L.shape.w)
          throw StructuralError("HopfieldModel: conv layer " + idx + " does not chain from the layer below");
        params->add("w" + idx, {L.shape.c, below.c, c->kernel, c->kernel});
      } else {
        params->add("w" + idx, {L.shape.size(), below.size()});
      }
      params->add("b" + idx, {L.shape.size()});
      below = L.shape;
    }
    params_ = std::move(params);
  }

  /// Fully connected network input -> hidden... -> output with the usual boxes
  /// ([0,1] for hidden layers, [-1,2] for the output layer).
  static HopfieldModel dense(Index inputs, const std::vector<Index>& hidden, Index outputs) {
    std::vector<LayerSpec> layers;
    for (Index h : hidden) layers.push_back(LayerSpec{{h, 1, 1}, 0.0, 1.0, DenseLink{}});
    layers.push_back(LayerSpec{{outputs, 1, 1}, -1.0, 2.0, DenseLink{}});
    return HopfieldModel({inputs, 1, 1}, std::move(layers));
  }

  /// 1x28x28 - 32x12x12 - 64x4x4 - 10 convolutional network.
  static HopfieldModel conv_mnist() {
    std::vector<LayerSpec> layers{
        LayerSpec{{32, 12, 12}, 0.0, 1.0, ConvLink{5, 2}},
        LayerSpec{{64, 4, 4}, 0.0, 1.0, ConvLink{5, 2}},
        LayerSpec{{10, 1, 1}, -1.0, 2.0, DenseLink{}},
    };
    return HopfieldModel({1, 28, 28}, std::move(layers));
  }

  [[nodiscard]] const Shape3& input_shape() const noexcept { return input_; }
  [[nodiscard]] const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  [[nodiscard]] std::size_t depth() const noexcept { return layers_.size(); }
  [[nodiscard]] Index output_size() const noexcept { return layers_.back().shape.size(); }

  LayoutPtr param_layout() const override { return params_; }

  LayoutPtr state_layout(Index batch) const override {
    auto layout = std::make_shared<Layout>();
    for (std::size_t k = 0; k < layers_.size(); ++k)
      layout->add("s" + std::to_string(k + 1), {batch, layers_[k].shape.size()}, layers_[k].lower,
                  layers_[k].upper);
    return layout;
  }

  double energy(const Vec& theta, const Example& ex, const Vec& s) const override {
    check(theta, ex, s);
    const double inv_b = 1.0 / static_cast<double>(ex.batch);
    double e = 0.0;
    Index off = 0;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const Index n = layers_[k].shape.size();
      auto sk = state_block(s, off, n, ex.batch);
      e += 0.5 * sk.squaredNorm();
      e -= (bias(theta, k).transpose() * sk).sum();
      e -= (sk.array() * drive_up(theta, ex, s, k).array()).sum();
      off += n * ex.batch;
    }
    return e * inv_b;
  }

  double cost(const Vec& s, const Example& ex) const override {
    const auto out = output_block(s, ex);
    if (ex.y.size() != out.size()) throw StructuralError("HopfieldModel: target size mismatch");
    return (out - Eigen::Map<const Eigen::MatrixXd>(ex.y.data(), out.rows(), out.cols())).squaredNorm() /
           static_cast<double>(ex.batch);
  }

  Vec grad_s_energy(const Vec& theta, const Example& ex, const Vec& s) const override {
    check(theta, ex, s);
    Vec g(s.size());
    Index off = 0;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const Index n = layers_[k].shape.size() * ex.batch;
      g.segment(off, n) = layer_energy_grad(theta, ex, s, k);
      off += n;
    }
    return g;
  }

  Vec grad_s_cost(const Vec& s, const Example& ex) const override {
    Vec g = Vec::Zero(s.size());
    const Index n = output_size() * ex.batch;
    if (ex.y.size() != n) throw StructuralError("HopfieldModel: target size mismatch");
    g.tail(n) = 2.0 * (s.tail(n) - ex.y) / static_cast<double>(ex.batch);
    return g;
  }

  Vec grad_s_total_segment(const Vec& theta, const Example& ex, const Vec& s, double beta,
                           const Segment& seg) const override {
    const auto k = layer_of_offset(seg.offset, ex.batch);
    Vec g = layer_energy_grad(theta, ex, s, k);
    if (beta != 0.0 && k + 1 == layers_.size())
      g += beta * 2.0 * (s.tail(g.size()) - ex.y) / static_cast<double>(ex.batch);
    return g;
  }

  Vec grad_theta_energy(const Vec& theta, const Example& ex, const Vec& s) const override {
    check(theta, ex, s);
    const double inv_b = 1.0 / static_cast<double>(ex.batch);
    Vec g = Vec::Zero(theta.size());
    Index off = 0;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const auto& L = layers_[k];
      const Index n = L.shape.size();
      auto sk = state_block(s, off, n, ex.batch);
      const auto& wseg = (*params_)[2 * k];
      const auto& bseg = (*params_)[2 * k + 1];
      g.segment(bseg.offset, bseg.size) = -sk.rowwise().sum() * inv_b;
      const Shape3 below_shape = k == 0 ? input_ : layers_[k - 1].shape;
      const double* below = k == 0 ? ex.x.data() : s.data() + off - below_shape.size() * ex.batch;
      if (const auto* c = std::get_if<ConvLink>(&L.link)) {
        Vec kg = Vec::Zero(wseg.size);
        for (Index b = 0; b < ex.batch; ++b)
          conv::adjoint_kernel(sk.col(b).data(), L.shape, below + b * below_shape.size(), below_shape, c->kernel,
                               c->pool, kg.data());
        g.segment(wseg.offset, wseg.size) = -kg * inv_b;
      } else {
        Eigen::Map<const Eigen::MatrixXd> prev(below, below_shape.size(), ex.batch);
        Eigen::Map<Eigen::MatrixXd> gw(g.data() + wseg.offset, n, below_shape.size());
        gw.noalias() = -(sk * prev.transpose()) * inv_b;
      }
      off += n * ex.batch;
    }
    return g;
  }

  bool exact_coordinate() const override { return true; }

  Vec curvature_s_energy(const Vec&, const Example& ex, const Vec& s) const override {
    return Vec::Constant(s.size(), 1.0 / static_cast<double>(ex.batch));
  }

  Vec curvature_s_cost(const Vec& s, const Example& ex) const override {
    Vec h = Vec::Zero(s.size());
    h.tail(output_size() * ex.batch).setConstant(2.0 / static_cast<double>(ex.batch));
    return h;
  }

  Vec curvature_theta_energy(const Vec& theta, const Example&, const Vec&) const override {
    return Vec::Zero(theta.size());
  }

  bool params_decoupled() const override { return true; }

  /// Index of the largest output unit per replica.
  [[nodiscard]] std::vector<Index> predict_labels(const Vec& s, Index batch) const {
    Example shape_only{Vec(), Vec(), batch};
    const auto out = output_block(s, shape_only);
    std::vector<Index> labels(static_cast<std::size_t>(batch));
    for (Index b = 0; b < batch; ++b) out.col(b).maxCoeff(&labels[static_cast<std::size_t>(b)]);
    return labels;
  }

  /// Drive received by layer k from the layer below: W_k s_{k-1} (dense) or
  /// Pool(w_k * s_{k-1}) (conv). One column per replica.
  [[nodiscard]] Eigen::MatrixXd drive_up(const Vec& theta, const Example& ex, const Vec& s, std::size_t k) const {
    const auto& L = layers_[k];
    const Shape3 below_shape = k == 0 ? input_ : layers_[k - 1].shape;
    const double* below = k == 0 ? ex.x.data() : s.data() + layer_offset(k - 1, ex.batch);
    const auto& wseg = (*params_)[2 * k];
    Eigen::MatrixXd out(L.shape.size(), ex.batch);
    if (const auto* c = std::get_if<ConvLink>(&L.link)) {
      for (Index b = 0; b < ex.batch; ++b)
        conv::forward(below + b * below_shape.size(), below_shape, theta.data() + wseg.offset, c->kernel, c->pool,
                      out.col(b).data(), L.shape);
    } else {
      Eigen::Map<const Eigen::MatrixXd> w(theta.data() + wseg.offset, L.shape.size(), below_shape.size());
      Eigen::Map<const Eigen::MatrixXd> prev(below, below_shape.size(), ex.batch);
      out.noalias() = w * prev;
    }
    return out;
  }

  /// Feedback received by layer k from layer k+1 (transpose of its drive).
  [[nodiscard]] Eigen::MatrixXd drive_down(const Vec& theta, const Example& ex, const Vec& s, std::size_t k) const {
    const auto& L = layers_[k];
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(L.shape.size(), ex.batch);
    if (k + 1 >= layers_.size()) return out;
    const auto& U = layers_[k + 1];
    const double* above = s.data() + layer_offset(k + 1, ex.batch);
    const auto& wseg = (*params_)[2 * (k + 1)];
    if (const auto* c = std::get_if<ConvLink>(&U.link)) {
      for (Index b = 0; b < ex.batch; ++b)
        conv::adjoint_input(above + b * U.shape.size(), U.shape, theta.data() + wseg.offset, c->kernel, c->pool,
                            out.col(b).data(), L.shape);
    } else {
      Eigen::Map<const Eigen::MatrixXd> w(theta.data() + wseg.offset, U.shape.size(), L.shape.size());
      Eigen::Map<const Eigen::MatrixXd> next(above, U.shape.size(), ex.batch);
      out.noalias() = w.transpose() * next;
    }
    return out;
  }

 private:
  using ConstBlock = Eigen::Map<const Eigen::MatrixXd>;

  void check(const Vec& theta, const Example& ex, const Vec& s) const {
    if (theta.size() != params_->size()) throw StructuralError("HopfieldModel: parameter size mismatch");
    if (ex.x.size() != input_.size() * ex.batch) throw StructuralError("HopfieldModel: input size mismatch");
    if (s.size() != state_size(ex.batch)) throw StructuralError("HopfieldModel: state size mismatch");
  }

  [[nodiscard]] Index state_size(Index batch) const {
    Index n = 0;
    for (const auto& L : layers_) n += L.shape.size() * batch;
    return n;
  }

  [[nodiscard]] Index layer_offset(std::size_t k, Index batch) const {
    Index off = 0;
    for (std::size_t j = 0; j < k; ++j) off += layers_[j].shape.size() * batch;
    return off;
  }

  [[nodiscard]] std::size_t layer_of_offset(Index offset, Index batch) const {
    Index off = 0;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      if (off == offset) return k;
      off += layers_[k].shape.size() * batch;
    }
    throw StructuralError("HopfieldModel: offset does not start a layer");
  }

  static ConstBlock state_block(const Vec& s, Index off, Index n, Index batch) {
    return ConstBlock(s.data() + off, n, batch);
  }

  [[nodiscard]] ConstBlock output_block(const Vec& s, const Example& ex) const {
    const Index n = output_size();
    if (s.size() < n * ex.batch) throw StructuralError("HopfieldModel: state size mismatch");
    return ConstBlock(s.data() + s.size() - n * ex.batch, n, ex.batch);
  }

  [[nodiscard]] Eigen::VectorBlock<const Vec> bias(const Vec& theta, std::size_t k) const {
    const auto& seg = (*params_)[2 * k + 1];
    return theta.segment(seg.offset, seg.size);
  }

  /// dE/ds_k (batch-averaged), flattened.
  [[nodiscard]] Vec layer_energy_grad(const Vec& theta, const Example& ex, const Vec& s, std::size_t k) const {
    const Index n = layers_[k].shape.size();
    auto sk = state_block(s, layer_offset(k, ex.batch), n, ex.batch);
    Eigen::MatrixXd g = sk - drive_up(theta, ex, s, k) - drive_down(theta, ex, s, k);
    g.colwise() -= bias(theta, k);
    g /= static_cast<double>(ex.batch);
    return Eigen::Map<const Vec>(g.data(), g.size());
  }

  Shape3 input_;
  std::vector<LayerSpec> layers_;
  LayoutPtr params_;
};

/// Parameter initialization: dense weights ~ U(-c, c) with
/// c = (gain/2) sqrt(6 / (fan_in + fan_out)); conv kernels ~ N(0, c) with
/// c = (gain/2) sqrt(1 / fan_in) as standard deviation; biases zero.
[[nodiscard]] inline ParamVector init_params(const HopfieldModel& model, const std::vector<double>& gains,
                                             std::uint64_t seed) {
  if (gains.size() != model.depth())
    throw StructuralError("init_params: expected " + std::to_string(model.depth()) + " gains, got " +
                          std::to_string(gains.size()));
  ParamVector theta(model.param_layout());
  std::mt19937_64 rng(seed);
  Shape3 below = model.input_shape();
  for (std::size_t k = 0; k < model.depth(); ++k) {
    const auto& L = model.layers()[k];
    auto w = theta.segment("w" + std::to_string(k + 1));
    if (const auto* c = std::get_if<ConvLink>(&L.link)) {
      const double fan_in = static_cast<double>(below.c * c->kernel * c->kernel);
      const double sd = gains[k] / 2.0 * std::sqrt(1.0 / fan_in);
      if (sd > 0.0) {
        std::normal_distribution<double> normal(0.0, sd);
        for (Index i = 0; i < w.size(); ++i) w[i] = normal(rng);
      }
    } else {
      const double fan_in = static_cast<double>(below.size());
      const double fan_out = static_cast<double>(L.shape.size());
      const double bound = gains[k] / 2.0 * std::sqrt(6.0 / (fan_in + fan_out));
      if (bound > 0.0) {
        std::uniform_real_distribution<double> uniform(-bound, bound);
        for (Index i = 0; i < w.size(); ++i) w[i] = uniform(rng);
      }
    }
    below = L.shape;
  }
  return theta;
}

/// Per-segment coupling strengths eps = lr / beta for weights and biases of
/// each layer (w1, b1, w2, b2, ...).
[[nodiscard]] inline std::vector<double> per_layer_epsilon(const std::vector<double>& lr_weights,
                                                           const std::vector<double>& lr_biases, double beta) {
  if (lr_weights.size() != lr_biases.size()) throw StructuralError("per_layer_epsilon: rate lists differ in length");
  std::vector<double> eps;
  for (std::size_t k = 0; k < lr_weights.size(); ++k) {
    eps.push_back(lr_weights[k] / beta);
    eps.push_back(lr_biases[k] / beta);
  }
  return eps;
}

}  // namespace aeqprop::models
