#pragma once

#include <aeqprop/models/hopfield.hpp>
#include <aeqprop/models/linreg.hpp>
#include <aeqprop/verify/theorem_suite.hpp>

#include <random>
#include <vector>

namespace aeqprop::verify {

/// Random linear-regression instances: theta ~ N(0, theta_scale^2) per
/// component, z ~ U[-1, 1], y ~ N(0, 1).
[[nodiscard]] inline std::vector<Instance> linreg_instances(const models::LinRegModel& model, std::size_t n,
                                                            std::uint64_t seed, double theta_scale = 0.3,
                                                            Index batch = 1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);
  std::vector<Instance> out;
  for (std::size_t i = 0; i < n; ++i) {
    ParamVector theta(model.param_layout());
    for (Index k = 0; k < theta.size(); ++k) theta.values()[k] = theta_scale * normal(rng);
    Example ex{Vec(batch), Vec(batch), batch};
    for (Index b = 0; b < batch; ++b) {
      ex.x[b] = uniform(rng);
      ex.y[b] = normal(rng);
    }
    out.push_back({std::move(theta), std::move(ex)});
  }
  return out;
}

/// Random dense Hopfield instances: initialized parameters (unit gains),
/// inputs U[0, 1], one-hot targets.
[[nodiscard]] inline std::vector<Instance> hopfield_instances(const models::HopfieldModel& model, std::size_t n,
                                                              std::uint64_t seed, double gain = 1.0,
                                                              Index batch = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const Index in = model.input_shape().size();
  const Index out_n = model.output_size();
  std::vector<Instance> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto theta = models::init_params(model, std::vector<double>(model.depth(), gain), rng());
    Example ex{Vec(in * batch), Vec::Zero(out_n * batch), batch};
    for (Index k = 0; k < ex.x.size(); ++k) ex.x[k] = uniform(rng);
    for (Index b = 0; b < batch; ++b) ex.y[b * out_n + static_cast<Index>(rng() % static_cast<std::uint64_t>(out_n))] = 1.0;
    out.push_back({std::move(theta), std::move(ex)});
  }
  return out;
}

}  // namespace aeqprop::verify
