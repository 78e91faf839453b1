#pragma once

#include <aeqprop/core.hpp>
#include <aeqprop/data/idx.hpp>
#include <aeqprop/models/features.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace aeqprop::data {

/// Images in [0, 1] with integer labels 0..9.
struct LabeledImageSet {
  Index rows = 28;
  Index cols = 28;
  std::vector<double> pixels;  // count * rows * cols
  std::vector<int> labels;

  [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
  [[nodiscard]] Index image_size() const noexcept { return rows * cols; }

  [[nodiscard]] Vec image(std::size_t i) const {
    return Eigen::Map<const Vec>(pixels.data() + static_cast<std::ptrdiff_t>(i) * image_size(), image_size());
  }

  [[nodiscard]] static Vec one_hot(int label, Index classes = 10) {
    Vec y = Vec::Zero(classes);
    y[label] = 1.0;
    return y;
  }

  /// First n items (or all of them).
  [[nodiscard]] LabeledImageSet head(std::size_t n) const {
    n = std::min(n, size());
    LabeledImageSet out{rows, cols, {}, {}};
    out.pixels.assign(pixels.begin(), pixels.begin() + static_cast<std::ptrdiff_t>(n * image_size()));
    out.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
    return out;
  }
};

[[nodiscard]] inline LabeledImageSet make_image_set(const IdxArray& images, const IdxArray& labels) {
  if (images.dims.size() != 3) throw ParseError("image file must have three dimensions", 3);
  if (labels.dims.size() != 1) throw ParseError("label file must have one dimension", 3);
  if (images.dims[0] != labels.dims[0]) throw StructuralError("image and label counts differ");
  LabeledImageSet out;
  out.rows = images.dims[1];
  out.cols = images.dims[2];
  out.pixels = images.normalized();
  out.labels.reserve(labels.data.size());
  for (auto l : labels.data) {
    if (l > 9) throw StructuralError("label out of range 0..9");
    out.labels.push_back(l);
  }
  return out;
}

/// Dataset root from AEQPROP_DATA, if set.
[[nodiscard]] inline std::optional<std::filesystem::path> dataset_root_from_env() {
  if (const char* root = std::getenv("AEQPROP_DATA"); root && *root) return std::filesystem::path(root);
  return std::nullopt;
}

/// Finds `<root>/<stem>` or `<root>/<stem>.gz`.
[[nodiscard]] inline std::optional<std::filesystem::path> find_idx(const std::filesystem::path& root,
                                                                  const std::string& stem) {
  for (const auto& name : {stem, stem + ".gz"}) {
    auto p = root / name;
    if (std::filesystem::exists(p)) return p;
  }
  return std::nullopt;
}

/// MNIST-layout split ("train" or "t10k") from a directory, if both files exist.
[[nodiscard]] inline std::optional<LabeledImageSet> load_mnist(const std::filesystem::path& root,
                                                              const std::string& split) {
  const auto images = find_idx(root, split + "-images-idx3-ubyte");
  const auto labels = find_idx(root, split + "-labels-idx1-ubyte");
  if (!images || !labels) return std::nullopt;
  return make_image_set(load_idx(*images), load_idx(*labels));
}

/// Shuffled mini-batches for one epoch; the last partial batch is kept.
[[nodiscard]] inline std::vector<Example> batches(const LabeledImageSet& set, std::size_t batch_size,
                                                  std::uint64_t seed, Index epoch) {
  if (batch_size == 0) throw DomainError("batches: batch size must be at least one");
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(epoch));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Example> out;
  const Index d = set.image_size();
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, order.size() - start);
    Example ex{Vec(d * static_cast<Index>(n)), Vec::Zero(10 * static_cast<Index>(n)), static_cast<Index>(n)};
    for (std::size_t j = 0; j < n; ++j) {
      const auto i = order[start + j];
      ex.x.segment(static_cast<Index>(j) * d, d) = set.image(i);
      ex.y[static_cast<Index>(j) * 10 + set.labels[i]] = 1.0;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

/// Consecutive (unshuffled) batches, for evaluation.
[[nodiscard]] inline std::vector<Example> sequential_batches(const LabeledImageSet& set, std::size_t batch_size) {
  std::vector<Example> out;
  const Index d = set.image_size();
  for (std::size_t start = 0; start < set.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, set.size() - start);
    Example ex{Vec(d * static_cast<Index>(n)), Vec::Zero(10 * static_cast<Index>(n)), static_cast<Index>(n)};
    for (std::size_t j = 0; j < n; ++j) {
      ex.x.segment(static_cast<Index>(j) * d, d) = set.image(start + j);
      ex.y[static_cast<Index>(j) * 10 + set.labels[start + j]] = 1.0;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

/// Samples (z, f(z)) with z ~ U[-1, 1], deterministic under the seed.
struct RegressionStream {
  models::LegendreTarget target;
  std::uint64_t seed = 0;

  [[nodiscard]] std::vector<Example> draw(std::size_t n) const {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uniform(-1.0, 1.0);
    std::vector<Example> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double z = uniform(rng);
      out.push_back(Example{Vec::Constant(1, z), Vec::Constant(1, target(z)), 1});
    }
    return out;
  }
};

}  // namespace aeqprop::data
