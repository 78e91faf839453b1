#pragma once

#include <aeqprop/core.hpp>
#include <aeqprop/relax.hpp>
#include <aeqprop/train.hpp>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <zlib.h>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace aeqprop::cli {

/// Invalid configuration; `field` is the dotted path of the offending key.
struct ConfigError : std::runtime_error {
  ConfigError(std::string field_path, const std::string& msg)
      : std::runtime_error(field_path.empty() ? msg : field_path + ": " + msg), field(std::move(field_path)) {}
  std::string field;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
std::string to_text(const T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_same_v<T, double>) {
    return format_double(v);
  } else if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<T, std::vector<double>>) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + format_double(v[i]);
    return out;
  } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + v[i];
    return out;
  } else {
    return std::to_string(v);
  }
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace detail

/// Typed access to an INI tree. Every key read is recorded with its resolved
/// value (defaults included); keys never read are reported as unknown.
class ConfigReader {
 public:
  explicit ConfigReader(boost::property_tree::ptree tree) : tree_(std::move(tree)) {}

  template <class T>
  T get(const std::string& path, const T& fallback) {
    const auto raw = tree_.get_optional<std::string>(path);
    T value = raw ? parse<T>(path, detail::trim(*raw)) : fallback;
    record(path, value);
    return value;
  }

  template <class T>
  T required(const std::string& path) {
    const auto raw = tree_.get_optional<std::string>(path);
    if (!raw) throw ConfigError(path, "required field is missing");
    T value = parse<T>(path, detail::trim(*raw));
    record(path, value);
    return value;
  }

  [[nodiscard]] bool has(const std::string& path) const { return tree_.get_optional<std::string>(path).has_value(); }
  [[nodiscard]] bool has_section(const std::string& name) const { return tree_.find(name) != tree_.not_found(); }

  /// Keys of a section, for free-form maps such as per-segment couplings.
  [[nodiscard]] std::vector<std::string> keys(const std::string& section) const {
    std::vector<std::string> out;
    if (auto child = tree_.get_child_optional(section))
      for (const auto& kv : *child) out.push_back(kv.first);
    return out;
  }

  /// Throws on the first key that was never read.
  void reject_unknown() const {
    for (const auto& [section, child] : tree_) {
      if (child.empty()) throw ConfigError(section, "key outside any section");
      for (const auto& kv : child) {
        const std::string path = section + "." + kv.first;
        if (!used_.count(path)) throw ConfigError(path, "unknown field");
      }
    }
  }

  [[nodiscard]] const boost::property_tree::ptree& resolved() const noexcept { return resolved_; }

 private:
  template <class T>
  T parse(const std::string& path, const std::string& text) const {
    auto fail = [&](const char* what) -> ConfigError {
      return ConfigError(path, std::string("cannot parse '") + text + "' as " + what);
    };
    if constexpr (std::is_same_v<T, bool>) {
      if (text == "true" || text == "yes" || text == "1") return true;
      if (text == "false" || text == "no" || text == "0") return false;
      throw fail("a boolean");
    } else if constexpr (std::is_same_v<T, double>) {
      double v = 0.0;
      const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
      if (r.ec != std::errc() || r.ptr != text.data() + text.size()) throw fail("a number");
      return v;
    } else if constexpr (std::is_integral_v<T>) {
      T v{};
      const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
      if (r.ec != std::errc() || r.ptr != text.data() + text.size()) throw fail("an integer");
      return v;
    } else if constexpr (std::is_same_v<T, std::string>) {
      return text;
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      std::vector<double> out;
      for (const auto& item : detail::split_list(text)) out.push_back(parse<double>(path, item));
      return out;
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      return detail::split_list(text);
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
  }

  template <class T>
  void record(const std::string& path, const T& value) {
    used_.insert(path);
    resolved_.put(path, detail::to_text(value));
  }

  boost::property_tree::ptree tree_;
  boost::property_tree::ptree resolved_;
  std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// Experiment configuration

enum class ExperimentKind { linreg, linreg_grid, hopfield_dense, hopfield_conv, verify };

inline const std::map<std::string, ExperimentKind>& experiment_names() {
  static const std::map<std::string, ExperimentKind> names{{"linreg", ExperimentKind::linreg},
                                                           {"linreg_grid", ExperimentKind::linreg_grid},
                                                           {"hopfield_dense", ExperimentKind::hopfield_dense},
                                                           {"hopfield_conv", ExperimentKind::hopfield_conv},
                                                           {"verify", ExperimentKind::verify}};
  return names;
}

inline std::string to_string(ExperimentKind k) {
  for (const auto& [name, kind] : experiment_names())
    if (kind == k) return name;
  return "unknown";
}

/// Optimizer settings shared by all experiments. `variant` is one of
/// optimistic, pessimistic, centered or sgd (the plain-gradient reference).
struct AlgorithmConfig {
  std::string variant = "optimistic";
  double beta = 0.01;
  double epsilon = 0.01;
  std::map<std::string, double> epsilon_segments;  // overrides `epsilon` per segment
  HomeostaticMode homeostatic = HomeostaticMode::analytic;
  RelaxerConfig relaxer = CoordConfig{};
  bool adaptive_threshold = false;
  double lr_decay = 1.0;
  bool verify_lyapunov = false;
  std::size_t lyapunov_nodes = 21;

  [[nodiscard]] bool is_sgd() const { return variant == "sgd"; }
  [[nodiscard]] NudgeVariant nudge() const {
    if (variant == "pessimistic") return NudgeVariant::pessimistic(beta);
    if (variant == "centered") return NudgeVariant::centered(beta);
    return NudgeVariant::optimistic(beta);
  }
};

struct LinregConfig {
  Index n_freq = 10;
  Index degree = 10;
  bool stabilize = false;
  std::size_t samples = 1000;
  Index epochs = 1;
  std::uint64_t target_seed = 0;
  std::uint64_t sample_seed = 1;
};

struct GridConfig {
  std::vector<double> epsilons{0.5, 0.1, 0.01};
  std::vector<double> betas{0.5, 0.1, 0.01};
  std::vector<std::string> variants{"sgd", "optimistic", "pessimistic", "centered"};
  /// Second grid on the stabilized model, one row at a single large beta.
  bool stabilized = true;
  double stabilized_beta = 1.5;
  std::size_t stabilized_samples = 5000;
  std::size_t threads = 0;  // 0: hardware concurrency
};

struct HopfieldConfig {
  std::vector<double> hidden{500};
  std::vector<double> lr_weights{0.1, 0.05};
  std::vector<double> lr_biases{0.02, 0.01};
  std::vector<double> gains{0.8, 1.2};
  std::size_t batch_size = 32;
  Index epochs = 1;
  std::size_t train_limit = 0;  // 0: whole training set
  std::size_t test_limit = 0;
  std::string data_dir;         // empty: AEQPROP_DATA
  std::uint64_t init_seed = 0;
  bool evaluate_train = false;
};

struct VerifyConfig {
  std::string model = "linreg";  // linreg, linreg_stabilized, hopfield_small
  std::size_t instances = 3;
  std::uint64_t seed = 7;
  double eps = 1e-2;
  double beta = 1e-2;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::linreg;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  AlgorithmConfig algorithm;
  LinregConfig linreg;
  GridConfig grid;
  HopfieldConfig hopfield;
  VerifyConfig verify;
  bool run_suite = false;

  /// INI text of every resolved field, defaults included.
  std::string resolved_text;
  /// CRC-32 of resolved_text as eight hex digits.
  std::string hash;
};

namespace detail {

inline void check_positive(const std::string& path, double v) {
  if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(path, "must be a positive finite number");
}

inline void check_variant(const std::string& path, const std::string& v, bool allow_sgd = true) {
  if (v == "optimistic" || v == "pessimistic" || v == "centered" || (allow_sgd && v == "sgd")) return;
  throw ConfigError(path, "unknown variant '" + v + "' (optimistic, pessimistic, centered" +
                              (allow_sgd ? ", sgd)" : ")"));
}

inline std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

inline void read_algorithm(ConfigReader& r, AlgorithmConfig& a, ExperimentKind kind) {
  const bool hopfield = kind == ExperimentKind::hopfield_dense || kind == ExperimentKind::hopfield_conv;
  a.variant = r.get<std::string>("algorithm.variant", hopfield ? "centered" : a.variant);
  check_variant("algorithm.variant", a.variant, !hopfield);
  a.beta = r.get<double>("algorithm.beta", kind == ExperimentKind::hopfield_dense  ? 0.5
                                           : kind == ExperimentKind::hopfield_conv ? 0.2
                                                                                   : a.beta);
  check_positive("algorithm.beta", a.beta);
  if (!hopfield) {
    a.epsilon = r.get<double>("algorithm.epsilon", a.epsilon);
    check_positive("algorithm.epsilon", a.epsilon);
    for (const auto& key : r.keys("epsilon")) {
      const double v = r.required<double>("epsilon." + key);
      check_positive("epsilon." + key, v);
      a.epsilon_segments[key] = v;
    }
  }
  const auto homeo = r.get<std::string>("algorithm.homeostatic", "analytic");
  if (homeo == "analytic") a.homeostatic = HomeostaticMode::analytic;
  else if (homeo == "controller") a.homeostatic = HomeostaticMode::controller;
  else throw ConfigError("algorithm.homeostatic", "expected 'analytic' or 'controller', got '" + homeo + "'");
  a.lr_decay = r.get<double>("algorithm.lr_decay", hopfield ? 0.99 : 1.0);
  check_positive("algorithm.lr_decay", a.lr_decay);
  a.verify_lyapunov = r.get<bool>("algorithm.verify_lyapunov", false);
  a.lyapunov_nodes = r.get<std::size_t>("algorithm.lyapunov_nodes", 21);
  if (a.lyapunov_nodes < 2) throw ConfigError("algorithm.lyapunov_nodes", "need at least two nodes");

  const auto relaxer = r.get<std::string>("relax.engine", hopfield ? "coordinate" : "gradflow");
  if (relaxer == "coordinate") {
    CoordConfig c;
    c.max_iters = r.get<Index>("relax.max_iters", c.max_iters);
    c.threshold = r.get<double>("relax.threshold", c.threshold);
    c.check_monotone = r.get<bool>("relax.check_monotone", false);
    if (c.max_iters < 1) throw ConfigError("relax.max_iters", "must be at least 1");
    check_positive("relax.threshold", c.threshold);
    a.relaxer = c;
    a.adaptive_threshold = r.get<bool>("relax.adaptive_threshold", hopfield);
  } else if (relaxer == "gradflow") {
    GradFlowConfig g;
    g.n_steps = r.get<Index>("relax.steps", g.n_steps);
    g.eta_s0 = r.get<double>("relax.eta_state", g.eta_s0);
    g.eta_theta0 = r.get<double>("relax.eta_params", g.eta_theta0);
    if (g.n_steps < 1) throw ConfigError("relax.steps", "must be at least 1");
    check_positive("relax.eta_state", g.eta_s0);
    check_positive("relax.eta_params", g.eta_theta0);
    a.relaxer = g;
  } else {
    throw ConfigError("relax.engine", "expected 'coordinate' or 'gradflow', got '" + relaxer + "'");
  }
}

}  // namespace detail

/// Parses and validates an INI configuration. Nothing is computed before
/// the whole file has been checked.
[[nodiscard]] inline ExperimentConfig parse_config_text(const std::string& text) {
  boost::property_tree::ptree tree;
  try {
    std::istringstream in(text);
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("", std::string("malformed config: ") + e.message() + " (line " + std::to_string(e.line()) +
                              ")");
  }
  ConfigReader r(tree);
  ExperimentConfig cfg;
  const auto kind = r.required<std::string>("experiment.kind");
  const auto it = experiment_names().find(kind);
  if (it == experiment_names().end()) throw ConfigError("experiment.kind", "unknown experiment '" + kind + "'");
  cfg.kind = it->second;
  cfg.seed = r.get<std::uint64_t>("experiment.seed", 0);
  cfg.output_dir = r.get<std::string>("experiment.output_dir", "out/" + kind);
  cfg.run_suite = r.get<bool>("experiment.theorem_suite", cfg.kind == ExperimentKind::verify);

  switch (cfg.kind) {
    case ExperimentKind::linreg:
    case ExperimentKind::linreg_grid: {
      auto& l = cfg.linreg;
      l.n_freq = r.get<Index>("linreg.n_freq", l.n_freq);
      l.degree = r.get<Index>("linreg.degree", l.degree);
      l.stabilize = r.get<bool>("linreg.stabilize", l.stabilize);
      l.samples = r.get<std::size_t>("linreg.samples", l.samples);
      l.epochs = r.get<Index>("linreg.epochs", l.epochs);
      l.target_seed = r.get<std::uint64_t>("linreg.target_seed", l.target_seed);
      l.sample_seed = r.get<std::uint64_t>("linreg.sample_seed", l.sample_seed);
      if (l.n_freq < 0) throw ConfigError("linreg.n_freq", "must be non-negative");
      if (l.degree < 0) throw ConfigError("linreg.degree", "must be non-negative");
      if (l.epochs < 0) throw ConfigError("linreg.epochs", "must be non-negative");
      detail::read_algorithm(r, cfg.algorithm, cfg.kind);
      if (cfg.kind == ExperimentKind::linreg_grid) {
        auto& g = cfg.grid;
        g.epsilons = r.get<std::vector<double>>("grid.epsilons", g.epsilons);
        g.betas = r.get<std::vector<double>>("grid.betas", g.betas);
        g.variants = r.get<std::vector<std::string>>("grid.variants", g.variants);
        g.stabilized = r.get<bool>("grid.stabilized", g.stabilized);
        g.stabilized_beta = r.get<double>("grid.stabilized_beta", g.stabilized_beta);
        g.stabilized_samples = r.get<std::size_t>("grid.stabilized_samples", g.stabilized_samples);
        g.threads = r.get<std::size_t>("grid.threads", g.threads);
        if (g.epsilons.empty()) throw ConfigError("grid.epsilons", "empty list");
        if (g.betas.empty()) throw ConfigError("grid.betas", "empty list");
        if (g.variants.empty()) throw ConfigError("grid.variants", "empty list");
        for (double e : g.epsilons) detail::check_positive("grid.epsilons", e);
        for (double b : g.betas) detail::check_positive("grid.betas", b);
        for (const auto& v : g.variants) detail::check_variant("grid.variants", v);
        detail::check_positive("grid.stabilized_beta", g.stabilized_beta);
      }
      break;
    }
    case ExperimentKind::hopfield_dense:
    case ExperimentKind::hopfield_conv: {
      auto& h = cfg.hopfield;
      const bool conv = cfg.kind == ExperimentKind::hopfield_conv;
      if (conv) {
        h.lr_weights = {0.128, 0.032, 0.008};
        h.lr_biases = {0.032, 0.008, 0.002};
        h.gains = {0.6, 0.6, 1.5};
        h.batch_size = 16;
      } else {
        h.hidden = r.get<std::vector<double>>("hopfield.hidden", h.hidden);
        for (double n : h.hidden)
          if (!(n >= 1.0) || n != std::floor(n)) throw ConfigError("hopfield.hidden", "layer sizes must be positive integers");
      }
      h.lr_weights = r.get<std::vector<double>>("hopfield.lr_weights", h.lr_weights);
      h.lr_biases = r.get<std::vector<double>>("hopfield.lr_biases", h.lr_biases);
      h.gains = r.get<std::vector<double>>("hopfield.gains", h.gains);
      h.batch_size = r.get<std::size_t>("hopfield.batch_size", h.batch_size);
      h.epochs = r.get<Index>("hopfield.epochs", h.epochs);
      h.train_limit = r.get<std::size_t>("hopfield.train_limit", h.train_limit);
      h.test_limit = r.get<std::size_t>("hopfield.test_limit", h.test_limit);
      h.data_dir = r.get<std::string>("hopfield.data_dir", "");
      h.init_seed = r.get<std::uint64_t>("hopfield.init_seed", h.init_seed);
      h.evaluate_train = r.get<bool>("hopfield.evaluate_train", h.evaluate_train);
      const std::size_t layers = conv ? 3 : h.hidden.size() + 1;
      for (const auto& [name, list] : {std::pair{"hopfield.lr_weights", &h.lr_weights},
                                      std::pair{"hopfield.lr_biases", &h.lr_biases},
                                      std::pair{"hopfield.gains", &h.gains}}) {
        if (list->size() != layers)
          throw ConfigError(name, "expected " + std::to_string(layers) + " values, got " +
                                      std::to_string(list->size()));
      }
      for (double v : h.lr_weights) detail::check_positive("hopfield.lr_weights", v);
      for (double v : h.lr_biases) detail::check_positive("hopfield.lr_biases", v);
      if (h.batch_size < 1) throw ConfigError("hopfield.batch_size", "must be at least 1");
      if (h.epochs < 0) throw ConfigError("hopfield.epochs", "must be non-negative");
      detail::read_algorithm(r, cfg.algorithm, cfg.kind);
      break;
    }
    case ExperimentKind::verify: {
      auto& v = cfg.verify;
      v.model = r.get<std::string>("verify.model", v.model);
      if (v.model != "linreg" && v.model != "linreg_stabilized" && v.model != "hopfield_small")
        throw ConfigError("verify.model", "expected linreg, linreg_stabilized or hopfield_small, got '" + v.model + "'");
      v.instances = r.get<std::size_t>("verify.instances", v.instances);
      v.seed = r.get<std::uint64_t>("verify.seed", v.seed);
      v.eps = r.get<double>("verify.epsilon", v.eps);
      v.beta = r.get<double>("verify.beta", v.beta);
      if (v.instances < 1) throw ConfigError("verify.instances", "must be at least 1");
      detail::check_positive("verify.epsilon", v.eps);
      detail::check_positive("verify.beta", v.beta);
      break;
    }
  }
  r.reject_unknown();

  std::ostringstream out;
  boost::property_tree::write_ini(out, r.resolved());
  cfg.resolved_text = out.str();
  cfg.hash = detail::hex32(static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(cfg.resolved_text.data()), static_cast<uInt>(cfg.resolved_text.size()))));
  return cfg;
}

[[nodiscard]] inline ExperimentConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace aeqprop::cli
