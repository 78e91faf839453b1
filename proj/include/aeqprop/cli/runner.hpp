#pragma once

#include <aeqprop/cli/artifacts.hpp>
#include <aeqprop/cli/config.hpp>
#include <aeqprop/data/datasets.hpp>
#include <aeqprop/models/hopfield.hpp>
#include <aeqprop/models/linreg.hpp>
#include <aeqprop/train.hpp>
#include <aeqprop/verify/instances.hpp>
#include <aeqprop/verify/theorem_suite.hpp>

#include <json.hpp>

#include <atomic>
#include <filesystem>
#include <mutex>
#include <thread>

namespace aeqprop::cli {

enum ExitCode : int { kOk = 0, kConfigError = 1, kDiverged = 2, kChecksFailed = 3 };

struct RunResult {
  int exit_code = kOk;
  nlohmann::json summary;
};

namespace detail {

inline CouplingSpec linreg_coupling(const Layout& layout, const AlgorithmConfig& a) {
  std::vector<double> eps(layout.count(), a.epsilon);
  for (const auto& [name, value] : a.epsilon_segments) {
    if (!layout.contains(name)) {
      std::string known;
      for (const auto& s : layout.segments()) known += (known.empty() ? "" : ", ") + s.name;
      throw ConfigError("epsilon." + name, "no parameter segment of that name (" + known + ")");
    }
    for (std::size_t k = 0; k < layout.count(); ++k)
      if (layout[k].name == name) eps[k] = value;
  }
  return CouplingSpec::per_segment(layout, eps);
}

inline AeqpropConfig to_aeqprop(const AlgorithmConfig& a, CouplingSpec coupling, std::uint64_t seed) {
  AeqpropConfig c;
  c.variant = a.nudge();
  c.coupling = std::move(coupling);
  c.homeostatic = a.homeostatic;
  c.relaxer = a.relaxer;
  c.lr_decay = a.lr_decay;
  c.seed = seed;
  c.adaptive_threshold = a.adaptive_threshold;
  if (const auto* coord = std::get_if<CoordConfig>(&a.relaxer)) c.threshold.xi = coord->threshold;
  c.verify_lyapunov = a.verify_lyapunov;
  c.lyapunov_nodes = a.lyapunov_nodes;
  return c;
}

inline nlohmann::json json_num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

/// Loss statistics of a trace for the summary.
inline nlohmann::json trace_stats(const TrainResult& r, std::size_t window = 50) {
  std::vector<double> loss;
  Index violations = 0;
  for (const auto& s : r.trace.steps) {
    loss.push_back(s.loss);
    violations += s.lyapunov_violated() ? 1 : 0;
  }
  const auto sm = smooth(loss, window);
  double mean = 0.0;
  std::size_t n = 0;
  for (double v : loss)
    if (std::isfinite(v)) mean += v, ++n;
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.trace.epochs)
    epochs.push_back({{"epoch", e.epoch},
                      {"mean_loss", json_num(e.mean_loss)},
                      {"train_error", json_num(e.train_error)},
                      {"test_error", json_num(e.test_error)},
                      {"xi", json_num(e.xi)},
                      {"mean_phase_gap", json_num(e.mean_phase_gap)}});
  std::string note;
  if (!r.trace.steps.empty()) note = r.trace.steps.back().note;
  return {{"steps", r.trace.steps.size()},
          {"diverged", r.diverged},
          {"note", note},
          {"final_loss", loss.empty() ? nlohmann::json(nullptr) : json_num(loss.back())},
          {"mean_loss", n ? json_num(mean / static_cast<double>(n)) : nlohmann::json(nullptr)},
          {"smoothed_initial_loss", sm.empty() ? nlohmann::json(nullptr) : json_num(sm[std::min(window, sm.size()) - 1])},
          {"smoothed_final_loss", sm.empty() ? nlohmann::json(nullptr) : json_num(sm.back())},
          {"lyapunov_violations", violations},
          {"epochs", epochs}};
}

/// One regression run: online pass over the sample stream, repeated for
/// `epochs` epochs.
inline TrainResult run_linreg_once(const models::LinRegModel& model, const std::vector<Example>& samples,
                                   const AlgorithmConfig& a, Index epochs, std::uint64_t seed) {
  const auto layout = model.param_layout();
  const auto coupling = linreg_coupling(*layout, a);
  const ParamVector theta0(layout);
  const BatchSource data = [&](Index) { return samples; };
  if (a.is_sgd()) return sgd_baseline(model, theta0, data, coupling.epsilon() * a.beta, epochs, a.lr_decay);
  return train(model, theta0, data, to_aeqprop(a, coupling, seed), epochs);
}

inline std::vector<Example> linreg_samples(const LinregConfig& l, std::size_t n) {
  return data::RegressionStream{models::sample_target(l.target_seed, l.degree), l.sample_seed}.draw(n);
}

inline nlohmann::json suite_json(const ExperimentConfig& cfg) {
  const auto& v = cfg.verify;
  verify::SuiteConfig sc;
  sc.eps = v.eps;
  sc.beta = v.beta;
  verify::SuiteReport report;
  if (v.model == "hopfield_small") {
    const auto hop = models::HopfieldModel::dense(2, {3}, 2);
    report = verify::theorem_suite(hop, verify::hopfield_instances(hop, v.instances, v.seed), sc);
  } else {
    const models::LinRegModel lin(cfg.linreg.n_freq, v.model == "linreg_stabilized");
    report = verify::theorem_suite(lin, verify::linreg_instances(lin, v.instances, v.seed), sc);
  }
  auto j = verify::to_json(report);
  j["model"] = v.model;
  return j;
}

inline void prepare_output(const ExperimentConfig& cfg) {
  std::filesystem::create_directories(cfg.output_dir);
  write_text(std::filesystem::path(cfg.output_dir) / "config.resolved.ini",
             "; config_hash=" + cfg.hash + "\n" + cfg.resolved_text);
}

inline nlohmann::json base_summary(const ExperimentConfig& cfg) {
  return {{"experiment", to_string(cfg.kind)}, {"config_hash", cfg.hash}};
}

// ---------------------------------------------------------------------------

inline RunResult run_linreg(const ExperimentConfig& cfg) {
  const models::LinRegModel model(cfg.linreg.n_freq, cfg.linreg.stabilize);
  (void)linreg_coupling(*model.param_layout(), cfg.algorithm);  // validate segment names before computing
  prepare_output(cfg);
  const auto samples = linreg_samples(cfg.linreg, cfg.linreg.samples);
  const auto r = run_linreg_once(model, samples, cfg.algorithm, cfg.linreg.epochs, cfg.seed);
  write_trace_csv(std::filesystem::path(cfg.output_dir) / "trace.csv", {"linreg", cfg.hash}, r.trace.steps);
  RunResult out;
  out.summary = base_summary(cfg);
  out.summary["variant"] = cfg.algorithm.variant;
  out.summary["run"] = trace_stats(r);
  if (cfg.run_suite) out.summary["theorem_suite"] = suite_json(cfg);
  out.exit_code = r.diverged ? kDiverged : kOk;
  out.summary["status"] = r.diverged ? "diverged" : "ok";
  return out;
}

struct GridCell {
  std::string variant;
  double epsilon = 0.0;
  double beta = 0.0;
  bool stabilized = false;

  [[nodiscard]] std::string tag() const {
    return (stabilized ? "stabilized_" : "") + variant + "_eps" + detail::format_double(epsilon) + "_beta" +
           detail::format_double(beta);
  }
};

/// The (eps, beta) grid for every variant, plus the stabilized row. Cells
/// run on worker threads; each cell is single-threaded and deterministic.
inline RunResult run_linreg_grid(const ExperimentConfig& cfg) {
  const auto& g = cfg.grid;
  std::vector<GridCell> cells;
  for (double b : g.betas)
    for (double e : g.epsilons)
      for (const auto& v : g.variants) cells.push_back({v, e, b, cfg.linreg.stabilize});
  if (g.stabilized)
    for (double e : g.epsilons)
      for (const auto& v : g.variants) cells.push_back({v, e, g.stabilized_beta, true});

  prepare_output(cfg);
  const auto samples = linreg_samples(cfg.linreg, cfg.linreg.samples);
  const auto long_samples = linreg_samples(cfg.linreg, g.stabilized_samples);
  const models::LinRegModel plain(cfg.linreg.n_freq, false), stable(cfg.linreg.n_freq, true);

  std::vector<nlohmann::json> results(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        const auto& c = cells[i];
        AlgorithmConfig a = cfg.algorithm;
        a.variant = c.variant;
        a.epsilon = c.epsilon;
        a.beta = c.beta;
        a.epsilon_segments.clear();
        const bool long_run = c.stabilized && c.beta == g.stabilized_beta && g.stabilized;
        const auto& model = c.stabilized ? stable : plain;
        const auto r = run_linreg_once(model, long_run ? long_samples : samples, a, cfg.linreg.epochs, cfg.seed);
        const auto file = "trace_" + c.tag() + ".csv";
        write_trace_csv(std::filesystem::path(cfg.output_dir) / file, {"linreg", cfg.hash}, r.trace.steps);
        auto j = trace_stats(r);
        j.erase("epochs");
        j["variant"] = c.variant;
        j["epsilon"] = c.epsilon;
        j["beta"] = c.beta;
        j["stabilized"] = c.stabilized;
        j["trace"] = file;
        results[i] = std::move(j);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::size_t threads = g.threads ? g.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, cells.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);

  RunResult out;
  out.summary = base_summary(cfg);
  out.summary["cells"] = results;
  out.summary["status"] = "ok";
  if (cfg.run_suite) out.summary["theorem_suite"] = suite_json(cfg);
  return out;
}

inline RunResult run_hopfield(const ExperimentConfig& cfg) {
  const auto& h = cfg.hopfield;
  const bool conv = cfg.kind == ExperimentKind::hopfield_conv;
  std::filesystem::path root;
  if (!h.data_dir.empty()) root = h.data_dir;
  else if (auto env = data::dataset_root_from_env()) root = *env;
  else throw ConfigError("hopfield.data_dir", "no dataset directory given and AEQPROP_DATA is not set");
  auto train_set = data::load_mnist(root, "train");
  auto test_set = data::load_mnist(root, "t10k");
  if (!train_set || !test_set)
    throw ConfigError("hopfield.data_dir", "MNIST IDX files not found under " + root.string());
  if (h.train_limit) *train_set = train_set->head(h.train_limit);
  if (h.test_limit) *test_set = test_set->head(h.test_limit);

  std::vector<Index> hidden;
  for (double n : h.hidden) hidden.push_back(static_cast<Index>(n));
  const auto model = conv ? models::HopfieldModel::conv_mnist() : models::HopfieldModel::dense(784, hidden, 10);
  const auto theta0 = models::init_params(model, h.gains, h.init_seed);
  const auto eps = models::per_layer_epsilon(h.lr_weights, h.lr_biases, cfg.algorithm.beta);
  const auto acfg = to_aeqprop(cfg.algorithm, CouplingSpec::per_segment(*model.param_layout(), eps), cfg.seed);
  prepare_output(cfg);

  const auto test_batches = data::sequential_batches(*test_set, 256);
  const auto train_eval = data::sequential_batches(*train_set, 256);
  auto error_rate = [&](const ParamVector& theta, const std::vector<Example>& batches) {
    std::size_t wrong = 0, total = 0;
    for (const auto& ex : batches) {
      const auto r = relax_state(model, theta, ex, 0.0, aeqprop::detail::with_order(acfg.relaxer, 0.0));
      const auto pred = model.predict_labels(r.state.values(), ex.batch);
      for (Index b = 0; b < ex.batch; ++b) {
        Index label = 0;
        ex.y.segment(b * 10, 10).maxCoeff(&label);
        wrong += pred[static_cast<std::size_t>(b)] != label ? 1 : 0;
      }
      total += static_cast<std::size_t>(ex.batch);
    }
    return total ? static_cast<double>(wrong) / static_cast<double>(total) : std::nan("");
  };
  const EpochEvaluator evaluate = [&](const ParamVector& theta, Index) {
    return std::pair{h.evaluate_train ? error_rate(theta, train_eval) : std::nan(""), error_rate(theta, test_batches)};
  };
  const BatchSource source = [&](Index epoch) { return data::batches(*train_set, h.batch_size, cfg.seed, epoch); };
  const auto r = train(model, theta0, source, acfg, h.epochs, evaluate);

  write_trace_csv(std::filesystem::path(cfg.output_dir) / "trace.csv", {to_string(cfg.kind), cfg.hash},
                  r.trace.steps);
  RunResult out;
  out.summary = base_summary(cfg);
  out.summary["variant"] = cfg.algorithm.variant;
  out.summary["train_size"] = train_set->size();
  out.summary["test_size"] = test_set->size();
  out.summary["run"] = trace_stats(r);
  out.summary["final_test_error"] = r.trace.epochs.empty() ? nlohmann::json(nullptr)
                                                           : json_num(r.trace.epochs.back().test_error);
  if (cfg.run_suite) out.summary["theorem_suite"] = suite_json(cfg);
  out.exit_code = r.diverged ? kDiverged : kOk;
  out.summary["status"] = r.diverged ? "diverged" : "ok";
  return out;
}

inline RunResult run_verify(const ExperimentConfig& cfg) {
  prepare_output(cfg);
  RunResult out;
  out.summary = base_summary(cfg);
  out.summary["theorem_suite"] = suite_json(cfg);
  const bool passed = out.summary["theorem_suite"]["passed"].get<bool>();
  out.summary["status"] = passed ? "ok" : "checks_failed";
  out.exit_code = passed ? kOk : kChecksFailed;
  return out;
}

}  // namespace detail

/// Runs a validated experiment and writes its artifacts under output_dir:
/// trace CSV(s), summary.json and config.resolved.ini.
[[nodiscard]] inline RunResult run_experiment(ExperimentConfig cfg) {
  RunResult r;
  switch (cfg.kind) {
    case ExperimentKind::linreg: r = detail::run_linreg(cfg); break;
    case ExperimentKind::linreg_grid: r = detail::run_linreg_grid(cfg); break;
    case ExperimentKind::hopfield_dense:
    case ExperimentKind::hopfield_conv: r = detail::run_hopfield(cfg); break;
    case ExperimentKind::verify: r = detail::run_verify(cfg); break;
  }
  write_text(std::filesystem::path(cfg.output_dir) / "summary.json", r.summary.dump(2) + "\n");
  return r;
}

}  // namespace aeqprop::cli
