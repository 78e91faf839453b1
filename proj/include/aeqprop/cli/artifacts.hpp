#pragma once

#include <aeqprop/train.hpp>

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace aeqprop::cli {

inline const std::vector<std::string>& trace_columns() {
  static const std::vector<std::string> cols{"step", "loss", "lyapunov", "dtheta_norm", "phase_gap", "iterations"};
  return cols;
}

struct TraceHeader {
  std::string experiment;
  std::string config_hash;
};

namespace detail {

inline std::string num(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Per-step CSV preceded by `# key=value` provenance lines.
inline void write_trace_csv(const std::filesystem::path& path, const TraceHeader& header,
                            const std::vector<StepRecord>& steps) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "# experiment=" << header.experiment << "\n# config_hash=" << header.config_hash << "\n";
  const auto& cols = trace_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << "\n";
  for (const auto& s : steps) {
    out << s.step << ',' << detail::num(s.loss) << ',' << detail::num(s.lyapunov_after) << ','
        << detail::num(s.dtheta_norm) << ',' << detail::num(s.phase_gap) << ',' << s.iterations << '\n';
  }
}

struct Trace {
  TraceHeader header;
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  [[nodiscard]] std::vector<double> column(const std::string& name) const {
    std::size_t j = 0;
    while (j < columns.size() && columns[j] != name) ++j;
    if (j == columns.size()) throw std::runtime_error("trace has no column '" + name + "'");
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(r[j]);
    return out;
  }
};

/// Malformed trace or incompatible pair of traces.
struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

[[nodiscard]] inline Trace read_trace_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot read trace " + path.string());
  Trace t;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const auto key = line.substr(2, eq - 2);
      const auto value = line.substr(eq + 1);
      if (key == "experiment") t.header.experiment = value;
      if (key == "config_hash") t.header.config_hash = value;
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (t.columns.empty()) {
      t.columns = fields;
      continue;
    }
    if (fields.size() != t.columns.size())
      throw SchemaError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                        std::to_string(t.columns.size()) + " fields");
    std::vector<double> row;
    for (const auto& v : fields) {
      try {
        row.push_back(v == "nan" ? std::nan("") : std::stod(v));
      } catch (const std::exception&) {
        throw SchemaError(path.string() + ":" + std::to_string(lineno) + ": bad number '" + v + "'");
      }
    }
    t.rows.push_back(std::move(row));
  }
  if (t.columns.empty()) throw SchemaError(path.string() + ": no header row");
  return t;
}

/// Trailing moving average; the first window-1 entries average what is
/// available. Non-finite entries are skipped.
[[nodiscard]] inline std::vector<double> smooth(const std::vector<double>& x, std::size_t window) {
  std::vector<double> out(x.size(), std::nan(""));
  if (window == 0) window = 1;
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::isfinite(x[i])) sum += x[i], ++count;
    if (i >= window && std::isfinite(x[i - window])) sum -= x[i - window], --count;
    if (count > 0) out[i] = sum / static_cast<double>(count);
  }
  return out;
}

struct CompareOptions {
  std::size_t window = 50;
  bool prefix = false;
};

/// Loss-ratio statistics and smoothed curve gaps between two traces (B is
/// the reference for relative gaps).
[[nodiscard]] inline nlohmann::json compare_traces(const Trace& a, const Trace& b, const CompareOptions& opt = {}) {
  if (a.header.experiment != b.header.experiment)
    throw SchemaError("traces come from different experiments ('" + a.header.experiment + "' vs '" +
                      b.header.experiment + "')");
  if (a.columns != b.columns) throw SchemaError("traces have different columns");
  if (a.rows.size() != b.rows.size() && !opt.prefix)
    throw SchemaError("traces differ in length (" + std::to_string(a.rows.size()) + " vs " +
                      std::to_string(b.rows.size()) + "); request a prefix comparison");
  const std::size_t n = std::min(a.rows.size(), b.rows.size());
  auto la = a.column("loss"), lb = b.column("loss");
  la.resize(n);
  lb.resize(n);
  const auto sa = smooth(la, opt.window), sb = smooth(lb, opt.window);

  double rmin = INFINITY, rmax = -INFINITY, rsum = 0.0;
  std::size_t rcount = 0;
  double gmax = 0.0, gsum = 0.0, relmax = 0.0, relsum = 0.0;
  std::size_t gcount = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (std::isfinite(la[i]) && std::isfinite(lb[i]) && lb[i] != 0.0) {
      const double r = la[i] / lb[i];
      rmin = std::min(rmin, r), rmax = std::max(rmax, r), rsum += r, ++rcount;
    }
    if (std::isfinite(sa[i]) && std::isfinite(sb[i])) {
      const double g = std::abs(sa[i] - sb[i]);
      const double rel = sb[i] != 0.0 ? g / std::abs(sb[i]) : (g == 0.0 ? 0.0 : INFINITY);
      gmax = std::max(gmax, g), gsum += g;
      relmax = std::max(relmax, rel), relsum += rel;
      ++gcount;
    }
  }
  auto finite_or_null = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {
      {"experiment", a.header.experiment},
      {"steps_compared", n},
      {"prefix", a.rows.size() != b.rows.size()},
      {"window", opt.window},
      {"loss_ratio",
       {{"min", finite_or_null(rmin)},
        {"max", finite_or_null(rmax)},
        {"mean", rcount ? finite_or_null(rsum / static_cast<double>(rcount)) : nlohmann::json(nullptr)}}},
      {"smoothed_gap",
       {{"max", gmax},
        {"mean", gcount ? gsum / static_cast<double>(gcount) : 0.0},
        {"max_relative", finite_or_null(relmax)},
        {"mean_relative", gcount ? finite_or_null(relsum / static_cast<double>(gcount)) : nlohmann::json(0.0)}}},
  };
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace aeqprop::cli
