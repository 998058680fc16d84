#pragma once

// Central-difference gradient checking for graph-built scalar functions and
// for plain parameter -> scalar functions.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "evarl/tensor.hpp"

namespace evarl {

struct GradCheckEntry {
  std::string parameter;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
  bool flagged = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_relative_error = 0.0;
  std::size_t flagged = 0;

  bool passed() const { return flagged == 0; }
};

// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
// gradient is ~0 from turning finite-difference noise into huge ratios.
inline constexpr double kGradCheckFloor = 1e-3;

inline double relative_error(double analytic, double numeric,
                             double floor = kGradCheckFloor) {
  const double scale =
      std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

inline GradCheckReport compare_gradients(const ParameterSet& analytic,
                                         const ParameterSet& numeric,
                                         double tolerance,
                                         double floor = kGradCheckFloor) {
  require(analytic.same_layout(numeric),
          "compare_gradients: layout mismatch");
  GradCheckReport report;
  for (std::size_t p = 0; p < analytic.size(); ++p) {
    const auto& a = analytic[p].value.data();
    const auto& n = numeric[p].value.data();
    for (std::size_t i = 0; i < a.size(); ++i) {
      GradCheckEntry e{analytic[p].name, i, a[i], n[i],
                       relative_error(a[i], n[i], floor), false};
      e.flagged = !(e.relative_error <= tolerance);
      report.max_relative_error =
          std::max(report.max_relative_error, e.relative_error);
      report.flagged += e.flagged ? 1 : 0;
      report.entries.push_back(std::move(e));
    }
  }
  return report;
}

using ParameterFunction = std::function<double(const ParameterSet&)>;

inline ParameterSet finite_difference_gradient(const ParameterFunction& f,
                                               const ParameterSet& params,
                                               double perturbation) {
  ParameterSet probe = params;
  ParameterSet out = params.zeros_like();
  for (std::size_t p = 0; p < probe.size(); ++p) {
    auto& data = probe[p].value.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + perturbation;
      const double up = f(probe);
      data[i] = saved - perturbation;
      const double down = f(probe);
      data[i] = saved;
      out[p].value[i] = (up - down) / (2.0 * perturbation);
    }
  }
  return out;
}

// Builds a scalar from graph variables bound to the parameters.
using GraphFunction = std::function<Var(Graph&, const std::vector<Var>&)>;

inline ParameterSet graph_gradient(const GraphFunction& f,
                                   const ParameterSet& params) {
  Graph graph;
  const auto vars = bind(graph, params);
  const Var loss = f(graph, vars);
  graph.backward(loss);
  return gradients(graph, params, vars);
}

inline double graph_value(const GraphFunction& f, const ParameterSet& params) {
  Graph graph;
  std::vector<Var> vars;
  for (const auto& e : params) vars.push_back(graph.constant(e.value));
  return f(graph, vars).value().item();
}

inline GradCheckReport grad_check(const GraphFunction& f,
                                  const ParameterSet& params,
                                  double perturbation = 1e-4,
                                  double tolerance = 1e-4,
                                  double floor = kGradCheckFloor) {
  const ParameterSet analytic = graph_gradient(f, params);
  const ParameterSet numeric = finite_difference_gradient(
      [&](const ParameterSet& p) { return graph_value(f, p); }, params,
      perturbation);
  return compare_gradients(analytic, numeric, tolerance, floor);
}

}  // namespace evarl
