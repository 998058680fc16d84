#pragma once

// Policy evaluation baselines: on-policy Monte Carlo, trajectory and
// per-decision importance sampling, doubly robust, and tabular fitted
// Q-evaluation, plus an MAE benchmark against exact values.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "evarl/error.hpp"
#include "evarl/mdp.hpp"
#include "evarl/random.hpp"

namespace evarl {

struct BehaviorDataset {
  std::vector<Trajectory> trajectories;
  // behavior_probs[i][t] = pi_b(a_t | s_t) as logged.
  std::vector<std::vector<double>> behavior_probs;
  double gamma = 1.0;

  std::size_t size() const { return trajectories.size(); }

  void validate() const {
    require(trajectories.size() == behavior_probs.size(),
            "BehaviorDataset: probability log size mismatch");
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
      require(trajectories[i].consistent(),
              "BehaviorDataset: malformed trajectory");
      require(behavior_probs[i].size() == trajectories[i].length(),
              "BehaviorDataset: probability log length mismatch");
      // Zero is left to the estimators, which report it as unsupported.
      for (double p : behavior_probs[i]) {
        require(p >= 0.0 && p <= 1.0,
                "BehaviorDataset: behavior probability outside [0, 1]");
      }
    }
  }

  // Trajectories whose first state is `s`, as a new dataset.
  BehaviorDataset starting_at(StateIndex s) const {
    BehaviorDataset out;
    out.gamma = gamma;
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
      if (trajectories[i].start() == s) {
        out.trajectories.push_back(trajectories[i]);
        out.behavior_probs.push_back(behavior_probs[i]);
      }
    }
    return out;
  }
};

inline BehaviorDataset collect_behavior_data(const TabularMdp& mdp,
                                             const PolicyTable& behavior,
                                             std::size_t episodes, Rng& rng) {
  BehaviorDataset data;
  data.gamma = mdp.gamma();
  for (std::size_t i = 0; i < episodes; ++i) {
    auto traj = rollout(mdp, behavior, sample_start_state(mdp, rng),
                        mdp.horizon(), rng);
    std::vector<double> probs;
    probs.reserve(traj.length());
    for (std::size_t t = 0; t < traj.length(); ++t) {
      probs.push_back(behavior.prob(traj.states[t], traj.actions[t]));
    }
    data.trajectories.push_back(std::move(traj));
    data.behavior_probs.push_back(std::move(probs));
  }
  return data;
}

inline std::string to_jsonl(const BehaviorDataset& data) {
  std::string out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& t = data.trajectories[i];
    out += nlohmann::json{{"states", t.states},
                          {"actions", t.actions},
                          {"rewards", t.rewards},
                          {"behavior_probs", data.behavior_probs[i]},
                          {"gamma", data.gamma}}
               .dump();
    out += '\n';
  }
  return out;
}

struct OpeEstimate {
  double value = 0.0;
  double se = 0.0;  // standard error of the per-episode mean
  std::size_t n = 0;
  std::vector<std::string> warnings;
};

namespace detail {

inline OpeEstimate mean_with_se(std::span<const double> xs) {
  require(!xs.empty(), "OPE: empty dataset");
  OpeEstimate out;
  out.n = xs.size();
  double total = 0.0;
  for (double x : xs) total += x;
  out.value = total / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - out.value) * (x - out.value);
    out.se = std::sqrt(ss / static_cast<double>(xs.size() - 1) /
                       static_cast<double>(xs.size()));
  }
  return out;
}

inline double step_ratio(const PolicyTable& target, const Trajectory& traj,
                         std::span<const double> behavior_probs,
                         std::size_t t) {
  const double pb = behavior_probs[t];
  if (!(pb > 0.0)) {
    throw UnsupportedAction("importance weight: behavior probability is 0 at "
                            "state " +
                            std::to_string(traj.states[t]));
  }
  return target.prob(traj.states[t], traj.actions[t]) / pb;
}

inline void check_policy(const BehaviorDataset& data, const PolicyTable& pi) {
  data.validate();
  for (const auto& traj : data.trajectories) {
    for (std::size_t t = 0; t < traj.length(); ++t) {
      require(traj.states[t] < pi.n_states() && traj.actions[t] < pi.n_actions(),
              "OPE: evaluation policy does not cover the logged state/action");
    }
  }
}

}  // namespace detail

// (1/N) sum_i g(h_i) over on-policy trajectories.
inline OpeEstimate mc_estimate(std::span<const double> returns) {
  require(!returns.empty(), "mc_estimate: no trajectories");
  return detail::mean_with_se(returns);
}

inline OpeEstimate mc_estimate(std::span<const Trajectory> episodes,
                               double gamma) {
  require(!episodes.empty(), "mc_estimate: no trajectories");
  std::vector<double> returns;
  for (const auto& t : episodes) returns.push_back(discounted_return(t, gamma));
  return detail::mean_with_se(returns);
}

inline OpeEstimate tis_estimate(const BehaviorDataset& data,
                                const PolicyTable& pi) {
  detail::check_policy(data, pi);
  require(data.size() >= 1, "tis_estimate: empty dataset");
  std::vector<double> per;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& traj = data.trajectories[i];
    double w = 1.0;
    for (std::size_t t = 0; t < traj.length(); ++t) {
      w *= detail::step_ratio(pi, traj, data.behavior_probs[i], t);
    }
    per.push_back(discounted_return(traj, data.gamma) * w);
  }
  return detail::mean_with_se(per);
}

inline OpeEstimate pdis_estimate(const BehaviorDataset& data,
                                 const PolicyTable& pi) {
  detail::check_policy(data, pi);
  require(data.size() >= 1, "pdis_estimate: empty dataset");
  std::vector<double> per;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& traj = data.trajectories[i];
    double w = 1.0;
    double discount = 1.0;
    double total = 0.0;
    for (std::size_t t = 0; t < traj.length(); ++t) {
      w *= detail::step_ratio(pi, traj, data.behavior_probs[i], t);
      total += discount * w * traj.rewards[t];
      discount *= data.gamma;
    }
    per.push_back(total);
  }
  return detail::mean_with_se(per);
}

// (1/N) sum_i [Vhat_0(s_0) + sum_t gamma^t w_t (r_t + gamma Vhat_{t+1}(s_{t+1})
// - Qhat_t(s_t, a_t))], with w_t the cumulative ratio through step t.
inline OpeEstimate dr_estimate(const BehaviorDataset& data,
                               const PolicyTable& pi,
                               const FiniteHorizonValues& model) {
  detail::check_policy(data, pi);
  require(data.size() >= 1, "dr_estimate: empty dataset");
  std::vector<double> per;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& traj = data.trajectories[i];
    require(traj.states.back() < model.n_states(),
            "dr_estimate: value tables do not cover the logged states");
    double w = 1.0;
    double discount = 1.0;
    double total = model.v(0, traj.start());
    for (std::size_t t = 0; t < traj.length(); ++t) {
      w *= detail::step_ratio(pi, traj, data.behavior_probs[i], t);
      const double correction =
          traj.rewards[t] + data.gamma * model.v(t + 1, traj.states[t + 1]) -
          model.q(t, traj.states[t], traj.actions[t]);
      total += discount * w * correction;
      discount *= data.gamma;
    }
    per.push_back(total);
  }
  return detail::mean_with_se(per);
}

struct FqeResult {
  FiniteHorizonValues values;
  OpeEstimate estimate;  // mean of Vhat_0 over the logged start states
  std::vector<std::pair<StateIndex, ActionIndex>> uncovered;
};

// Backward induction on the empirical model: mean reward and empirical
// next-state frequencies per (s, a), pooled over time steps. Pairs never
// observed get Qhat = 0; those with pi mass in a logged state are reported.
inline FqeResult fqe_estimate(const BehaviorDataset& data, const PolicyTable& pi,
                              std::size_t horizon) {
  detail::check_policy(data, pi);
  require(data.size() >= 1, "fqe_estimate: empty dataset");
  const std::size_t n = pi.n_states();
  const std::size_t m = pi.n_actions();
  std::vector<double> count(n * m, 0.0), reward_sum(n * m, 0.0),
      next_count(n * m * n, 0.0);
  std::vector<bool> visited(n, false);
  for (const auto& traj : data.trajectories) {
    for (std::size_t t = 0; t < traj.length(); ++t) {
      const std::size_t sa = traj.states[t] * m + traj.actions[t];
      visited[traj.states[t]] = true;
      count[sa] += 1.0;
      reward_sum[sa] += traj.rewards[t];
      next_count[sa * n + traj.states[t + 1]] += 1.0;
    }
  }
  FqeResult out{FiniteHorizonValues(horizon, n, m), {}, {}};
  for (StateIndex s = 0; s < n; ++s) {
    if (!visited[s]) continue;
    for (ActionIndex a = 0; a < m; ++a) {
      if (count[s * m + a] == 0.0 && pi.prob(s, a) > 0.0) {
        out.uncovered.emplace_back(s, a);
      }
    }
  }
  for (std::size_t t = horizon; t-- > 0;) {
    for (StateIndex s = 0; s < n; ++s) {
      double v = 0.0;
      for (ActionIndex a = 0; a < m; ++a) {
        const std::size_t sa = s * m + a;
        double q = 0.0;
        if (count[sa] > 0.0) {
          double future = 0.0;
          for (StateIndex s2 = 0; s2 < n; ++s2) {
            if (next_count[sa * n + s2] != 0.0) {
              future += next_count[sa * n + s2] * out.values.v(t + 1, s2);
            }
          }
          q = (reward_sum[sa] + data.gamma * future) / count[sa];
        }
        out.values.q_ref(t, s, a) = q;
        v += pi.prob(s, a) * q;
      }
      out.values.v_ref(t, s) = v;
    }
  }
  std::vector<double> starts;
  for (const auto& traj : data.trajectories) {
    starts.push_back(out.values.v(0, traj.start()));
  }
  out.estimate = detail::mean_with_se(starts);
  if (!out.uncovered.empty()) {
    out.estimate.warnings.push_back(
        "fqe: " + std::to_string(out.uncovered.size()) +
        " state-action pairs with evaluation-policy mass are uncovered");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

enum class OpeMethod { kMc, kTis, kPdis, kDr, kFqe, kExact };

inline const char* to_string(OpeMethod m) {
  switch (m) {
    case OpeMethod::kMc: return "MC";
    case OpeMethod::kTis: return "TIS";
    case OpeMethod::kPdis: return "PDIS";
    case OpeMethod::kDr: return "DR";
    case OpeMethod::kFqe: return "FQE";
    case OpeMethod::kExact: return "exact";
  }
  return "?";
}

inline OpeMethod ope_method_from_string(const std::string& name) {
  for (auto m : {OpeMethod::kMc, OpeMethod::kTis, OpeMethod::kPdis,
                 OpeMethod::kDr, OpeMethod::kFqe, OpeMethod::kExact}) {
    if (name == to_string(m)) return m;
  }
  throw InvalidInput("unknown OPE estimator: " + name);
}

// Per-state value estimates V(s) for every state from one behavior dataset.
// IS-family and MC estimates use the episodes that start at s; states with
// no such episode fall back to the pooled estimate. DR uses the FQE tables
// fitted on the same data as its control variates.
struct PerStateEstimates {
  std::vector<double> values;
  double pooled = 0.0;
};

inline PerStateEstimates ope_state_values(OpeMethod method,
                                          const TabularMdp& mdp,
                                          const PolicyTable& pi,
                                          const BehaviorDataset& behavior_data,
                                          std::span<const Trajectory> on_policy) {
  const std::size_t n = mdp.n_states();
  PerStateEstimates out{std::vector<double>(n, 0.0), 0.0};
  if (method == OpeMethod::kExact) {
    out.values = exact_values(mdp, pi);
    out.pooled = exact_performance(mdp, pi);
    return out;
  }
  if (method == OpeMethod::kMc) {
    out.pooled = mc_estimate(on_policy, mdp.gamma()).value;
    for (StateIndex s = 0; s < n; ++s) {
      std::vector<double> returns;
      for (const auto& t : on_policy) {
        if (t.start() == s) returns.push_back(discounted_return(t, mdp.gamma()));
      }
      out.values[s] = returns.empty() ? out.pooled : mc_estimate(returns).value;
    }
    return out;
  }
  const auto fqe = fqe_estimate(behavior_data, pi, mdp.horizon());
  if (method == OpeMethod::kFqe) {
    out.values = fqe.values.initial_values();
    out.pooled = fqe.estimate.value;
    return out;
  }
  auto estimate = [&](const BehaviorDataset& d) {
    switch (method) {
      case OpeMethod::kTis: return tis_estimate(d, pi).value;
      case OpeMethod::kPdis: return pdis_estimate(d, pi).value;
      default: return dr_estimate(d, pi, fqe.values).value;
    }
  };
  out.pooled = estimate(behavior_data);
  for (StateIndex s = 0; s < n; ++s) {
    const auto subset = behavior_data.starting_at(s);
    out.values[s] = subset.size() == 0 ? out.pooled : estimate(subset);
  }
  return out;
}

struct BenchmarkRow {
  std::string estimator;
  double mae = 0.0;  // sum_s mu(s) |V(s) - Vhat(s)|, averaged over trials
  double se = 0.0;   // standard error over trials
  std::size_t n_data = 0;
  std::uint64_t seed = 0;
};

struct BenchmarkOptions {
  std::vector<OpeMethod> methods{OpeMethod::kTis, OpeMethod::kPdis,
                                 OpeMethod::kDr, OpeMethod::kFqe};
  std::size_t data_budget = 256;  // episodes given to every estimator
  double behavior_epsilon = 0.2;
  std::size_t trials = 1;
  std::uint64_t seed = 0;
};

// Every method sees the same behavior episodes within a trial; MC gets an
// on-policy sample of the same size.
inline std::vector<BenchmarkRow> benchmark_mae(const TabularMdp& mdp,
                                               const PolicyTable& pi,
                                               const BenchmarkOptions& options) {
  require(options.data_budget >= 1 && options.trials >= 1,
          "benchmark_mae: data budget and trials must be positive");
  const auto truth = exact_values(mdp, pi);
  const auto behavior = pi.softened(options.behavior_epsilon);
  std::vector<std::vector<double>> maes(options.methods.size());
  for (std::size_t trial = 0; trial < options.trials; ++trial) {
    Rng rng = make_stream(options.seed, 0x0be0000 + trial);
    const auto data =
        collect_behavior_data(mdp, behavior, options.data_budget, rng);
    std::vector<Trajectory> on_policy;
    for (std::size_t i = 0; i < options.data_budget; ++i) {
      on_policy.push_back(
          rollout(mdp, pi, sample_start_state(mdp, rng), mdp.horizon(), rng));
    }
    for (std::size_t j = 0; j < options.methods.size(); ++j) {
      const auto est =
          ope_state_values(options.methods[j], mdp, pi, data, on_policy);
      double mae = 0.0;
      for (StateIndex s = 0; s < mdp.n_states(); ++s) {
        mae += mdp.start_dist()[s] * std::abs(truth[s] - est.values[s]);
      }
      maes[j].push_back(mae);
    }
  }
  std::vector<BenchmarkRow> rows;
  for (std::size_t j = 0; j < options.methods.size(); ++j) {
    const auto stats = detail::mean_with_se(maes[j]);
    rows.push_back({to_string(options.methods[j]), stats.value, stats.se,
                    options.data_budget, options.seed});
  }
  return rows;
}

inline std::string benchmark_csv(std::span<const BenchmarkRow> rows) {
  std::string out = "estimator,mae,se,n_data,seed\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.10g,%.10g,%zu,%llu\n",
                  r.estimator.c_str(), r.mae, r.se, r.n_data,
                  static_cast<unsigned long long>(r.seed));
    out += buf;
  }
  return out;
}

}  // namespace evarl
