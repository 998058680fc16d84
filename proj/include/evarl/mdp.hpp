#pragma once

// Finite-horizon tabular MDPs: construction, rollouts, returns and exact
// evaluation by backward induction.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "evarl/error.hpp"
#include "evarl/random.hpp"

namespace evarl {

using StateIndex = std::size_t;
using ActionIndex = std::size_t;

inline constexpr double kStochasticTolerance = 1e-12;

class TabularMdp {
 public:
  // `transitions` is row-major [state, action, next_state], `rewards` is
  // [state, action]. `embeddings` is row-major [state, embedding_dim]; when
  // empty each state is embedded as its own index.
  TabularMdp(std::size_t n_states, std::size_t n_actions,
             std::vector<double> transitions, std::vector<double> rewards,
             double gamma, std::vector<double> start_dist, std::size_t horizon,
             std::vector<double> embeddings = {},
             std::size_t embedding_dim = 0)
      : n_states_(n_states),
        n_actions_(n_actions),
        transitions_(std::move(transitions)),
        rewards_(std::move(rewards)),
        gamma_(gamma),
        start_dist_(std::move(start_dist)),
        horizon_(horizon),
        embeddings_(std::move(embeddings)),
        embedding_dim_(embedding_dim) {
    validate();
  }

  std::size_t n_states() const { return n_states_; }
  std::size_t n_actions() const { return n_actions_; }
  double gamma() const { return gamma_; }
  std::size_t horizon() const { return horizon_; }
  const std::vector<double>& start_dist() const { return start_dist_; }
  const std::vector<double>& transitions() const { return transitions_; }
  const std::vector<double>& rewards() const { return rewards_; }

  double reward(StateIndex s, ActionIndex a) const {
    return rewards_[s * n_actions_ + a];
  }
  double transition(StateIndex s, ActionIndex a, StateIndex next) const {
    return transitions_[(s * n_actions_ + a) * n_states_ + next];
  }
  std::span<const double> next_distribution(StateIndex s,
                                            ActionIndex a) const {
    return {transitions_.data() + (s * n_actions_ + a) * n_states_,
            n_states_};
  }

  std::size_t embedding_dim() const { return embedding_dim_; }
  std::span<const double> embedding(StateIndex s) const {
    return {embeddings_.data() + s * embedding_dim_, embedding_dim_};
  }

  bool is_valid_state(StateIndex s) const { return s < n_states_; }

  // Copy with a different start distribution (dynamics shared by value).
  TabularMdp with_start_dist(std::vector<double> start_dist) const {
    TabularMdp copy = *this;
    copy.start_dist_ = std::move(start_dist);
    copy.validate();
    return copy;
  }
  TabularMdp with_horizon(std::size_t horizon) const {
    TabularMdp copy = *this;
    copy.horizon_ = horizon;
    copy.validate();
    return copy;
  }
  TabularMdp with_gamma(double gamma) const {
    TabularMdp copy = *this;
    copy.gamma_ = gamma;
    copy.validate();
    return copy;
  }

 private:
  void validate() {
    require(n_states_ >= 1 && n_actions_ >= 1,
            "TabularMdp: n_states and n_actions must be positive");
    require(horizon_ >= 1, "TabularMdp: horizon must be positive");
    require(gamma_ >= 0.0 && gamma_ <= 1.0, "TabularMdp: gamma not in [0, 1]");
    require(transitions_.size() == n_states_ * n_actions_ * n_states_,
            "TabularMdp: transitions size mismatch");
    require(rewards_.size() == n_states_ * n_actions_,
            "TabularMdp: rewards size mismatch");
    require(start_dist_.size() == n_states_,
            "TabularMdp: start_dist size mismatch");
    for (std::size_t row = 0; row < n_states_ * n_actions_; ++row) {
      double total = 0.0;
      for (std::size_t j = 0; j < n_states_; ++j) {
        const double p = transitions_[row * n_states_ + j];
        require(p >= 0.0, "TabularMdp: negative transition probability");
        total += p;
      }
      require(std::abs(total - 1.0) <= kStochasticTolerance,
              "TabularMdp: transition row " + std::to_string(row) +
                  " does not sum to 1");
    }
    double total = 0.0;
    for (double p : start_dist_) {
      require(p >= 0.0, "TabularMdp: negative start probability");
      total += p;
    }
    require(std::abs(total - 1.0) <= kStochasticTolerance,
            "TabularMdp: start_dist does not sum to 1");
    if (embeddings_.empty()) {
      embedding_dim_ = 1;
      embeddings_.resize(n_states_);
      for (std::size_t s = 0; s < n_states_; ++s) {
        embeddings_[s] = static_cast<double>(s);
      }
    }
    require(embedding_dim_ >= 1 &&
                embeddings_.size() == n_states_ * embedding_dim_,
            "TabularMdp: embeddings size mismatch");
  }

  std::size_t n_states_;
  std::size_t n_actions_;
  std::vector<double> transitions_;
  std::vector<double> rewards_;
  double gamma_;
  std::vector<double> start_dist_;
  std::size_t horizon_;
  std::vector<double> embeddings_;
  std::size_t embedding_dim_;
};

// Full conditional action distribution pi(a | s), row-major [state, action].
class PolicyTable {
 public:
  PolicyTable(std::size_t n_states, std::size_t n_actions,
              std::vector<double> probs)
      : n_states_(n_states), n_actions_(n_actions), probs_(std::move(probs)) {
    require(probs_.size() == n_states_ * n_actions_,
            "PolicyTable: size mismatch");
    for (std::size_t s = 0; s < n_states_; ++s) {
      double total = 0.0;
      for (double p : row(s)) {
        require(p >= 0.0, "PolicyTable: negative probability");
        total += p;
      }
      require(std::abs(total - 1.0) <= 1e-9,
              "PolicyTable: row does not sum to 1");
    }
  }

  static PolicyTable uniform(std::size_t n_states, std::size_t n_actions) {
    return PolicyTable(
        n_states, n_actions,
        std::vector<double>(n_states * n_actions,
                            1.0 / static_cast<double>(n_actions)));
  }

  static PolicyTable deterministic(std::span<const ActionIndex> actions,
                                   std::size_t n_actions) {
    std::vector<double> probs(actions.size() * n_actions, 0.0);
    for (std::size_t s = 0; s < actions.size(); ++s) {
      require(actions[s] < n_actions, "PolicyTable: action out of range");
      probs[s * n_actions + actions[s]] = 1.0;
    }
    return PolicyTable(actions.size(), n_actions, std::move(probs));
  }

  std::size_t n_states() const { return n_states_; }
  std::size_t n_actions() const { return n_actions_; }
  double prob(StateIndex s, ActionIndex a) const {
    return probs_[s * n_actions_ + a];
  }
  std::span<const double> row(StateIndex s) const {
    return {probs_.data() + s * n_actions_, n_actions_};
  }
  const std::vector<double>& data() const { return probs_; }

  // (1 - epsilon) * pi + epsilon * uniform.
  PolicyTable softened(double epsilon) const {
    require(epsilon >= 0.0 && epsilon <= 1.0,
            "PolicyTable::softened: epsilon not in [0, 1]");
    std::vector<double> probs(probs_.size());
    const double floor = epsilon / static_cast<double>(n_actions_);
    for (std::size_t i = 0; i < probs.size(); ++i) {
      probs[i] = (1.0 - epsilon) * probs_[i] + floor;
    }
    return PolicyTable(n_states_, n_actions_, std::move(probs));
  }

 private:
  std::size_t n_states_;
  std::size_t n_actions_;
  std::vector<double> probs_;
};

struct AssessmentSpec {
  std::vector<StateIndex> start_states;
  std::size_t horizon = 10;
  double gamma = 1.0;

  std::size_t k() const { return start_states.size(); }

  void validate(std::size_t n_states) const {
    require(!start_states.empty(), "AssessmentSpec: need at least one state");
    require(horizon >= 1, "AssessmentSpec: horizon must be positive");
    require(gamma >= 0.0 && gamma <= 1.0, "AssessmentSpec: gamma not in [0, 1]");
    for (std::size_t i = 0; i < start_states.size(); ++i) {
      require(start_states[i] < n_states,
              "AssessmentSpec: start state out of range");
      for (std::size_t j = 0; j < i; ++j) {
        require(start_states[i] != start_states[j],
                "AssessmentSpec: duplicate start state");
      }
    }
  }
};

// Assessment MDP plus its Dirac start set. By default it shares the
// deployment dynamics; pass a different MDP to override.
struct AssessmentEnvironment {
  std::shared_ptr<const TabularMdp> mdp;
  AssessmentSpec spec;

  AssessmentEnvironment(std::shared_ptr<const TabularMdp> dynamics,
                        AssessmentSpec assessment)
      : mdp(std::move(dynamics)), spec(std::move(assessment)) {
    require(mdp != nullptr, "AssessmentEnvironment: null dynamics");
    spec.validate(mdp->n_states());
  }
};

struct Trajectory {
  std::vector<StateIndex> states;    // T + 1 entries
  std::vector<ActionIndex> actions;  // T entries
  std::vector<double> rewards;       // T entries

  std::size_t length() const { return actions.size(); }
  StateIndex start() const { return states.front(); }

  bool consistent() const {
    return states.size() == actions.size() + 1 &&
           rewards.size() == actions.size();
  }
};

inline Trajectory rollout(const TabularMdp& mdp, const PolicyTable& policy,
                          StateIndex start_state, std::size_t horizon,
                          Rng& rng) {
  require(mdp.is_valid_state(start_state),
          "rollout: invalid start state " + std::to_string(start_state));
  require(policy.n_states() == mdp.n_states() &&
              policy.n_actions() == mdp.n_actions(),
          "rollout: policy does not match the MDP's state/action spaces");
  require(horizon >= 1, "rollout: horizon must be positive");
  Trajectory traj;
  traj.states.reserve(horizon + 1);
  traj.actions.reserve(horizon);
  traj.rewards.reserve(horizon);
  StateIndex s = start_state;
  traj.states.push_back(s);
  for (std::size_t t = 0; t < horizon; ++t) {
    const ActionIndex a = rng.categorical(policy.row(s));
    traj.actions.push_back(a);
    traj.rewards.push_back(mdp.reward(s, a));
    s = rng.categorical(mdp.next_distribution(s, a));
    traj.states.push_back(s);
  }
  return traj;
}

inline StateIndex sample_start_state(const TabularMdp& mdp, Rng& rng) {
  return rng.categorical(mdp.start_dist());
}

inline double discounted_return(std::span<const double> rewards,
                                double gamma) {
  double total = 0.0;
  double discount = 1.0;
  for (double r : rewards) {
    total += discount * r;
    discount *= gamma;
  }
  return total;
}

inline double discounted_return(const Trajectory& traj, double gamma) {
  return discounted_return(traj.rewards, gamma);
}

// Time-indexed values of a fixed policy: V_t for t = 0..T (V_T = 0) and
// Q_t for t = 0..T-1.
class FiniteHorizonValues {
 public:
  FiniteHorizonValues(std::size_t horizon, std::size_t n_states,
                      std::size_t n_actions)
      : horizon_(horizon),
        n_states_(n_states),
        n_actions_(n_actions),
        v_((horizon + 1) * n_states, 0.0),
        q_(horizon * n_states * n_actions, 0.0) {}

  std::size_t horizon() const { return horizon_; }
  std::size_t n_states() const { return n_states_; }
  std::size_t n_actions() const { return n_actions_; }

  double v(std::size_t t, StateIndex s) const {
    return t >= horizon_ ? 0.0 : v_[t * n_states_ + s];
  }
  double q(std::size_t t, StateIndex s, ActionIndex a) const {
    return t >= horizon_ ? 0.0 : q_[(t * n_states_ + s) * n_actions_ + a];
  }
  double& v_ref(std::size_t t, StateIndex s) { return v_[t * n_states_ + s]; }
  double& q_ref(std::size_t t, StateIndex s, ActionIndex a) {
    return q_[(t * n_states_ + s) * n_actions_ + a];
  }

  std::vector<double> initial_values() const {
    return {v_.begin(), v_.begin() + static_cast<std::ptrdiff_t>(n_states_)};
  }

  // Stationary tables repeated over every step.
  static FiniteHorizonValues stationary(std::size_t horizon,
                                        std::span<const double> q_table,
                                        std::span<const double> v_table,
                                        std::size_t n_actions) {
    const std::size_t n_states = v_table.size();
    require(q_table.size() == n_states * n_actions,
            "FiniteHorizonValues::stationary: size mismatch");
    FiniteHorizonValues out(horizon, n_states, n_actions);
    for (std::size_t t = 0; t < horizon; ++t) {
      for (std::size_t s = 0; s < n_states; ++s) {
        out.v_ref(t, s) = v_table[s];
        for (std::size_t a = 0; a < n_actions; ++a) {
          out.q_ref(t, s, a) = q_table[s * n_actions + a];
        }
      }
    }
    return out;
  }

 private:
  std::size_t horizon_;
  std::size_t n_states_;
  std::size_t n_actions_;
  std::vector<double> v_;
  std::vector<double> q_;
};

inline FiniteHorizonValues exact_value_table(const TabularMdp& mdp,
                                             const PolicyTable& policy,
                                             std::size_t horizon,
                                             double gamma) {
  require(policy.n_states() == mdp.n_states() &&
              policy.n_actions() == mdp.n_actions(),
          "exact_values: policy does not match the MDP");
  const std::size_t n = mdp.n_states();
  const std::size_t m = mdp.n_actions();
  FiniteHorizonValues out(horizon, n, m);
  for (std::size_t t = horizon; t-- > 0;) {
    for (StateIndex s = 0; s < n; ++s) {
      double v = 0.0;
      for (ActionIndex a = 0; a < m; ++a) {
        double future = 0.0;
        const auto next = mdp.next_distribution(s, a);
        for (StateIndex s2 = 0; s2 < n; ++s2) {
          if (next[s2] != 0.0) future += next[s2] * out.v(t + 1, s2);
        }
        const double q = mdp.reward(s, a) + gamma * future;
        out.q_ref(t, s, a) = q;
        v += policy.prob(s, a) * q;
      }
      out.v_ref(t, s) = v;
    }
  }
  return out;
}

inline FiniteHorizonValues exact_value_table(const TabularMdp& mdp,
                                             const PolicyTable& policy) {
  return exact_value_table(mdp, policy, mdp.horizon(), mdp.gamma());
}

// V_0 by backward induction over the MDP's own horizon and discount.
inline std::vector<double> exact_values(const TabularMdp& mdp,
                                        const PolicyTable& policy) {
  return exact_value_table(mdp, policy).initial_values();
}

inline double weighted_mean(std::span<const double> weights,
                            std::span<const double> values) {
  require(weights.size() == values.size(), "weighted_mean: size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    total += weights[i] * values[i];
  }
  return total;
}

inline double exact_performance(const TabularMdp& mdp,
                                const PolicyTable& policy) {
  const auto values = exact_values(mdp, policy);
  return weighted_mean(mdp.start_dist(), values);
}

// Every trajectory of `horizon` steps from `start` with nonzero probability,
// paired with that probability. Exponential in horizon; for exact-expectation
// checks on tiny MDPs.
struct WeightedTrajectory {
  Trajectory trajectory;
  double probability = 0.0;
};

inline std::vector<WeightedTrajectory> enumerate_trajectories(
    const TabularMdp& mdp, const PolicyTable& policy, StateIndex start,
    std::size_t horizon) {
  require(mdp.is_valid_state(start), "enumerate_trajectories: invalid start");
  std::vector<WeightedTrajectory> frontier;
  frontier.push_back({Trajectory{{start}, {}, {}}, 1.0});
  for (std::size_t t = 0; t < horizon; ++t) {
    std::vector<WeightedTrajectory> next;
    for (const auto& w : frontier) {
      const StateIndex s = w.trajectory.states.back();
      for (ActionIndex a = 0; a < mdp.n_actions(); ++a) {
        const double pa = policy.prob(s, a);
        if (pa == 0.0) continue;
        const auto dist = mdp.next_distribution(s, a);
        for (StateIndex s2 = 0; s2 < mdp.n_states(); ++s2) {
          if (dist[s2] == 0.0) continue;
          WeightedTrajectory child = w;
          child.trajectory.actions.push_back(a);
          child.trajectory.rewards.push_back(mdp.reward(s, a));
          child.trajectory.states.push_back(s2);
          child.probability *= pa * dist[s2];
          next.push_back(std::move(child));
        }
      }
    }
    frontier = std::move(next);
  }
  return frontier;
}

// Same, with the start state drawn from the MDP's start distribution.
inline std::vector<WeightedTrajectory> enumerate_trajectories(
    const TabularMdp& mdp, const PolicyTable& policy, std::size_t horizon) {
  std::vector<WeightedTrajectory> out;
  for (StateIndex s = 0; s < mdp.n_states(); ++s) {
    const double p0 = mdp.start_dist()[s];
    if (p0 == 0.0) continue;
    for (auto& w : enumerate_trajectories(mdp, policy, s, horizon)) {
      w.probability *= p0;
      out.push_back(std::move(w));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

struct GridCell {
  std::size_t x = 0;
  std::size_t y = 0;
};

struct GridworldConfig {
  std::size_t width = 4;
  std::size_t height = 4;
  std::vector<GridCell> goals;
  double step_reward = 0.0;
  double goal_reward = 1.0;
  double slip = 0.0;
  std::size_t horizon = 16;
  double gamma = 0.95;
};

enum GridAction : ActionIndex { kUp = 0, kRight = 1, kDown = 2, kLeft = 3 };
inline constexpr std::size_t kGridActions = 4;

// State index is y * width + x. A slipping move is replaced by a uniformly
// random direction. Goals are absorbing with zero reward; entering a goal
// pays goal_reward, so R(s, a) = step_reward + goal_reward * P(goal | s, a).
// The start distribution is uniform over non-goal cells (all cells when every
// cell is a goal). Embeddings are (x, y) scaled into [0, 1].
inline TabularMdp make_gridworld(const GridworldConfig& config) {
  require(config.width >= 1 && config.height >= 1,
          "make_gridworld: dimensions must be at least 1");
  require(config.slip >= 0.0 && config.slip <= 1.0,
          "make_gridworld: slip not in [0, 1]");
  const std::size_t w = config.width;
  const std::size_t h = config.height;
  const std::size_t n = w * h;
  std::vector<bool> is_goal(n, false);
  for (const auto& g : config.goals) {
    require(g.x < w && g.y < h, "make_gridworld: goal cell outside the grid");
    is_goal[g.y * w + g.x] = true;
  }

  auto move = [&](std::size_t s, ActionIndex a) {
    std::size_t x = s % w;
    std::size_t y = s / w;
    switch (a) {
      case kUp:
        if (y > 0) --y;
        break;
      case kRight:
        if (x + 1 < w) ++x;
        break;
      case kDown:
        if (y + 1 < h) ++y;
        break;
      default:
        if (x > 0) --x;
        break;
    }
    return y * w + x;
  };

  std::vector<double> transitions(n * kGridActions * n, 0.0);
  std::vector<double> rewards(n * kGridActions, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    for (ActionIndex a = 0; a < kGridActions; ++a) {
      double* row = transitions.data() + (s * kGridActions + a) * n;
      if (is_goal[s]) {
        row[s] = 1.0;
        continue;
      }
      row[move(s, a)] += 1.0 - config.slip;
      if (config.slip > 0.0) {
        for (ActionIndex b = 0; b < kGridActions; ++b) {
          row[move(s, b)] += config.slip / static_cast<double>(kGridActions);
        }
      }
      double goal_mass = 0.0;
      for (std::size_t s2 = 0; s2 < n; ++s2) {
        if (is_goal[s2]) goal_mass += row[s2];
      }
      rewards[s * kGridActions + a] =
          config.step_reward + config.goal_reward * goal_mass;
    }
  }

  std::size_t free_cells = 0;
  for (bool g : is_goal) free_cells += g ? 0 : 1;
  std::vector<double> start(n, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    if (free_cells == 0) {
      start[s] = 1.0 / static_cast<double>(n);
    } else if (!is_goal[s]) {
      start[s] = 1.0 / static_cast<double>(free_cells);
    }
  }

  std::vector<double> embeddings(n * 2, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    embeddings[2 * s] =
        w > 1 ? static_cast<double>(s % w) / static_cast<double>(w - 1) : 0.0;
    embeddings[2 * s + 1] =
        h > 1 ? static_cast<double>(s / w) / static_cast<double>(h - 1) : 0.0;
  }
  return TabularMdp(n, kGridActions, std::move(transitions),
                    std::move(rewards), config.gamma, std::move(start),
                    config.horizon, std::move(embeddings), 2);
}

struct RandomMdpOptions {
  double gamma = 0.9;
  std::size_t horizon = 50;
  double reward_low = 0.0;
  double reward_high = 1.0;
};

// Rewards uniform in [reward_low, reward_high); stochastic rows are flat
// Dirichlet draws; deterministic rows pick a uniform next state. The start
// distribution is uniform.
inline TabularMdp sample_random_mdp(std::size_t n_states, std::size_t n_actions,
                                    bool deterministic, Rng& rng,
                                    const RandomMdpOptions& options = {}) {
  require(n_states >= 1 && n_actions >= 1,
          "sample_random_mdp: n_states and n_actions must be positive");
  std::vector<double> transitions(n_states * n_actions * n_states, 0.0);
  std::vector<double> rewards(n_states * n_actions, 0.0);
  for (std::size_t row = 0; row < n_states * n_actions; ++row) {
    double* p = transitions.data() + row * n_states;
    if (deterministic) {
      p[rng.index(n_states)] = 1.0;
    } else {
      double total = 0.0;
      for (std::size_t j = 0; j < n_states; ++j) {
        double u = rng.uniform();
        while (u <= 0.0) u = rng.uniform();
        p[j] = -std::log(u);
        total += p[j];
      }
      for (std::size_t j = 0; j < n_states; ++j) p[j] /= total;
      // Fold the rounding residue into the largest entry so the row sums
      // to one at machine precision.
      double sum = 0.0;
      for (std::size_t j = 0; j < n_states; ++j) sum += p[j];
      auto* biggest = std::max_element(p, p + n_states);
      *biggest += 1.0 - sum;
    }
  }
  for (double& r : rewards) {
    r = rng.uniform(options.reward_low, options.reward_high);
  }
  std::vector<double> start(n_states, 1.0 / static_cast<double>(n_states));
  return TabularMdp(n_states, n_actions, std::move(transitions),
                    std::move(rewards), options.gamma, std::move(start),
                    options.horizon);
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const TabularMdp& mdp) {
  std::vector<double> embeddings;
  embeddings.reserve(mdp.n_states() * mdp.embedding_dim());
  for (std::size_t s = 0; s < mdp.n_states(); ++s) {
    const auto e = mdp.embedding(s);
    embeddings.insert(embeddings.end(), e.begin(), e.end());
  }
  return {{"n_states", mdp.n_states()},
          {"n_actions", mdp.n_actions()},
          {"gamma", mdp.gamma()},
          {"horizon", mdp.horizon()},
          {"start_dist", mdp.start_dist()},
          {"transitions", mdp.transitions()},
          {"rewards", mdp.rewards()},
          {"embedding_dim", mdp.embedding_dim()},
          {"embeddings", embeddings}};
}

inline TabularMdp mdp_from_json(const nlohmann::json& j) {
  try {
    return TabularMdp(j.at("n_states").get<std::size_t>(),
                      j.at("n_actions").get<std::size_t>(),
                      j.at("transitions").get<std::vector<double>>(),
                      j.at("rewards").get<std::vector<double>>(),
                      j.at("gamma").get<double>(),
                      j.at("start_dist").get<std::vector<double>>(),
                      j.at("horizon").get<std::size_t>(),
                      j.value("embeddings", std::vector<double>{}),
                      j.value("embedding_dim", std::size_t{0}));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("mdp_from_json: ") + e.what());
  }
}

}  // namespace evarl
