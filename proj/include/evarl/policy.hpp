#pragma once

// Categorical policies (tabular softmax and a small MLP over state
// embeddings), score-function policy gradients, and the evaluation-aware
// gradient that adds the predictability penalty.

#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "evarl/error.hpp"
#include "evarl/mdp.hpp"
#include "evarl/predictor.hpp"
#include "evarl/random.hpp"
#include "evarl/tensor.hpp"

namespace evarl {

// One weighted log-probability term: weight * log pi(action | state).
struct ScoreTerm {
  StateIndex state = 0;
  ActionIndex action = 0;
  double weight = 0.0;
};

// One weighted entropy term: weight * H(pi(. | state)).
struct StateWeight {
  StateIndex state = 0;
  double weight = 0.0;
};

class Policy {
 public:
  virtual ~Policy() = default;

  virtual std::size_t n_states() const = 0;
  virtual std::size_t n_actions() const = 0;
  virtual std::vector<double> action_distribution(StateIndex s) const = 0;
  virtual PolicyTable table() const = 0;

  virtual const ParameterSet& parameters() const = 0;
  virtual ParameterSet& mutable_parameters() = 0;

  // Gradient of sum_i w_i log pi(a_i | s_i) with respect to the parameters.
  virtual ParameterSet score_gradient(std::span<const ScoreTerm> terms) const = 0;
  // Gradient of sum_i w_i H(pi(. | s_i)).
  virtual ParameterSet entropy_gradient(
      std::span<const StateWeight> terms) const = 0;

  virtual std::unique_ptr<Policy> clone() const = 0;
};

namespace detail {

inline std::vector<double> stable_softmax(std::span<const double> logits) {
  double top = logits[0];
  for (double x : logits) top = std::max(top, x);
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - top);
    total += p[i];
  }
  for (double& x : p) x /= total;
  return p;
}

}  // namespace detail

// pi(a | s) = softmax(theta[s, :]).
class TabularSoftmaxPolicy : public Policy {
 public:
  TabularSoftmaxPolicy(std::size_t n_states, std::size_t n_actions)
      : n_states_(n_states), n_actions_(n_actions) {
    require(n_states >= 1 && n_actions >= 1,
            "TabularSoftmaxPolicy: empty state or action space");
    params_.add("logits", Tensor::zeros({n_states, n_actions}));
  }

  TabularSoftmaxPolicy(std::size_t n_states, std::size_t n_actions,
                       std::vector<double> logits)
      : TabularSoftmaxPolicy(n_states, n_actions) {
    require(logits.size() == n_states * n_actions,
            "TabularSoftmaxPolicy: logits size mismatch");
    params_.at("logits").data() = std::move(logits);
  }

  // Small random logits, N(0, stddev^2).
  static TabularSoftmaxPolicy random(std::size_t n_states,
                                     std::size_t n_actions, Rng& rng,
                                     double stddev = 0.01) {
    TabularSoftmaxPolicy p(n_states, n_actions);
    for (double& x : p.params_.at("logits").data()) x = rng.normal(0.0, stddev);
    return p;
  }

  std::size_t n_states() const override { return n_states_; }
  std::size_t n_actions() const override { return n_actions_; }

  std::span<const double> logits(StateIndex s) const {
    require(s < n_states_, "TabularSoftmaxPolicy: invalid state");
    return {params_[0].value.data().data() + s * n_actions_, n_actions_};
  }

  std::vector<double> action_distribution(StateIndex s) const override {
    return detail::stable_softmax(logits(s));
  }

  PolicyTable table() const override {
    std::vector<double> probs;
    probs.reserve(n_states_ * n_actions_);
    for (StateIndex s = 0; s < n_states_; ++s) {
      const auto p = action_distribution(s);
      probs.insert(probs.end(), p.begin(), p.end());
    }
    return PolicyTable(n_states_, n_actions_, std::move(probs));
  }

  const ParameterSet& parameters() const override { return params_; }
  ParameterSet& mutable_parameters() override { return params_; }

  // d log pi(a|s) / d theta[s, b] = 1[a = b] - pi(b|s).
  ParameterSet score_gradient(std::span<const ScoreTerm> terms) const override {
    ParameterSet grad = params_.zeros_like();
    auto& g = grad[0].value.data();
    std::vector<std::vector<double>> cache(n_states_);
    for (const auto& term : terms) {
      require(term.state < n_states_ && term.action < n_actions_,
              "TabularSoftmaxPolicy::score_gradient: index out of range");
      if (term.weight == 0.0) continue;
      auto& p = cache[term.state];
      if (p.empty()) p = action_distribution(term.state);
      double* row = g.data() + term.state * n_actions_;
      for (std::size_t b = 0; b < n_actions_; ++b) row[b] -= term.weight * p[b];
      row[term.action] += term.weight;
    }
    return grad;
  }

  // dH/dtheta[s, b] = -pi(b|s) (log pi(b|s) + H(s)).
  ParameterSet entropy_gradient(
      std::span<const StateWeight> terms) const override {
    ParameterSet grad = params_.zeros_like();
    auto& g = grad[0].value.data();
    for (const auto& term : terms) {
      require(term.state < n_states_,
              "TabularSoftmaxPolicy::entropy_gradient: invalid state");
      const auto p = action_distribution(term.state);
      double h = 0.0;
      for (double x : p) {
        if (x > 0.0) h -= x * std::log(x);
      }
      double* row = g.data() + term.state * n_actions_;
      for (std::size_t b = 0; b < n_actions_; ++b) {
        if (p[b] > 0.0) row[b] -= term.weight * p[b] * (std::log(p[b]) + h);
      }
    }
    return grad;
  }

  std::unique_ptr<Policy> clone() const override {
    return std::make_unique<TabularSoftmaxPolicy>(*this);
  }

 private:
  std::size_t n_states_;
  std::size_t n_actions_;
  ParameterSet params_;
};

// Relu MLP mapping a state embedding to action logits.
class MlpPolicy : public Policy {
 public:
  MlpPolicy(const TabularMdp& mdp, std::vector<std::size_t> hidden, Rng& rng)
      : n_states_(mdp.n_states()),
        n_actions_(mdp.n_actions()),
        embeddings_(Tensor::zeros({mdp.n_states(), mdp.embedding_dim()})) {
    for (StateIndex s = 0; s < n_states_; ++s) {
      const auto e = mdp.embedding(s);
      for (std::size_t j = 0; j < e.size(); ++j) embeddings_.at(s, j) = e[j];
    }
    std::size_t in = mdp.embedding_dim();
    hidden.push_back(n_actions_);
    for (std::size_t l = 0; l < hidden.size(); ++l) {
      const std::size_t out = hidden[l];
      require(out >= 1, "MlpPolicy: layer width must be positive");
      const bool last = l + 1 == hidden.size();
      // Small output layer so the initial policy is near uniform.
      const double scale = (last ? 0.01 : 1.0) / std::sqrt(static_cast<double>(in));
      params_.add("layer" + std::to_string(l) + ".w",
                  Tensor::randn({in, out}, rng, scale));
      params_.add("layer" + std::to_string(l) + ".b", Tensor::zeros({out}));
      in = out;
    }
  }

  std::size_t n_states() const override { return n_states_; }
  std::size_t n_actions() const override { return n_actions_; }

  std::vector<double> action_distribution(StateIndex s) const override {
    require(s < n_states_, "MlpPolicy: invalid state");
    const auto t = table();
    const auto row = t.row(s);
    return {row.begin(), row.end()};
  }

  PolicyTable table() const override {
    Graph g;
    std::vector<Var> p;
    for (const auto& e : params_) p.push_back(g.constant(e.value));
    std::vector<std::size_t> all(n_states_);
    for (std::size_t s = 0; s < n_states_; ++s) all[s] = s;
    const Var probs = ad::softmax(logits(g, p, std::move(all)), 1);
    return PolicyTable(n_states_, n_actions_, probs.value().data());
  }

  const ParameterSet& parameters() const override { return params_; }
  ParameterSet& mutable_parameters() override { return params_; }

  // Logits [M, A] for the listed states.
  Var logits(Graph& g, const std::vector<Var>& p,
             std::vector<std::size_t> states) const {
    Var x = ad::gather_rows(g.constant(embeddings_), std::move(states));
    const std::size_t layers = p.size() / 2;
    for (std::size_t l = 0; l < layers; ++l) {
      x = ad::add(ad::matmul(x, p[2 * l]), p[2 * l + 1]);
      if (l + 1 < layers) x = ad::relu(x);
    }
    return x;
  }

  ParameterSet score_gradient(std::span<const ScoreTerm> terms) const override {
    if (terms.empty()) return params_.zeros_like();
    std::vector<std::size_t> states, actions;
    std::vector<double> weights;
    for (const auto& t : terms) {
      require(t.state < n_states_ && t.action < n_actions_,
              "MlpPolicy::score_gradient: index out of range");
      states.push_back(t.state);
      actions.push_back(t.action);
      weights.push_back(t.weight);
    }
    Graph g;
    const auto vars = bind(g, params_);
    const Var logp =
        ad::pick(ad::log_softmax(logits(g, vars, std::move(states)), 1),
                 std::move(actions));
    const Var total = ad::sum(
        ad::multiply(logp, g.constant(Tensor::vector(std::move(weights)))));
    g.backward(total);
    return gradients(g, params_, vars);
  }

  ParameterSet entropy_gradient(
      std::span<const StateWeight> terms) const override {
    if (terms.empty()) return params_.zeros_like();
    std::vector<std::size_t> states;
    Tensor weights = Tensor::zeros({terms.size(), n_actions_});
    for (std::size_t i = 0; i < terms.size(); ++i) {
      require(terms[i].state < n_states_,
              "MlpPolicy::entropy_gradient: invalid state");
      states.push_back(terms[i].state);
      for (std::size_t a = 0; a < n_actions_; ++a) {
        weights.at(i, a) = -terms[i].weight;
      }
    }
    Graph g;
    const auto vars = bind(g, params_);
    const Var z = logits(g, vars, std::move(states));
    // -sum_a p log p, weighted per row.
    const Var plogp = ad::multiply(ad::softmax(z, 1), ad::log_softmax(z, 1));
    g.backward(ad::sum(ad::multiply(plogp, g.constant(weights))));
    return gradients(g, params_, vars);
  }

  std::unique_ptr<Policy> clone() const override {
    return std::make_unique<MlpPolicy>(*this);
  }

 private:
  std::size_t n_states_;
  std::size_t n_actions_;
  Tensor embeddings_;
  ParameterSet params_;
};

// ---------------------------------------------------------------------------
// Gradient estimators
// ---------------------------------------------------------------------------

struct GradientEstimate {
  ParameterSet gradient;
  double mean_return = 0.0;
  double mean_penalty = 0.0;  // mean (g(h_D) - Vhat)^2; 0 for plain PG
  std::size_t episodes = 0;
};

struct ReinforceOptions {
  // Per-state value b(s); the term at step t uses gamma^t b(s_t).
  std::optional<std::vector<double>> baseline;
  double entropy_coef = 0.0;
};

// (1/N) sum_n sum_t grad log pi(a_t|s_t) (G_t - gamma^t b(s_t)) with
// G_t = sum_{t' >= t} gamma^t' r_t'; an unbiased estimate of grad J.
inline GradientEstimate reinforce_gradient(const Policy& policy,
                                           std::span<const Trajectory> episodes,
                                           double gamma,
                                           const ReinforceOptions& options = {}) {
  require(!episodes.empty(), "reinforce_gradient: no trajectories");
  if (options.baseline) {
    require(options.baseline->size() == policy.n_states(),
            "reinforce_gradient: baseline size mismatch");
  }
  const double inv_n = 1.0 / static_cast<double>(episodes.size());
  std::vector<ScoreTerm> terms;
  std::vector<StateWeight> entropy_terms;
  double total_return = 0.0;
  for (const auto& traj : episodes) {
    require(traj.consistent(), "reinforce_gradient: malformed trajectory");
    const std::size_t len = traj.length();
    std::vector<double> discount(len);
    double d = 1.0;
    for (std::size_t t = 0; t < len; ++t) {
      discount[t] = d;
      d *= gamma;
    }
    double to_go = 0.0;
    std::vector<double> rtg(len);
    for (std::size_t t = len; t-- > 0;) {
      to_go += discount[t] * traj.rewards[t];
      rtg[t] = to_go;
    }
    total_return += to_go;
    for (std::size_t t = 0; t < len; ++t) {
      double w = rtg[t];
      if (options.baseline) w -= discount[t] * (*options.baseline)[traj.states[t]];
      terms.push_back({traj.states[t], traj.actions[t], w * inv_n});
      if (options.entropy_coef != 0.0) {
        entropy_terms.push_back({traj.states[t], options.entropy_coef * inv_n});
      }
    }
  }
  GradientEstimate out;
  out.gradient = policy.score_gradient(terms);
  if (!entropy_terms.empty()) {
    out.gradient.axpy(1.0, policy.entropy_gradient(entropy_terms));
  }
  out.mean_return = total_return * inv_n;
  out.episodes = episodes.size();
  return out;
}

enum class PenaltyEstimator {
  // Chain-rule form -2 beta (g - Vhat)(grad g - sum_i dVhat/dg_i grad g_i),
  // with grad g = g grad log p(h), evaluated on the same samples.
  kPlugIn,
  // -beta (g - Vhat)^2 (grad log p(h_D) + sum_i grad log p(h_A^i)); unbiased
  // for the gradient of E[(g - Vhat)^2].
  kScoreFunction,
};

inline const char* to_string(PenaltyEstimator e) {
  return e == PenaltyEstimator::kPlugIn ? "plug-in" : "score-function";
}

struct EvarlOptions {
  double beta = 0.0;
  PenaltyEstimator estimator = PenaltyEstimator::kPlugIn;
  ReinforceOptions pg;
};

namespace detail {

inline void push_trajectory_terms(const Trajectory& traj, double weight,
                                  std::vector<ScoreTerm>& terms) {
  if (weight == 0.0) return;
  for (std::size_t t = 0; t < traj.length(); ++t) {
    terms.push_back({traj.states[t], traj.actions[t], weight});
  }
}

}  // namespace detail

// Return-maximization gradient plus the predictability penalty
// -beta grad E[(g(h_D) - Vhat(s_D; Xi_A))^2]. `assessment_sets` holds either
// one set shared by every deployment episode or one set per episode; each
// set has one rollout per assessment start state, in spec order.
inline GradientEstimate evarl_gradient(
    const Policy& policy, std::span<const Trajectory> deployment,
    std::span<const std::vector<Trajectory>> assessment_sets,
    const ValuePredictor& predictor, const TabularMdp& deploy_mdp,
    const AssessmentEnvironment& assess_env, const EvarlOptions& options) {
  require(options.beta >= 0.0, "evarl_gradient: beta must be nonnegative");
  GradientEstimate out =
      reinforce_gradient(policy, deployment, deploy_mdp.gamma(), options.pg);
  if (options.beta == 0.0) return out;
  require(assessment_sets.size() == 1 ||
              assessment_sets.size() == deployment.size(),
          "evarl_gradient: need one assessment set, or one per episode");

  std::vector<AssessmentDataset> datasets;
  datasets.reserve(assessment_sets.size());
  for (const auto& set : assessment_sets) {
    datasets.push_back(make_assessment_dataset(assess_env, set));
  }
  std::vector<PredictorQuery> queries;
  queries.reserve(deployment.size());
  for (std::size_t n = 0; n < deployment.size(); ++n) {
    const auto& data = datasets[assessment_sets.size() == 1 ? 0 : n];
    queries.push_back({deploy_mdp.embedding(deployment[n].start()), &data});
  }
  const auto predictions = predictor.predict_with_sensitivity(queries);

  const double inv_n = 1.0 / static_cast<double>(deployment.size());
  const double beta = options.beta;
  std::vector<ScoreTerm> terms;
  // Assessment score weights accumulate per set, then expand once.
  std::vector<std::vector<double>> assess_weight(
      assessment_sets.size(), std::vector<double>(assess_env.spec.k(), 0.0));
  double penalty = 0.0;
  for (std::size_t n = 0; n < deployment.size(); ++n) {
    const std::size_t set = assessment_sets.size() == 1 ? 0 : n;
    const double g = discounted_return(deployment[n], deploy_mdp.gamma());
    const double residual = g - predictions[n].value;
    penalty += residual * residual;
    if (options.estimator == PenaltyEstimator::kPlugIn) {
      const double c = -2.0 * beta * inv_n * residual;
      detail::push_trajectory_terms(deployment[n], c * g, terms);
      const auto& data = datasets[set];
      for (std::size_t i = 0; i < data.k(); ++i) {
        assess_weight[set][i] -=
            c * predictions[n].d_returns[i] * data.entries[i].ret;
      }
    } else {
      const double c = -beta * inv_n * residual * residual;
      detail::push_trajectory_terms(deployment[n], c, terms);
      for (double& w : assess_weight[set]) w += c;
    }
  }
  for (std::size_t set = 0; set < assessment_sets.size(); ++set) {
    for (std::size_t i = 0; i < assess_env.spec.k(); ++i) {
      detail::push_trajectory_terms(assessment_sets[set][i],
                                    assess_weight[set][i], terms);
    }
  }
  out.gradient.axpy(1.0, policy.score_gradient(terms));
  out.mean_penalty = penalty * inv_n;
  return out;
}

// theta <- theta + learning_rate * grad.
inline void apply_update(Policy& policy, const GradientEstimate& grad,
                         double learning_rate) {
  require(policy.parameters().same_layout(grad.gradient),
          "apply_update: gradient layout does not match the policy");
  policy.mutable_parameters().axpy(learning_rate, grad.gradient);
}

}  // namespace evarl
