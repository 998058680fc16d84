#pragma once

// Exhaustive-enumeration oracles for gradient estimators on small MDPs.
// Every joint outcome of one deployment episode and one assessment set is
// weighted by its probability, so expectations are exact up to rounding.
// Feasible only for a handful of states and short horizons.

#include <functional>
#include <vector>

#include "evarl/policy.hpp"

namespace evarl {

struct JointOutcome {
  const Trajectory* deployment;
  std::vector<const Trajectory*> assessment;
  double probability;
};

class JointEnumeration {
 public:
  JointEnumeration(const TabularMdp& mdp, const AssessmentEnvironment& env,
                   const PolicyTable& pi) {
    deployment_ = enumerate_trajectories(mdp, pi, mdp.horizon());
    for (StateIndex s : env.spec.start_states) {
      per_state_.push_back(enumerate_trajectories(*env.mdp, pi, s, env.spec.horizon));
    }
  }

  // Calls fn(deployment, assessment rollouts, probability) for each outcome.
  void for_each(const std::function<void(const Trajectory&,
                                         const std::vector<Trajectory>&, double)>& fn) const {
    std::vector<Trajectory> set(per_state_.size());
    for (const auto& d : deployment_) {
      recurse(0, d.probability, set, [&](const std::vector<Trajectory>& a, double p) {
        fn(d.trajectory, a, p);
      });
    }
  }

  // Assessment sets only, with their probabilities.
  void for_each_assessment(
      const std::function<void(const std::vector<Trajectory>&, double)>& fn) const {
    std::vector<Trajectory> set(per_state_.size());
    recurse(0, 1.0, set, fn);
  }

  const std::vector<WeightedTrajectory>& deployment() const { return deployment_; }
  const std::vector<WeightedTrajectory>& assessment(std::size_t i) const {
    return per_state_[i];
  }

 private:
  void recurse(std::size_t i, double p, std::vector<Trajectory>& set,
               const std::function<void(const std::vector<Trajectory>&, double)>& fn) const {
    if (i == per_state_.size()) {
      fn(set, p);
      return;
    }
    for (const auto& w : per_state_[i]) {
      set[i] = w.trajectory;
      recurse(i + 1, p * w.probability, set, fn);
    }
  }

  std::vector<WeightedTrajectory> deployment_;
  std::vector<std::vector<WeightedTrajectory>> per_state_;
};

// E[(g(h_D) - Vhat(s_D; Xi_A))^2] under pi.
inline double exact_penalty(const TabularMdp& mdp, const AssessmentEnvironment& env,
                            const PolicyTable& pi, const ValuePredictor& predictor) {
  const JointEnumeration joint(mdp, env, pi);
  double total = 0.0;
  joint.for_each([&](const Trajectory& d, const std::vector<Trajectory>& a, double p) {
    const auto data = make_assessment_dataset(env, a);
    const double r = discounted_return(d, mdp.gamma()) -
                     predictor.predict(mdp.embedding(d.start()), data);
    total += p * r * r;
  });
  return total;
}

// Expectation of the single-episode estimator over all joint outcomes.
inline ParameterSet expected_evarl_gradient(const Policy& policy, const TabularMdp& mdp,
                                            const AssessmentEnvironment& env,
                                            const ValuePredictor& predictor,
                                            const EvarlOptions& options) {
  const JointEnumeration joint(mdp, env, policy.table());
  ParameterSet total = policy.parameters().zeros_like();
  joint.for_each([&](const Trajectory& d, const std::vector<Trajectory>& a, double p) {
    const std::vector<std::vector<Trajectory>> sets{a};
    const auto est = evarl_gradient(policy, {&d, 1}, sets, predictor, mdp, env, options);
    total.axpy(p, est.gradient);
  });
  return total;
}

// Expectation of the single-episode REINFORCE estimator.
inline ParameterSet expected_reinforce_gradient(const Policy& policy, const TabularMdp& mdp,
                                                const ReinforceOptions& options = {}) {
  ParameterSet total = policy.parameters().zeros_like();
  for (const auto& w : enumerate_trajectories(mdp, policy.table(), mdp.horizon())) {
    total.axpy(w.probability,
               reinforce_gradient(policy, {&w.trajectory, 1}, mdp.gamma(), options).gradient);
  }
  return total;
}

// Central differences of f over the policy's flattened parameters.
inline std::vector<double> policy_fd_gradient(
    const Policy& policy, const std::function<double(const PolicyTable&)>& f,
    double h = 1e-5) {
  auto probe = policy.clone();
  std::vector<double> out;
  for (std::size_t i = 0; i < probe->parameters().size(); ++i) {
    auto& data = probe->mutable_parameters()[i].value.data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double saved = data[j];
      data[j] = saved + h;
      const double up = f(probe->table());
      data[j] = saved - h;
      const double down = f(probe->table());
      data[j] = saved;
      out.push_back((up - down) / (2 * h));
    }
  }
  return out;
}

}  // namespace evarl
