#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "evarl/mdp.hpp"

namespace evarl {
namespace {

TabularMdp self_loop(double reward, double gamma, std::size_t horizon) {
  return TabularMdp(1, 1, {1.0}, {reward}, gamma, {1.0}, horizon);
}

double mean(const std::vector<double>& xs) {
  double total = 0.0;
  for (double x : xs) total += x;
  return total / static_cast<double>(xs.size());
}

double standard_error(const std::vector<double>& xs) {
  const double m = mean(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1) /
                   static_cast<double>(xs.size()));
}

TEST(Mdp, RejectsRowsThatDoNotSumToOne) {
  EXPECT_THROW(TabularMdp(1, 1, {0.9}, {0.0}, 1.0, {1.0}, 1), InvalidInput);
  EXPECT_THROW(TabularMdp(1, 1, {1.0}, {0.0}, 1.0, {0.5}, 1), InvalidInput);
  EXPECT_THROW(TabularMdp(2, 1, {1.0, 0.0, -0.5, 1.5}, {0.0, 0.0}, 1.0,
                          {1.0, 0.0}, 1),
               InvalidInput);
}

TEST(Mdp, SelfLoopRolloutHasForcedRewards) {
  const auto mdp = self_loop(1.0, 0.5, 3);
  Rng rng(7);
  const auto traj = rollout(mdp, PolicyTable::uniform(1, 1), 0, 3, rng);
  EXPECT_EQ(traj.rewards, (std::vector<double>{1.0, 1.0, 1.0}));
  EXPECT_TRUE(traj.consistent());
  EXPECT_EQ(traj.states.size(), 4u);
}

TEST(Mdp, RolloutRejectsInvalidStart) {
  const auto mdp = self_loop(1.0, 0.5, 3);
  Rng rng(0);
  EXPECT_THROW(rollout(mdp, PolicyTable::uniform(1, 1), 1, 3, rng),
               InvalidInput);
}

TEST(Mdp, DeterministicRolloutIgnoresSeed) {
  Rng gen(3);
  const auto mdp = sample_random_mdp(5, 2, true, gen);
  const std::vector<ActionIndex> actions{0, 1, 1, 0, 1};
  const auto pi = PolicyTable::deterministic(actions, 2);
  Rng a(1), b(999);
  const auto ta = rollout(mdp, pi, 2, 12, a);
  const auto tb = rollout(mdp, pi, 2, 12, b);
  EXPECT_EQ(ta.states, tb.states);
  EXPECT_EQ(ta.rewards, tb.rewards);
}

TEST(Mdp, StochasticRolloutReproducibleUnderSeed) {
  const TabularMdp chain(2, 1, {0.3, 0.7, 0.6, 0.4}, {1.0, -1.0}, 0.9,
                         {0.5, 0.5}, 20);
  Rng a(0), b(0);
  const auto ta = rollout(chain, PolicyTable::uniform(2, 1), 0, 20, a);
  const auto tb = rollout(chain, PolicyTable::uniform(2, 1), 0, 20, b);
  EXPECT_EQ(ta.states, tb.states);
  EXPECT_EQ(ta.rewards, tb.rewards);
}

TEST(Mdp, DiscountedReturnExamples) {
  EXPECT_DOUBLE_EQ(discounted_return(std::vector<double>{1, 1, 1}, 0.5), 1.75);
  EXPECT_DOUBLE_EQ(discounted_return(std::vector<double>{5}, 0.0), 5.0);
  EXPECT_DOUBLE_EQ(discounted_return(std::vector<double>(9, 0.0), 0.9), 0.0);
}

TEST(Mdp, ExactValuesOfSelfLoopMatchGeometricSum) {
  for (double gamma : {0.0, 0.5, 0.9, 1.0}) {
    for (std::size_t horizon : {1u, 3u, 10u}) {
      const auto mdp = self_loop(2.0, gamma, horizon);
      double expected = 0.0, d = 1.0;
      for (std::size_t t = 0; t < horizon; ++t, d *= gamma) expected += 2.0 * d;
      EXPECT_EQ(exact_values(mdp, PolicyTable::uniform(1, 1))[0], expected);
    }
  }
  EXPECT_DOUBLE_EQ(exact_values(self_loop(1.0, 0.5, 3), PolicyTable::uniform(1, 1))[0],
                   1.75);
}

TEST(Mdp, ZeroRewardGivesZeroValues) {
  Rng rng(2);
  RandomMdpOptions opts;
  opts.reward_low = 0.0;
  opts.reward_high = 0.0;
  const auto mdp = sample_random_mdp(4, 3, false, rng, opts);
  for (double v : exact_values(mdp, PolicyTable::uniform(4, 3))) {
    EXPECT_EQ(v, 0.0);
  }
}

TEST(Mdp, ExactPerformanceExamples) {
  const TabularMdp mdp(2, 1, {1.0, 0.0, 0.0, 1.0}, {2.0, 4.0}, 1.0, {0.5, 0.5},
                       1);
  EXPECT_DOUBLE_EQ(exact_performance(mdp, PolicyTable::uniform(2, 1)), 3.0);
  EXPECT_DOUBLE_EQ(
      exact_performance(mdp.with_start_dist({0.0, 1.0}), PolicyTable::uniform(2, 1)),
      4.0);
}

TEST(Mdp, ExactValuesMatchMonteCarlo) {
  Rng gen(11);
  const auto mdp = sample_random_mdp(5, 2, false, gen);
  const std::vector<ActionIndex> actions{1, 0, 1, 1, 0};
  const auto pi = PolicyTable::deterministic(actions, 2);
  const auto v = exact_values(mdp, pi);
  Rng rng(12);
  for (StateIndex s : {0u, 3u}) {
    std::vector<double> returns;
    for (int i = 0; i < 100000; ++i) {
      returns.push_back(discounted_return(
          rollout(mdp, pi, s, mdp.horizon(), rng), mdp.gamma()));
    }
    EXPECT_NEAR(mean(returns), v[s], 3.0 * standard_error(returns));
  }
  std::vector<double> returns;
  for (int i = 0; i < 100000; ++i) {
    returns.push_back(discounted_return(
        rollout(mdp, pi, sample_start_state(mdp, rng), mdp.horizon(), rng),
        mdp.gamma()));
  }
  EXPECT_NEAR(mean(returns), exact_performance(mdp, pi),
              3.0 * standard_error(returns));
}

TEST(Mdp, DeterministicReturnEqualsExactValue) {
  Rng gen(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto mdp = sample_random_mdp(6, 3, true, gen);
    std::vector<ActionIndex> actions(6);
    for (auto& a : actions) a = gen.index(3);
    const auto pi = PolicyTable::deterministic(actions, 3);
    const auto v = exact_values(mdp, pi);
    for (StateIndex s = 0; s < 6; ++s) {
      Rng rng(trial);
      // Forward sum vs backward recursion: same terms, different rounding.
      EXPECT_NEAR(discounted_return(rollout(mdp, pi, s, mdp.horizon(), rng),
                                    mdp.gamma()),
                  v[s], 1e-12);
    }
  }
}

TEST(Gridworld, SingleCellIsAbsorbing) {
  GridworldConfig cfg;
  cfg.width = 1;
  cfg.height = 1;
  cfg.goals = {};
  const auto mdp = make_gridworld(cfg);
  EXPECT_EQ(mdp.n_states(), 1u);
  for (ActionIndex a = 0; a < mdp.n_actions(); ++a) {
    EXPECT_EQ(mdp.transition(0, a, 0), 1.0);
  }
}

TEST(Gridworld, NoSlipIsDeterministic) {
  GridworldConfig cfg;
  cfg.goals = {{3, 3}};
  const auto mdp = make_gridworld(cfg);
  for (StateIndex s = 0; s < mdp.n_states(); ++s) {
    for (ActionIndex a = 0; a < mdp.n_actions(); ++a) {
      int ones = 0;
      for (double p : mdp.next_distribution(s, a)) {
        EXPECT_TRUE(p == 0.0 || p == 1.0);
        ones += p == 1.0;
      }
      EXPECT_EQ(ones, 1);
    }
  }
}

TEST(Gridworld, SlipRowsSumToOne) {
  GridworldConfig cfg;
  cfg.goals = {{3, 3}};
  cfg.slip = 0.1;
  const auto mdp = make_gridworld(cfg);
  for (StateIndex s = 0; s < mdp.n_states(); ++s) {
    for (ActionIndex a = 0; a < mdp.n_actions(); ++a) {
      double total = 0.0;
      for (double p : mdp.next_distribution(s, a)) total += p;
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Gridworld, GoalOutsideGridRejected) {
  GridworldConfig cfg;
  cfg.goals = {{4, 0}};
  EXPECT_THROW(make_gridworld(cfg), InvalidInput);
}

TEST(Gridworld, EmbeddingsAreNormalizedCoordinates) {
  GridworldConfig cfg;
  cfg.width = 3;
  cfg.height = 5;
  cfg.goals = {{2, 4}};
  const auto mdp = make_gridworld(cfg);
  EXPECT_EQ(mdp.embedding_dim(), 2u);
  for (StateIndex s = 0; s < mdp.n_states(); ++s) {
    for (double x : mdp.embedding(s)) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
  }
}

TEST(RandomMdp, DeterministicRowsAreOneHot) {
  Rng rng(4);
  const auto mdp = sample_random_mdp(5, 2, true, rng);
  EXPECT_EQ(mdp.n_states(), 5u);
  EXPECT_EQ(mdp.n_actions(), 2u);
  for (StateIndex s = 0; s < 5; ++s) {
    for (ActionIndex a = 0; a < 2; ++a) {
      double top = 0.0, total = 0.0;
      for (double p : mdp.next_distribution(s, a)) {
        top = std::max(top, p);
        total += p;
      }
      EXPECT_EQ(top, 1.0);
      EXPECT_EQ(total, 1.0);
    }
  }
}

TEST(RandomMdp, SeedReproducible) {
  Rng a(21), b(21);
  const auto x = sample_random_mdp(5, 3, false, a);
  const auto y = sample_random_mdp(5, 3, false, b);
  EXPECT_EQ(x.transitions(), y.transitions());
  EXPECT_EQ(x.rewards(), y.rewards());
}

TEST(RandomMdp, StochasticRowsSumToOne) {
  Rng rng(8);
  for (int i = 0; i < 50; ++i) {
    const auto mdp = sample_random_mdp(7, 3, false, rng);
    for (StateIndex s = 0; s < 7; ++s) {
      for (ActionIndex a = 0; a < 3; ++a) {
        double total = 0.0;
        for (double p : mdp.next_distribution(s, a)) total += p;
        EXPECT_NEAR(total, 1.0, 1e-12);
      }
    }
  }
}

TEST(Mdp, JsonRoundTrip) {
  Rng rng(9);
  const auto mdp = sample_random_mdp(4, 2, false, rng);
  const auto back = mdp_from_json(to_json(mdp));
  EXPECT_EQ(back.transitions(), mdp.transitions());
  EXPECT_EQ(back.rewards(), mdp.rewards());
  EXPECT_EQ(back.start_dist(), mdp.start_dist());
  EXPECT_EQ(back.horizon(), mdp.horizon());
  EXPECT_EQ(back.gamma(), mdp.gamma());
}

TEST(Mdp, EnumeratedTrajectoriesCoverAllMass) {
  Rng gen(13);
  const auto mdp = sample_random_mdp(3, 2, false, gen).with_horizon(3);
  const auto pi = PolicyTable(3, 2, {0.2, 0.8, 0.5, 0.5, 0.9, 0.1});
  double mass = 0.0, value = 0.0;
  for (const auto& w : enumerate_trajectories(mdp, pi, mdp.horizon())) {
    mass += w.probability;
    value += w.probability * discounted_return(w.trajectory, mdp.gamma());
  }
  EXPECT_NEAR(mass, 1.0, 1e-12);
  EXPECT_NEAR(value, exact_performance(mdp, pi), 1e-12);
}

TEST(Policy, SoftenedMixesWithUniform) {
  const std::vector<ActionIndex> actions{0, 1};
  const auto pi = PolicyTable::deterministic(actions, 2).softened(0.2);
  EXPECT_DOUBLE_EQ(pi.prob(0, 0), 0.9);
  EXPECT_DOUBLE_EQ(pi.prob(0, 1), 0.1);
}

}  // namespace
}  // namespace evarl
