#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>

#include <gtest/gtest.h>

#include "evarl/trainer.hpp"

namespace evarl {
namespace {

std::shared_ptr<const TabularMdp> grid(double slip = 0.1) {
  GridworldConfig g;
  g.width = 3;
  g.height = 3;
  g.goals = {{2, 2}};
  g.slip = slip;
  g.horizon = 8;
  return std::make_shared<const TabularMdp>(make_gridworld(g));
}

TrainerConfig small_config() {
  TrainerConfig c;
  c.total_interactions = 4000;
  c.episodes_per_update = 16;
  c.buffer_threshold = 64;
  c.recent_policies = 8;
  c.predictor_epochs = 1;
  c.predictor_batch_size = 32;
  c.k = 3;
  c.assessment_horizon = 6;
  c.assessment_states = std::vector<StateIndex>{0, 4, 6};
  c.seed = 3;
  return c;
}

TransformerConfig small_transformer(std::size_t k) {
  TransformerConfig t;
  t.k = k;
  t.hidden = 8;
  t.heads = 2;
  t.layers = 1;
  return t;
}

void expect_same_parameters(const Policy& a, const Policy& b) {
  const auto& pa = a.parameters();
  const auto& pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].value.data(), pb[i].value.data()) << pa[i].name;
  }
}

TEST(Config, FrozenWithoutCheckpointRejected) {
  auto c = small_config();
  c.mode = PredictorMode::kFrozen;
  EXPECT_THROW(c.validate(), InvalidInput);
  const auto mdp = grid();
  const auto env = make_assessment_env(mdp, c, *c.assessment_states);
  Rng rng(0);
  TransformerPredictor pred(small_transformer(3), rng);
  TabularSoftmaxPolicy pi(mdp->n_states(), mdp->n_actions());
  EXPECT_THROW(run_evarl(*mdp, env, c, pred, pi), InvalidInput);
}

TEST(Config, NonPositiveCountsRejected) {
  auto c = small_config();
  c.episodes_per_update = 0;
  EXPECT_THROW(c.validate(), InvalidInput);
  c = small_config();
  c.beta = -0.1;
  EXPECT_THROW(c.validate(), InvalidInput);
}

TEST(Config, JsonRoundTrip) {
  auto c = small_config();
  c.beta = 0.25;
  c.mode = PredictorMode::kFrozen;
  c.checkpoint_path = "ck.json";
  c.estimator = PenaltyEstimator::kScoreFunction;
  c.gate_mse = 0.5;
  const auto back = trainer_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(trainer_config_from_json(nlohmann::json::object()).total_interactions,
            TrainerConfig{}.total_interactions);
  EXPECT_THROW(predictor_mode_from_string("thawed"), InvalidInput);
}

TEST(Trainer, PredictorKMustMatchSpec) {
  const auto mdp = grid();
  const auto c = small_config();
  const auto env = make_assessment_env(mdp, c, *c.assessment_states);
  Rng rng(0);
  TransformerPredictor pred(small_transformer(2), rng);
  TabularSoftmaxPolicy pi(mdp->n_states(), mdp->n_actions());
  EXPECT_THROW(run_evarl(*mdp, env, c, pred, pi), InvalidInput);
}

TEST(Trainer, ZeroBetaMatchesPlainPolicyGradientBitwise) {
  const auto mdp = grid();
  const auto c = small_config();
  const auto env = make_assessment_env(mdp, c, *c.assessment_states);
  Rng rng(1);
  TransformerPredictor pred(small_transformer(3), rng);
  TabularSoftmaxPolicy a(mdp->n_states(), mdp->n_actions());
  TabularSoftmaxPolicy b(mdp->n_states(), mdp->n_actions());
  const auto ev = run_evarl(*mdp, env, c, pred, a);
  const auto pg = run_policy_gradient(*mdp, c, b);
  EXPECT_GT(ev.predictor_updates, 0u);
  expect_same_parameters(a, b);
  ASSERT_EQ(ev.records.size(), pg.records.size());
  for (std::size_t i = 0; i < ev.records.size(); ++i) {
    EXPECT_EQ(ev.records[i].episodic_return, pg.records[i].episodic_return);
    EXPECT_EQ(ev.records[i].exact_return, pg.records[i].exact_return);
    EXPECT_EQ(ev.records[i].interactions, pg.records[i].interactions);
  }
}

TEST(Trainer, ZeroBetaScoreFunctionAlsoMatches) {
  const auto mdp = grid();
  auto c = small_config();
  c.estimator = PenaltyEstimator::kScoreFunction;
  const auto env = make_assessment_env(mdp, c, *c.assessment_states);
  Rng rng(1);
  TransformerPredictor pred(small_transformer(3), rng);
  TabularSoftmaxPolicy a(mdp->n_states(), mdp->n_actions());
  TabularSoftmaxPolicy b(mdp->n_states(), mdp->n_actions());
  run_evarl(*mdp, env, c, pred, a);
  run_policy_gradient(*mdp, c, b);
  expect_same_parameters(a, b);
}

TEST(Trainer, WarmupCoveringBudgetNeverAppliesPenalty) {
  const auto mdp = grid();
  auto c = small_config();
  c.beta = 0.5;
  c.warmup_interactions = c.total_interactions;
  const auto env = make_assessment_env(mdp, c, *c.assessment_states);
  Rng rng(1);
  TransformerPredictor pred(small_transformer(3), rng);
  TabularSoftmaxPolicy a(mdp->n_states(), mdp->n_actions());
  TabularSoftmaxPolicy b(mdp->n_states(), mdp->n_actions());
  const auto log = run_evarl(*mdp, env, c, pred, a);
  run_policy_gradient(*mdp, c, b);
  EXPECT_EQ(log.penalty_steps, 0u);
  for (const auto& r : log.records) EXPECT_FALSE(r.penalty_active);
  expect_same_parameters(a, b);
}

TEST(Trainer, PenaltyWaitsForFirstPredictorUpdate) {
  const auto mdp = grid();
  auto c = small_config();
  c.beta = 0.5;
  const auto env = make_assessment_env(mdp, c, *c.assessment_states);
  Rng rng(1);
  TransformerPredictor pred(small_transformer(3), rng);
  TabularSoftmaxPolicy pi(mdp->n_states(), mdp->n_actions());
  const auto log = run_evarl(*mdp, env, c, pred, pi);
  ASSERT_GT(log.penalty_steps, 0u);
  // Threshold 64 with 16 episodes per update: four batches fill the buffer.
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_FALSE(log.records[i].penalty_active) << i;
    EXPECT_TRUE(std::isnan(log.records[i].predictor_loss));
  }
  EXPECT_TRUE(log.records[4].penalty_active);
  EXPECT_FALSE(std::isnan(log.records[4].predictor_loss));
  EXPECT_EQ(log.penalty_steps, log.records.size() - 4);
}

TEST(Trainer, GateOpensBeforeWarmupEnds) {
  const auto mdp = grid();
  auto c = small_config();
  c.beta = 0.1;
  c.warmup_interactions = c.total_interactions;
  c.gate_mse = 1e9;
  const auto env = make_assessment_env(mdp, c, *c.assessment_states);
  Rng rng(1);
  TransformerPredictor pred(small_transformer(3), rng);
  TabularSoftmaxPolicy pi(mdp->n_states(), mdp->n_actions());
  EXPECT_GT(run_evarl(*mdp, env, c, pred, pi).penalty_steps, 0u);
}

TEST(Trainer, LogIsWellFormed) {
  const auto mdp = grid();
  auto c = small_config();
  c.beta = 0.1;
  const auto env = make_assessment_env(mdp, c, *c.assessment_states);
  Rng rng(1);
  TransformerPredictor pred(small_transformer(3), rng);
  TabularSoftmaxPolicy pi(mdp->n_states(), mdp->n_actions());
  const auto log = run_evarl(*mdp, env, c, pred, pi);
  ASSERT_FALSE(log.records.empty());
  for (std::size_t i = 1; i < log.records.size(); ++i) {
    EXPECT_GT(log.records[i].interactions, log.records[i - 1].interactions);
  }
  EXPECT_GE(log.records.back().interactions, c.total_interactions);
  for (const auto& r : log.records) {
    EXPECT_GE(r.pred_mae, 0.0);
    // MAE^2 <= MSE under the same weighting.
    EXPECT_LE(r.pred_mae * r.pred_mae, r.pred_mse + 1e-12);
    EXPECT_EQ(r.mode, "co-learned");
  }
  const auto csv = train_log_csv(log);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "interactions,seed,beta,episodic_return,pred_mae,pred_mse,predictor_loss,mode");
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')),
            log.records.size() + 1);
}

TEST(Trainer, DeterministicForSeed) {
  const auto mdp = grid();
  auto c = small_config();
  c.beta = 0.1;
  const auto env = make_assessment_env(mdp, c, *c.assessment_states);
  auto once = [&] {
    Rng rng(1);
    TransformerPredictor pred(small_transformer(3), rng);
    TabularSoftmaxPolicy pi(mdp->n_states(), mdp->n_actions());
    return train_log_csv(run_evarl(*mdp, env, c, pred, pi));
  };
  EXPECT_EQ(once(), once());
}

TEST(Trainer, PolicyGradientImprovesReturn) {
  const auto mdp = grid();
  auto c = small_config();
  c.total_interactions = 20000;
  TabularSoftmaxPolicy pi(mdp->n_states(), mdp->n_actions());
  const double before = exact_performance(*mdp, pi.table());
  run_policy_gradient(*mdp, c, pi);
  EXPECT_GT(exact_performance(*mdp, pi.table()), before + 0.1);
}

TEST(Trainer, FrozenPredictorIsNotTrained) {
  const auto mdp = grid();
  auto c = small_config();
  c.beta = 0.1;
  c.mode = PredictorMode::kFrozen;
  const auto env = make_assessment_env(mdp, c, *c.assessment_states);
  Rng rng(2);
  TransformerPredictor source(small_transformer(3), rng);
  const auto path = std::filesystem::temp_directory_path() / "evarl_trainer_frozen.json";
  save_parameters(path, source.parameters());
  c.checkpoint_path = path.string();
  Rng other(9);
  TransformerPredictor pred(small_transformer(3), other);
  TabularSoftmaxPolicy pi(mdp->n_states(), mdp->n_actions());
  const auto log = run_evarl(*mdp, env, c, pred, pi);
  EXPECT_EQ(log.predictor_updates, 0u);
  EXPECT_EQ(log.penalty_steps, log.records.size());
  const auto& a = pred.parameters();
  const auto& b = source.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].value.data(), b[i].value.data());
  }
  std::filesystem::remove(path);
}

TEST(Trainer, DeploymentHorizonOverride) {
  const auto mdp = grid();
  auto c = small_config();
  c.deployment_horizon = 3;
  c.total_interactions = 200;
  TabularSoftmaxPolicy pi(mdp->n_states(), mdp->n_actions());
  const auto log = run_policy_gradient(*mdp, c, pi);
  // At most 3 steps per episode.
  EXPECT_LE(log.records.front().interactions, 3 * c.episodes_per_update);
}

TEST(AssessmentStates, DistinctAndInRange) {
  const auto mdp = grid();
  auto c = small_config();
  c.assessment_states.reset();
  c.base_policy_interactions = 2000;
  const auto states = choose_assessment_states(*mdp, c);
  ASSERT_EQ(states.size(), c.k);
  std::vector<StateIndex> sorted = states;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(std::adjacent_find(sorted.begin(), sorted.end()), sorted.end());
  for (StateIndex s : states) EXPECT_LT(s, mdp->n_states());
  EXPECT_EQ(choose_assessment_states(*mdp, c), states);
}

TEST(AssessmentStates, OverrideValidated) {
  const auto mdp = grid();
  auto c = small_config();
  c.assessment_states = std::vector<StateIndex>{0, 1};
  EXPECT_THROW(choose_assessment_states(*mdp, c), InvalidInput);
  c.assessment_states = std::vector<StateIndex>{0, 1, 99};
  EXPECT_THROW(choose_assessment_states(*mdp, c), InvalidInput);
}

TEST(AssessmentStates, FillsAscendingWhenVisitsRunShort) {
  // A policy that never leaves its start cell on a 1-step horizon.
  GridworldConfig g;
  g.width = 3;
  g.height = 1;
  g.goals = {{2, 0}};
  g.horizon = 1;
  const auto mdp = make_gridworld(g);
  const PolicyTable stay(mdp.n_states(), mdp.n_actions(),
                         std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0});
  Rng rng(0);
  const auto states = select_assessment_states(mdp, stay, 3, rng, 4);
  std::vector<StateIndex> sorted = states;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, (std::vector<StateIndex>{0, 1, 2}));
}

class Pretrain : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    // Sampled returns carry noise that no predictor can remove. Deterministic
    // moves and a fast policy step keep most harvested iterates nearly
    // deterministic, so the irreducible part of the buffer MSE stays small.
    mdp_ = grid(0.0);
    config_ = small_config();
    config_.total_interactions = 20000;
    config_.policy_lr = 3.0;
    env_ = std::make_unique<AssessmentEnvironment>(
        make_assessment_env(mdp_, config_, *config_.assessment_states));
    PretrainOptions po;
    po.transformer = small_transformer(3);
    po.epochs = 40;
    po.learning_rate = 3e-3;
    result_ = std::make_unique<PretrainResult>(
        pretrain_predictor_from_standard_run(*mdp_, *env_, config_, po));
  }
  static void TearDownTestSuite() {
    result_.reset();
    env_.reset();
    mdp_.reset();
  }

  static std::shared_ptr<const TabularMdp> mdp_;
  static TrainerConfig config_;
  static std::unique_ptr<AssessmentEnvironment> env_;
  static std::unique_ptr<PretrainResult> result_;
};

std::shared_ptr<const TabularMdp> Pretrain::mdp_;
TrainerConfig Pretrain::config_;
std::unique_ptr<AssessmentEnvironment> Pretrain::env_;
std::unique_ptr<PretrainResult> Pretrain::result_;

TEST_F(Pretrain, HarvestsEveryIterate) {
  std::size_t deploy_episodes = 0;
  for (const auto& r : result_->run_log.records) {
    (void)r;
    deploy_episodes += config_.episodes_per_update;
  }
  EXPECT_EQ(result_->buffer.size(), deploy_episodes);
}

TEST_F(Pretrain, BufferMseDropsTenfold) {
  EXPECT_LE(result_->final_mse, result_->initial_mse / 10.0)
      << "initial " << result_->initial_mse << " final " << result_->final_mse;
  EXPECT_NEAR(result_->final_mse, buffer_mse(result_->predictor, result_->buffer), 1e-12);
}

TEST_F(Pretrain, CheckpointReloadsBitwise) {
  const auto path = std::filesystem::temp_directory_path() / "evarl_pretrain_ck.json";
  save_parameters(path, result_->predictor.parameters());
  const TransformerPredictor back(result_->predictor.config(), load_parameters(path));
  const auto& a = back.parameters();
  const auto& b = result_->predictor.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(a[i].value.data(), b[i].value.data());
  }
  EXPECT_EQ(buffer_mse(back, result_->buffer), result_->final_mse);
  std::filesystem::remove(path);
}

TEST_F(Pretrain, BeatsConstantMeanOnHeldOutLatePolicies) {
  // Held-out data: a standard run from a different seed.
  auto c = config_;
  c.seed = config_.seed + 100;
  PredictorBuffer held(std::numeric_limits<std::size_t>::max() / 2);
  TabularSoftmaxPolicy pi(mdp_->n_states(), mdp_->n_actions());
  detail::train_loop(*mdp_, env_.get(), c, nullptr, pi, {false, false, &held});

  double mean = 0.0;
  for (const auto& r : result_->buffer) mean += r.deployment_return;
  mean /= static_cast<double>(result_->buffer.size());

  std::size_t last = 0;
  for (const auto& r : held) last = std::max(last, r.policy_index);
  std::vector<PredictorQuery> queries;
  std::vector<double> targets;
  for (const auto& r : held) {
    if (4 * r.policy_index >= 3 * last) {
      queries.push_back({r.deployment_state, &r.assessment});
      targets.push_back(r.deployment_return);
    }
  }
  ASSERT_FALSE(queries.empty());
  const auto preds = result_->predictor.predict_batch(queries);
  double mae_pred = 0.0, mae_const = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    mae_pred += std::abs(preds[i] - targets[i]);
    mae_const += std::abs(mean - targets[i]);
  }
  EXPECT_LT(mae_pred, mae_const) << "predictor " << mae_pred / preds.size() << " constant "
                                 << mae_const / preds.size();
}

}  // namespace
}  // namespace evarl
