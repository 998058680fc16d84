#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>
#include <vector>

#include <gtest/gtest.h>

#include "evarl/checkpoint.hpp"
#include "evarl/gradcheck.hpp"
#include "evarl/predictor.hpp"

namespace evarl {
namespace {

AssessmentDataset dataset(std::vector<std::pair<std::vector<double>, double>> xs) {
  AssessmentDataset d;
  for (auto& [s, g] : xs) d.entries.push_back({std::move(s), g});
  return d;
}

TabularMdp small_grid() {
  GridworldConfig cfg;
  cfg.goals = {{3, 3}};
  cfg.goal_reward = 10.0;
  cfg.step_reward = -0.1;
  return make_gridworld(cfg);
}

PolicyTable random_policy(std::size_t n, std::size_t m, Rng& rng) {
  std::vector<double> p(n * m);
  for (std::size_t s = 0; s < n; ++s) {
    double total = 0.0;
    for (std::size_t a = 0; a < m; ++a) total += p[s * m + a] = 0.1 + rng.uniform();
    for (std::size_t a = 0; a < m; ++a) p[s * m + a] /= total;
  }
  return PolicyTable(n, m, std::move(p));
}

// ---------------------------------------------------------------------------
// Linear predictor
// ---------------------------------------------------------------------------

TEST(LinearPredictor, SingleEntryReturnsItsReturn) {
  const LinearPredictor pred(rbf_similarity(0.3));
  const auto d = dataset({{{0.2, 0.9}, 7.25}});
  for (double x : {0.0, 0.5, 1.0}) {
    const std::vector<double> q{x, 1.0 - x};
    EXPECT_EQ(pred.predict(q, d), 7.25);
  }
}

TEST(LinearPredictor, UniformSimilarityGivesMean) {
  const LinearPredictor pred(matrix_similarity(3, std::vector<double>(9, 0.5)));
  const auto d = dataset({{{0}, 2.0}, {{1}, 6.0}});
  EXPECT_DOUBLE_EQ(pred.predict(std::vector<double>{2}, d), 4.0);
}

TEST(LinearPredictor, WeightedExample) {
  // Query state 2 has similarity 1 to state 0 and 3 to state 1.
  std::vector<double> f(9, 1.0);
  f[2 * 3 + 0] = 1.0;
  f[2 * 3 + 1] = 3.0;
  const LinearPredictor pred(matrix_similarity(3, f));
  const auto d = dataset({{{0}, 2.0}, {{1}, 6.0}});
  EXPECT_DOUBLE_EQ(pred.predict(std::vector<double>{2}, d), 5.0);
}

TEST(LinearPredictor, OutputIsConvexCombination) {
  Rng rng(4);
  const LinearPredictor pred(rbf_similarity(0.7));
  for (int trial = 0; trial < 200; ++trial) {
    AssessmentDataset d;
    double lo = 1e300, hi = -1e300;
    for (int i = 0; i < 4; ++i) {
      const double g = rng.uniform(-5, 5);
      lo = std::min(lo, g);
      hi = std::max(hi, g);
      d.entries.push_back({{rng.uniform(), rng.uniform()}, g});
    }
    const std::vector<double> q{rng.uniform(), rng.uniform()};
    const double v = pred.predict(q, d);
    EXPECT_GE(v, lo - 1e-12);
    EXPECT_LE(v, hi + 1e-12);
  }
}

TEST(LinearPredictor, ZeroSimilarityMassRejected) {
  const LinearPredictor pred(matrix_similarity(2, {1.0, 0.0, 0.0, 1.0}));
  const auto d = dataset({{{0}, 1.0}});
  EXPECT_THROW(pred.predict(std::vector<double>{1}, d), DegenerateInput);
}

TEST(LinearPredictor, SensitivityIsNormalizedSimilarity) {
  const LinearPredictor pred(rbf_similarity(0.5));
  const auto d = dataset({{{0.0}, 1.0}, {{1.0}, 3.0}});
  const std::vector<double> q{0.25};
  const PredictorQuery query{q, &d};
  const auto out = pred.predict_with_sensitivity({&query, 1});
  const double w0 = std::exp(-0.0625 / 0.5), w1 = std::exp(-0.5625 / 0.5);
  EXPECT_NEAR(out[0].d_returns[0], w0 / (w0 + w1), 1e-14);
  EXPECT_NEAR(out[0].d_returns[1], w1 / (w0 + w1), 1e-14);
  EXPECT_NEAR(out[0].value, pred.predict(q, d), 1e-14);
}

TEST(LinearPredictor, SampledAndExactDatasetsAgreeUnderDeterminism) {
  Rng gen(2);
  auto mdp = std::make_shared<const TabularMdp>(sample_random_mdp(6, 2, true, gen));
  const AssessmentEnvironment env(mdp, AssessmentSpec{{1, 4}, 12, 1.0});
  const std::vector<ActionIndex> actions{0, 1, 1, 0, 0, 1};
  const auto pi = PolicyTable::deterministic(actions, 2);
  Rng rng(3);
  const auto rollouts = collect_assessment_rollouts(env, pi, rng);
  const auto sampled = make_assessment_dataset(env, rollouts);
  const auto exact = exact_assessment_dataset(env, pi);
  const LinearPredictor pred(rbf_similarity(1.0));
  for (StateIndex s = 0; s < 6; ++s) {
    EXPECT_NEAR(pred.predict(mdp->embedding(s), sampled),
                pred.predict(mdp->embedding(s), exact), 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Value error and performance estimates
// ---------------------------------------------------------------------------

TEST(ValueError, PerfectPredictorHasZeroError) {
  const auto mdp = small_grid();
  Rng rng(1);
  const auto pi = random_policy(mdp.n_states(), mdp.n_actions(), rng);
  const TablePredictor perfect(mdp, exact_values(mdp, pi));
  const AssessmentDataset d;
  const auto report = predictor_value_mse(perfect, mdp, pi, d);
  EXPECT_EQ(report.zeta_sq, 0.0);
  EXPECT_EQ(report.mae, 0.0);
  EXPECT_EQ(estimate_performance(perfect, mdp, d, mdp.start_dist()),
            exact_performance(mdp, pi));
}

TEST(ValueError, ConstantOffsetGivesSquaredOffset) {
  const auto mdp = small_grid();
  Rng rng(2);
  const auto pi = random_policy(mdp.n_states(), mdp.n_actions(), rng);
  auto v = exact_values(mdp, pi);
  for (double& x : v) x += 0.75;
  const TablePredictor shifted(mdp, v);
  const AssessmentDataset d;
  const auto report = predictor_value_mse(shifted, mdp, pi, d);
  EXPECT_NEAR(report.zeta_sq, 0.5625, 1e-12);
  // Equality case of the value bound: constant error makes (J - Jhat)^2 = zeta^2.
  const double j_hat = estimate_performance(shifted, mdp, d, mdp.start_dist());
  const double gap = exact_performance(mdp, pi) - j_hat;
  EXPECT_NEAR(gap * gap, report.zeta_sq, 1e-10);
}

TEST(ValueError, ConstantPredictorEstimatesConstant) {
  const auto mdp = small_grid();
  const TablePredictor constant(mdp, std::vector<double>(mdp.n_states(), 2.5));
  const AssessmentDataset d;
  EXPECT_NEAR(estimate_performance(constant, mdp, d, mdp.start_dist()), 2.5, 1e-15);
  const std::vector<StateIndex> samples{0, 3, 3, 7};
  EXPECT_EQ(estimate_performance(constant, mdp, d, samples), 2.5);
}

TEST(ValueError, IdentitySimilarityOnAssessedStatesIsExact) {
  Rng gen(7);
  const std::size_t n = 5;
  auto mdp = std::make_shared<const TabularMdp>(sample_random_mdp(n, 2, true, gen));
  // Every state is an assessment state; similarity is diagonally dominant
  // to the point of being the identity numerically.
  std::vector<double> f(n * n, 1e-300);
  for (std::size_t i = 0; i < n; ++i) f[i * n + i] = 1.0;
  const LinearPredictor pred(matrix_similarity(n, f));
  const AssessmentEnvironment env(mdp, AssessmentSpec{{0, 1, 2, 3, 4}, mdp->horizon(),
                                                      mdp->gamma()});
  const std::vector<ActionIndex> actions{1, 1, 0, 1, 0};
  const auto pi = PolicyTable::deterministic(actions, 2);
  Rng rng(0);
  const auto data = make_assessment_dataset(env, collect_assessment_rollouts(env, pi, rng));
  EXPECT_LE(predictor_value_mse(pred, *mdp, pi, data).zeta_sq, 1e-10);
}

TEST(ValueError, ValueBoundHoldsForRandomPredictors) {
  Rng rng(9);
  for (int trial = 0; trial < 500; ++trial) {
    const auto mdp = sample_random_mdp(6, 3, trial % 2 == 0, rng);
    std::vector<double> mu(6);
    double total = 0.0;
    for (double& x : mu) total += x = rng.uniform();
    for (double& x : mu) x /= total;
    const auto pi = random_policy(6, 3, rng);
    std::vector<double> guess(6);
    for (double& x : guess) x = rng.uniform(-3, 8);
    const TablePredictor pred(mdp, guess);
    const AssessmentDataset d;
    const auto report = predictor_value_mse(pred, mdp, pi, d, mu);
    const double j = weighted_mean(mu, exact_values(mdp, pi));
    const double j_hat = estimate_performance(pred, mdp, d, mu);
    EXPECT_LE((j - j_hat) * (j - j_hat), report.zeta_sq + 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Transformer predictor
// ---------------------------------------------------------------------------

TransformerConfig tiny_config() {
  TransformerConfig c;
  c.obs_dim = 2;
  c.k = 3;
  c.hidden = 8;
  c.heads = 2;
  c.layers = 2;
  return c;
}

AssessmentDataset random_dataset(std::size_t k, Rng& rng) {
  AssessmentDataset d;
  for (std::size_t i = 0; i < k; ++i) {
    d.entries.push_back({{rng.uniform(), rng.uniform()}, rng.uniform(-2, 2)});
  }
  return d;
}

TEST(Transformer, LayoutMatchesArchitecture) {
  Rng rng(0);
  const TransformerPredictor pred(tiny_config(), rng);
  const auto& p = pred.parameters();
  EXPECT_EQ(p.at("pos_embed").shape(), (Shape{4, 8}));
  EXPECT_EQ(p.at("return_proj.w").shape(), (Shape{1, 8}));
  EXPECT_EQ(p.at("state_proj.w").shape(), (Shape{2, 8}));
  EXPECT_EQ(p.at("head.w").shape(), (Shape{8, 1}));
  EXPECT_EQ(p.size(), TransformerPredictor::kHeadParams +
                          2 * TransformerPredictor::kBlockParams + 2);
}

TEST(Transformer, DeterministicAcrossCalls) {
  Rng rng(1);
  const TransformerPredictor pred(tiny_config(), rng);
  const auto d = random_dataset(3, rng);
  const std::vector<double> q{0.4, 0.6};
  EXPECT_EQ(pred.predict(q, d), pred.predict(q, d));
}

TEST(Transformer, BatchedEqualsSingle) {
  Rng rng(2);
  const TransformerPredictor pred(tiny_config(), rng);
  std::vector<AssessmentDataset> ds;
  std::vector<std::vector<double>> qs;
  for (int i = 0; i < 5; ++i) {
    ds.push_back(random_dataset(3, rng));
    qs.push_back({rng.uniform(), rng.uniform()});
  }
  std::vector<PredictorQuery> batch;
  for (int i = 0; i < 5; ++i) batch.push_back({qs[i], &ds[i]});
  const auto out = pred.predict_batch(batch);
  for (int i = 0; i < 5; ++i) {
    EXPECT_NEAR(out[i], pred.predict(qs[i], ds[i]), 1e-12);
  }
}

TEST(Transformer, OrderSensitive) {
  Rng rng(3);
  const TransformerPredictor pred(tiny_config(), rng);
  auto d = random_dataset(3, rng);
  const std::vector<double> q{0.1, 0.2};
  const double before = pred.predict(q, d);
  std::swap(d.entries[0], d.entries[2]);
  EXPECT_NE(before, pred.predict(q, d));
}

TEST(Transformer, RejectsWrongK) {
  Rng rng(4);
  const TransformerPredictor pred(tiny_config(), rng);
  const auto d = random_dataset(2, rng);
  EXPECT_THROW(pred.predict(std::vector<double>{0.0, 0.0}, d), InvalidInput);
}

TEST(Transformer, ReturnSensitivityMatchesFiniteDifferences) {
  Rng rng(5);
  const TransformerPredictor pred(tiny_config(), rng);
  auto d = random_dataset(3, rng);
  const std::vector<double> q{0.3, 0.8};
  const PredictorQuery query{q, &d};
  const auto s = pred.predict_with_sensitivity({&query, 1});
  for (std::size_t i = 0; i < 3; ++i) {
    const double saved = d.entries[i].ret;
    d.entries[i].ret = saved + 1e-5;
    const double up = pred.predict(q, d);
    d.entries[i].ret = saved - 1e-5;
    const double down = pred.predict(q, d);
    d.entries[i].ret = saved;
    EXPECT_LE(relative_error(s[0].d_returns[i], (up - down) / 2e-5), 1e-4);
  }
}

std::vector<BufferRecord> random_records(std::size_t count, std::size_t k, Rng& rng) {
  std::vector<BufferRecord> out;
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back({random_dataset(k, rng), {rng.uniform(), rng.uniform()},
                   rng.uniform(-1, 3), i});
  }
  return out;
}

TEST(Transformer, BatchLossPassesGradCheck) {
  for (int seed = 0; seed < 3; ++seed) {
    Rng rng(seed);
    const TransformerPredictor pred(tiny_config(), rng);
    const auto records = random_records(4, 3, rng);
    std::vector<const BufferRecord*> ptrs;
    for (const auto& r : records) ptrs.push_back(&r);
    const auto queries = queries_for(ptrs);
    const auto batch = pred.pack(queries);
    Tensor targets = Tensor::zeros({4});
    for (std::size_t i = 0; i < 4; ++i) targets[i] = records[i].deployment_return;
    const auto report = grad_check(
        [&](Graph& g, const std::vector<Var>& v) {
          return pred.batch_loss(g, v, batch, targets);
        },
        pred.parameters(), 1e-4, 1e-4);
    EXPECT_TRUE(report.passed()) << "max relative error " << report.max_relative_error;
  }
}

TEST(Transformer, CheckpointReloadsBitwise) {
  Rng rng(6);
  const TransformerPredictor pred(tiny_config(), rng);
  const auto path =
      std::filesystem::temp_directory_path() / "evarl_predictor_ckpt.json";
  save_parameters(path, pred.parameters());
  const TransformerPredictor back(tiny_config(), load_parameters(path));
  EXPECT_EQ(back.parameters(), pred.parameters());
  const auto d = random_dataset(3, rng);
  const std::vector<double> q{0.5, 0.5};
  EXPECT_EQ(back.predict(q, d), pred.predict(q, d));
  std::filesystem::remove(path);
  auto wrong = tiny_config();
  wrong.hidden = 4;
  EXPECT_THROW(TransformerPredictor(wrong, pred.parameters()), InvalidInput);
}

TEST(Training, ZeroLearningRateLeavesParametersBitwise) {
  Rng rng(7);
  TransformerPredictor pred(tiny_config(), rng);
  const auto before = pred.parameters();
  PredictorBuffer buf(4);
  for (auto& r : random_records(10, 3, rng)) buf.insert(std::move(r));
  const auto history = train_predictor(pred, buf, {2, 4}, 0.0, rng);
  EXPECT_EQ(pred.parameters(), before);
  EXPECT_EQ(history.size(), 2u * 1u);  // 4 retained records, batch 4
}

TEST(Training, HistoryLengthIsEpochsTimesBatches) {
  Rng rng(8);
  TransformerPredictor pred(tiny_config(), rng);
  PredictorBuffer buf(100);
  for (auto& r : random_records(10, 3, rng)) buf.insert(std::move(r));
  EXPECT_EQ(train_predictor(pred, buf, {3, 4}, 1e-3, rng).size(), 9u);
}

TEST(Training, EmptyBufferRejected) {
  Rng rng(9);
  TransformerPredictor pred(tiny_config(), rng);
  PredictorBuffer buf(2);
  EXPECT_THROW(train_predictor(pred, buf, {1, 4}, 1e-3, rng), InvalidInput);
}

TEST(Training, ConstantTargetsAreLearned) {
  Rng rng(10);
  TransformerPredictor pred(tiny_config(), rng);
  PredictorBuffer buf(1000);
  for (auto& r : random_records(32, 3, rng)) {
    r.deployment_return = 1.5;
    buf.insert(std::move(r));
  }
  Optimizer adam(OptimizerConfig{3e-3, true});
  train_predictor(pred, buf, {600, 16}, rng, adam);
  Optimizer fine(OptimizerConfig{3e-4, true});
  const auto history = train_predictor(pred, buf, {400, 16}, rng, fine);
  EXPECT_LT(history.back(), 1e-4);
  for (const auto& r : buf) {
    EXPECT_NEAR(pred.predict(r.deployment_state, r.assessment), 1.5, 1e-2);
  }
}

TEST(Training, FitsFrozenPolicyValues) {
  const auto mdp = std::make_shared<const TabularMdp>(small_grid());
  Rng rng(11);
  const auto pi = random_policy(mdp->n_states(), mdp->n_actions(), rng);
  const AssessmentEnvironment env(mdp, AssessmentSpec{{0, 5, 10}, 10, 1.0});
  const auto data = exact_assessment_dataset(env, pi);
  const auto values = exact_values(*mdp, pi);
  PredictorBuffer buf(1);
  for (StateIndex s = 0; s < mdp->n_states(); ++s) {
    buf.insert({data, embedding_of(*mdp, s), values[s], 0});
  }
  auto cfg = tiny_config();
  cfg.hidden = 16;
  cfg.heads = 4;
  TransformerPredictor pred(cfg, rng);
  Optimizer adam(OptimizerConfig{3e-3, true});
  double mse = buffer_mse(pred, buf);
  for (int round = 0; round < 40 && mse >= 1e-3; ++round) {
    train_predictor(pred, buf, {100, 16}, rng, adam);
    mse = buffer_mse(pred, buf);
  }
  ASSERT_LT(mse, 1e-3);
  for (StateIndex s = 0; s < mdp->n_states(); ++s) {
    EXPECT_NEAR(pred.predict(mdp->embedding(s), data), values[s], 0.1);
  }
}

// ---------------------------------------------------------------------------
// Buffer
// ---------------------------------------------------------------------------

BufferRecord record_for(std::size_t policy) {
  return {dataset({{{0.0}, 1.0}}), {0.0}, static_cast<double>(policy), policy};
}

TEST(Buffer, SinglePolicyWindowEvictsOld) {
  PredictorBuffer buf(1);
  buf.insert(record_for(0));
  buf.insert(record_for(0));
  EXPECT_EQ(buf.size(), 2u);
  buf.insert(record_for(1));
  EXPECT_EQ(buf.size(), 1u);
  EXPECT_EQ(buf[0].policy_index, 1u);
}

TEST(Buffer, KeepsMostRecentPolicies) {
  PredictorBuffer buf(3);
  for (std::size_t p = 1; p <= 5; ++p) {
    buf.insert(record_for(p));
    buf.insert(record_for(p));
  }
  std::vector<std::size_t> seen;
  for (const auto& r : buf) seen.push_back(r.policy_index);
  EXPECT_EQ(seen, (std::vector<std::size_t>{3, 3, 4, 4, 5, 5}));
}

TEST(Buffer, SamplingNeverReturnsEvicted) {
  PredictorBuffer buf(2);
  Rng rng(0);
  for (std::size_t p = 0; p < 10; ++p) {
    for (int i = 0; i < 5; ++i) buf.insert(record_for(p));
    for (const auto* r : buf.sample(20, rng)) {
      EXPECT_GE(r->policy_index + 2, p + 1);
    }
  }
}

TEST(Buffer, JsonLinesRoundTrip) {
  PredictorBuffer buf(4);
  Rng rng(1);
  for (auto& r : random_records(6, 3, rng)) buf.insert(std::move(r));
  const auto back = PredictorBuffer::from_jsonl(buf.to_jsonl(), 4);
  ASSERT_EQ(back.size(), buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) EXPECT_EQ(back[i], buf[i]);
}

}  // namespace
}  // namespace evarl
