#pragma once

// Outer training loop: warmup with plain policy gradient, then two-stage
// co-learning of the value predictor and the policy (or a frozen predictor),
// with per-update metric logging against exact tabular values.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "evarl/checkpoint.hpp"
#include "evarl/error.hpp"
#include "evarl/mdp.hpp"
#include "evarl/policy.hpp"
#include "evarl/predictor.hpp"
#include "evarl/random.hpp"

namespace evarl {

enum class PredictorMode { kCoLearned, kFrozen };

inline const char* to_string(PredictorMode m) {
  return m == PredictorMode::kFrozen ? "frozen" : "co-learned";
}

inline PredictorMode predictor_mode_from_string(const std::string& s) {
  if (s == "frozen") return PredictorMode::kFrozen;
  if (s == "co-learned") return PredictorMode::kCoLearned;
  throw InvalidInput("unknown predictor mode: " + s);
}

inline PenaltyEstimator penalty_estimator_from_string(const std::string& s) {
  if (s == "plug-in") return PenaltyEstimator::kPlugIn;
  if (s == "score-function") return PenaltyEstimator::kScoreFunction;
  throw InvalidInput("unknown penalty estimator: " + s);
}

struct TrainerConfig {
  double beta = 0.0;
  double policy_lr = 0.1;
  double predictor_lr = 1e-3;
  bool predictor_adam = false;
  std::size_t predictor_epochs = 5;   // N_pred
  std::size_t policy_updates = 1;     // N_policy, each on a fresh batch
  std::size_t warmup_interactions = 0;
  std::size_t total_interactions = 200000;
  std::size_t episodes_per_update = 64;
  std::size_t predictor_batch_size = 64;
  std::size_t buffer_threshold = 1024;
  std::size_t recent_policies = 16;   // m
  // Optional early gate: the penalty switches on once the buffer MSE after a
  // predictor update falls below this, even before the warmup budget ends.
  std::optional<double> gate_mse;
  PredictorMode mode = PredictorMode::kCoLearned;
  std::string checkpoint_path;        // required in frozen mode
  std::uint64_t seed = 0;
  PenaltyEstimator estimator = PenaltyEstimator::kPlugIn;
  bool baseline = true;               // running per-state value baseline
  double baseline_rate = 0.1;
  double entropy_coef = 0.0;

  // Assessment setup.
  std::size_t k = 5;
  std::size_t assessment_horizon = 10;
  double assessment_gamma = 1.0;
  std::size_t deployment_horizon = 0;  // 0 keeps the MDP's horizon
  std::optional<std::vector<StateIndex>> assessment_states;
  std::size_t base_policy_interactions = 20000;

  void validate() const {
    require(beta >= 0.0, "trainer: beta must be >= 0");
    require(policy_lr >= 0.0 && predictor_lr >= 0.0,
            "trainer: learning rates must be >= 0");
    require(predictor_epochs >= 1 && policy_updates >= 1 &&
                total_interactions >= 1 && episodes_per_update >= 1 &&
                predictor_batch_size >= 1 && buffer_threshold >= 1 &&
                recent_policies >= 1 && k >= 1 && assessment_horizon >= 1,
            "trainer: counts must be positive");
    require(baseline_rate > 0.0 && baseline_rate <= 1.0,
            "trainer: baseline_rate must be in (0, 1]");
    require(mode != PredictorMode::kFrozen || !checkpoint_path.empty(),
            "trainer: frozen mode requires checkpoint_path");
  }
};

struct TrainRecord {
  std::size_t interactions = 0;
  std::uint64_t seed = 0;
  double beta = 0.0;
  double episodic_return = 0.0;  // mean discounted deployment return
  double pred_mae = 0.0;         // against exact values, before the update
  double pred_mse = 0.0;
  double predictor_loss = std::numeric_limits<double>::quiet_NaN();
  std::string mode;
  double exact_return = 0.0;     // J of the policy that collected the batch
  bool penalty_active = false;
};

struct TrainLog {
  std::vector<TrainRecord> records;
  std::size_t predictor_updates = 0;
  std::size_t penalty_steps = 0;
};

inline std::string train_log_csv(const TrainLog& log) {
  std::string out =
      "interactions,seed,beta,episodic_return,pred_mae,pred_mse,predictor_loss,mode\n";
  char buf[512];
  for (const auto& r : log.records) {
    std::snprintf(buf, sizeof buf, "%zu,%llu,%.10g,%.12g,%.12g,%.12g,%.12g,%s\n",
                  r.interactions, static_cast<unsigned long long>(r.seed), r.beta,
                  r.episodic_return, r.pred_mae, r.pred_mse, r.predictor_loss,
                  r.mode.c_str());
    out += buf;
  }
  return out;
}

// Seeds of the independent random streams used by one run.
namespace stream {
inline constexpr std::uint64_t kDeploy = 1;
inline constexpr std::uint64_t kAssess = 2;
inline constexpr std::uint64_t kPredictor = 3;
inline constexpr std::uint64_t kSelection = 4;
inline constexpr std::uint64_t kInit = 5;
}  // namespace stream

// b(s) tracks the return-to-go from s in undiscounted-from-s units; the
// gradient uses gamma^t b(s_t).
class RunningBaseline {
 public:
  RunningBaseline(std::size_t n_states, double rate)
      : values_(n_states, 0.0), rate_(rate) {}

  const std::vector<double>& values() const { return values_; }

  void update(std::span<const Trajectory> episodes, double gamma) {
    for (const auto& traj : episodes) {
      double to_go = 0.0;
      for (std::size_t t = traj.length(); t-- > 0;) {
        to_go = traj.rewards[t] + gamma * to_go;
        double& b = values_[traj.states[t]];
        b += rate_ * (to_go - b);
      }
    }
  }

 private:
  std::vector<double> values_;
  double rate_;
};

namespace detail {

inline TabularMdp deployment_mdp(const TabularMdp& mdp, const TrainerConfig& c) {
  return c.deployment_horizon == 0 ? mdp : mdp.with_horizon(c.deployment_horizon);
}

inline std::vector<Trajectory> collect_deployment(const TabularMdp& mdp,
                                                  const PolicyTable& pi,
                                                  std::size_t episodes, Rng& rng) {
  std::vector<Trajectory> out;
  out.reserve(episodes);
  for (std::size_t i = 0; i < episodes; ++i) {
    out.push_back(rollout(mdp, pi, sample_start_state(mdp, rng), mdp.horizon(), rng));
  }
  return out;
}

inline double mean_return(std::span<const Trajectory> episodes, double gamma) {
  double total = 0.0;
  for (const auto& t : episodes) total += discounted_return(t, gamma);
  return total / static_cast<double>(episodes.size());
}

struct LoopHooks {
  bool train_predictor = true;
  bool use_penalty = true;
  PredictorBuffer* harvest = nullptr;  // receives every record when set
};

inline TrainLog train_loop(const TabularMdp& mdp_in, const AssessmentEnvironment* assess,
                           const TrainerConfig& config, TransformerPredictor* predictor,
                           Policy& policy, const LoopHooks& hooks) {
  const TabularMdp mdp = deployment_mdp(mdp_in, config);
  require(policy.n_states() == mdp.n_states() && policy.n_actions() == mdp.n_actions(),
          "trainer: policy does not match the deployment MDP");
  Rng deploy_rng = make_stream(config.seed, stream::kDeploy);
  Rng assess_rng = make_stream(config.seed, stream::kAssess);
  Rng predictor_rng = make_stream(config.seed, stream::kPredictor);
  PredictorBuffer buffer(config.recent_policies);
  Optimizer optimizer(OptimizerConfig{config.predictor_lr, config.predictor_adam});
  RunningBaseline baseline(mdp.n_states(), config.baseline_rate);
  const bool frozen = config.mode == PredictorMode::kFrozen;

  TrainLog log;
  std::size_t interactions = 0;
  std::size_t policy_index = 0;
  double last_loss = std::numeric_limits<double>::quiet_NaN();
  double last_buffer_mse = std::numeric_limits<double>::infinity();
  while (interactions < config.total_interactions) {
    // (a) predictor update
    if (hooks.train_predictor && !frozen && predictor &&
        buffer.has_sufficient_data(config.buffer_threshold)) {
      const auto history = train_predictor(
          *predictor, buffer, {config.predictor_epochs, config.predictor_batch_size},
          predictor_rng, optimizer);
      const std::size_t per_epoch = history.size() / config.predictor_epochs;
      double tail = 0.0;
      for (std::size_t i = history.size() - per_epoch; i < history.size(); ++i) {
        tail += history[i];
      }
      last_loss = tail / static_cast<double>(per_epoch);
      ++log.predictor_updates;
      if (config.gate_mse) last_buffer_mse = buffer_mse(*predictor, buffer);
    }
    for (std::size_t step = 0;
         step < config.policy_updates && interactions < config.total_interactions; ++step) {
      // (b) on-policy rollouts
      const PolicyTable table = policy.table();
      const auto deploy =
          collect_deployment(mdp, table, config.episodes_per_update, deploy_rng);
      std::vector<std::vector<Trajectory>> assess_sets;
      if (assess) {
        assess_sets.reserve(deploy.size());
        for (std::size_t i = 0; i < deploy.size(); ++i) {
          assess_sets.push_back(collect_assessment_rollouts(*assess, table, assess_rng));
        }
      }
      TrainRecord rec;
      rec.seed = config.seed;
      rec.beta = config.beta;
      rec.mode = to_string(config.mode);
      rec.episodic_return = mean_return(deploy, mdp.gamma());
      rec.exact_return = exact_performance(mdp, table);
      rec.predictor_loss = last_loss;
      if (assess && predictor) {
        const auto data = make_assessment_dataset(*assess, assess_sets.front());
        const auto report = predictor_value_mse(*predictor, mdp, table, data);
        rec.pred_mae = report.mae;
        rec.pred_mse = report.zeta_sq;
      }

      // (c) policy update
      ReinforceOptions pg;
      if (config.baseline) pg.baseline = baseline.values();
      pg.entropy_coef = config.entropy_coef;
      const bool ready = frozen || log.predictor_updates > 0;
      const bool past_warmup =
          interactions >= config.warmup_interactions ||
          (config.gate_mse && last_buffer_mse < *config.gate_mse);
      rec.penalty_active = hooks.use_penalty && assess && predictor && ready && past_warmup;
      GradientEstimate grad;
      if (rec.penalty_active) {
        grad = evarl_gradient(policy, deploy, assess_sets, *predictor, mdp, *assess,
                              {config.beta, config.estimator, pg});
        if (config.beta > 0.0) ++log.penalty_steps;
      } else {
        grad = reinforce_gradient(policy, deploy, mdp.gamma(), pg);
      }
      apply_update(policy, grad, config.policy_lr);
      if (config.baseline) baseline.update(deploy, mdp.gamma());

      // (d) buffer append
      if (assess) {
        for (std::size_t i = 0; i < deploy.size(); ++i) {
          BufferRecord r{make_assessment_dataset(*assess, assess_sets[i]),
                         embedding_of(mdp, deploy[i].start()),
                         discounted_return(deploy[i], mdp.gamma()), policy_index};
          if (hooks.harvest) hooks.harvest->insert(r);
          buffer.insert(std::move(r));
        }
      }
      ++policy_index;
      for (const auto& t : deploy) interactions += t.length();
      rec.interactions = interactions;
      log.records.push_back(std::move(rec));
    }
  }
  return log;
}

}  // namespace detail

// Plain policy gradient with the same deployment stream and baseline as
// run_evarl, so beta = 0 runs match it bitwise.
inline TrainLog run_policy_gradient(const TabularMdp& mdp, const TrainerConfig& config,
                                    Policy& policy) {
  auto c = config;
  c.mode = PredictorMode::kCoLearned;
  c.validate();
  return detail::train_loop(mdp, nullptr, c, nullptr, policy, {false, false, nullptr});
}

// In frozen mode the predictor parameters are replaced by the checkpoint.
inline TrainLog run_evarl(const TabularMdp& mdp, const AssessmentEnvironment& assess,
                          const TrainerConfig& config, TransformerPredictor& predictor,
                          Policy& policy) {
  config.validate();
  require(assess.spec.k() == predictor.config().k,
          "run_evarl: predictor k does not match the assessment spec");
  if (config.mode == PredictorMode::kFrozen) {
    predictor = TransformerPredictor(predictor.config(),
                                     load_parameters(config.checkpoint_path));
  }
  return detail::train_loop(mdp, &assess, config, &predictor, policy, {});
}

// ---------------------------------------------------------------------------
// Assessment start states
// ---------------------------------------------------------------------------

// k distinct states drawn from visits of `base` rollouts; visit frequency
// sets the draw order. Unvisited states fill any shortfall, ascending.
inline std::vector<StateIndex> select_assessment_states(const TabularMdp& mdp,
                                                        const PolicyTable& base,
                                                        std::size_t k, Rng& rng,
                                                        std::size_t episodes = 64) {
  require(k >= 1 && k <= mdp.n_states(),
          "select_assessment_states: need 1 <= k <= n_states");
  std::vector<StateIndex> visits;
  for (std::size_t i = 0; i < episodes; ++i) {
    const auto t = rollout(mdp, base, sample_start_state(mdp, rng), mdp.horizon(), rng);
    visits.insert(visits.end(), t.states.begin(), t.states.end() - 1);
  }
  rng.shuffle(std::span<StateIndex>(visits));
  std::vector<bool> taken(mdp.n_states(), false);
  std::vector<StateIndex> out;
  for (StateIndex s : visits) {
    if (out.size() == k) break;
    if (!taken[s]) {
      taken[s] = true;
      out.push_back(s);
    }
  }
  for (StateIndex s = 0; s < mdp.n_states() && out.size() < k; ++s) {
    if (!taken[s]) {
      taken[s] = true;
      out.push_back(s);
    }
  }
  return out;
}

// The configured override, or states sampled from a base policy trained
// with plain policy gradient for `base_policy_interactions`.
inline std::vector<StateIndex> choose_assessment_states(const TabularMdp& mdp,
                                                        const TrainerConfig& config) {
  if (config.assessment_states) {
    require(config.assessment_states->size() == config.k,
            "trainer: assessment_states must list k states");
    AssessmentSpec{*config.assessment_states, config.assessment_horizon,
                   config.assessment_gamma}
        .validate(mdp.n_states());
    return *config.assessment_states;
  }
  TabularSoftmaxPolicy base(mdp.n_states(), mdp.n_actions());
  auto c = config;
  c.total_interactions = config.base_policy_interactions;
  run_policy_gradient(mdp, c, base);
  Rng rng = make_stream(config.seed, stream::kSelection);
  return select_assessment_states(detail::deployment_mdp(mdp, config), base.table(),
                                  config.k, rng);
}

inline AssessmentEnvironment make_assessment_env(std::shared_ptr<const TabularMdp> mdp,
                                                 const TrainerConfig& config,
                                                 std::vector<StateIndex> states) {
  AssessmentEnvironment env(std::move(mdp), AssessmentSpec{std::move(states),
                                                           config.assessment_horizon,
                                                           config.assessment_gamma});
  env.spec.validate(env.mdp->n_states());
  return env;
}

// ---------------------------------------------------------------------------
// Predictor pretraining
// ---------------------------------------------------------------------------

struct PretrainOptions {
  TransformerConfig transformer;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  bool adam = true;
};

struct PretrainResult {
  TransformerPredictor predictor;
  PredictorBuffer buffer;
  double initial_mse = 0.0;
  double final_mse = 0.0;
  std::vector<double> loss_history;
  TrainLog run_log;
};

inline std::pair<double, std::vector<double>> fit_predictor(
    TransformerPredictor& pred, const PredictorBuffer& buffer,
    const PretrainOptions& options, Rng& rng) {
  Optimizer opt(OptimizerConfig{options.learning_rate, options.adam});
  auto history = train_predictor(pred, buffer, {options.epochs, options.batch_size}, rng, opt);
  return {buffer_mse(pred, buffer), std::move(history)};
}

// Runs plain policy gradient (beta = 0, no predictor feedback), keeps the
// records of every policy iterate, then fits a fresh predictor on them.
inline PretrainResult pretrain_predictor_from_standard_run(
    const TabularMdp& mdp, const AssessmentEnvironment& assess,
    const TrainerConfig& config, const PretrainOptions& options) {
  auto c = config;
  c.beta = 0.0;
  c.mode = PredictorMode::kCoLearned;
  c.validate();
  require(options.transformer.k == assess.spec.k(),
          "pretrain: predictor k does not match the assessment spec");
  PredictorBuffer harvest(std::numeric_limits<std::size_t>::max() / 2);
  TabularSoftmaxPolicy policy(mdp.n_states(), mdp.n_actions());
  auto log = detail::train_loop(mdp, &assess, c, nullptr, policy, {false, false, &harvest});
  Rng init = make_stream(config.seed, stream::kInit);
  PretrainResult out{TransformerPredictor(options.transformer, init), std::move(harvest),
                     0.0, 0.0, {}, std::move(log)};
  out.initial_mse = buffer_mse(out.predictor, out.buffer);
  Rng rng = make_stream(config.seed, stream::kPredictor);
  std::tie(out.final_mse, out.loss_history) = fit_predictor(out.predictor, out.buffer, options, rng);
  return out;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const TrainerConfig& c) {
  nlohmann::json j{{"beta", c.beta},
                   {"policy_lr", c.policy_lr},
                   {"predictor_lr", c.predictor_lr},
                   {"predictor_adam", c.predictor_adam},
                   {"predictor_epochs", c.predictor_epochs},
                   {"policy_updates", c.policy_updates},
                   {"warmup_interactions", c.warmup_interactions},
                   {"total_interactions", c.total_interactions},
                   {"episodes_per_update", c.episodes_per_update},
                   {"predictor_batch_size", c.predictor_batch_size},
                   {"buffer_threshold", c.buffer_threshold},
                   {"recent_policies", c.recent_policies},
                   {"mode", to_string(c.mode)},
                   {"checkpoint_path", c.checkpoint_path},
                   {"seed", c.seed},
                   {"estimator", to_string(c.estimator)},
                   {"baseline", c.baseline},
                   {"baseline_rate", c.baseline_rate},
                   {"entropy_coef", c.entropy_coef},
                   {"k", c.k},
                   {"assessment_horizon", c.assessment_horizon},
                   {"assessment_gamma", c.assessment_gamma},
                   {"deployment_horizon", c.deployment_horizon},
                   {"base_policy_interactions", c.base_policy_interactions}};
  if (c.gate_mse) j["gate_mse"] = *c.gate_mse;
  if (c.assessment_states) j["assessment_states"] = *c.assessment_states;
  return j;
}

// Missing keys keep their defaults.
inline TrainerConfig trainer_config_from_json(const nlohmann::json& j) {
  TrainerConfig c;
  c.beta = j.value("beta", c.beta);
  c.policy_lr = j.value("policy_lr", c.policy_lr);
  c.predictor_lr = j.value("predictor_lr", c.predictor_lr);
  c.predictor_adam = j.value("predictor_adam", c.predictor_adam);
  c.predictor_epochs = j.value("predictor_epochs", c.predictor_epochs);
  c.policy_updates = j.value("policy_updates", c.policy_updates);
  c.warmup_interactions = j.value("warmup_interactions", c.warmup_interactions);
  c.total_interactions = j.value("total_interactions", c.total_interactions);
  c.episodes_per_update = j.value("episodes_per_update", c.episodes_per_update);
  c.predictor_batch_size = j.value("predictor_batch_size", c.predictor_batch_size);
  c.buffer_threshold = j.value("buffer_threshold", c.buffer_threshold);
  c.recent_policies = j.value("recent_policies", c.recent_policies);
  if (j.contains("gate_mse")) c.gate_mse = j.at("gate_mse").get<double>();
  if (j.contains("mode")) c.mode = predictor_mode_from_string(j.at("mode").get<std::string>());
  c.checkpoint_path = j.value("checkpoint_path", c.checkpoint_path);
  c.seed = j.value("seed", c.seed);
  if (j.contains("estimator")) {
    c.estimator = penalty_estimator_from_string(j.at("estimator").get<std::string>());
  }
  c.baseline = j.value("baseline", c.baseline);
  c.baseline_rate = j.value("baseline_rate", c.baseline_rate);
  c.entropy_coef = j.value("entropy_coef", c.entropy_coef);
  c.k = j.value("k", c.k);
  c.assessment_horizon = j.value("assessment_horizon", c.assessment_horizon);
  c.assessment_gamma = j.value("assessment_gamma", c.assessment_gamma);
  c.deployment_horizon = j.value("deployment_horizon", c.deployment_horizon);
  if (j.contains("assessment_states")) {
    c.assessment_states = j.at("assessment_states").get<std::vector<StateIndex>>();
  }
  c.base_policy_interactions = j.value("base_policy_interactions", c.base_policy_interactions);
  return c;
}

}  // namespace evarl
