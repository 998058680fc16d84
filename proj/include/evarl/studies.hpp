#pragma once

// Multi-seed training studies: per-seed assessment setup and optional
// predictor pretraining, a grid of (seed, mode, beta) runs, and the
// predictor-vs-OPE comparison on each run's final policy.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "evarl/ope.hpp"
#include "evarl/parallel.hpp"
#include "evarl/trainer.hpp"

namespace evarl {

struct TrainingStudyOptions {
  TrainerConfig trainer;          // seed and mode are set per run
  TransformerConfig transformer;  // obs_dim and k are taken from the MDP and trainer
  PretrainOptions pretrain;
  std::vector<std::uint64_t> seeds;
  std::vector<PredictorMode> modes{PredictorMode::kCoLearned};
  std::vector<double> betas{0.0};
  // Pretrained checkpoints land here as predictor_s<seed>.json when a frozen
  // run needs one and trainer.checkpoint_path is empty.
  std::filesystem::path checkpoint_dir;
  std::size_t jobs = 1;
};

struct SeedSetup {
  std::uint64_t seed = 0;
  AssessmentEnvironment env;
  std::optional<PretrainResult> pretrain;
  std::string checkpoint_path;
};

struct StudyRun {
  std::uint64_t seed = 0;
  PredictorMode mode = PredictorMode::kCoLearned;
  double beta = 0.0;
  std::size_t setup = 0;  // index into TrainingStudy::setups
  TrainLog log;
  PolicyTable final_policy;
  TransformerPredictor predictor;
};

struct TrainingStudy {
  std::vector<SeedSetup> setups;
  std::vector<StudyRun> runs;  // seed-major, then mode, then beta
};

inline std::string checkpoint_name(std::uint64_t seed) {
  return "predictor_s" + std::to_string(seed) + ".json";
}

inline TransformerConfig study_transformer(const TabularMdp& mdp, const TrainerConfig& c,
                                           TransformerConfig t) {
  t.obs_dim = mdp.embedding_dim();
  t.k = c.k;
  return t;
}

inline SeedSetup prepare_seed(std::shared_ptr<const TabularMdp> mdp,
                              const TrainingStudyOptions& o, std::uint64_t seed,
                              bool need_checkpoint) {
  auto c = o.trainer;
  c.seed = seed;
  c.mode = PredictorMode::kCoLearned;
  auto states = choose_assessment_states(*mdp, c);
  SeedSetup out{seed, make_assessment_env(mdp, c, std::move(states)), std::nullopt,
                o.trainer.checkpoint_path};
  if (need_checkpoint && out.checkpoint_path.empty()) {
    auto po = o.pretrain;
    po.transformer = study_transformer(*mdp, c, o.transformer);
    out.pretrain = pretrain_predictor_from_standard_run(*mdp, out.env, c, po);
    const auto path = o.checkpoint_dir / checkpoint_name(seed);
    save_parameters(path, out.pretrain->predictor.parameters());
    out.checkpoint_path = path.string();
  }
  return out;
}

inline TrainingStudy run_training_study(std::shared_ptr<const TabularMdp> mdp,
                                        const TrainingStudyOptions& o) {
  require(!o.seeds.empty() && !o.modes.empty() && !o.betas.empty(),
          "training study: seeds, modes and betas must be non-empty");
  const bool frozen = std::find(o.modes.begin(), o.modes.end(), PredictorMode::kFrozen) !=
                      o.modes.end();
  std::vector<std::optional<SeedSetup>> setups(o.seeds.size());
  parallel_for(o.seeds.size(), o.jobs, [&](std::size_t i) {
    setups[i] = prepare_seed(mdp, o, o.seeds[i], frozen);
  });

  struct Job {
    std::size_t setup;
    PredictorMode mode;
    double beta;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < o.seeds.size(); ++i) {
    for (auto mode : o.modes) {
      for (double beta : o.betas) jobs.push_back({i, mode, beta});
    }
  }
  std::vector<std::optional<StudyRun>> runs(jobs.size());
  parallel_for(jobs.size(), o.jobs, [&](std::size_t j) {
    const auto& job = jobs[j];
    const auto& setup = *setups[job.setup];
    auto c = o.trainer;
    c.seed = setup.seed;
    c.mode = job.mode;
    c.beta = job.beta;
    c.checkpoint_path = setup.checkpoint_path;
    Rng init = make_stream(setup.seed, stream::kInit);
    TransformerPredictor pred(study_transformer(*mdp, c, o.transformer), init);
    TabularSoftmaxPolicy policy(mdp->n_states(), mdp->n_actions());
    auto log = run_evarl(*mdp, setup.env, c, pred, policy);
    runs[j] = StudyRun{setup.seed, job.mode,       job.beta,         job.setup,
                       std::move(log), policy.table(), std::move(pred)};
  });

  TrainingStudy out;
  for (auto& s : setups) out.setups.push_back(std::move(*s));
  for (auto& r : runs) out.runs.push_back(std::move(*r));
  return out;
}

// Means over the final `fraction` of a run's records.
struct TailSummary {
  double exact_return = 0.0;
  double episodic_return = 0.0;
  double pred_mae = 0.0;
  double pred_mse = 0.0;
};

inline TailSummary tail_summary(const TrainLog& log, double fraction = 0.25) {
  require(!log.records.empty(), "tail_summary: empty log");
  const std::size_t n = log.records.size();
  const std::size_t count =
      std::clamp<std::size_t>(static_cast<std::size_t>(fraction * n), 1, n);
  TailSummary t;
  for (std::size_t i = n - count; i < n; ++i) {
    t.exact_return += log.records[i].exact_return;
    t.episodic_return += log.records[i].episodic_return;
    t.pred_mae += log.records[i].pred_mae;
    t.pred_mse += log.records[i].pred_mse;
  }
  const double c = static_cast<double>(count);
  return {t.exact_return / c, t.episodic_return / c, t.pred_mae / c, t.pred_mse / c};
}

inline std::string runs_csv(const TabularMdp& mdp, const TrainerConfig& c,
                            std::span<const StudyRun> runs) {
  std::string out =
      "seed,mode,beta,final_return,tail_return,tail_episodic_return,tail_pred_mae,"
      "tail_pred_mse,predictor_updates,penalty_steps\n";
  const auto deploy = detail::deployment_mdp(mdp, c);
  char buf[512];
  for (const auto& r : runs) {
    const auto t = tail_summary(r.log);
    std::snprintf(buf, sizeof buf, "%llu,%s,%.10g,%.12g,%.12g,%.12g,%.12g,%.12g,%zu,%zu\n",
                  static_cast<unsigned long long>(r.seed), to_string(r.mode), r.beta,
                  exact_performance(deploy, r.final_policy), t.exact_return,
                  t.episodic_return, t.pred_mae, t.pred_mse, r.log.predictor_updates,
                  r.log.penalty_steps);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Predictor vs OPE
// ---------------------------------------------------------------------------

struct OpeCompareOptions {
  std::vector<OpeMethod> methods{OpeMethod::kTis, OpeMethod::kPdis, OpeMethod::kDr,
                                 OpeMethod::kFqe};
  double behavior_epsilon = 0.2;
  std::size_t trials = 1;
  std::size_t assessment_sets = 8;  // fresh assessment datasets for the predictor
};

// Data budget matched to the predictor: the deployment episodes its buffer
// holds at the end of the run.
inline std::size_t matched_budget(const TrainerConfig& c, const TrainLog& log) {
  return std::min(c.recent_policies, log.records.size()) * c.episodes_per_update;
}

inline constexpr const char* kPredictorRow = "predictor";

// Rows for the predictor and every OPE method, sorted by MAE ascending.
inline std::vector<BenchmarkRow> compare_with_ope(const TabularMdp& mdp,
                                                  const TrainerConfig& trainer,
                                                  const StudyRun& run,
                                                  const AssessmentEnvironment& env,
                                                  const OpeCompareOptions& o) {
  require(o.assessment_sets >= 1, "compare_with_ope: assessment_sets must be >= 1");
  const auto deploy = detail::deployment_mdp(mdp, trainer);
  const std::size_t budget = matched_budget(trainer, run.log);
  Rng rng = make_stream(run.seed, 0x09e0000);
  std::vector<double> maes;
  for (std::size_t i = 0; i < o.assessment_sets; ++i) {
    const auto data =
        make_assessment_dataset(env, collect_assessment_rollouts(env, run.final_policy, rng));
    maes.push_back(predictor_value_mse(run.predictor, deploy, run.final_policy, data).mae);
  }
  const auto stats = detail::mean_with_se(maes);
  std::vector<BenchmarkRow> rows{{kPredictorRow, stats.value, stats.se, budget, run.seed}};
  BenchmarkOptions bo;
  bo.methods = o.methods;
  bo.data_budget = budget;
  bo.behavior_epsilon = o.behavior_epsilon;
  bo.trials = o.trials;
  bo.seed = run.seed;
  for (auto& r : benchmark_mae(deploy, run.final_policy, bo)) rows.push_back(std::move(r));
  std::stable_sort(rows.begin(), rows.end(),
                   [](const auto& a, const auto& b) { return a.mae < b.mae; });
  return rows;
}

struct OpeSummaryRow {
  std::string estimator;
  double mean_mae = 0.0;
  double se = 0.0;  // across seeds
  std::size_t n_seeds = 0;
};

inline std::vector<OpeSummaryRow> summarize_ope(
    std::span<const std::vector<BenchmarkRow>> per_seed) {
  std::vector<std::string> names;
  std::vector<std::vector<double>> maes;
  for (const auto& rows : per_seed) {
    for (const auto& r : rows) {
      auto it = std::find(names.begin(), names.end(), r.estimator);
      if (it == names.end()) {
        names.push_back(r.estimator);
        maes.emplace_back();
        it = names.end() - 1;
      }
      maes[it - names.begin()].push_back(r.mae);
    }
  }
  std::vector<OpeSummaryRow> out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto s = detail::mean_with_se(maes[i]);
    out.push_back({names[i], s.value, s.se, maes[i].size()});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const auto& a, const auto& b) { return a.mean_mae < b.mean_mae; });
  return out;
}

inline std::string ope_summary_csv(std::span<const OpeSummaryRow> rows) {
  std::string out = "estimator,mean_mae,se,n_seeds\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.10g,%.10g,%zu\n", r.estimator.c_str(), r.mean_mae,
                  r.se, r.n_seeds);
    out += buf;
  }
  return out;
}

}  // namespace evarl
