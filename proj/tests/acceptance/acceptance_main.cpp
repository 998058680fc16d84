// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//
// Runs at full size. With one core the training study dominates (see README).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "evarl/checks.hpp"
#include "evarl/studies.hpp"

namespace {

using namespace evarl;

struct Criterion {
  int id;
  std::string name;
  bool passed;
  std::string detail;
};

std::vector<Criterion> results;

void report(const CheckResult& c) {
  std::printf("    %-40s %6zu / %-6zu worst %.3g\n", c.name.c_str(), c.passed, c.total, c.worst);
}

bool all_ok(std::span<const CheckResult> checks) {
  bool ok = true;
  for (const auto& c : checks) {
    report(c);
    ok = ok && c.ok();
  }
  return ok;
}

void record(int id, const std::string& name, bool passed, std::string detail = {}) {
  std::printf("[%s] criterion %d: %s%s%s\n", passed ? "PASS" : "FAIL", id, name.c_str(),
              detail.empty() ? "" : " | ", detail.c_str());
  std::fflush(stdout);
  results.push_back({id, name, passed, std::move(detail)});
}

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

constexpr std::uint64_t kSeed = 20240601;

// ---------------------------------------------------------------------------

std::vector<CheckResult> sweep_value_bound;  // reused by criterion 6
std::vector<CheckResult> frontier_value_bound;

void criteria_1_to_3(std::size_t jobs) {
  Timer t;
  const auto psd = check_psd(1000, kSeed, jobs);
  record(1, "QCLP matrix is PSD on 1000 instances", all_ok(std::span(&psd, 1)),
         fmt("%.1fs", t.seconds()));

  Timer t2;
  const auto rt = check_roundtrip(100, kSeed + 1, 1e-8, jobs);
  record(2, "soft/hard duality roundtrip within 1e-8 on 100 instances",
         all_ok(std::span(&rt, 1)), fmt("%.1fs", t2.seconds()));

  Timer t3;
  const auto hard = check_hard_closed_form(50, kSeed + 2, 1e-4, jobs);
  record(3, "closed-form hard optimum matches projected gradient within 1e-4",
         all_ok(std::span(&hard, 1)), fmt("%.1fs", t3.seconds()));
}

void criterion_4(std::size_t jobs) {
  Timer t;
  SweepOptions o;
  o.seed = kSeed + 3;
  o.jobs = jobs;
  const auto checks = check_frontier(200, o);
  bool ok = false;
  for (const auto& c : checks) {
    report(c);
    if (c.name == "frontier_monotone") ok = c.ok();
    else frontier_value_bound.push_back(c);
  }
  record(4, "enumerated soft optimum: J and zeta^2 non-increasing in beta, 200 MDPs", ok,
         fmt("%.1fs", t.seconds()));
}

void criterion_5(std::size_t jobs) {
  Timer t;
  SweepOptions o;
  o.trials = 1000;
  o.seed = kSeed + 4;
  o.jobs = jobs;
  const auto sweep = check_beta_sweep(o);
  std::printf("    %8s %12s %10s %10s %10s\n", "beta", "mean zeta^2", "se", "mean J", "se");
  for (const auto& r : sweep.result.rows) {
    std::printf("    %8g %12.6f %10.6f %10.6f %10.6f\n", r.beta, r.mean_zeta_sq, r.se_zeta_sq,
                r.mean_J, r.se_J);
  }
  bool ok = true;
  for (const auto& c : sweep.checks) {
    if (c.name == "sweep_zeta_trend" || c.name == "sweep_return_trend") {
      report(c);
      ok = ok && c.ok();
    } else {
      sweep_value_bound.push_back(c);
    }
  }
  record(5, "beta sweep (1000 trials): mean zeta^2 and mean J non-increasing within one SE", ok,
         fmt("%.1fs", t.seconds()));
}

void criterion_6() {
  Timer t;
  auto checks = frontier_value_bound;
  checks.insert(checks.end(), sweep_value_bound.begin(), sweep_value_bound.end());
  const auto predictors = check_value_bound_predictors(200, kSeed + 5);
  checks.insert(checks.end(), predictors.begin(), predictors.end());
  record(6, "(J - Jhat)^2 <= zeta^2 + 1e-12 everywhere; equality for constant error",
         !checks.empty() && all_ok(checks), fmt("%.1fs", t.seconds()));
}

void criterion_7() {
  Timer t;
  const auto checks = run_gradcheck_suite(1e-4);
  record(7, "finite-difference gradient checks at 1e-4", all_ok(checks),
         fmt("%.1fs", t.seconds()));
}

// ---------------------------------------------------------------------------
// Gridworld study (criteria 8 and 9)

std::shared_ptr<const TabularMdp> study_grid() {
  GridworldConfig g;
  g.width = 4;
  g.height = 4;
  g.goals = {{3, 3}};
  g.slip = 0.1;
  return std::make_shared<const TabularMdp>(make_gridworld(g));
}

struct Means {
  double ret = 0.0;
  double mae = 0.0;
  std::size_t n = 0;
};

void criteria_8_and_9(std::size_t jobs) {
  Timer t;
  const auto mdp = study_grid();
  const auto dir = std::filesystem::temp_directory_path() / "evarl_acceptance";
  std::filesystem::create_directories(dir);

  TrainingStudyOptions o;
  o.seeds = {0, 1, 2, 3, 4};
  o.modes = {PredictorMode::kFrozen, PredictorMode::kCoLearned};
  o.betas = {0.0, 0.01, 0.1};
  o.checkpoint_dir = dir;
  o.jobs = jobs;
  const auto study = run_training_study(mdp, o);

  std::map<std::pair<PredictorMode, double>, Means> means;
  for (const auto& r : study.runs) {
    const auto tail = tail_summary(r.log);
    auto& m = means[{r.mode, r.beta}];
    m.ret += tail.exact_return;
    m.mae += tail.pred_mae;
    ++m.n;
  }
  std::printf("    %-11s %6s %12s %12s\n", "mode", "beta", "tail return", "tail MAE");
  for (auto& [key, m] : means) {
    m.ret /= static_cast<double>(m.n);
    m.mae /= static_cast<double>(m.n);
    std::printf("    %-11s %6g %12.6f %12.6f\n", to_string(key.first), key.second, m.ret, m.mae);
  }
  const auto& f0 = means[{PredictorMode::kFrozen, 0.0}];
  const auto& f1 = means[{PredictorMode::kFrozen, 0.01}];
  const auto& f2 = means[{PredictorMode::kFrozen, 0.1}];
  const auto& c0 = means[{PredictorMode::kCoLearned, 0.0}];
  const auto& c1 = means[{PredictorMode::kCoLearned, 0.01}];
  const bool mae_trend = f1.mae <= f0.mae && f2.mae <= f1.mae;
  const bool return_trend = f1.ret <= f0.ret && f2.ret <= f1.ret;
  const bool co_learned_return = c1.ret >= 0.9 * c0.ret;
  const bool co_learned_mae = c1.mae <= f1.mae;
  std::printf("    frozen MAE non-increasing: %s\n", mae_trend ? "yes" : "no");
  std::printf("    frozen return non-increasing: %s\n", return_trend ? "yes" : "no");
  std::printf("    co-learned return at 0.01 / at 0: %.4f\n", c1.ret / c0.ret);
  std::printf("    co-learned MAE %.6f vs frozen MAE %.6f at 0.01\n", c1.mae, f1.mae);
  record(8, "gridworld study: frozen trends in beta, co-learned return and MAE at 0.01",
         mae_trend && return_trend && co_learned_return && co_learned_mae, fmt("%.1fs", t.seconds()));

  Timer t9;
  std::vector<std::vector<BenchmarkRow>> per_seed;
  std::vector<const StudyRun*> targets;
  for (const auto& r : study.runs) {
    if (r.mode == PredictorMode::kCoLearned && r.beta == 0.01) targets.push_back(&r);
  }
  per_seed.resize(targets.size());
  parallel_for(targets.size(), jobs, [&](std::size_t i) {
    const auto& r = *targets[i];
    per_seed[i] = compare_with_ope(*mdp, o.trainer, r, study.setups[r.setup].env, {});
  });
  const auto summary = summarize_ope(per_seed);
  std::map<std::string, double> mae;
  std::printf("    %-10s %12s %10s\n", "estimator", "mean MAE", "se");
  for (const auto& s : summary) {
    std::printf("    %-10s %12.6f %10.6f\n", s.estimator.c_str(), s.mean_mae, s.se);
    mae[s.estimator] = s.mean_mae;
  }
  const double p = mae.at(kPredictorRow);
  const bool ok = p < mae.at("TIS") && p < mae.at("PDIS");
  record(9, "co-learned predictor MAE below TIS and PDIS (DR and FQE reported)", ok,
         fmt("predictor %.4g, DR %.4g, FQE %.4g", p, mae.at("DR"), mae.at("FQE")) +
             fmt(", %.1fs", t9.seconds()));
}

// ---------------------------------------------------------------------------
// Reduction identities (criterion 10)

bool zero_beta_identity() {
  GridworldConfig g;
  g.width = 3;
  g.height = 3;
  g.goals = {{2, 2}};
  g.slip = 0.1;
  g.horizon = 8;
  const auto mdp = std::make_shared<const TabularMdp>(make_gridworld(g));
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
  TransformerConfig tc;
  tc.obs_dim = mdp->embedding_dim();
  tc.k = 3;
  tc.hidden = 8;
  tc.heads = 2;
  tc.layers = 1;

  bool same = true;
  for (auto estimator : {PenaltyEstimator::kPlugIn, PenaltyEstimator::kScoreFunction}) {
    c.estimator = estimator;
    const auto env = make_assessment_env(mdp, c, *c.assessment_states);
    Rng rng(1);
    TransformerPredictor pred(tc, rng);
    TabularSoftmaxPolicy a(mdp->n_states(), mdp->n_actions());
    TabularSoftmaxPolicy b(mdp->n_states(), mdp->n_actions());
    const auto ev = run_evarl(*mdp, env, c, pred, a);
    const auto pg = run_policy_gradient(*mdp, c, b);
    same = same && ev.predictor_updates > 0;
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
      same = same && a.parameters()[i].value.data() == b.parameters()[i].value.data();
    }
    same = same && ev.records.size() == pg.records.size();
    for (std::size_t i = 0; same && i < ev.records.size(); ++i) {
      same = ev.records[i].episodic_return == pg.records[i].episodic_return &&
             ev.records[i].exact_return == pg.records[i].exact_return &&
             ev.records[i].interactions == pg.records[i].interactions;
    }
  }
  std::printf("    beta = 0 trainer equals plain policy gradient bitwise: %s\n",
              same ? "yes" : "no");
  return same;
}

bool on_policy_estimators_identity() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    RandomMdpOptions opts;
    opts.horizon = 4;
    opts.gamma = 0.9;
    const auto mdp = sample_random_mdp(4, 3, false, rng, opts);
    std::vector<double> p(4 * 3);
    for (std::size_t s = 0; s < 4; ++s) {
      double total = 0.0;
      for (std::size_t a = 0; a < 3; ++a) total += p[s * 3 + a] = 0.2 + rng.uniform();
      for (std::size_t a = 0; a < 3; ++a) p[s * 3 + a] /= total;
    }
    const PolicyTable pi(4, 3, std::move(p));
    const auto data = collect_behavior_data(mdp, pi, 300, rng);
    const double mc = mc_estimate(data.trajectories, mdp.gamma()).value;
    const FiniteHorizonValues zero(mdp.horizon(), mdp.n_states(), mdp.n_actions());
    for (double v : {tis_estimate(data, pi).value, pdis_estimate(data, pi).value,
                     dr_estimate(data, pi, zero).value}) {
      worst = std::max(worst, std::abs(v - mc));
    }
  }
  std::printf("    on-policy TIS/PDIS/DR(0) vs MC max abs. diff %.3g\n", worst);
  return worst <= 1e-12;
}

bool single_entry_linear_identity() {
  bool exact = true;
  Rng rng(kSeed);
  for (int trial = 0; trial < 100; ++trial) {
    AssessmentDataset d;
    const double g = rng.normal() * 10.0;
    d.entries.push_back({{rng.uniform(), rng.uniform()}, g});
    const LinearPredictor pred(rbf_similarity(0.5 + rng.uniform()));
    const std::vector<double> q{rng.uniform(), rng.uniform()};
    exact = exact && pred.predict(q, d) == g;
  }
  std::printf("    k = 1 linear predictor returns its single return exactly: %s\n",
              exact ? "yes" : "no");
  return exact;
}

void criterion_10() {
  Timer t;
  const bool a = zero_beta_identity();
  const bool b = on_policy_estimators_identity();
  const bool c = single_entry_linear_identity();
  record(10, "reduction identities", a && b && c, fmt("%.1fs", t.seconds()));
}

}  // namespace

int main() {
  const std::size_t jobs = default_jobs();
  std::printf("evarl acceptance, %zu worker thread(s)\n", jobs);
  Timer total;
  criteria_1_to_3(jobs);
  criterion_4(jobs);
  criterion_5(jobs);
  criterion_6();
  criterion_7();
  criterion_10();
  criteria_8_and_9(jobs);

  std::printf("\nsummary (%.1fs)\n", total.seconds());
  std::size_t failed = 0;
  std::sort(results.begin(), results.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });
  for (const auto& r : results) {
    std::printf("[%s] %d %s\n", r.passed ? "PASS" : "FAIL", r.id, r.name.c_str());
    failed += r.passed ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
