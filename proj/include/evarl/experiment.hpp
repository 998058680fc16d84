#pragma once

// Experiment orchestration behind the evarl CLI: strict JSON configs,
// per-kind runners, a manifest with artifact checksums, and the summary
// report. Needs OpenSSL (libcrypto) for SHA-256.

#include <openssl/evp.h>

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "evarl/checks.hpp"
#include "evarl/studies.hpp"
#include "evarl/svg.hpp"

namespace evarl {

inline constexpr int kSchemaVersion = 1;

// Invalid configuration; the CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

inline std::string sha256_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256: digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < length; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 15];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Strict field reading
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
struct is_vector : std::false_type {};
template <typename T>
struct is_vector<std::vector<T>> : std::true_type {};

template <typename T>
T convert(const nlohmann::json& v, const std::string& field) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(field, "expected a boolean");
    return v.get<bool>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError(field, "expected a string");
    return v.get<std::string>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(field, "expected a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw ConfigError(field, "expected a finite number");
    return d;
  } else if constexpr (std::is_integral_v<T>) {
    // Parsed text gives unsigned; configs built in code may carry signed values.
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError(field, "expected a non-negative integer");
    }
    return v.get<T>();
  } else {
    static_assert(is_vector<T>::value, "unsupported config type");
    if (!v.is_array()) throw ConfigError(field, "expected an array");
    T out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      out.push_back(convert<typename T::value_type>(v[i], field + "[" + std::to_string(i) + "]"));
    }
    return out;
  }
}

}  // namespace detail

// Reads fields of one JSON object; finish() rejects keys nobody asked for.
class FieldReader {
 public:
  FieldReader(nlohmann::json j, std::string path) : j_(std::move(j)), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "config" : path_, "expected an object");
  }

  std::string field(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }
  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  T required(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError(field(key), "missing required field");
    return detail::convert<T>(j_.at(key), field(key));
  }

  template <typename T>
  T optional(const std::string& key, T fallback) {
    seen_.insert(key);
    return j_.contains(key) ? detail::convert<T>(j_.at(key), field(key)) : fallback;
  }

  // Sub-object; an absent optional section reads as {}.
  FieldReader child(const std::string& key, bool required) {
    seen_.insert(key);
    if (!j_.contains(key)) {
      if (required) throw ConfigError(field(key), "missing required field");
      return FieldReader(nlohmann::json::object(), field(key));
    }
    return FieldReader(j_.at(key), field(key));
  }

  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(field(key), "unknown field");
    }
  }

 private:
  nlohmann::json j_;
  std::string path_;
  std::set<std::string> seen_;
};

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

enum class ExperimentKind { kTheorySweep, kTrainEvarl, kPretrainPredictor, kOpeCompare, kGradcheck };

inline const char* to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::kTheorySweep: return "theory-sweep";
    case ExperimentKind::kTrainEvarl: return "train-evarl";
    case ExperimentKind::kPretrainPredictor: return "pretrain-predictor";
    case ExperimentKind::kOpeCompare: return "ope-compare";
    case ExperimentKind::kGradcheck: return "gradcheck";
  }
  return "?";
}

struct EnvironmentConfig {
  std::string type = "gridworld";
  GridworldConfig grid;
  std::size_t states = 5;
  std::size_t actions = 2;
  bool deterministic = false;
  RandomMdpOptions random;
  std::uint64_t seed = 0;
};

inline TabularMdp build_environment(const EnvironmentConfig& e) {
  if (e.type == "gridworld") return make_gridworld(e.grid);
  Rng rng = make_stream(e.seed, 0xe170000);
  return sample_random_mdp(e.states, e.actions, e.deterministic, rng, e.random);
}

struct TheoryCheckCounts {
  std::size_t psd = 1000;
  std::size_t roundtrip = 100;
  std::size_t hard = 50;
  std::size_t frontier = 200;
  std::size_t predictors = 200;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::kGradcheck;
  std::vector<std::uint64_t> seeds;
  std::string output_dir;
  EnvironmentConfig environment;
  TrainerConfig trainer;
  std::vector<double> betas;
  std::vector<PredictorMode> modes;
  TransformerConfig predictor;  // obs_dim and k follow the MDP and trainer
  PretrainOptions pretrain;
  SweepOptions sweep;
  TheoryCheckCounts checks;
  OpeCompareOptions ope;
  double grad_tolerance = 1e-4;
};

namespace detail {

inline ExperimentKind parse_kind(const std::string& s) {
  for (auto k : {ExperimentKind::kTheorySweep, ExperimentKind::kTrainEvarl,
                 ExperimentKind::kPretrainPredictor, ExperimentKind::kOpeCompare,
                 ExperimentKind::kGradcheck}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("kind", "unknown experiment kind '" + s + "'");
}

inline void positive(std::size_t v, const std::string& field) {
  if (v == 0) throw ConfigError(field, "must be >= 1");
}

inline EnvironmentConfig parse_environment(FieldReader r) {
  EnvironmentConfig e;
  e.type = r.required<std::string>("type");
  if (e.type == "gridworld") {
    auto& g = e.grid;
    g.width = r.optional("width", g.width);
    g.height = r.optional("height", g.height);
    for (const auto& cell : r.optional<std::vector<std::vector<std::size_t>>>("goals", {})) {
      if (cell.size() != 2) throw ConfigError(r.field("goals"), "each goal is [x, y]");
      g.goals.push_back({cell[0], cell[1]});
    }
    g.step_reward = r.optional("step_reward", g.step_reward);
    g.goal_reward = r.optional("goal_reward", g.goal_reward);
    g.slip = r.optional("slip", g.slip);
    g.horizon = r.optional("horizon", g.horizon);
    g.gamma = r.optional("gamma", g.gamma);
  } else if (e.type == "random") {
    e.states = r.optional("states", e.states);
    e.actions = r.optional("actions", e.actions);
    e.deterministic = r.optional("deterministic", e.deterministic);
    e.random.horizon = r.optional("horizon", e.random.horizon);
    e.random.gamma = r.optional("gamma", e.random.gamma);
    e.random.reward_low = r.optional("reward_low", e.random.reward_low);
    e.random.reward_high = r.optional("reward_high", e.random.reward_high);
    e.seed = r.optional("seed", e.seed);
  } else {
    throw ConfigError(r.field("type"), "expected 'gridworld' or 'random'");
  }
  r.finish();
  try {
    build_environment(e);
  } catch (const std::exception& ex) {
    throw ConfigError("environment", ex.what());
  }
  return e;
}

// Trainer keys and their types come from the serialized defaults.
inline TrainerConfig parse_trainer(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path, "expected an object");
  const auto defaults = to_json(TrainerConfig{});
  for (const auto& [key, value] : j.items()) {
    const std::string f = path + "." + key;
    if (key == "seed") throw ConfigError(f, "set seeds with the top-level seeds list");
    if (key == "mode") throw ConfigError(f, "set predictor modes with the top-level modes list");
    if (key == "gate_mse") {
      convert<double>(value, f);
    } else if (key == "assessment_states") {
      convert<std::vector<std::size_t>>(value, f);
    } else if (!defaults.contains(key)) {
      throw ConfigError(f, "unknown field");
    } else if (const auto& d = defaults.at(key); d.is_boolean()) {
      convert<bool>(value, f);
    } else if (d.is_string()) {
      convert<std::string>(value, f);
    } else if (d.is_number_unsigned()) {
      convert<std::size_t>(value, f);
    } else {
      convert<double>(value, f);
    }
  }
  TrainerConfig c;
  try {
    c = trainer_config_from_json(j);
    c.validate();
  } catch (const InvalidInput& e) {
    throw ConfigError(path, e.what());
  }
  if (c.assessment_states && c.assessment_states->size() != c.k) {
    throw ConfigError(path + ".assessment_states", "must list k states");
  }
  return c;
}

inline std::vector<double> parse_betas(FieldReader& r, const std::string& key, bool required,
                                       std::vector<double> fallback) {
  auto betas = required ? r.required<std::vector<double>>(key)
                        : r.optional<std::vector<double>>(key, std::move(fallback));
  if (betas.empty()) throw ConfigError(r.field(key), "must be non-empty");
  for (std::size_t i = 0; i < betas.size(); ++i) {
    if (betas[i] < 0.0) throw ConfigError(r.field(key), "betas must be >= 0");
    if (i > 0 && betas[i] <= betas[i - 1]) {
      throw ConfigError(r.field(key), "betas must be strictly increasing");
    }
  }
  return betas;
}

inline void parse_predictor(FieldReader r, ExperimentConfig& c) {
  auto& t = c.predictor;
  t.hidden = r.optional("hidden", t.hidden);
  t.heads = r.optional("heads", t.heads);
  t.layers = r.optional("layers", t.layers);
  r.finish();
  try {
    Rng rng(0);
    TransformerPredictor probe(
        study_transformer(build_environment(c.environment), c.trainer, t), rng);
  } catch (const InvalidInput& e) {
    throw ConfigError("predictor", e.what());
  }
}

inline void parse_pretrain(FieldReader r, PretrainOptions& p) {
  p.epochs = r.optional("epochs", p.epochs);
  p.batch_size = r.optional("batch_size", p.batch_size);
  p.learning_rate = r.optional("learning_rate", p.learning_rate);
  p.adam = r.optional("adam", p.adam);
  positive(p.epochs, r.field("epochs"));
  positive(p.batch_size, r.field("batch_size"));
  r.finish();
}

inline void parse_sweep(FieldReader r, SweepOptions& s) {
  s.trials = r.optional("trials", s.trials);
  s.betas = parse_betas(r, "betas", false, s.betas);
  s.n_states = r.optional("n_states", s.n_states);
  s.n_actions = r.optional("n_actions", s.n_actions);
  s.gamma = r.optional("gamma", s.gamma);
  s.horizon = r.optional("horizon", s.horizon);
  s.assessment = r.optional("assessment", s.assessment);
  s.sigma = r.optional("sigma", s.sigma);
  if (r.has("similarity_matrix")) {
    s.similarity_matrix = r.required<std::vector<double>>("similarity_matrix");
  }
  s.ascent.steps = r.optional("steps", s.ascent.steps);
  s.ascent.step_size = r.optional("step_size", s.ascent.step_size);
  positive(s.trials, r.field("trials"));
  positive(s.n_states, r.field("n_states"));
  positive(s.n_actions, r.field("n_actions"));
  positive(s.horizon, r.field("horizon"));
  if (s.assessment.empty()) throw ConfigError(r.field("assessment"), "must be non-empty");
  for (auto st : s.assessment) {
    if (st >= s.n_states) throw ConfigError(r.field("assessment"), "state out of range");
  }
  if (s.similarity_matrix && s.similarity_matrix->size() != s.n_states * s.n_states) {
    throw ConfigError(r.field("similarity_matrix"), "must hold n_states^2 entries");
  }
  r.finish();
}

inline void parse_checks(FieldReader r, TheoryCheckCounts& c) {
  c.psd = r.optional("psd", c.psd);
  c.roundtrip = r.optional("roundtrip", c.roundtrip);
  c.hard = r.optional("hard", c.hard);
  c.frontier = r.optional("frontier", c.frontier);
  c.predictors = r.optional("predictors", c.predictors);
  positive(c.psd, r.field("psd"));
  positive(c.roundtrip, r.field("roundtrip"));
  positive(c.hard, r.field("hard"));
  positive(c.frontier, r.field("frontier"));
  positive(c.predictors, r.field("predictors"));
  r.finish();
}

inline void parse_ope(FieldReader r, OpeCompareOptions& o) {
  if (r.has("methods")) {
    o.methods.clear();
    for (const auto& name : r.required<std::vector<std::string>>("methods")) {
      try {
        o.methods.push_back(ope_method_from_string(name));
      } catch (const InvalidInput& e) {
        throw ConfigError(r.field("methods"), e.what());
      }
    }
    if (o.methods.empty()) throw ConfigError(r.field("methods"), "must be non-empty");
  }
  o.behavior_epsilon = r.optional("behavior_epsilon", o.behavior_epsilon);
  if (!(o.behavior_epsilon > 0.0 && o.behavior_epsilon <= 1.0)) {
    throw ConfigError(r.field("behavior_epsilon"), "must be in (0, 1]");
  }
  o.trials = r.optional("trials", o.trials);
  o.assessment_sets = r.optional("assessment_sets", o.assessment_sets);
  positive(o.trials, r.field("trials"));
  positive(o.assessment_sets, r.field("assessment_sets"));
  r.finish();
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  FieldReader r(j, "");
  const auto version = r.required<std::size_t>("schema_version");
  if (version != kSchemaVersion) {
    throw ConfigError("schema_version", "unsupported version " + std::to_string(version));
  }
  ExperimentConfig c;
  c.kind = detail::parse_kind(r.required<std::string>("kind"));
  c.seeds = r.required<std::vector<std::uint64_t>>("seeds");
  if (c.seeds.empty()) throw ConfigError("seeds", "must be non-empty");
  c.output_dir = r.optional<std::string>("output_dir", "");

  const bool trains = c.kind == ExperimentKind::kTrainEvarl ||
                      c.kind == ExperimentKind::kPretrainPredictor ||
                      c.kind == ExperimentKind::kOpeCompare;
  std::set<std::string> allowed;
  if (trains) {
    c.environment = detail::parse_environment(r.child("environment", true));
    if (!r.has("trainer")) throw ConfigError("trainer", "missing required field");
    c.trainer = detail::parse_trainer(r.raw("trainer"), "trainer");
    detail::parse_predictor(r.child("predictor", false), c);
    allowed = {"environment", "trainer", "predictor"};
  }
  switch (c.kind) {
    case ExperimentKind::kTheorySweep:
      detail::parse_sweep(r.child("sweep", false), c.sweep);
      detail::parse_checks(r.child("checks", false), c.checks);
      allowed = {"sweep", "checks"};
      break;
    case ExperimentKind::kTrainEvarl: {
      c.betas = detail::parse_betas(r, "betas", true, {});
      for (const auto& m : r.required<std::vector<std::string>>("modes")) {
        try {
          c.modes.push_back(predictor_mode_from_string(m));
        } catch (const InvalidInput& e) {
          throw ConfigError("modes", e.what());
        }
      }
      if (c.modes.empty()) throw ConfigError("modes", "must be non-empty");
      detail::parse_pretrain(r.child("pretrain", false), c.pretrain);
      allowed.insert({"betas", "modes", "pretrain"});
      break;
    }
    case ExperimentKind::kPretrainPredictor:
      detail::parse_pretrain(r.child("pretrain", false), c.pretrain);
      allowed.insert("pretrain");
      break;
    case ExperimentKind::kOpeCompare:
      detail::parse_ope(r.child("ope", false), c.ope);
      allowed.insert("ope");
      break;
    case ExperimentKind::kGradcheck: {
      auto g = r.child("gradcheck", false);
      c.grad_tolerance = g.optional("tolerance", c.grad_tolerance);
      if (!(c.grad_tolerance > 0.0)) throw ConfigError("gradcheck.tolerance", "must be > 0");
      g.finish();
      allowed = {"gradcheck"};
      break;
    }
  }
  for (const char* section : {"environment", "trainer", "predictor", "betas", "modes", "pretrain",
                              "sweep", "checks", "ope", "gradcheck"}) {
    if (r.has(section) && !allowed.count(section)) {
      throw ConfigError(section, std::string("not used by kind ") + to_string(c.kind));
    }
  }
  r.finish();
  return c;
}

inline nlohmann::json load_config_json(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const std::exception&) {
    throw ConfigError(path.string(), "cannot read config file");
  }
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string(), std::string("invalid JSON: ") + e.what());
  }
}

// EVARL_SEED_OFFSET, default 0.
inline std::int64_t seed_offset_from_env() {
  const char* v = std::getenv("EVARL_SEED_OFFSET");
  if (v == nullptr || *v == '\0') return 0;
  const std::string s(v);
  std::int64_t out = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || end != s.data() + s.size()) {
    throw ConfigError("EVARL_SEED_OFFSET", "expected an integer, got '" + s + "'");
  }
  return out;
}

inline std::vector<std::uint64_t> offset_seeds(std::span<const std::uint64_t> seeds,
                                               std::int64_t offset) {
  std::vector<std::uint64_t> out;
  for (auto s : seeds) {
    if (offset < 0 && s < static_cast<std::uint64_t>(-offset)) {
      throw ConfigError("EVARL_SEED_OFFSET", "shifts seed " + std::to_string(s) + " below 0");
    }
    out.push_back(s + static_cast<std::uint64_t>(offset));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Artifacts and manifest
// ---------------------------------------------------------------------------

struct Artifact {
  std::string path;  // relative to the output directory
  std::string sha256;
  std::size_t bytes = 0;
};

struct Manifest {
  std::string kind;
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
  std::int64_t seed_offset = 0;
  std::string status = "running";
  std::string error;
  std::vector<Artifact> artifacts;
};

inline nlohmann::json to_json(const Manifest& m) {
  nlohmann::json artifacts = nlohmann::json::array();
  for (const auto& a : m.artifacts) {
    artifacts.push_back({{"path", a.path}, {"sha256", a.sha256}, {"bytes", a.bytes}});
  }
  nlohmann::json j{{"schema_version", kSchemaVersion},
                   {"kind", m.kind},
                   {"config_hash", m.config_hash},
                   {"seeds", m.seeds},
                   {"seed_offset", m.seed_offset},
                   {"status", m.status},
                   {"artifacts", artifacts}};
  if (!m.error.empty()) j["error"] = m.error;
  return j;
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
  Manifest m;
  m.kind = j.at("kind").get<std::string>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  m.seed_offset = j.at("seed_offset").get<std::int64_t>();
  m.status = j.at("status").get<std::string>();
  m.error = j.value("error", "");
  for (const auto& a : j.at("artifacts")) {
    m.artifacts.push_back({a.at("path").get<std::string>(), a.at("sha256").get<std::string>(),
                           a.at("bytes").get<std::size_t>()});
  }
  return m;
}

inline constexpr const char* kManifestName = "manifest.json";

class ArtifactWriter {
 public:
  explicit ArtifactWriter(std::filesystem::path dir) : dir_(std::move(dir)) {}

  const std::filesystem::path& dir() const { return dir_; }
  const std::vector<Artifact>& artifacts() const { return artifacts_; }

  void write(const std::string& name, const std::string& text) {
    write_text_atomic(dir_ / name, text);
    record(name, text);
  }

  // A file some other step already wrote into the directory.
  void adopt(const std::string& name) { record(name, read_text(dir_ / name)); }

 private:
  void record(const std::string& name, const std::string& text) {
    artifacts_.push_back({name, sha256_hex(text), text.size()});
  }

  std::filesystem::path dir_;
  std::vector<Artifact> artifacts_;
};

inline void write_manifest(const std::filesystem::path& dir, const Manifest& m) {
  write_text_atomic(dir / kManifestName, to_json(m).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Runners
// ---------------------------------------------------------------------------

struct RunOptions {
  std::size_t jobs = default_jobs();
  std::optional<std::filesystem::path> out;  // overrides output_dir
  std::int64_t seed_offset = 0;
  bool progress = true;
};

namespace detail {

inline void progress(const RunOptions& o, const std::string& message) {
  if (!o.progress) return;
  static std::mutex mu;
  std::lock_guard lock(mu);
  std::cerr << "[evarl] " << message << "\n";
}

inline std::string beta_label(double beta) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", beta);
  return buf;
}

inline std::string run_name(const StudyRun& r) {
  return std::string("train_") + to_string(r.mode) + "_b" + beta_label(r.beta) + "_s" +
         std::to_string(r.seed) + ".csv";
}

inline std::string assessment_states_csv(std::span<const SeedSetup> setups) {
  std::string out = "seed,states\n";
  for (const auto& s : setups) {
    out += std::to_string(s.seed) + ",";
    for (std::size_t i = 0; i < s.env.spec.start_states.size(); ++i) {
      out += (i ? " " : "") + std::to_string(s.env.spec.start_states[i]);
    }
    out += "\n";
  }
  return out;
}

inline void write_pretrain_outputs(ArtifactWriter& w, std::span<const SeedSetup> setups) {
  std::string table = "seed,records,initial_mse,final_mse\n";
  char buf[256];
  for (const auto& s : setups) {
    if (!s.pretrain) continue;
    w.adopt(checkpoint_name(s.seed));
    std::snprintf(buf, sizeof buf, "%llu,%zu,%.12g,%.12g\n",
                  static_cast<unsigned long long>(s.seed), s.pretrain->buffer.size(),
                  s.pretrain->initial_mse, s.pretrain->final_mse);
    table += buf;
    std::string losses = "step,loss\n";
    for (std::size_t i = 0; i < s.pretrain->loss_history.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%zu,%.12g\n", i, s.pretrain->loss_history[i]);
      losses += buf;
    }
    w.write("pretrain_loss_s" + std::to_string(s.seed) + ".csv", losses);
  }
  w.write("pretrain.csv", table);
}

inline TrainingStudyOptions study_options(const ExperimentConfig& c,
                                          const std::vector<std::uint64_t>& seeds,
                                          const ArtifactWriter& w, const RunOptions& ro) {
  TrainingStudyOptions o;
  o.trainer = c.trainer;
  o.transformer = c.predictor;
  o.pretrain = c.pretrain;
  o.seeds = seeds;
  o.modes = c.modes.empty() ? std::vector{PredictorMode::kCoLearned} : c.modes;
  o.betas = c.betas.empty() ? std::vector{c.trainer.beta} : c.betas;
  o.checkpoint_dir = w.dir();
  o.jobs = ro.jobs;
  return o;
}

inline void run_theory_sweep(const ExperimentConfig& c, const std::vector<std::uint64_t>& seeds,
                             ArtifactWriter& w, const RunOptions& ro) {
  std::string table = "seed,check,passed,total,worst\n";
  std::vector<ChartSeries> zeta, ret;
  char buf[256];
  for (auto seed : seeds) {
    auto o = c.sweep;
    o.seed = seed;
    o.jobs = ro.jobs;
    progress(ro, "seed " + std::to_string(seed) + ": beta sweep over " +
                     std::to_string(o.trials) + " instances");
    auto sweep = check_beta_sweep(o);
    w.write("sweep_s" + std::to_string(seed) + ".csv", sweep_csv(sweep.result.rows));
    progress(ro, "seed " + std::to_string(seed) + ": closed-form checks");
    std::vector<CheckResult> checks{check_psd(c.checks.psd, seed, ro.jobs),
                                    check_roundtrip(c.checks.roundtrip, seed, 1e-8, ro.jobs),
                                    check_hard_closed_form(c.checks.hard, seed, 1e-4, ro.jobs)};
    for (auto& r : check_frontier(c.checks.frontier, o)) checks.push_back(std::move(r));
    for (auto& r : check_value_bound_predictors(c.checks.predictors, seed)) {
      checks.push_back(std::move(r));
    }
    for (auto& r : sweep.checks) checks.push_back(std::move(r));
    for (const auto& r : checks) {
      std::snprintf(buf, sizeof buf, "%llu,%s,%zu,%zu,%.6g\n",
                    static_cast<unsigned long long>(seed), r.name.c_str(), r.passed, r.total,
                    r.worst);
      table += buf;
    }
    ChartSeries z{"seed " + std::to_string(seed), {}, {}}, j = z;
    for (std::size_t i = 0; i < sweep.result.rows.size(); ++i) {
      z.x.push_back(static_cast<double>(i));
      z.y.push_back(sweep.result.rows[i].mean_zeta_sq);
      j.x.push_back(static_cast<double>(i));
      j.y.push_back(sweep.result.rows[i].mean_J);
    }
    zeta.push_back(std::move(z));
    ret.push_back(std::move(j));
  }
  w.write("theory_checks.csv", table);
  ChartOptions chart;
  for (double b : c.sweep.betas) chart.x_categories.push_back(beta_label(b));
  chart.x_label = "beta";
  chart.title = "Mean value prediction error vs beta";
  chart.y_label = "mean zeta^2";
  w.write("sweep_zeta.svg", line_chart_svg(chart, zeta));
  chart.title = "Mean return vs beta";
  chart.y_label = "mean J";
  w.write("sweep_return.svg", line_chart_svg(chart, ret));
}

inline void run_train_evarl(const ExperimentConfig& c, const std::vector<std::uint64_t>& seeds,
                            ArtifactWriter& w, const RunOptions& ro) {
  auto mdp = std::make_shared<const TabularMdp>(build_environment(c.environment));
  const auto o = study_options(c, seeds, w, ro);
  progress(ro, "training " + std::to_string(seeds.size() * o.modes.size() * o.betas.size()) +
                   " runs");
  const auto study = run_training_study(mdp, o);
  w.write("assessment_states.csv", assessment_states_csv(study.setups));
  if (std::any_of(study.setups.begin(), study.setups.end(),
                  [](const auto& s) { return s.pretrain.has_value(); })) {
    write_pretrain_outputs(w, study.setups);
  }
  for (const auto& r : study.runs) w.write(run_name(r), train_log_csv(r.log));
  w.write("runs.csv", runs_csv(*mdp, c.trainer, study.runs));

  // Seed-averaged curves, aligned by update index.
  std::vector<ChartSeries> curves, maes;
  for (auto mode : o.modes) {
    ChartSeries mae{to_string(mode), {}, {}};
    for (std::size_t b = 0; b < o.betas.size(); ++b) {
      std::vector<const StudyRun*> group;
      for (const auto& r : study.runs) {
        if (r.mode == mode && r.beta == o.betas[b]) group.push_back(&r);
      }
      std::size_t len = group.front()->log.records.size();
      double tail_mae = 0.0;
      for (const auto* r : group) {
        len = std::min(len, r->log.records.size());
        tail_mae += tail_summary(r->log).pred_mae;
      }
      ChartSeries curve{std::string(to_string(mode)) + " b=" + beta_label(o.betas[b]), {}, {}};
      for (std::size_t i = 0; i < len; ++i) {
        double x = 0.0, y = 0.0;
        for (const auto* r : group) {
          x += static_cast<double>(r->log.records[i].interactions);
          y += r->log.records[i].exact_return;
        }
        curve.x.push_back(x / group.size());
        curve.y.push_back(y / group.size());
      }
      curves.push_back(std::move(curve));
      mae.x.push_back(static_cast<double>(b));
      mae.y.push_back(tail_mae / group.size());
    }
    maes.push_back(std::move(mae));
  }
  ChartOptions chart;
  chart.title = "Return during training";
  chart.x_label = "interactions";
  chart.y_label = "exact return J";
  w.write("returns.svg", line_chart_svg(chart, curves));
  chart.title = "Predictor MAE vs beta";
  chart.x_label = "beta";
  chart.y_label = "tail predictor MAE";
  for (double b : o.betas) chart.x_categories.push_back(beta_label(b));
  w.write("mae_vs_beta.svg", line_chart_svg(chart, maes));
}

inline void run_pretrain(const ExperimentConfig& c, const std::vector<std::uint64_t>& seeds,
                         ArtifactWriter& w, const RunOptions& ro) {
  auto mdp = std::make_shared<const TabularMdp>(build_environment(c.environment));
  auto o = study_options(c, seeds, w, ro);
  o.trainer.checkpoint_path.clear();
  std::vector<std::optional<SeedSetup>> setups(seeds.size());
  progress(ro, "pretraining " + std::to_string(seeds.size()) + " predictors");
  parallel_for(seeds.size(), ro.jobs,
               [&](std::size_t i) { setups[i] = prepare_seed(mdp, o, seeds[i], true); });
  std::vector<SeedSetup> done;
  for (auto& s : setups) done.push_back(std::move(*s));
  w.write("assessment_states.csv", assessment_states_csv(done));
  write_pretrain_outputs(w, done);
}

inline void run_ope_compare(const ExperimentConfig& c, const std::vector<std::uint64_t>& seeds,
                            ArtifactWriter& w, const RunOptions& ro) {
  auto mdp = std::make_shared<const TabularMdp>(build_environment(c.environment));
  auto o = study_options(c, seeds, w, ro);
  o.modes = {PredictorMode::kCoLearned};
  o.betas = {c.trainer.beta};
  progress(ro, "training " + std::to_string(seeds.size()) + " co-learned runs");
  const auto study = run_training_study(mdp, o);
  std::vector<std::vector<BenchmarkRow>> per_seed(study.runs.size());
  progress(ro, "running OPE estimators");
  parallel_for(study.runs.size(), ro.jobs, [&](std::size_t i) {
    const auto& run = study.runs[i];
    per_seed[i] = compare_with_ope(*mdp, c.trainer, run, study.setups[run.setup].env, c.ope);
  });
  w.write("assessment_states.csv", assessment_states_csv(study.setups));
  for (std::size_t i = 0; i < study.runs.size(); ++i) {
    w.write(run_name(study.runs[i]), train_log_csv(study.runs[i].log));
    w.write("ope_s" + std::to_string(study.runs[i].seed) + ".csv", benchmark_csv(per_seed[i]));
  }
  w.write("ope_summary.csv", ope_summary_csv(summarize_ope(per_seed)));
}

}  // namespace detail

struct RunResult {
  std::filesystem::path dir;
  Manifest manifest;
};

inline RunResult run_experiment_json(const nlohmann::json& config_json, const RunOptions& ro) {
  const auto c = parse_experiment_config(config_json);
  if (ro.jobs == 0) throw ConfigError("--jobs", "must be >= 1");
  const std::filesystem::path dir = ro.out ? *ro.out : std::filesystem::path(c.output_dir);
  if (dir.empty()) throw ConfigError("output_dir", "missing required field (or pass --out)");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw ConfigError("output_dir", "cannot create " + dir.string());
  }
  const auto seeds = offset_seeds(c.seeds, ro.seed_offset);
  const std::string canonical = config_json.dump();

  Manifest m;
  m.kind = to_string(c.kind);
  m.config_hash = sha256_hex(canonical);
  m.seeds = seeds;
  m.seed_offset = ro.seed_offset;
  ArtifactWriter w(dir);
  write_manifest(dir, m);
  try {
    w.write("config.json", config_json.dump(2) + "\n");
    switch (c.kind) {
      case ExperimentKind::kTheorySweep: detail::run_theory_sweep(c, seeds, w, ro); break;
      case ExperimentKind::kTrainEvarl: detail::run_train_evarl(c, seeds, w, ro); break;
      case ExperimentKind::kPretrainPredictor: detail::run_pretrain(c, seeds, w, ro); break;
      case ExperimentKind::kOpeCompare: detail::run_ope_compare(c, seeds, w, ro); break;
      case ExperimentKind::kGradcheck:
        w.write("gradcheck.csv", checks_csv(run_gradcheck_suite(c.grad_tolerance)));
        break;
    }
  } catch (const std::exception& e) {
    m.status = "failed";
    m.error = e.what();
    m.artifacts = w.artifacts();
    write_manifest(dir, m);
    throw;
  }
  m.status = "complete";
  m.artifacts = w.artifacts();
  write_manifest(dir, m);
  return {dir, m};
}

inline RunResult run_experiment(const std::filesystem::path& config_path, const RunOptions& ro) {
  return run_experiment_json(load_config_json(config_path), ro);
}

// ---------------------------------------------------------------------------
// Summary
// ---------------------------------------------------------------------------

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw std::runtime_error("csv: missing column " + name);
    return static_cast<std::size_t>(it - header.begin());
  }
  double number(std::size_t row, const std::string& name) const {
    return std::stod(rows[row][column(name)]);
  }
  const std::string& text(std::size_t row, const std::string& name) const {
    return rows[row][column(name)];
  }
};

// Plain comma-separated values; no quoting is ever emitted by this tool.
inline CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::size_t start = 0;
  bool first = true;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::vector<std::string> cells;
    std::size_t a = start;
    while (true) {
      const std::size_t b = std::min(text.find(',', a), end);
      cells.push_back(text.substr(a, b - a));
      if (b >= end) break;
      a = b + 1;
    }
    if (first) {
      t.header = std::move(cells);
      first = false;
    } else if (end > start) {
      t.rows.push_back(std::move(cells));
    }
    start = end + 1;
  }
  return t;
}

namespace detail {

inline std::string runs_section(const CsvTable& t) {
  // (mode, beta) in first-seen order.
  std::vector<std::pair<std::string, double>> keys;
  std::map<std::pair<std::string, double>, std::vector<std::size_t>> rows;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const std::pair key{t.text(i, "mode"), t.number(i, "beta")};
    if (!rows.count(key)) keys.push_back(key);
    rows[key].push_back(i);
  }
  auto mean = [&](const std::vector<std::size_t>& idx, const char* col) {
    double s = 0.0;
    for (auto i : idx) s += t.number(i, col);
    return s / static_cast<double>(idx.size());
  };
  std::map<std::string, double> zero_return;
  double any_zero = NAN;
  for (const auto& k : keys) {
    if (k.second == 0.0) {
      zero_return[k.first] = mean(rows[k], "tail_return");
      any_zero = zero_return[k.first];
    }
  }
  std::string out = "Return vs beta (tail-25% exact return, seed means)\n";
  char buf[256];
  std::snprintf(buf, sizeof buf, "  %-12s %-8s %-12s %-11s %-12s %s\n", "mode", "beta", "return",
                "normalized", "pred_mae", "seeds");
  out += buf;
  for (const auto& k : keys) {
    const auto& idx = rows[k];
    const double ret = mean(idx, "tail_return");
    const double ref = zero_return.count(k.first) ? zero_return[k.first] : any_zero;
    std::string norm = "-";
    if (std::isfinite(ref) && ref != 0.0) norm = fmt("%.4f", ret / ref);
    std::snprintf(buf, sizeof buf, "  %-12s %-8s %-12.6g %-11s %-12.6g %zu\n", k.first.c_str(),
                  beta_label(k.second).c_str(), ret, norm.c_str(), mean(idx, "tail_pred_mae"),
                  idx.size());
    out += buf;
  }
  return out;
}

inline std::string checks_section(const CsvTable& t, const std::string& title) {
  std::vector<std::string> names;
  std::map<std::string, std::pair<std::size_t, std::size_t>> counts;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& name = t.text(i, "check");
    if (!counts.count(name)) names.push_back(name);
    counts[name].first += static_cast<std::size_t>(t.number(i, "passed"));
    counts[name].second += static_cast<std::size_t>(t.number(i, "total"));
  }
  std::string out = title + " (passed / total)\n";
  char buf[256];
  for (const auto& n : names) {
    const auto [p, total] = counts[n];
    std::snprintf(buf, sizeof buf, "  %-36s %8zu / %-8zu %s\n", n.c_str(), p, total,
                  p == total && total > 0 ? "PASS" : "FAIL");
    out += buf;
  }
  return out;
}

inline std::string ope_section(const CsvTable& t) {
  std::vector<std::size_t> order(t.rows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
    return t.number(a, "mean_mae") < t.number(b, "mean_mae");
  });
  std::string out = "Value-estimate MAE by estimator (ascending)\n";
  char buf[256];
  std::snprintf(buf, sizeof buf, "  %-12s %-14s %-14s %s\n", "estimator", "mean_mae", "se",
                "seeds");
  out += buf;
  for (auto i : order) {
    std::snprintf(buf, sizeof buf, "  %-12s %-14.6g %-14.6g %s\n", t.text(i, "estimator").c_str(),
                  t.number(i, "mean_mae"), t.number(i, "se"), t.text(i, "n_seeds").c_str());
    out += buf;
  }
  return out;
}

inline std::string sweep_section(const std::vector<CsvTable>& sweeps) {
  std::string out = "Beta sweep (means over seeds)\n";
  char buf[256];
  std::snprintf(buf, sizeof buf, "  %-8s %-14s %-14s %s\n", "beta", "mean_zeta_sq", "mean_J",
                "mean_sq_J_err");
  out += buf;
  const auto& first = sweeps.front();
  for (std::size_t i = 0; i < first.rows.size(); ++i) {
    double z = 0.0, j = 0.0, e = 0.0;
    for (const auto& s : sweeps) {
      z += s.number(i, "mean_zeta_sq");
      j += s.number(i, "mean_J");
      e += s.number(i, "mean_sq_J_err");
    }
    const double n = static_cast<double>(sweeps.size());
    std::snprintf(buf, sizeof buf, "  %-8s %-14.6g %-14.6g %.6g\n",
                  first.text(i, "beta").c_str(), z / n, j / n, e / n);
    out += buf;
  }
  return out;
}

inline std::string pretrain_section(const CsvTable& t) {
  std::string out = "Predictor pretraining\n";
  char buf[256];
  std::snprintf(buf, sizeof buf, "  %-8s %-10s %-14s %s\n", "seed", "records", "initial_mse",
                "final_mse");
  out += buf;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    std::snprintf(buf, sizeof buf, "  %-8s %-10s %-14.6g %.6g\n", t.text(i, "seed").c_str(),
                  t.text(i, "records").c_str(), t.number(i, "initial_mse"),
                  t.number(i, "final_mse"));
    out += buf;
  }
  return out;
}

}  // namespace detail

// Verifies every checksum, then renders the tables found in the directory.
inline std::string summarize(const std::filesystem::path& dir) {
  const auto manifest_path = dir / kManifestName;
  if (!std::filesystem::exists(manifest_path)) {
    throw std::runtime_error("no " + std::string(kManifestName) + " in " + dir.string() +
                             "; not an evarl output directory");
  }
  Manifest m;
  try {
    m = manifest_from_json(nlohmann::json::parse(read_text(manifest_path)));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed manifest: " + std::string(e.what()));
  }
  std::map<std::string, std::string> files;
  for (const auto& a : m.artifacts) {
    const auto path = dir / a.path;
    if (!std::filesystem::exists(path)) throw std::runtime_error("missing artifact " + a.path);
    auto text = read_text(path);
    if (text.size() != a.bytes || sha256_hex(text) != a.sha256) {
      throw std::runtime_error("checksum mismatch for " + a.path);
    }
    files[a.path] = std::move(text);
  }

  std::string out = "experiment: " + m.kind + " (" + m.status + ")\n";
  if (!m.error.empty()) out += "error: " + m.error + "\n";
  out += "seeds:";
  for (auto s : m.seeds) out += " " + std::to_string(s);
  out += " (offset " + std::to_string(m.seed_offset) + ")\n";
  out += "artifacts: " + std::to_string(m.artifacts.size()) + " verified\n";

  auto section = [&](const std::string& body) { out += "\n" + body; };
  if (files.count("runs.csv")) section(detail::runs_section(parse_csv(files["runs.csv"])));
  if (files.count("pretrain.csv")) {
    section(detail::pretrain_section(parse_csv(files["pretrain.csv"])));
  }
  if (files.count("ope_summary.csv")) {
    section(detail::ope_section(parse_csv(files["ope_summary.csv"])));
  }
  std::vector<CsvTable> sweeps;
  for (const auto& [name, text] : files) {
    if (name.rfind("sweep_s", 0) == 0 && name.ends_with(".csv")) sweeps.push_back(parse_csv(text));
  }
  if (!sweeps.empty()) section(detail::sweep_section(sweeps));
  if (files.count("theory_checks.csv")) {
    section(detail::checks_section(parse_csv(files["theory_checks.csv"]), "Theory checks"));
  }
  if (files.count("gradcheck.csv")) {
    section(detail::checks_section(parse_csv(files["gradcheck.csv"]), "Gradient checks"));
  }
  return out;
}

}  // namespace evarl
