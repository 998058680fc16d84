#pragma once

// Behavior-conditioned state-value predictors. A predictor maps a query
// state plus an assessment dataset (k start states and the returns a policy
// obtained from them) to an estimate of the policy's deployment value.

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "evarl/error.hpp"
#include "evarl/mdp.hpp"
#include "evarl/random.hpp"
#include "evarl/tensor.hpp"

namespace evarl {

struct AssessmentEntry {
  std::vector<double> state;  // embedding of the assessment start state
  double ret = 0.0;

  bool operator==(const AssessmentEntry&) const = default;
};

// Ordered as the assessment spec's start states; position matters to
// predictors with positional embeddings.
struct AssessmentDataset {
  std::vector<AssessmentEntry> entries;

  std::size_t k() const { return entries.size(); }
  std::vector<double> returns() const {
    std::vector<double> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.ret);
    return out;
  }

  bool operator==(const AssessmentDataset&) const = default;
};

inline std::vector<double> embedding_of(const TabularMdp& mdp, StateIndex s) {
  const auto e = mdp.embedding(s);
  return {e.begin(), e.end()};
}

// Builds the dataset from one rollout per assessment start state, in order.
inline AssessmentDataset make_assessment_dataset(
    const AssessmentEnvironment& env, std::span<const Trajectory> rollouts) {
  require(rollouts.size() == env.spec.k(),
          "make_assessment_dataset: expected " + std::to_string(env.spec.k()) +
              " rollouts, got " + std::to_string(rollouts.size()));
  AssessmentDataset data;
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    require(rollouts[i].start() == env.spec.start_states[i],
            "make_assessment_dataset: rollout order does not match spec");
    data.entries.push_back({embedding_of(*env.mdp, env.spec.start_states[i]),
                            discounted_return(rollouts[i], env.spec.gamma)});
  }
  return data;
}

// Dataset holding the exact expected assessment returns of `policy`. Equals
// the sampled dataset whenever dynamics and policy are deterministic.
inline AssessmentDataset exact_assessment_dataset(
    const AssessmentEnvironment& env, const PolicyTable& policy) {
  const auto table =
      exact_value_table(*env.mdp, policy, env.spec.horizon, env.spec.gamma);
  AssessmentDataset data;
  for (StateIndex s : env.spec.start_states) {
    data.entries.push_back({embedding_of(*env.mdp, s), table.v(0, s)});
  }
  return data;
}

inline std::vector<Trajectory> collect_assessment_rollouts(
    const AssessmentEnvironment& env, const PolicyTable& policy, Rng& rng) {
  std::vector<Trajectory> out;
  out.reserve(env.spec.k());
  for (StateIndex s : env.spec.start_states) {
    out.push_back(rollout(*env.mdp, policy, s, env.spec.horizon, rng));
  }
  return out;
}

struct PredictorQuery {
  std::span<const double> state;
  const AssessmentDataset* data = nullptr;
};

struct PredictionWithSensitivity {
  double value = 0.0;
  std::vector<double> d_returns;  // dV/dg(h^i), one per assessment entry
};

class ValuePredictor {
 public:
  virtual ~ValuePredictor() = default;

  virtual std::vector<double> predict_batch(
      std::span<const PredictorQuery> queries) const = 0;
  virtual std::vector<PredictionWithSensitivity> predict_with_sensitivity(
      std::span<const PredictorQuery> queries) const = 0;

  double predict(std::span<const double> state,
                 const AssessmentDataset& data) const {
    const PredictorQuery q{state, &data};
    return predict_batch({&q, 1}).front();
  }

  // Predictions for every state of `mdp` under one dataset.
  std::vector<double> predict_states(const TabularMdp& mdp,
                                     const AssessmentDataset& data) const {
    std::vector<PredictorQuery> queries;
    queries.reserve(mdp.n_states());
    for (StateIndex s = 0; s < mdp.n_states(); ++s) {
      queries.push_back({mdp.embedding(s), &data});
    }
    return predict_batch(queries);
  }
};

// ---------------------------------------------------------------------------
// Similarity-weighted linear predictor
// ---------------------------------------------------------------------------

using Similarity =
    std::function<double(std::span<const double>, std::span<const double>)>;

// exp(-|a - b|^2 / (2 sigma^2)); strictly positive.
inline Similarity rbf_similarity(double sigma = 1.0) {
  require(sigma > 0.0, "rbf_similarity: sigma must be positive");
  return [sigma](std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), "rbf_similarity: embedding size mismatch");
    double d2 = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      d2 += (a[i] - b[i]) * (a[i] - b[i]);
    }
    return std::exp(-d2 / (2.0 * sigma * sigma));
  };
}

// Explicit n x n similarity over index-embedded states (embedding = {s}).
inline Similarity matrix_similarity(std::size_t n, std::vector<double> matrix) {
  require(matrix.size() == n * n, "matrix_similarity: expected n*n entries");
  return [n, matrix = std::move(matrix)](std::span<const double> a,
                                         std::span<const double> b) {
    require(a.size() == 1 && b.size() == 1,
            "matrix_similarity: expects index embeddings");
    const auto i = static_cast<std::size_t>(std::llround(a[0]));
    const auto j = static_cast<std::size_t>(std::llround(b[0]));
    require(i < n && j < n, "matrix_similarity: state index out of range");
    return matrix[i * n + j];
  };
}

class LinearPredictor : public ValuePredictor {
 public:
  explicit LinearPredictor(Similarity similarity)
      : similarity_(std::move(similarity)) {}

  double similarity(std::span<const double> a,
                    std::span<const double> b) const {
    return similarity_(a, b);
  }

  // Normalized weights f(s, s^i) / sum_j f(s, s^j).
  std::vector<double> weights(std::span<const double> query,
                              const AssessmentDataset& data) const {
    require(data.k() >= 1, "LinearPredictor: empty assessment dataset");
    std::vector<double> w(data.k());
    double total = 0.0;
    for (std::size_t i = 0; i < data.k(); ++i) {
      w[i] = similarity_(query, data.entries[i].state);
      if (w[i] < 0.0) {
        throw DegenerateInput("LinearPredictor: negative similarity");
      }
      total += w[i];
    }
    if (!(total > 0.0)) {
      throw DegenerateInput("LinearPredictor: similarity mass is not positive");
    }
    for (double& x : w) x /= total;
    return w;
  }

  std::vector<double> predict_batch(
      std::span<const PredictorQuery> queries) const override {
    std::vector<double> out;
    out.reserve(queries.size());
    for (const auto& q : queries) {
      const auto w = weights(q.state, *q.data);
      double v = 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) v += w[i] * q.data->entries[i].ret;
      out.push_back(v);
    }
    return out;
  }

  std::vector<PredictionWithSensitivity> predict_with_sensitivity(
      std::span<const PredictorQuery> queries) const override {
    std::vector<PredictionWithSensitivity> out;
    out.reserve(queries.size());
    for (const auto& q : queries) {
      auto w = weights(q.state, *q.data);
      double v = 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) v += w[i] * q.data->entries[i].ret;
      out.push_back({v, std::move(w)});
    }
    return out;
  }

 private:
  Similarity similarity_;
};

// Perfect predictor for tests and as an oracle: returns the supplied values.
class TablePredictor : public ValuePredictor {
 public:
  // `values` indexed by state; queries must be index-embedded or carry the
  // embedding of a state in `mdp`.
  TablePredictor(const TabularMdp& mdp, std::vector<double> values)
      : mdp_(mdp), values_(std::move(values)) {
    require(values_.size() == mdp.n_states(), "TablePredictor: size mismatch");
  }

  std::vector<double> predict_batch(
      std::span<const PredictorQuery> queries) const override {
    std::vector<double> out;
    for (const auto& q : queries) out.push_back(values_[lookup(q.state)]);
    return out;
  }

  std::vector<PredictionWithSensitivity> predict_with_sensitivity(
      std::span<const PredictorQuery> queries) const override {
    std::vector<PredictionWithSensitivity> out;
    for (const auto& q : queries) {
      out.push_back({values_[lookup(q.state)],
                     std::vector<double>(q.data->k(), 0.0)});
    }
    return out;
  }

 private:
  StateIndex lookup(std::span<const double> state) const {
    for (StateIndex s = 0; s < mdp_.n_states(); ++s) {
      const auto e = mdp_.embedding(s);
      if (std::equal(e.begin(), e.end(), state.begin(), state.end())) return s;
    }
    throw InvalidInput("TablePredictor: unknown state embedding");
  }

  TabularMdp mdp_;
  std::vector<double> values_;
};

// ---------------------------------------------------------------------------
// Transformer predictor
// ---------------------------------------------------------------------------

struct TransformerConfig {
  std::size_t obs_dim = 2;
  std::size_t k = 5;
  std::size_t hidden = 16;
  std::size_t heads = 4;
  std::size_t layers = 2;
};

inline nlohmann::json to_json(const TransformerConfig& c) {
  return {{"obs_dim", c.obs_dim}, {"k", c.k},           {"hidden", c.hidden},
          {"heads", c.heads},     {"layers", c.layers}};
}

inline TransformerConfig transformer_config_from_json(const nlohmann::json& j) {
  TransformerConfig c;
  c.obs_dim = j.value("obs_dim", c.obs_dim);
  c.k = j.value("k", c.k);
  c.hidden = j.value("hidden", c.hidden);
  c.heads = j.value("heads", c.heads);
  c.layers = j.value("layers", c.layers);
  return c;
}

// Encoder over the 2k+1 token sequence
//   [state_1 .. state_k, return_1 .. return_k, query]
// State tokens carry positions 0..k-1; return tokens and the query share
// position k. Pre-norm blocks (self-attention, then a relu feed-forward),
// residual adds, and a scalar head read from the query token.
class TransformerPredictor : public ValuePredictor {
 public:
  static constexpr std::size_t kHeadParams = 7;
  static constexpr std::size_t kBlockParams = 16;

  TransformerPredictor(const TransformerConfig& config, Rng& rng)
      : config_(config) {
    validate_config();
    const std::size_t h = config_.hidden;
    auto dense = [&](const std::string& name, std::size_t in, std::size_t out) {
      params_.add(name + ".w",
                  Tensor::randn({in, out}, rng,
                                1.0 / std::sqrt(static_cast<double>(in))));
      params_.add(name + ".b", Tensor::zeros({out}));
    };
    dense("state_proj", config_.obs_dim, h);
    dense("return_proj", 1, h);
    dense("query_proj", config_.obs_dim, h);
    params_.add("pos_embed",
                Tensor::randn({config_.k + 1, h}, rng,
                              1.0 / std::sqrt(static_cast<double>(h))));
    for (std::size_t l = 0; l < config_.layers; ++l) {
      const std::string p = "block" + std::to_string(l) + ".";
      params_.add(p + "ln1.scale", Tensor::filled({h}, 1.0));
      params_.add(p + "ln1.bias", Tensor::zeros({h}));
      dense(p + "attn.query", h, h);
      dense(p + "attn.key", h, h);
      dense(p + "attn.value", h, h);
      dense(p + "attn.out", h, h);
      params_.add(p + "ln2.scale", Tensor::filled({h}, 1.0));
      params_.add(p + "ln2.bias", Tensor::zeros({h}));
      dense(p + "ff1", h, h);
      dense(p + "ff2", h, h);
    }
    dense("head", h, 1);
  }

  TransformerPredictor(const TransformerConfig& config, ParameterSet params)
      : config_(config), params_(std::move(params)) {
    validate_config();
    Rng rng(0);
    const TransformerPredictor reference(config_, rng);
    require(params_.same_layout(reference.params_),
            "TransformerPredictor: parameter layout does not match config");
  }

  const TransformerConfig& config() const { return config_; }
  const ParameterSet& parameters() const { return params_; }
  ParameterSet& mutable_parameters() { return params_; }

  // Packs queries into [B*k, obs] states, [B*k, 1] returns, [B, obs] queries.
  struct PackedBatch {
    Tensor assess_states;
    Tensor returns;
    Tensor queries;
    std::size_t batch = 0;
  };

  PackedBatch pack(std::span<const PredictorQuery> queries) const {
    const std::size_t b = queries.size();
    const std::size_t k = config_.k;
    const std::size_t d = config_.obs_dim;
    require(b >= 1, "TransformerPredictor: empty batch");
    PackedBatch out{Tensor::zeros({b * k, d}), Tensor::zeros({b * k, 1}),
                    Tensor::zeros({b, d}), b};
    for (std::size_t i = 0; i < b; ++i) {
      const auto& q = queries[i];
      require(q.data != nullptr && q.data->k() == k,
              "TransformerPredictor: assessment dataset has " +
                  std::to_string(q.data ? q.data->k() : 0) +
                  " entries, expected k = " + std::to_string(k));
      require(q.state.size() == d,
              "TransformerPredictor: query embedding size mismatch");
      std::copy(q.state.begin(), q.state.end(),
                out.queries.data().begin() + static_cast<std::ptrdiff_t>(i * d));
      for (std::size_t j = 0; j < k; ++j) {
        const auto& e = q.data->entries[j];
        require(e.state.size() == d,
                "TransformerPredictor: assessment embedding size mismatch");
        std::copy(e.state.begin(), e.state.end(),
                  out.assess_states.data().begin() +
                      static_cast<std::ptrdiff_t>((i * k + j) * d));
        out.returns[i * k + j] = e.ret;
      }
    }
    return out;
  }

  // Forward pass for a packed batch; returns a [B] node.
  Var forward(Graph& g, const std::vector<Var>& p, const Tensor& assess_states,
              Var returns, const Tensor& queries) const {
    using namespace ad;
    const std::size_t b = queries.dim(0);
    const std::size_t k = config_.k;
    const std::size_t seq = 2 * k + 1;
    auto dense = [](Var x, Var w, Var bias) { return add(matmul(x, w), bias); };

    Var states = dense(g.constant(assess_states), p[0], p[1]);
    Var rets = dense(returns, p[2], p[3]);
    Var query = dense(g.constant(queries), p[4], p[5]);
    const Var pos = p[6];

    std::vector<std::size_t> state_pos(b * k), shared_pos(b * k, k),
        query_pos(b, k);
    for (std::size_t i = 0; i < b * k; ++i) state_pos[i] = i % k;
    states = add(states, embed_lookup(pos, std::move(state_pos)));
    rets = add(rets, embed_lookup(pos, std::move(shared_pos)));
    query = add(query, embed_lookup(pos, std::move(query_pos)));

    std::vector<std::size_t> order;
    order.reserve(b * seq);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < k; ++j) order.push_back(i * k + j);
      for (std::size_t j = 0; j < k; ++j) order.push_back(b * k + i * k + j);
      order.push_back(2 * b * k + i);
    }
    Var x = gather_rows(concat({states, rets, query}, 0), std::move(order));

    for (std::size_t l = 0; l < config_.layers; ++l) {
      const std::size_t o = kHeadParams + l * kBlockParams;
      Var y = add(multiply(layer_norm(x, 1), p[o + 0]), p[o + 1]);
      const Var qh = dense(y, p[o + 2], p[o + 3]);
      const Var kh = dense(y, p[o + 4], p[o + 5]);
      const Var vh = dense(y, p[o + 6], p[o + 7]);
      y = scaled_dot_product_attention(qh, kh, vh, config_.heads, seq);
      y = dense(y, p[o + 8], p[o + 9]);
      x = add(x, y);
      y = add(multiply(layer_norm(x, 1), p[o + 10]), p[o + 11]);
      y = relu(dense(y, p[o + 12], p[o + 13]));
      y = dense(y, p[o + 14], p[o + 15]);
      x = add(x, y);
    }

    std::vector<std::size_t> last(b);
    for (std::size_t i = 0; i < b; ++i) last[i] = i * seq + seq - 1;
    const std::size_t head = kHeadParams + config_.layers * kBlockParams;
    Var out = dense(gather_rows(x, std::move(last)), p[head], p[head + 1]);
    return reshape(out, {b});
  }

  std::vector<double> predict_batch(
      std::span<const PredictorQuery> queries) const override {
    const PackedBatch batch = pack(queries);
    Graph g;
    const auto p = constants(g);
    const Var out = forward(g, p, batch.assess_states,
                            g.constant(batch.returns), batch.queries);
    return out.value().data();
  }

  std::vector<PredictionWithSensitivity> predict_with_sensitivity(
      std::span<const PredictorQuery> queries) const override {
    const PackedBatch batch = pack(queries);
    Graph g;
    const auto p = constants(g);
    const Var returns = g.variable(batch.returns);
    const Var out = forward(g, p, batch.assess_states, returns, batch.queries);
    // Sequences are independent, so d(sum)/d(return) isolates each sample.
    g.backward(ad::sum(out));
    const Tensor d = g.grad(returns);
    std::vector<PredictionWithSensitivity> result(batch.batch);
    const std::size_t k = config_.k;
    for (std::size_t i = 0; i < batch.batch; ++i) {
      result[i].value = out.value()[i];
      result[i].d_returns.assign(
          d.data().begin() + static_cast<std::ptrdiff_t>(i * k),
          d.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
    }
    return result;
  }

  // Mean squared error over a batch with targets; params bound as variables.
  Var batch_loss(Graph& g, const std::vector<Var>& p, const PackedBatch& batch,
                 const Tensor& targets) const {
    const Var pred = forward(g, p, batch.assess_states,
                             g.constant(batch.returns), batch.queries);
    return ad::mse_loss(pred, g.constant(targets));
  }

 private:
  void validate_config() const {
    require(config_.obs_dim >= 1 && config_.k >= 1 && config_.hidden >= 1 &&
                config_.heads >= 1,
            "TransformerConfig: sizes must be positive");
    require(config_.hidden % config_.heads == 0,
            "TransformerConfig: hidden must be divisible by heads");
  }

  std::vector<Var> constants(Graph& g) const {
    std::vector<Var> out;
    out.reserve(params_.size());
    for (const auto& e : params_) out.push_back(g.constant(e.value));
    return out;
  }

  TransformerConfig config_;
  ParameterSet params_;
};

// ---------------------------------------------------------------------------
// Replay buffer with recency eviction
// ---------------------------------------------------------------------------

struct BufferRecord {
  AssessmentDataset assessment;
  std::vector<double> deployment_state;
  double deployment_return = 0.0;
  std::size_t policy_index = 0;

  bool operator==(const BufferRecord&) const = default;
};

inline nlohmann::json to_json(const BufferRecord& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.assessment.entries) {
    entries.push_back({{"state", e.state}, {"return", e.ret}});
  }
  return {{"assessment", entries},
          {"deployment_state", r.deployment_state},
          {"deployment_return", r.deployment_return},
          {"policy_index", r.policy_index}};
}

inline BufferRecord buffer_record_from_json(const nlohmann::json& j) {
  BufferRecord r;
  for (const auto& e : j.at("assessment")) {
    r.assessment.entries.push_back(
        {e.at("state").get<std::vector<double>>(), e.at("return").get<double>()});
  }
  r.deployment_state = j.at("deployment_state").get<std::vector<double>>();
  r.deployment_return = j.at("deployment_return").get<double>();
  r.policy_index = j.at("policy_index").get<std::size_t>();
  return r;
}

// Keeps only records produced by the `recent_policies` most recent policy
// indices.
class PredictorBuffer {
 public:
  explicit PredictorBuffer(std::size_t recent_policies = 16)
      : recent_policies_(recent_policies) {
    require(recent_policies_ >= 1,
            "PredictorBuffer: must retain at least one policy");
  }

  void insert(BufferRecord record) {
    if (!records_.empty() || has_latest_) {
      latest_ = std::max(latest_, record.policy_index);
    } else {
      latest_ = record.policy_index;
    }
    has_latest_ = true;
    records_.push_back(std::move(record));
    evict();
  }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  std::size_t recent_policies() const { return recent_policies_; }
  std::size_t latest_policy() const { return latest_; }
  const BufferRecord& operator[](std::size_t i) const { return records_[i]; }
  auto begin() const { return records_.begin(); }
  auto end() const { return records_.end(); }

  bool has_sufficient_data(std::size_t threshold) const {
    return records_.size() >= threshold && !records_.empty();
  }

  std::vector<const BufferRecord*> sample(std::size_t n, Rng& rng) const {
    require(!records_.empty(), "PredictorBuffer::sample: buffer is empty");
    std::vector<const BufferRecord*> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      out.push_back(&records_[rng.index(records_.size())]);
    }
    return out;
  }

  std::string to_jsonl() const {
    std::string out;
    for (const auto& r : records_) {
      out += to_json(r).dump();
      out += '\n';
    }
    return out;
  }

  static PredictorBuffer from_jsonl(const std::string& text,
                                    std::size_t recent_policies) {
    PredictorBuffer buf(recent_policies);
    std::size_t start = 0;
    while (start < text.size()) {
      std::size_t end = text.find('\n', start);
      if (end == std::string::npos) end = text.size();
      if (end > start) {
        try {
          buf.insert(buffer_record_from_json(
              nlohmann::json::parse(text.substr(start, end - start))));
        } catch (const nlohmann::json::exception& e) {
          throw InvalidInput(std::string("PredictorBuffer::from_jsonl: ") +
                             e.what());
        }
      }
      start = end + 1;
    }
    return buf;
  }

 private:
  void evict() {
    if (latest_ + 1 < recent_policies_) return;
    const std::size_t oldest = latest_ + 1 - recent_policies_;
    std::erase_if(records_, [oldest](const BufferRecord& r) {
      return r.policy_index < oldest;
    });
  }

  std::size_t recent_policies_;
  std::size_t latest_ = 0;
  bool has_latest_ = false;
  std::deque<BufferRecord> records_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct OptimizerConfig {
  double learning_rate = 1e-3;
  bool adam = false;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Gradient-descent step rule; holds Adam moments between calls.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {}) : config_(config) {}

  const OptimizerConfig& config() const { return config_; }

  void step(ParameterSet& params, const ParameterSet& grad) {
    require(params.same_layout(grad), "Optimizer::step: layout mismatch");
    if (!config_.adam) {
      params.axpy(-config_.learning_rate, grad);
      return;
    }
    if (!first_.same_layout(params)) {
      first_ = params.zeros_like();
      second_ = params.zeros_like();
      steps_ = 0;
    }
    ++steps_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& x = params[p].value.data();
      auto& m = first_[p].value.data();
      auto& v = second_[p].value.data();
      const auto& gv = grad[p].value.data();
      for (std::size_t i = 0; i < x.size(); ++i) {
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gv[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gv[i] * gv[i];
        x[i] -= config_.learning_rate * (m[i] / c1) /
                (std::sqrt(v[i] / c2) + config_.epsilon);
      }
    }
  }

 private:
  OptimizerConfig config_;
  ParameterSet first_;
  ParameterSet second_;
  std::size_t steps_ = 0;
};

struct PredictorTrainOptions {
  std::size_t epochs = 5;
  std::size_t batch_size = 64;
};

inline std::vector<PredictorQuery> queries_for(
    std::span<const BufferRecord* const> records) {
  std::vector<PredictorQuery> out;
  out.reserve(records.size());
  for (const auto* r : records) out.push_back({r->deployment_state, &r->assessment});
  return out;
}

// Loss and gradient of the batch MSE at the predictor's current parameters.
inline std::pair<double, ParameterSet> predictor_batch_gradient(
    const TransformerPredictor& pred,
    std::span<const BufferRecord* const> records) {
  const auto queries = queries_for(records);
  const auto batch = pred.pack(queries);
  Tensor targets = Tensor::zeros({records.size()});
  for (std::size_t i = 0; i < records.size(); ++i) {
    targets[i] = records[i]->deployment_return;
  }
  Graph g;
  const auto vars = bind(g, pred.parameters());
  const Var loss = pred.batch_loss(g, vars, batch, targets);
  g.backward(loss);
  return {loss.value().item(), gradients(g, pred.parameters(), vars)};
}

// Each epoch is one shuffled pass over the buffer in minibatches. Returns
// the loss of every minibatch, evaluated before its update.
inline std::vector<double> train_predictor(TransformerPredictor& pred,
                                           const PredictorBuffer& buffer,
                                           const PredictorTrainOptions& options,
                                           Rng& rng, Optimizer& optimizer) {
  require(!buffer.empty(), "train_predictor: buffer is empty");
  require(options.epochs >= 1 && options.batch_size >= 1,
          "train_predictor: epochs and batch size must be positive");
  std::vector<const BufferRecord*> order;
  order.reserve(buffer.size());
  for (const auto& r : buffer) order.push_back(&r);
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    rng.shuffle(std::span<const BufferRecord*>(order));
    for (std::size_t start = 0; start < order.size();
         start += options.batch_size) {
      const std::size_t n = std::min(options.batch_size, order.size() - start);
      const std::span<const BufferRecord* const> batch(order.data() + start, n);
      auto [loss, grad] = predictor_batch_gradient(pred, batch);
      history.push_back(loss);
      optimizer.step(pred.mutable_parameters(), grad);
    }
  }
  return history;
}

inline std::vector<double> train_predictor(TransformerPredictor& pred,
                                           const PredictorBuffer& buffer,
                                           const PredictorTrainOptions& options,
                                           double learning_rate, Rng& rng) {
  Optimizer sgd(OptimizerConfig{learning_rate, false});
  return train_predictor(pred, buffer, options, rng, sgd);
}

// Mean squared error of the predictor over every buffer record.
inline double buffer_mse(const ValuePredictor& pred,
                         const PredictorBuffer& buffer) {
  require(!buffer.empty(), "buffer_mse: buffer is empty");
  std::vector<PredictorQuery> queries;
  queries.reserve(buffer.size());
  for (const auto& r : buffer) queries.push_back({r.deployment_state, &r.assessment});
  const auto pred_values = pred.predict_batch(queries);
  double total = 0.0;
  std::size_t i = 0;
  for (const auto& r : buffer) {
    const double d = pred_values[i++] - r.deployment_return;
    total += d * d;
  }
  return total / static_cast<double>(buffer.size());
}

// ---------------------------------------------------------------------------
// Evaluation against exact values
// ---------------------------------------------------------------------------

struct ValueErrorReport {
  double zeta_sq = 0.0;  // sum_s w(s) (V(s) - Vhat(s))^2
  double mae = 0.0;      // sum_s w(s) |V(s) - Vhat(s)|
  std::vector<double> true_values;
  std::vector<double> predictions;
  std::vector<double> abs_errors;
};

inline ValueErrorReport value_error_report(std::span<const double> true_values,
                                           std::span<const double> predictions,
                                           std::span<const double> weighting) {
  require(true_values.size() == predictions.size() &&
              predictions.size() == weighting.size(),
          "value_error_report: size mismatch");
  ValueErrorReport r;
  r.true_values.assign(true_values.begin(), true_values.end());
  r.predictions.assign(predictions.begin(), predictions.end());
  for (std::size_t s = 0; s < true_values.size(); ++s) {
    const double err = true_values[s] - predictions[s];
    r.abs_errors.push_back(std::abs(err));
    r.zeta_sq += weighting[s] * err * err;
    r.mae += weighting[s] * std::abs(err);
  }
  return r;
}

inline ValueErrorReport predictor_value_mse(const ValuePredictor& pred,
                                            const TabularMdp& mdp,
                                            const PolicyTable& policy,
                                            const AssessmentDataset& data,
                                            std::span<const double> weighting) {
  const auto truth = exact_values(mdp, policy);
  const auto predictions = pred.predict_states(mdp, data);
  return value_error_report(truth, predictions, weighting);
}

inline ValueErrorReport predictor_value_mse(const ValuePredictor& pred,
                                            const TabularMdp& mdp,
                                            const PolicyTable& policy,
                                            const AssessmentDataset& data) {
  return predictor_value_mse(pred, mdp, policy, data, mdp.start_dist());
}

// J-hat = sum_s w(s) Vhat(s).
inline double estimate_performance(const ValuePredictor& pred,
                                   const TabularMdp& mdp,
                                   const AssessmentDataset& data,
                                   std::span<const double> weighting) {
  return weighted_mean(weighting, pred.predict_states(mdp, data));
}

// Sample-average version over start states drawn from mu_D.
inline double estimate_performance(const ValuePredictor& pred,
                                   const TabularMdp& mdp,
                                   const AssessmentDataset& data,
                                   std::span<const StateIndex> start_samples) {
  require(!start_samples.empty(), "estimate_performance: no samples");
  std::vector<PredictorQuery> queries;
  for (StateIndex s : start_samples) queries.push_back({mdp.embedding(s), &data});
  const auto v = pred.predict_batch(queries);
  double total = 0.0;
  for (double x : v) total += x;
  return total / static_cast<double>(v.size());
}

}  // namespace evarl
