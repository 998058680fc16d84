#pragma once

// Vectorized Bellman-relaxed evaluation-aware problems: the quadratic error
// form V^T Q V of the similarity-weighted linear predictor, closed-form hard
// (quadratically constrained) and soft (penalized) solutions, exact policy
// frontiers by enumeration, and the random 5-state beta sweep.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "evarl/error.hpp"
#include "evarl/mdp.hpp"
#include "evarl/parallel.hpp"
#include "evarl/random.hpp"

namespace evarl {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Problem data in canonical order: assessment states first (in the given
// order), then the remaining states ascending. `order[i]` is the original
// state index at canonical position i. Vectors passed in and returned by
// the functions below are indexed by original state.
struct QclpProblem {
  VectorXd mu;
  MatrixXd F;  // empty for problems built directly from Q
  MatrixXd Q;
  std::vector<std::size_t> order;
  std::size_t k = 0;
  std::optional<double> epsilon;
  std::optional<double> beta;

  std::size_t n() const { return static_cast<std::size_t>(mu.size()); }

  VectorXd to_canonical(const VectorXd& v) const {
    VectorXd out(v.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
      out(static_cast<Eigen::Index>(i)) = v(static_cast<Eigen::Index>(order[i]));
    }
    return out;
  }
  VectorXd from_canonical(const VectorXd& v) const {
    VectorXd out(v.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
      out(static_cast<Eigen::Index>(order[i])) = v(static_cast<Eigen::Index>(i));
    }
    return out;
  }
  // Q re-indexed by original state.
  MatrixXd state_q() const {
    MatrixXd out(Q.rows(), Q.cols());
    for (std::size_t i = 0; i < order.size(); ++i) {
      for (std::size_t j = 0; j < order.size(); ++j) {
        out(static_cast<Eigen::Index>(order[i]), static_cast<Eigen::Index>(order[j])) =
            Q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      }
    }
    return out;
  }
  // Row-normalized similarity D^-1 F, re-indexed by original state; rows are
  // the linear predictor's weights over assessment states.
  MatrixXd state_weights() const {
    require(F.size() > 0, "QclpProblem: no similarity matrix");
    const VectorXd rows = F.rowwise().sum();
    MatrixXd out = MatrixXd::Zero(F.rows(), F.cols());
    for (std::size_t i = 0; i < order.size(); ++i) {
      for (std::size_t j = 0; j < order.size(); ++j) {
        out(static_cast<Eigen::Index>(order[i]), static_cast<Eigen::Index>(order[j])) =
            F(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) /
            rows(static_cast<Eigen::Index>(i));
      }
    }
    return out;
  }
};

inline nlohmann::json to_json(const QclpProblem& p) {
  auto mat = [](const MatrixXd& m) {
    std::vector<double> v(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        v[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
      }
    }
    return v;
  };
  nlohmann::json j{{"n", p.n()},
                   {"k", p.k},
                   {"mu", std::vector<double>(p.mu.data(), p.mu.data() + p.mu.size())},
                   {"F", mat(p.F)},
                   {"Q", mat(p.Q)},
                   {"order", p.order}};
  if (p.epsilon) j["epsilon"] = *p.epsilon;
  if (p.beta) j["beta"] = *p.beta;
  return j;
}

using StateSimilarity = std::function<double(std::size_t, std::size_t)>;

inline StateSimilarity index_rbf_similarity(double sigma) {
  require(sigma > 0.0, "index_rbf_similarity: sigma must be positive");
  return [sigma](std::size_t i, std::size_t j) {
    const double d = static_cast<double>(i) - static_cast<double>(j);
    return std::exp(-d * d / (2.0 * sigma * sigma));
  };
}

inline StateSimilarity matrix_state_similarity(std::size_t n,
                                               std::vector<double> m) {
  require(m.size() == n * n, "matrix_state_similarity: expected n*n entries");
  return [n, m = std::move(m)](std::size_t i, std::size_t j) {
    return m[i * n + j];
  };
}

// F[i, j] = f(s_i, s^j) for the k assessment columns, 0 elsewhere;
// Q = (I - D^-1 F)^T diag(mu) (I - D^-1 F) with D = diag(F 1).
inline QclpProblem build_vectorized(std::size_t n_states,
                                    std::span<const std::size_t> assessment,
                                    const StateSimilarity& similarity,
                                    std::span<const double> mu) {
  require(n_states >= 1 && mu.size() == n_states,
          "build_vectorized: mu must have one entry per state");
  require(!assessment.empty(), "build_vectorized: no assessment states");
  QclpProblem p;
  p.k = assessment.size();
  std::vector<bool> used(n_states, false);
  for (std::size_t s : assessment) {
    require(s < n_states && !used[s],
            "build_vectorized: assessment states must be distinct and valid");
    used[s] = true;
    p.order.push_back(s);
  }
  for (std::size_t s = 0; s < n_states; ++s) {
    if (!used[s]) p.order.push_back(s);
  }
  const auto n = static_cast<Eigen::Index>(n_states);
  p.mu.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    p.mu(i) = mu[p.order[static_cast<std::size_t>(i)]];
  }
  p.F = MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(p.k); ++j) {
      p.F(i, j) = similarity(p.order[static_cast<std::size_t>(i)],
                             p.order[static_cast<std::size_t>(j)]);
    }
  }
  const VectorXd rows = p.F.rowwise().sum();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(rows(i) != 0.0) || !std::isfinite(rows(i))) {
      throw DegenerateInput("build_vectorized: similarity row " +
                            std::to_string(p.order[static_cast<std::size_t>(i)]) +
                            " sums to zero");
    }
  }
  const MatrixXd m =
      MatrixXd::Identity(n, n) - rows.cwiseInverse().asDiagonal() * p.F;
  p.Q = m.transpose() * p.mu.asDiagonal() * m;
  p.Q = 0.5 * (p.Q + p.Q.transpose());
  return p;
}

// Problem over an arbitrary symmetric PSD Q with identity ordering.
inline QclpProblem qclp_from_matrix(const MatrixXd& q, const VectorXd& mu) {
  require(q.rows() == q.cols() && q.rows() == mu.size(),
          "qclp_from_matrix: shape mismatch");
  QclpProblem p;
  p.mu = mu;
  p.Q = 0.5 * (q + q.transpose());
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    p.order.push_back(static_cast<std::size_t>(i));
  }
  return p;
}

// V^T Q V; equals sum_s mu(s) (V(s) - (D^-1 F V)(s))^2 for built problems.
inline double prediction_mse_vectorized(const QclpProblem& p,
                                        const VectorXd& v_states) {
  require(static_cast<std::size_t>(v_states.size()) == p.n(),
          "prediction_mse_vectorized: size mismatch");
  const VectorXd v = p.to_canonical(v_states);
  return v.dot(p.Q * v);
}

inline double min_eigenvalue(const MatrixXd& q) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(q, Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff();
}

// Eigen-split of a PSD matrix: pseudo-inverse plus an orthonormal basis of
// the numerical nullspace. Eigenvalues at or below cutoff * max are zero.
struct PsdSplit {
  MatrixXd pinv;
  MatrixXd null_basis;  // n x r
};

inline constexpr double kPinvCutoff = 1e-10;

inline PsdSplit psd_split(const MatrixXd& q, double cutoff = kPinvCutoff) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(q);
  const VectorXd& lambda = eig.eigenvalues();
  const MatrixXd& u = eig.eigenvectors();
  const double top = std::max(lambda.maxCoeff(), 0.0);
  const double threshold = cutoff * top;
  PsdSplit out;
  out.pinv = MatrixXd::Zero(q.rows(), q.cols());
  std::vector<Eigen::Index> null_cols;
  for (Eigen::Index i = 0; i < lambda.size(); ++i) {
    if (top > 0.0 && lambda(i) > threshold) {
      out.pinv += (1.0 / lambda(i)) * u.col(i) * u.col(i).transpose();
    } else {
      null_cols.push_back(i);
    }
  }
  out.null_basis.resize(q.rows(), static_cast<Eigen::Index>(null_cols.size()));
  for (std::size_t c = 0; c < null_cols.size(); ++c) {
    out.null_basis.col(static_cast<Eigen::Index>(c)) = u.col(null_cols[c]);
  }
  return out;
}

inline MatrixXd pseudo_inverse(const MatrixXd& q) { return psd_split(q).pinv; }

// Relative size of mu's component in null(Q).
inline constexpr double kRangeTolerance = 1e-9;

struct HardSolution {
  bool bounded = true;
  double objective = 0.0;      // mu^T V*; +inf when unbounded
  VectorXd v;                  // maximizer (original state order)
  VectorXd unbounded_direction;  // d with Q d = 0, mu^T d > 0 (original order)
  double constraint_residual = 0.0;  // |V*^T Q V* - eps^2|
};

// max mu^T V s.t. V^T Q V <= eps^2. Bounded iff mu lies in range(Q); then
// the optimum is eps sqrt(mu^T Q+ mu) at V* = eps Q+ mu / sqrt(mu^T Q+ mu).
inline HardSolution solve_hard_relaxed(const QclpProblem& p, double epsilon) {
  require(epsilon >= 0.0, "solve_hard_relaxed: epsilon must be nonnegative");
  const auto split = psd_split(p.Q);
  HardSolution out;
  const VectorXd null_part =
      split.null_basis * (split.null_basis.transpose() * p.mu);
  if (null_part.norm() > kRangeTolerance * std::max(1.0, p.mu.norm())) {
    out.bounded = false;
    out.objective = std::numeric_limits<double>::infinity();
    out.unbounded_direction = p.from_canonical(null_part / null_part.norm());
    out.v = VectorXd::Zero(p.mu.size());
    return out;
  }
  const VectorXd pm = split.pinv * p.mu;
  const double a = p.mu.dot(pm);
  if (epsilon == 0.0 || !(a > 0.0)) {
    out.v = VectorXd::Zero(p.mu.size());
    out.objective = 0.0;
    out.constraint_residual = epsilon * epsilon;
    return out;
  }
  const VectorXd v = (epsilon / std::sqrt(a)) * pm;
  out.objective = epsilon * std::sqrt(a);
  out.constraint_residual = std::abs(v.dot(p.Q * v) - epsilon * epsilon);
  out.v = p.from_canonical(v);
  return out;
}

struct SoftSolution {
  bool consistent = true;  // mu in range(Q)
  VectorXd v;              // particular solution Q+ mu / (2 beta), original order
  MatrixXd null_basis;     // columns span null(Q), original order
  double objective = 0.0;  // mu^T V - beta V^T Q V at v
  double residual = 0.0;   // |Q V - mu / (2 beta)|
};

// max mu^T V - beta V^T Q V: stationarity Q V = mu / (2 beta). Every
// V* + null(Q) vector is also a solution.
inline SoftSolution solve_soft_relaxed(const QclpProblem& p, double beta) {
  require(beta > 0.0, "solve_soft_relaxed: beta must be positive");
  const auto split = psd_split(p.Q);
  SoftSolution out;
  const VectorXd null_part =
      split.null_basis * (split.null_basis.transpose() * p.mu);
  out.consistent =
      null_part.norm() <= kRangeTolerance * std::max(1.0, p.mu.norm());
  const VectorXd v = split.pinv * p.mu / (2.0 * beta);
  out.residual = (p.Q * v - p.mu / (2.0 * beta)).norm();
  out.objective = p.mu.dot(v) - beta * v.dot(p.Q * v);
  out.v = p.from_canonical(v);
  out.null_basis.resize(split.null_basis.rows(), split.null_basis.cols());
  for (Eigen::Index c = 0; c < split.null_basis.cols(); ++c) {
    out.null_basis.col(c) = p.from_canonical(split.null_basis.col(c));
  }
  return out;
}

struct RoundtripReport {
  bool passed = false;
  double beta = 0.0;
  double epsilon = 0.0;
  double soft_value = 0.0;        // mu^T V*_soft
  double hard_value = 0.0;        // mu^T V*_hard at eps^2 = V*_soft^T Q V*_soft
  double recovered_beta = 0.0;    // mu^T V*_hard / (2 eps^2)
  double soft_objective = 0.0;    // soft objective at V*_soft
  double hard_soft_objective = 0.0;  // soft objective at V*_hard
  double value_gap = 0.0;
  double beta_gap = 0.0;
};

inline RoundtripReport verify_duality_roundtrip(const QclpProblem& p,
                                                 double beta,
                                                 double tolerance = 1e-8) {
  RoundtripReport r;
  r.beta = beta;
  const auto soft = solve_soft_relaxed(p, beta);
  const VectorXd vs = p.to_canonical(soft.v);
  const double eps2 = vs.dot(p.Q * vs);
  r.epsilon = std::sqrt(std::max(eps2, 0.0));
  r.soft_value = p.mu.dot(vs);
  r.soft_objective = soft.objective;
  const auto hard = solve_hard_relaxed(p, r.epsilon);
  if (!soft.consistent || !hard.bounded || !(eps2 > 0.0)) return r;
  const VectorXd vh = p.to_canonical(hard.v);
  r.hard_value = hard.objective;
  r.recovered_beta = p.mu.dot(vh) / (2.0 * eps2);
  r.hard_soft_objective = p.mu.dot(vh) - beta * vh.dot(p.Q * vh);
  r.value_gap = std::abs(r.hard_value - r.soft_value);
  r.beta_gap = std::abs(r.recovered_beta - beta);
  r.passed = r.value_gap <= tolerance && r.beta_gap <= tolerance &&
             r.hard_soft_objective >= r.soft_objective - tolerance;
  return r;
}

// Projected gradient ascent for the hard problem: V <- Proj(V + step mu),
// projecting onto {V^T Q V <= eps^2} by bisection on the multiplier of
// (I + lambda Q)^-1 y. Used as an independent check of the closed form.
struct ProjectedGradientResult {
  double objective = 0.0;
  VectorXd v;
  std::size_t iterations = 0;
};

inline ProjectedGradientResult projected_gradient_hard(const QclpProblem& p,
                                                       double epsilon,
                                                       std::size_t max_iters = 20000,
                                                       double step = 1.0,
                                                       double tol = 1e-14) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(p.Q);
  const MatrixXd& u = eig.eigenvectors();
  const VectorXd lambda = eig.eigenvalues().cwiseMax(0.0);
  const double eps2 = epsilon * epsilon;
  auto project = [&](const VectorXd& y) -> VectorXd {
    const VectorXd c = u.transpose() * y;
    auto constraint = [&](double mult) {
      double total = 0.0;
      for (Eigen::Index i = 0; i < c.size(); ++i) {
        const double x = c(i) / (1.0 + mult * lambda(i));
        total += lambda(i) * x * x;
      }
      return total;
    };
    if (constraint(0.0) <= eps2) return y;
    double lo = 0.0, hi = 1.0;
    while (constraint(hi) > eps2) hi *= 2.0;
    for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
      const double mid = 0.5 * (lo + hi);
      (constraint(mid) > eps2 ? lo : hi) = mid;
    }
    VectorXd x(c.size());
    for (Eigen::Index i = 0; i < c.size(); ++i) x(i) = c(i) / (1.0 + hi * lambda(i));
    return u * x;
  };
  ProjectedGradientResult out;
  VectorXd v = VectorXd::Zero(p.mu.size());
  for (out.iterations = 0; out.iterations < max_iters; ++out.iterations) {
    const VectorXd next = project(v + step * p.mu);
    const double change = (next - v).norm();
    v = next;
    if (change < tol) break;
  }
  out.v = p.from_canonical(v);
  out.objective = p.mu.dot(v);
  return out;
}

// Random symmetric PSD instance with mu in range(Q): eigenvalues drawn in
// [min_eig, 1], optionally with a nullspace orthogonal to mu.
inline QclpProblem random_bounded_problem(Rng& rng, std::size_t n,
                                          std::size_t null_dim,
                                          double min_eig = 0.1) {
  require(n >= 1 && null_dim < n, "random_bounded_problem: null_dim < n");
  const auto dim = static_cast<Eigen::Index>(n);
  VectorXd mu(dim);
  for (Eigen::Index i = 0; i < dim; ++i) mu(i) = -std::log(1.0 - rng.uniform());
  mu /= mu.sum();
  // Orthonormal basis whose first vector is mu / |mu|.
  MatrixXd basis(dim, dim);
  basis.col(0) = mu.normalized();
  for (Eigen::Index c = 1; c < dim; ++c) {
    for (Eigen::Index i = 0; i < dim; ++i) basis(i, c) = rng.normal();
  }
  Eigen::HouseholderQR<MatrixXd> qr(basis);
  const MatrixXd orth = qr.householderQ();
  // orth.col(0) is +/- mu direction; columns >= 1 are orthogonal to mu.
  MatrixXd q = MatrixXd::Zero(dim, dim);
  const auto keep = dim - static_cast<Eigen::Index>(null_dim);
  for (Eigen::Index c = 0; c < keep; ++c) {
    q += rng.uniform(min_eig, 1.0) * orth.col(c) * orth.col(c).transpose();
  }
  return qclp_from_matrix(q, mu);
}

// Random instance built from a random similarity over `n` states with `k`
// assessment states; Q always has the all-ones vector in its nullspace.
inline QclpProblem random_vectorized_problem(Rng& rng, std::size_t n,
                                             std::size_t k) {
  require(k >= 1 && k <= n, "random_vectorized_problem: need 1 <= k <= n");
  std::vector<double> sim(n * n);
  for (double& x : sim) x = rng.uniform(0.01, 1.0);
  std::vector<double> mu(n);
  double total = 0.0;
  for (double& x : mu) {
    x = -std::log(1.0 - rng.uniform());
    total += x;
  }
  for (double& x : mu) x /= total;
  std::vector<std::size_t> states(n);
  for (std::size_t i = 0; i < n; ++i) states[i] = i;
  rng.shuffle(std::span<std::size_t>(states));
  states.resize(k);
  return build_vectorized(n, states, matrix_state_similarity(n, sim), mu);
}

// ---------------------------------------------------------------------------
// Policy frontiers
// ---------------------------------------------------------------------------

struct FrontierPoint {
  double beta = 0.0;
  double J = 0.0;
  double zeta_sq = 0.0;
  double J_hat = 0.0;  // mu^T (D^-1 F V)
  double objective = 0.0;
  std::vector<ActionIndex> policy;  // empty in gradient mode
};

struct Frontier {
  std::vector<FrontierPoint> points;
  bool gradient_mode = false;
};

// (J, zeta^2, J-hat) of a value vector under a built problem.
inline void fill_point(const QclpProblem& p, std::span<const double> mu,
                       const std::vector<double>& values, FrontierPoint& pt) {
  const Eigen::Map<const VectorXd> v(values.data(),
                                     static_cast<Eigen::Index>(values.size()));
  pt.J = weighted_mean(mu, values);
  pt.zeta_sq = prediction_mse_vectorized(p, v);
  const VectorXd pred = p.state_weights() * v;
  pt.J_hat = 0.0;
  for (std::size_t s = 0; s < values.size(); ++s) {
    pt.J_hat += mu[s] * pred(static_cast<Eigen::Index>(s));
  }
}

struct SoftAscentOptions {
  std::size_t steps = 2000;
  double step_size = 0.1;
};

// Value and logit gradient of J - beta V^T Q V for a tabular softmax policy,
// by reverse sweep through backward induction.
struct SoftObjective {
  double objective = 0.0;
  std::vector<double> values;  // V_0
  std::vector<double> grad;    // d objective / d logits, [S, A]
};

inline SoftObjective soft_objective_gradient(const TabularMdp& mdp,
                                             std::span<const double> logits,
                                             const MatrixXd& q_states,
                                             double beta) {
  const std::size_t n = mdp.n_states();
  const std::size_t m = mdp.n_actions();
  const std::size_t T = mdp.horizon();
  const double gamma = mdp.gamma();
  std::vector<double> pi(n * m);
  for (std::size_t s = 0; s < n; ++s) {
    double top = logits[s * m];
    for (std::size_t a = 1; a < m; ++a) top = std::max(top, logits[s * m + a]);
    double z = 0.0;
    for (std::size_t a = 0; a < m; ++a) {
      pi[s * m + a] = std::exp(logits[s * m + a] - top);
      z += pi[s * m + a];
    }
    for (std::size_t a = 0; a < m; ++a) pi[s * m + a] /= z;
  }
  // Forward: V_t for t = T..0, keeping Q_t.
  std::vector<double> v((T + 1) * n, 0.0), q(T * n * m, 0.0);
  for (std::size_t t = T; t-- > 0;) {
    for (std::size_t s = 0; s < n; ++s) {
      double vs = 0.0;
      for (std::size_t a = 0; a < m; ++a) {
        const auto next = mdp.next_distribution(s, a);
        double future = 0.0;
        for (std::size_t s2 = 0; s2 < n; ++s2) {
          if (next[s2] != 0.0) future += next[s2] * v[(t + 1) * n + s2];
        }
        const double qsa = mdp.reward(s, a) + gamma * future;
        q[(t * n + s) * m + a] = qsa;
        vs += pi[s * m + a] * qsa;
      }
      v[t * n + s] = vs;
    }
  }
  SoftObjective out;
  out.values.assign(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n));
  const Eigen::Map<const VectorXd> v0(out.values.data(), static_cast<Eigen::Index>(n));
  const VectorXd qv = q_states * v0;
  out.objective = weighted_mean(mdp.start_dist(), out.values) - beta * v0.dot(qv);
  // Adjoint of V_0, then sweep forward in time.
  std::vector<double> lam(n), next_lam(n);
  for (std::size_t s = 0; s < n; ++s) {
    lam[s] = mdp.start_dist()[s] - 2.0 * beta * qv(static_cast<Eigen::Index>(s));
  }
  std::vector<double> dpi(n * m, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    std::fill(next_lam.begin(), next_lam.end(), 0.0);
    for (std::size_t s = 0; s < n; ++s) {
      if (lam[s] == 0.0) continue;
      for (std::size_t a = 0; a < m; ++a) {
        dpi[s * m + a] += lam[s] * q[(t * n + s) * m + a];
        const double w = gamma * lam[s] * pi[s * m + a];
        if (w == 0.0) continue;
        const auto next = mdp.next_distribution(s, a);
        for (std::size_t s2 = 0; s2 < n; ++s2) {
          if (next[s2] != 0.0) next_lam[s2] += w * next[s2];
        }
      }
    }
    std::swap(lam, next_lam);
  }
  out.grad.assign(n * m, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    double avg = 0.0;
    for (std::size_t a = 0; a < m; ++a) avg += pi[s * m + a] * dpi[s * m + a];
    for (std::size_t a = 0; a < m; ++a) {
      out.grad[s * m + a] = pi[s * m + a] * (dpi[s * m + a] - avg);
    }
  }
  return out;
}

// Plain gradient ascent on the exact soft objective from the given logits.
inline std::vector<double> soft_policy_ascent(const TabularMdp& mdp,
                                              const MatrixXd& q_states,
                                              double beta,
                                              std::vector<double> logits,
                                              const SoftAscentOptions& options) {
  for (std::size_t it = 0; it < options.steps; ++it) {
    const auto g = soft_objective_gradient(mdp, logits, q_states, beta);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      logits[i] += options.step_size * g.grad[i];
    }
  }
  return logits;
}

inline PolicyTable softmax_table(std::size_t n, std::size_t m,
                                 std::span<const double> logits) {
  std::vector<double> probs(n * m);
  for (std::size_t s = 0; s < n; ++s) {
    double top = logits[s * m];
    for (std::size_t a = 1; a < m; ++a) top = std::max(top, logits[s * m + a]);
    double z = 0.0;
    for (std::size_t a = 0; a < m; ++a) {
      probs[s * m + a] = std::exp(logits[s * m + a] - top);
      z += probs[s * m + a];
    }
    for (std::size_t a = 0; a < m; ++a) probs[s * m + a] /= z;
  }
  return PolicyTable(n, m, std::move(probs));
}

inline constexpr double kMaxEnumeratedPolicies = 1e6;

// For each beta, the deterministic policy maximizing J - beta zeta^2, with
// zeta^2 from the linear predictor fed exact values at the assessment
// states. Ties keep the lexicographically smallest policy.
inline Frontier brute_force_policy_frontier(const TabularMdp& mdp,
                                            const AssessmentSpec& spec,
                                            const StateSimilarity& similarity,
                                            std::span<const double> betas,
                                            const SoftAscentOptions& fallback = {}) {
  spec.validate(mdp.n_states());
  const std::size_t n = mdp.n_states();
  const std::size_t m = mdp.n_actions();
  const auto p = build_vectorized(n, spec.start_states, similarity, mdp.start_dist());
  Frontier out;
  out.points.resize(betas.size());
  for (std::size_t b = 0; b < betas.size(); ++b) {
    require(betas[b] >= 0.0, "brute_force_policy_frontier: beta must be >= 0");
    out.points[b].beta = betas[b];
    out.points[b].objective = -std::numeric_limits<double>::infinity();
  }
  const double count = std::pow(static_cast<double>(m), static_cast<double>(n));
  if (count > kMaxEnumeratedPolicies) {
    out.gradient_mode = true;
    const MatrixXd qs = p.state_q();
    for (std::size_t b = 0; b < betas.size(); ++b) {
      const auto logits = soft_policy_ascent(mdp, qs, betas[b],
                                             std::vector<double>(n * m, 0.0), fallback);
      const auto values = exact_values(mdp, softmax_table(n, m, logits));
      auto& pt = out.points[b];
      fill_point(p, mdp.start_dist(), values, pt);
      pt.objective = pt.J - betas[b] * pt.zeta_sq;
    }
    return out;
  }
  std::vector<ActionIndex> actions(n, 0);
  while (true) {
    const auto values = exact_values(mdp, PolicyTable::deterministic(actions, m));
    FrontierPoint candidate;
    fill_point(p, mdp.start_dist(), values, candidate);
    for (std::size_t b = 0; b < betas.size(); ++b) {
      const double obj = candidate.J - betas[b] * candidate.zeta_sq;
      if (obj > out.points[b].objective) {
        const double beta = out.points[b].beta;
        out.points[b] = candidate;
        out.points[b].beta = beta;
        out.points[b].objective = obj;
        out.points[b].policy = actions;
      }
    }
    // Lexicographic increment, last state fastest.
    std::size_t pos = n;
    while (pos > 0) {
      --pos;
      if (++actions[pos] < m) break;
      actions[pos] = 0;
      if (pos == 0) return out;
    }
  }
}

// ---------------------------------------------------------------------------
// Random beta sweep
// ---------------------------------------------------------------------------

struct SweepOptions {
  std::size_t trials = 1000;
  std::vector<double> betas{0.0, 0.01, 0.1, 1.0, 10.0};
  std::size_t n_states = 5;
  std::size_t n_actions = 2;
  double gamma = 0.9;
  std::size_t horizon = 50;
  std::vector<std::size_t> assessment{0, 2};
  double sigma = 1.5;
  std::optional<std::vector<double>> similarity_matrix;
  SoftAscentOptions ascent;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

struct SweepRow {
  double beta = 0.0;
  double mean_zeta_sq = 0.0;
  double se_zeta_sq = 0.0;
  double mean_J = 0.0;
  double se_J = 0.0;
  double mean_sq_J_err = 0.0;
  std::size_t n_trials = 0;
};

struct SweepTrial {
  std::vector<FrontierPoint> points;  // one per beta
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<SweepTrial> trials;
  std::size_t value_bound_violations = 0;  // (J - J_hat)^2 > zeta^2 + 1e-12
  double max_value_bound_excess = -std::numeric_limits<double>::infinity();
};

inline constexpr double kValueBoundSlack = 1e-12;

inline TabularMdp sweep_instance(const SweepOptions& o, std::size_t trial) {
  Rng rng = make_stream(o.seed, trial);
  RandomMdpOptions mdp_opts;
  mdp_opts.gamma = o.gamma;
  mdp_opts.horizon = o.horizon;
  auto mdp = sample_random_mdp(o.n_states, o.n_actions, true, rng, mdp_opts);
  return mdp.with_start_dist(std::vector<double>(
      o.n_states, 1.0 / static_cast<double>(o.n_states)));
}

inline StateSimilarity sweep_similarity(const SweepOptions& o) {
  if (o.similarity_matrix) {
    return matrix_state_similarity(o.n_states, *o.similarity_matrix);
  }
  return index_rbf_similarity(o.sigma);
}

// Per trial: a random deterministic MDP; per beta: a softmax policy trained
// from uniform logits by exact-gradient ascent on J - beta zeta^2.
inline SweepResult run_beta_sweep_experiment(const SweepOptions& o) {
  require(o.trials >= 1 && !o.betas.empty(),
          "run_beta_sweep_experiment: need trials and betas");
  const auto similarity = sweep_similarity(o);
  SweepResult result;
  result.trials.resize(o.trials);
  parallel_for(o.trials, o.jobs, [&](std::size_t trial) {
    const auto mdp = sweep_instance(o, trial);
    const auto p = build_vectorized(o.n_states, o.assessment, similarity,
                                    mdp.start_dist());
    const MatrixXd qs = p.state_q();
    auto& points = result.trials[trial].points;
    for (double beta : o.betas) {
      const auto logits = soft_policy_ascent(
          mdp, qs, beta, std::vector<double>(o.n_states * o.n_actions, 0.0),
          o.ascent);
      FrontierPoint pt;
      pt.beta = beta;
      fill_point(p, mdp.start_dist(),
                 exact_values(mdp, softmax_table(o.n_states, o.n_actions, logits)),
                 pt);
      pt.objective = pt.J - beta * pt.zeta_sq;
      points.push_back(pt);
    }
  });
  for (std::size_t b = 0; b < o.betas.size(); ++b) {
    SweepRow row;
    row.beta = o.betas[b];
    row.n_trials = o.trials;
    double sz = 0, szz = 0, sj = 0, sjj = 0, se = 0;
    for (const auto& t : result.trials) {
      const auto& pt = t.points[b];
      sz += pt.zeta_sq;
      szz += pt.zeta_sq * pt.zeta_sq;
      sj += pt.J;
      sjj += pt.J * pt.J;
      const double err = (pt.J - pt.J_hat) * (pt.J - pt.J_hat);
      se += err;
      const double excess = err - pt.zeta_sq;
      result.max_value_bound_excess = std::max(result.max_value_bound_excess, excess);
      if (excess > kValueBoundSlack) ++result.value_bound_violations;
    }
    const double n = static_cast<double>(o.trials);
    row.mean_zeta_sq = sz / n;
    row.mean_J = sj / n;
    row.mean_sq_J_err = se / n;
    if (o.trials > 1) {
      row.se_zeta_sq = std::sqrt(std::max(0.0, (szz - n * row.mean_zeta_sq * row.mean_zeta_sq) / (n - 1)) / n);
      row.se_J = std::sqrt(std::max(0.0, (sjj - n * row.mean_J * row.mean_J) / (n - 1)) / n);
    }
    result.rows.push_back(row);
  }
  return result;
}

// True when no consecutive increase exceeds the larger of the two standard
// errors.
inline bool non_increasing_within_se(std::span<const double> means,
                                     std::span<const double> ses) {
  for (std::size_t i = 1; i < means.size(); ++i) {
    if (means[i] - means[i - 1] > std::max(ses[i], ses[i - 1])) return false;
  }
  return true;
}

inline std::string sweep_csv(std::span<const SweepRow> rows) {
  std::string out =
      "beta,mean_zeta_sq,se_zeta_sq,mean_J,se_J,mean_sq_J_err,n_trials\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.10g,%.12g,%.12g,%.12g,%.12g,%.12g,%zu\n",
                  r.beta, r.mean_zeta_sq, r.se_zeta_sq, r.mean_J, r.se_J,
                  r.mean_sq_J_err, r.n_trials);
    out += buf;
  }
  return out;
}

}  // namespace evarl
