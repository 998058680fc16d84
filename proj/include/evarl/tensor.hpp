#pragma once

// Dense row-major tensors and a tape-based reverse-mode differentiation
// graph. Nodes are appended in evaluation order, so the tape itself is a
// topological order and backward is a single reverse sweep.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "evarl/error.hpp"
#include "evarl/random.hpp"

namespace evarl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class Tensor {
 public:
  Tensor() : shape_{}, data_(1, 0.0) {}
  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      throw InvalidInput("Tensor: shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }

  static Tensor zeros(Shape shape) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor filled(Shape shape, double value) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor scalar(double value) { return Tensor({}, {value}); }
  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
  }
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t = zeros(std::move(shape));
    for (double& x : t.data_) x = rng.normal(0.0, stddev);
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }

  double item() const {
    if (data_.size() != 1)
      throw InvalidInput("Tensor::item: tensor has " + std::to_string(data_.size()) +
                         " values");
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double x) { return std::isfinite(x); });
  }

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

class Graph;

// Handle to a node in a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaf that receives a gradient.
  Var variable(Tensor value) { return push(std::move(value), {}, {}, true); }
  // Leaf treated as a constant.
  Var constant(Tensor value) { return push(std::move(value), {}, {}, false); }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient of the last backward() target with respect to `v`. Nodes the
  // loss does not depend on report zeros.
  Tensor grad(Var v) const {
    const Node& node = nodes_.at(v.id);
    if (node.grad.size() == node.value.size() &&
        node.grad.shape() == node.value.shape()) {
      return node.grad;
    }
    return Tensor::zeros(node.value.shape());
  }

  void backward(Var loss) {
    require(loss.graph == this, "Graph::backward: loss from another graph");
    const Node& root = nodes_.at(loss.id);
    if (root.value.size() != 1)
      throw InvalidInput("Graph::backward: loss must be scalar, got shape " +
                         shape_string(root.value.shape()));
    for (auto& node : nodes_) node.grad = Tensor::zeros({0});
    grad_buffer(loss.id).data()[0] = 1.0;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (!node.needs_grad || !node.backward || !has_grad(id)) continue;
      node.backward(*this, id);
    }
  }

  // Records an op output. Used by the op library below.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn fn) {
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Var& in : inputs) {
      require(in.graph == this, "Graph: mixing nodes from different graphs");
      needs = needs || nodes_[in.id].needs_grad;
      ids.push_back(in.id);
    }
    return push(std::move(value), std::move(ids), std::move(fn), needs);
  }

  const Tensor& node_value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& node_grad(std::size_t id) const { return nodes_[id].grad; }
  std::size_t input_id(std::size_t id, std::size_t which) const {
    return nodes_[id].inputs[which];
  }
  bool input_needs_grad(std::size_t id, std::size_t which) const {
    return nodes_[nodes_[id].inputs[which]].needs_grad;
  }
  // Zero-initialized on first touch within a backward pass.
  Tensor& grad_buffer(std::size_t id) {
    Node& node = nodes_[id];
    if (!has_grad(id)) node.grad = Tensor::zeros(node.value.shape());
    return node.grad;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool needs_grad = false;
  };

  bool has_grad(std::size_t id) const {
    const Node& node = nodes_[id];
    return node.grad.size() == node.value.size() &&
           node.grad.shape() == node.value.shape();
  }

  Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn,
           bool needs_grad) {
    nodes_.push_back(Node{std::move(value), Tensor::zeros({0}),
                          std::move(inputs), std::move(fn), needs_grad});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(*this); }

// ---------------------------------------------------------------------------
// Op library
// ---------------------------------------------------------------------------

namespace ad {

namespace detail {

inline void same_graph(Var a, Var b) {
  require(a.graph != nullptr && a.graph == b.graph,
          "ad: operands belong to different graphs");
}

[[noreturn]] inline void shape_error(const char* op, const Shape& a,
                                     const Shape& b) {
  throw InvalidInput(std::string(op) + ": incompatible shapes " +
                     shape_string(a) + " and " + shape_string(b));
}

// Splits a shape around `axis` into (outer, length, inner) strides.
struct AxisView {
  std::size_t outer = 1;
  std::size_t length = 1;
  std::size_t inner = 1;

  AxisView(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size())
      throw InvalidInput("ad: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(shape));
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    length = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  }
  std::size_t at(std::size_t o, std::size_t i, std::size_t j) const {
    return (o * length + i) * inner + j;
  }
};

// True when b is a rank-1 bias broadcast over the leading axes of a.
inline bool is_bias_broadcast(const Shape& a, const Shape& b) {
  return b.size() == 1 && !a.empty() && a.back() == b[0] && a.size() > 1;
}

}  // namespace detail

namespace detail {

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<RowMajorMatrix> as_matrix(Tensor& t, std::size_t r, std::size_t c) {
  return {t.data().data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}
inline Eigen::Map<const RowMajorMatrix> as_matrix(const Tensor& t, std::size_t r,
                                                  std::size_t c) {
  return {t.data().data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::same_graph(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) {
    detail::shape_error("matmul", x.shape(), y.shape());
  }
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  Tensor out({m, n}, std::vector<double>(m * n));
  detail::as_matrix(out, m, n).noalias() =
      detail::as_matrix(x, m, k) * detail::as_matrix(y, k, n);
  return a.graph->record(
      std::move(out), {a, b}, [m, k, n](Graph& g, std::size_t self) {
        const auto dout = detail::as_matrix(g.node_grad(self), m, n);
        const std::size_t ia = g.input_id(self, 0);
        const std::size_t ib = g.input_id(self, 1);
        if (g.input_needs_grad(self, 0)) {
          detail::as_matrix(g.grad_buffer(ia), m, k).noalias() +=
              dout * detail::as_matrix(g.node_value(ib), k, n).transpose();
        }
        if (g.input_needs_grad(self, 1)) {
          detail::as_matrix(g.grad_buffer(ib), k, n).noalias() +=
              detail::as_matrix(g.node_value(ia), m, k).transpose() * dout;
        }
      });
}

namespace detail {

// Shared implementation of add/sub: out = a + sign * b.
inline Var add_signed(Var a, Var b, double sign, const char* name) {
  same_graph(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const bool bias = is_bias_broadcast(x.shape(), y.shape());
  if (!bias && x.shape() != y.shape()) shape_error(name, x.shape(), y.shape());
  Tensor out = x;
  const std::size_t width = y.size();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] += sign * y[bias ? i % width : i];
  }
  return a.graph->record(
      std::move(out), {a, b}, [bias, width, sign](Graph& g, std::size_t self) {
        const Tensor& dout = g.node_grad(self);
        if (g.input_needs_grad(self, 0)) {
          Tensor& dx = g.grad_buffer(g.input_id(self, 0));
          for (std::size_t i = 0; i < dout.size(); ++i) dx[i] += dout[i];
        }
        if (g.input_needs_grad(self, 1)) {
          Tensor& dy = g.grad_buffer(g.input_id(self, 1));
          for (std::size_t i = 0; i < dout.size(); ++i) {
            dy[bias ? i % width : i] += sign * dout[i];
          }
        }
      });
}

}  // namespace detail

// Elementwise sum; `b` may also be a rank-1 bias matching a's last axis.
inline Var add(Var a, Var b) { return detail::add_signed(a, b, 1.0, "add"); }
inline Var sub(Var a, Var b) { return detail::add_signed(a, b, -1.0, "sub"); }

// Elementwise product; `b` may also be a rank-1 scale over a's last axis.
inline Var multiply(Var a, Var b) {
  detail::same_graph(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const bool bias = detail::is_bias_broadcast(x.shape(), y.shape());
  if (!bias && x.shape() != y.shape()) {
    detail::shape_error("multiply", x.shape(), y.shape());
  }
  const std::size_t width = y.size();
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] *= y[bias ? i % width : i];
  }
  return a.graph->record(
      std::move(out), {a, b}, [bias, width](Graph& g, std::size_t self) {
        const Tensor& dout = g.node_grad(self);
        const std::size_t ia = g.input_id(self, 0);
        const std::size_t ib = g.input_id(self, 1);
        const Tensor& x = g.node_value(ia);
        const Tensor& y = g.node_value(ib);
        if (g.input_needs_grad(self, 0)) {
          Tensor& dx = g.grad_buffer(ia);
          for (std::size_t i = 0; i < dout.size(); ++i) {
            dx[i] += dout[i] * y[bias ? i % width : i];
          }
        }
        if (g.input_needs_grad(self, 1)) {
          Tensor& dy = g.grad_buffer(ib);
          for (std::size_t i = 0; i < dout.size(); ++i) {
            dy[bias ? i % width : i] += dout[i] * x[i];
          }
        }
      });
}

inline Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= factor;
  return a.graph->record(std::move(out), {a},
                         [factor](Graph& g, std::size_t self) {
                           const Tensor& dout = g.node_grad(self);
                           Tensor& dx = g.grad_buffer(g.input_id(self, 0));
                           for (std::size_t i = 0; i < dout.size(); ++i) {
                             dx[i] += factor * dout[i];
                           }
                         });
}

inline Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return a.graph->record(std::move(out), {a}, [](Graph& g, std::size_t self) {
    const Tensor& dout = g.node_grad(self);
    const std::size_t ia = g.input_id(self, 0);
    const Tensor& x = g.node_value(ia);
    Tensor& dx = g.grad_buffer(ia);
    for (std::size_t i = 0; i < dout.size(); ++i) {
      if (x[i] > 0.0) dx[i] += dout[i];
    }
  });
}

inline Var softmax(Var a, std::size_t axis) {
  const Tensor& x = a.value();
  const detail::AxisView view(x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t o = 0; o < view.outer; ++o) {
    for (std::size_t j = 0; j < view.inner; ++j) {
      double hi = -INFINITY;
      for (std::size_t i = 0; i < view.length; ++i) {
        hi = std::max(hi, x[view.at(o, i, j)]);
      }
      double total = 0.0;
      for (std::size_t i = 0; i < view.length; ++i) {
        const double e = std::exp(x[view.at(o, i, j)] - hi);
        out[view.at(o, i, j)] = e;
        total += e;
      }
      for (std::size_t i = 0; i < view.length; ++i) {
        out[view.at(o, i, j)] /= total;
      }
    }
  }
  return a.graph->record(
      std::move(out), {a}, [view](Graph& g, std::size_t self) {
        const Tensor& dout = g.node_grad(self);
        const Tensor& y = g.node_value(self);
        Tensor& dx = g.grad_buffer(g.input_id(self, 0));
        for (std::size_t o = 0; o < view.outer; ++o) {
          for (std::size_t j = 0; j < view.inner; ++j) {
            double dot = 0.0;
            for (std::size_t i = 0; i < view.length; ++i) {
              dot += dout[view.at(o, i, j)] * y[view.at(o, i, j)];
            }
            for (std::size_t i = 0; i < view.length; ++i) {
              const std::size_t at = view.at(o, i, j);
              dx[at] += y[at] * (dout[at] - dot);
            }
          }
        }
      });
}

inline Var log_softmax(Var a, std::size_t axis) {
  const Tensor& x = a.value();
  const detail::AxisView view(x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t o = 0; o < view.outer; ++o) {
    for (std::size_t j = 0; j < view.inner; ++j) {
      double hi = -INFINITY;
      for (std::size_t i = 0; i < view.length; ++i) {
        hi = std::max(hi, x[view.at(o, i, j)]);
      }
      double total = 0.0;
      for (std::size_t i = 0; i < view.length; ++i) {
        total += std::exp(x[view.at(o, i, j)] - hi);
      }
      const double log_z = hi + std::log(total);
      for (std::size_t i = 0; i < view.length; ++i) {
        out[view.at(o, i, j)] = x[view.at(o, i, j)] - log_z;
      }
    }
  }
  return a.graph->record(
      std::move(out), {a}, [view](Graph& g, std::size_t self) {
        const Tensor& dout = g.node_grad(self);
        const Tensor& y = g.node_value(self);
        Tensor& dx = g.grad_buffer(g.input_id(self, 0));
        for (std::size_t o = 0; o < view.outer; ++o) {
          for (std::size_t j = 0; j < view.inner; ++j) {
            double total = 0.0;
            for (std::size_t i = 0; i < view.length; ++i) {
              total += dout[view.at(o, i, j)];
            }
            for (std::size_t i = 0; i < view.length; ++i) {
              const std::size_t at = view.at(o, i, j);
              dx[at] += dout[at] - std::exp(y[at]) * total;
            }
          }
        }
      });
}

inline constexpr double kLayerNormEpsilon = 1e-5;

// Normalizes to zero mean / unit variance along `axis` (no affine part).
inline Var layer_norm(Var a, std::size_t axis,
                      double epsilon = kLayerNormEpsilon) {
  const Tensor& x = a.value();
  const detail::AxisView view(x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> inv_std(view.outer * view.inner);
  const double len = static_cast<double>(view.length);
  for (std::size_t o = 0; o < view.outer; ++o) {
    for (std::size_t j = 0; j < view.inner; ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < view.length; ++i) {
        mean += x[view.at(o, i, j)];
      }
      mean /= len;
      double var = 0.0;
      for (std::size_t i = 0; i < view.length; ++i) {
        const double d = x[view.at(o, i, j)] - mean;
        var += d * d;
      }
      var /= len;
      const double r = 1.0 / std::sqrt(var + epsilon);
      inv_std[o * view.inner + j] = r;
      for (std::size_t i = 0; i < view.length; ++i) {
        out[view.at(o, i, j)] = (x[view.at(o, i, j)] - mean) * r;
      }
    }
  }
  return a.graph->record(
      std::move(out), {a},
      [view, inv_std = std::move(inv_std)](Graph& g, std::size_t self) {
        const Tensor& dout = g.node_grad(self);
        const Tensor& y = g.node_value(self);
        Tensor& dx = g.grad_buffer(g.input_id(self, 0));
        const double len = static_cast<double>(view.length);
        for (std::size_t o = 0; o < view.outer; ++o) {
          for (std::size_t j = 0; j < view.inner; ++j) {
            double mean_dy = 0.0;
            double mean_dy_y = 0.0;
            for (std::size_t i = 0; i < view.length; ++i) {
              const std::size_t at = view.at(o, i, j);
              mean_dy += dout[at];
              mean_dy_y += dout[at] * y[at];
            }
            mean_dy /= len;
            mean_dy_y /= len;
            const double r = inv_std[o * view.inner + j];
            for (std::size_t i = 0; i < view.length; ++i) {
              const std::size_t at = view.at(o, i, j);
              dx[at] += r * (dout[at] - mean_dy - y[at] * mean_dy_y);
            }
          }
        }
      });
}

// Rows of a [V, h] table selected by `indices`; gradients scatter-add.
inline Var embed_lookup(Var table, std::vector<std::size_t> indices) {
  const Tensor& t = table.value();
  if (t.rank() != 2)
    throw InvalidInput("embed_lookup: table must be rank 2, got " +
                       shape_string(t.shape()));
  const std::size_t rows = t.dim(0), width = t.dim(1);
  Tensor out = Tensor::zeros({indices.size(), width});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= rows)
      throw InvalidInput("embed_lookup: index " + std::to_string(indices[r]) +
                         " out of range for " + shape_string(t.shape()));
    std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(indices[r] * width),
                width, out.data().begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  return table.graph->record(
      std::move(out), {table},
      [indices = std::move(indices), width](Graph& g, std::size_t self) {
        const Tensor& dout = g.node_grad(self);
        Tensor& dt = g.grad_buffer(g.input_id(self, 0));
        for (std::size_t r = 0; r < indices.size(); ++r) {
          for (std::size_t c = 0; c < width; ++c) {
            dt[indices[r] * width + c] += dout[r * width + c];
          }
        }
      });
}

inline Var gather_rows(Var x, std::vector<std::size_t> indices) {
  return embed_lookup(x, std::move(indices));
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size())
    throw InvalidInput("concat: axis out of range for shape " + shape_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    detail::same_graph(parts.front(), p);
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      ok = i == axis || s[i] == first[i];
    }
    if (!ok) detail::shape_error("concat", first, s);
    out_shape[axis] += s[axis];
  }
  const detail::AxisView out_view(out_shape, axis);
  Tensor out = Tensor::zeros(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    const detail::AxisView view(v.shape(), axis);
    for (std::size_t o = 0; o < view.outer; ++o) {
      for (std::size_t i = 0; i < view.length; ++i) {
        for (std::size_t j = 0; j < view.inner; ++j) {
          out[out_view.at(o, offset + i, j)] = v[view.at(o, i, j)];
        }
      }
    }
    offsets.push_back(offset);
    offset += view.length;
  }
  return parts.front().graph->record(
      std::move(out), parts,
      [axis, out_view, offsets = std::move(offsets)](Graph& g,
                                                     std::size_t self) {
        const Tensor& dout = g.node_grad(self);
        for (std::size_t p = 0; p < offsets.size(); ++p) {
          if (!g.input_needs_grad(self, p)) continue;
          const std::size_t id = g.input_id(self, p);
          const detail::AxisView view(g.node_value(id).shape(), axis);
          Tensor& dx = g.grad_buffer(id);
          for (std::size_t o = 0; o < view.outer; ++o) {
            for (std::size_t i = 0; i < view.length; ++i) {
              for (std::size_t j = 0; j < view.inner; ++j) {
                dx[view.at(o, i, j)] += dout[out_view.at(o, offsets[p] + i, j)];
              }
            }
          }
        }
      });
}

inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value();
  if (shape_size(shape) != out.size())
    throw InvalidInput("reshape: cannot view " + shape_string(out.shape()) + " as " +
                       shape_string(shape));
  out = Tensor(std::move(shape), std::move(out.data()));
  return a.graph->record(std::move(out), {a}, [](Graph& g, std::size_t self) {
    const Tensor& dout = g.node_grad(self);
    Tensor& dx = g.grad_buffer(g.input_id(self, 0));
    for (std::size_t i = 0; i < dout.size(); ++i) dx[i] += dout[i];
  });
}

inline Var sum(Var a) {
  const Tensor& x = a.value();
  double total = 0.0;
  for (double v : x.data()) total += v;
  return a.graph->record(Tensor::scalar(total), {a},
                         [](Graph& g, std::size_t self) {
                           const double d = g.node_grad(self)[0];
                           Tensor& dx = g.grad_buffer(g.input_id(self, 0));
                           for (double& v : dx.data()) v += d;
                         });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

inline Var mse_loss(Var prediction, Var target) {
  detail::same_graph(prediction, target);
  if (prediction.shape() != target.shape()) {
    detail::shape_error("mse_loss", prediction.shape(), target.shape());
  }
  const Var diff = sub(prediction, target);
  return mean(multiply(diff, diff));
}

// Element i of row i: x[i, columns[i]] for a [N, M] input; output is [N].
inline Var pick(Var a, std::vector<std::size_t> columns) {
  const Tensor& x = a.value();
  if (x.rank() != 2 || x.dim(0) != columns.size())
    throw InvalidInput("pick: expected [N, M] input with N = " +
                       std::to_string(columns.size()) + ", got " +
                       shape_string(x.shape()));
  const std::size_t width = x.dim(1);
  Tensor out = Tensor::zeros({columns.size()});
  for (std::size_t i = 0; i < columns.size(); ++i) {
    require(columns[i] < width, "pick: column out of range");
    out[i] = x[i * width + columns[i]];
  }
  return a.graph->record(
      std::move(out), {a},
      [columns = std::move(columns), width](Graph& g, std::size_t self) {
        const Tensor& dout = g.node_grad(self);
        Tensor& dx = g.grad_buffer(g.input_id(self, 0));
        for (std::size_t i = 0; i < columns.size(); ++i) {
          dx[i * width + columns[i]] += dout[i];
        }
      });
}

// Multi-head scaled dot-product attention, unmasked. Inputs are [N*L, h]
// with N independent sequences of `sequence_length` L rows each (L = rows
// when 0). Heads split h into equal slices and are concatenated back.
inline Var scaled_dot_product_attention(Var queries, Var keys, Var values,
                                        std::size_t heads,
                                        std::size_t sequence_length = 0) {
  detail::same_graph(queries, keys);
  detail::same_graph(queries, values);
  const Tensor& q = queries.value();
  const Tensor& k = keys.value();
  const Tensor& v = values.value();
  if (q.rank() != 2 || k.shape() != q.shape()) {
    detail::shape_error("attention(queries, keys)", q.shape(), k.shape());
  }
  if (v.shape() != q.shape()) {
    detail::shape_error("attention(queries, values)", q.shape(), v.shape());
  }
  const std::size_t rows = q.dim(0), width = q.dim(1);
  const std::size_t len = sequence_length == 0 ? rows : sequence_length;
  if (heads == 0 || width % heads != 0)
    throw InvalidInput("attention: width " + std::to_string(width) +
                       " not divisible by heads " + std::to_string(heads));
  if (len == 0 || rows % len != 0)
    throw InvalidInput("attention: rows " + std::to_string(rows) +
                       " not divisible by sequence length " + std::to_string(len));
  const std::size_t n_seq = rows / len;
  const std::size_t dh = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // Attention weights per (sequence, head): [n_seq, heads, len, len].
  std::vector<double> weights(n_seq * heads * len * len);
  Tensor out = Tensor::zeros(q.shape());
  for (std::size_t s = 0; s < n_seq; ++s) {
    for (std::size_t hd = 0; hd < heads; ++hd) {
      double* w = weights.data() + ((s * heads + hd) * len) * len;
      const std::size_t col = hd * dh;
      for (std::size_t i = 0; i < len; ++i) {
        const double* qi = q.data().data() + (s * len + i) * width + col;
        double hi = -INFINITY;
        for (std::size_t j = 0; j < len; ++j) {
          const double* kj = k.data().data() + (s * len + j) * width + col;
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          w[i * len + j] = dot * inv_sqrt;
          hi = std::max(hi, w[i * len + j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          w[i * len + j] = std::exp(w[i * len + j] - hi);
          total += w[i * len + j];
        }
        double* oi = out.data().data() + (s * len + i) * width + col;
        for (std::size_t j = 0; j < len; ++j) {
          w[i * len + j] /= total;
          const double* vj = v.data().data() + (s * len + j) * width + col;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += w[i * len + j] * vj[c];
        }
      }
    }
  }
  return queries.graph->record(
      std::move(out), {queries, keys, values},
      [weights = std::move(weights), n_seq, heads, len, dh, width,
       inv_sqrt](Graph& g, std::size_t self) {
        const Tensor& dout = g.node_grad(self);
        const std::size_t iq = g.input_id(self, 0);
        const std::size_t ik = g.input_id(self, 1);
        const std::size_t iv = g.input_id(self, 2);
        const Tensor& q = g.node_value(iq);
        const Tensor& k = g.node_value(ik);
        const Tensor& v = g.node_value(iv);
        Tensor& dq = g.grad_buffer(iq);
        Tensor& dk = g.grad_buffer(ik);
        Tensor& dv = g.grad_buffer(iv);
        std::vector<double> dw(len * len);
        for (std::size_t s = 0; s < n_seq; ++s) {
          for (std::size_t hd = 0; hd < heads; ++hd) {
            const double* w = weights.data() + ((s * heads + hd) * len) * len;
            const std::size_t col = hd * dh;
            auto row = [&](const Tensor& t, std::size_t i) {
              return t.data().data() + (s * len + i) * width + col;
            };
            auto mrow = [&](Tensor& t, std::size_t i) {
              return t.data().data() + (s * len + i) * width + col;
            };
            // dW = dO V^T, dV = W^T dO.
            for (std::size_t i = 0; i < len; ++i) {
              const double* doi = row(dout, i);
              for (std::size_t j = 0; j < len; ++j) {
                const double* vj = row(v, j);
                double dot = 0.0;
                for (std::size_t c = 0; c < dh; ++c) dot += doi[c] * vj[c];
                dw[i * len + j] = dot;
                double* dvj = mrow(dv, j);
                for (std::size_t c = 0; c < dh; ++c) {
                  dvj[c] += w[i * len + j] * doi[c];
                }
              }
            }
            // Softmax backward, then the scaled QK^T product.
            for (std::size_t i = 0; i < len; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j < len; ++j) {
                dot += dw[i * len + j] * w[i * len + j];
              }
              const double* qi = row(q, i);
              double* dqi = mrow(dq, i);
              for (std::size_t j = 0; j < len; ++j) {
                const double ds =
                    w[i * len + j] * (dw[i * len + j] - dot) * inv_sqrt;
                if (ds == 0.0) continue;
                const double* kj = row(k, j);
                double* dkj = mrow(dk, j);
                for (std::size_t c = 0; c < dh; ++c) {
                  dqi[c] += ds * kj[c];
                  dkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Named parameter collections
// ---------------------------------------------------------------------------

struct NamedTensor {
  std::string name;
  Tensor value;

  bool operator==(const NamedTensor&) const = default;
};

// Ordered (name, tensor) records; doubles as a gradient container with the
// same layout as the parameters it belongs to.
class ParameterSet {
 public:
  ParameterSet() = default;
  explicit ParameterSet(std::vector<NamedTensor> entries)
      : entries_(std::move(entries)) {}

  void add(std::string name, Tensor value) {
    if (find(name) != nullptr) throw InvalidInput("ParameterSet: duplicate name " + name);
    entries_.push_back({std::move(name), std::move(value)});
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  NamedTensor& operator[](std::size_t i) { return entries_[i]; }
  const NamedTensor& operator[](std::size_t i) const { return entries_[i]; }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  const Tensor* find(const std::string& name) const {
    for (const auto& e : entries_) {
      if (e.name == name) return &e.value;
    }
    return nullptr;
  }
  Tensor& at(const std::string& name) {
    for (auto& e : entries_) {
      if (e.name == name) return e.value;
    }
    throw InvalidInput("ParameterSet: no parameter named " + name);
  }
  const Tensor& at(const std::string& name) const {
    const Tensor* t = find(name);
    if (t == nullptr) throw InvalidInput("ParameterSet: no parameter named " + name);
    return *t;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  ParameterSet zeros_like() const {
    ParameterSet out;
    for (const auto& e : entries_) {
      out.entries_.push_back({e.name, Tensor::zeros(e.value.shape())});
    }
    return out;
  }

  bool same_layout(const ParameterSet& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (entries_[i].name != other.entries_[i].name ||
          entries_[i].value.shape() != other.entries_[i].value.shape()) {
        return false;
      }
    }
    return true;
  }

  // this += factor * other
  void axpy(double factor, const ParameterSet& other) {
    require(same_layout(other), "ParameterSet::axpy: layout mismatch");
    for (std::size_t i = 0; i < size(); ++i) {
      auto& dst = entries_[i].value.data();
      const auto& src = other.entries_[i].value.data();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += factor * src[j];
    }
  }

  void scale(double factor) {
    for (auto& e : entries_) {
      for (double& v : e.value.data()) v *= factor;
    }
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(scalar_count());
    for (const auto& e : entries_) {
      out.insert(out.end(), e.value.data().begin(), e.value.data().end());
    }
    return out;
  }

  bool operator==(const ParameterSet&) const = default;

 private:
  std::vector<NamedTensor> entries_;
};

// Registers every parameter as a graph variable, in order.
inline std::vector<Var> bind(Graph& graph, const ParameterSet& params) {
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& e : params) vars.push_back(graph.variable(e.value));
  return vars;
}

// Gradient map after graph.backward(): same names and shapes as `params`.
inline ParameterSet gradients(const Graph& graph, const ParameterSet& params,
                              const std::vector<Var>& vars) {
  require(vars.size() == params.size(), "gradients: binding size mismatch");
  ParameterSet out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.add(params[i].name, graph.grad(vars[i]));
  }
  return out;
}

}  // namespace evarl
