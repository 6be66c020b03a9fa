#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mink/coords.hpp"
#include "mink/kernel.hpp"
#include "mink/matrix.hpp"
#include "mink/sparse_ops.hpp"

namespace mink::ag {

struct Var {
  std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
  bool valid() const { return id != std::numeric_limits<std::uint32_t>::max(); }
  friend bool operator==(Var, Var) = default;
};

// Trainable tensor. Stored as a matrix; `shape` carries the logical dims
// (e.g. {volume, out, in} for convolution weights) for checkpoints.
struct Parameter {
  std::string name;
  std::vector<std::size_t> shape;
  Matrix<double> value;
  Matrix<double> grad;
  Matrix<double> momentum;

  Parameter() = default;
  Parameter(std::string n, std::size_t rows, std::size_t cols, std::vector<std::size_t> dims = {})
      : name(std::move(n)), shape(std::move(dims)), value(rows, cols), grad(rows, cols), momentum(rows, cols) {
    if (shape.empty()) shape = {rows, cols};
  }

  void zero_grad() { grad.fill(0.0); }
};

inline ConvWeights<double> as_conv_weights(const Parameter& p) {
  if (p.shape.size() != 3) throw std::invalid_argument("parameter '" + p.name + "' is not a convolution weight");
  return ConvWeights<double>(p.shape[0], p.shape[1], p.shape[2], p.value.storage());
}

// Zero-mean uniform init with scale 1/sqrt(fan_in).
inline void init_uniform(Parameter& p, double fan_in, std::mt19937_64& rng) {
  const double a = 1.0 / std::sqrt(fan_in);
  std::uniform_real_distribution<double> u(-a, a);
  for (auto& v : p.value.storage()) v = u(rng);
}

// Linear record of executed operations. Values are appended in execution
// order, so walking the records backwards is a valid reverse topological
// order; each record's backward runs exactly once per backward() call.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var self)>;

  Var input(Matrix<double> value, CoordinateMapPtr coords = nullptr) {
    return record(std::move(value), std::move(coords), nullptr);
  }

  Var record(Matrix<double> value, CoordinateMapPtr coords, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), Matrix<double>(), std::move(coords), std::move(backward)});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  const Matrix<double>& value(Var v) const { return node(v).value; }
  const CoordinateMapPtr& coords(Var v) const { return node(v).coords; }

  Matrix<double>& grad(Var v) {
    Node& n = node(v);
    if (!n.value.same_shape(n.grad)) n.grad = Matrix<double>(n.value.rows(), n.value.cols());
    return n.grad;
  }
  bool has_grad(Var v) const { return node(v).grad.same_shape(node(v).value) && !node(v).value.empty(); }

  std::size_t size() const { return nodes_.size(); }
  std::size_t backward_calls() const { return backward_calls_; }

  void backward(Var loss) {
    if (!loss.valid() || loss.id >= nodes_.size()) throw std::invalid_argument("backward: value is not on this tape");
    const Node& l = nodes_[loss.id];
    if (l.value.rows() != 1 || l.value.cols() != 1) throw std::invalid_argument("backward: loss must be a scalar");
    for (auto& n : nodes_) n.grad = Matrix<double>();
    grad(loss)(0, 0) = 1.0;
    for (std::uint32_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || !n.grad.same_shape(n.value)) continue;
      ++backward_calls_;
      n.backward(*this, Var{i});
    }
  }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Matrix<double> value;
    Matrix<double> grad;
    CoordinateMapPtr coords;
    BackwardFn backward;
  };

  Node& node(Var v) {
    if (!v.valid() || v.id >= nodes_.size()) throw std::invalid_argument("Tape: unknown value");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (!v.valid() || v.id >= nodes_.size()) throw std::invalid_argument("Tape: unknown value");
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
  std::size_t backward_calls_ = 0;
};

// ---------------------------------------------------------------------------
// Operations

// Generalized sparse convolution with an optional per-channel bias.
inline Var conv(Tape& t, Var x, Parameter& w, KernelMapPtr map, CoordinateMapPtr out_coords, Parameter* bias = nullptr) {
  if (!map) throw std::invalid_argument("conv: null kernel map");
  auto weights = as_conv_weights(w);
  const std::size_t n_out = out_coords ? out_coords->size() : t.value(x).rows();
  Matrix<double> y = sparse_conv_forward(t.value(x), weights, *map, n_out);
  if (bias) {
    if (bias->value.size() != y.cols()) throw std::invalid_argument("conv: bias size mismatch");
    for (std::size_t r = 0; r < y.rows(); ++r)
      for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) += bias->value.data()[c];
  }
  Parameter* wp = &w;
  return t.record(std::move(y), std::move(out_coords), [x, wp, bias, map](Tape& tape, Var self) {
    const auto& g = tape.grad(self);
    auto grads = sparse_conv_backward(g, tape.value(x), as_conv_weights(*wp), *map);
    tape.grad(x) += grads.input;
    auto& gw = wp->grad.storage();
    for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += grads.weights.storage()[i];
    if (bias) {
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) bias->grad.data()[c] += g(r, c);
    }
  });
}

inline Var relu(Tape& t, Var x) {
  Matrix<double> y = mink::relu(t.value(x));
  return t.record(std::move(y), t.coords(x), [x](Tape& tape, Var self) {
    tape.grad(x) += relu_backward(tape.grad(self), tape.value(x));
  });
}

struct BatchNorm {
  Parameter gamma;
  Parameter beta;
  BatchNormStats stats;

  BatchNorm() = default;
  BatchNorm(const std::string& name, std::size_t channels)
      : gamma(name + ".gamma", 1, channels, {channels}), beta(name + ".beta", 1, channels, {channels}),
        stats(channels) {
    gamma.value.fill(1.0);
  }
  std::size_t channels() const { return gamma.value.cols(); }
};

inline Var batch_norm(Tape& t, Var x, BatchNorm& bn, bool training) {
  auto cache = std::make_shared<BatchNormCache<double>>();
  Matrix<double> y = mink::batch_norm<double>(t.value(x), bn.stats, bn.gamma.value.storage(), bn.beta.value.storage(),
                                              training, cache.get());
  BatchNorm* p = &bn;
  return t.record(std::move(y), t.coords(x), [x, p, cache](Tape& tape, Var self) {
    auto g = batch_norm_backward<double>(tape.grad(self), *cache, p->gamma.value.storage());
    tape.grad(x) += g.input;
    for (std::size_t c = 0; c < g.gamma.size(); ++c) {
      p->gamma.grad.data()[c] += g.gamma[c];
      p->beta.grad.data()[c] += g.beta[c];
    }
  });
}

inline Var add(Tape& t, Var a, Var b) {
  Matrix<double> y = t.value(a) + t.value(b);
  return t.record(std::move(y), t.coords(a), [a, b](Tape& tape, Var self) {
    tape.grad(a) += tape.grad(self);
    tape.grad(b) += tape.grad(self);
  });
}

// Channel concatenation of two row-aligned tensors.
inline Var concat(Tape& t, Var a, Var b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  if (va.rows() != vb.rows()) throw std::invalid_argument("concat: row count mismatch");
  Matrix<double> y(va.rows(), va.cols() + vb.cols());
  for (std::size_t r = 0; r < va.rows(); ++r) {
    std::copy(va.row(r).begin(), va.row(r).end(), y.row(r).begin());
    std::copy(vb.row(r).begin(), vb.row(r).end(), y.row(r).begin() + va.cols());
  }
  const std::size_t ca = va.cols();
  return t.record(std::move(y), t.coords(a), [a, b, ca](Tape& tape, Var self) {
    const auto& g = tape.grad(self);
    auto& ga = tape.grad(a);
    auto& gb = tape.grad(b);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t c = 0; c < ca; ++c) ga(r, c) += g(r, c);
      for (std::size_t c = ca; c < g.cols(); ++c) gb(r, c - ca) += g(r, c);
    }
  });
}

inline Var max_pool(Tape& t, Var x, KernelMapPtr map, CoordinateMapPtr out_coords) {
  auto r = mink::max_pool(t.value(x), *map, out_coords->size());
  auto argmax = std::make_shared<std::vector<std::size_t>>(std::move(r.argmax));
  const std::size_t n_in = t.value(x).rows();
  return t.record(std::move(r.features), std::move(out_coords), [x, argmax, n_in](Tape& tape, Var self) {
    tape.grad(x) += max_pool_backward(tape.grad(self), *argmax, n_in);
  });
}

inline Var avg_pool(Tape& t, Var x, KernelMapPtr map, CoordinateMapPtr out_coords, std::size_t n_out = 0) {
  if (out_coords) n_out = out_coords->size();
  Matrix<double> y = mink::avg_pool(t.value(x), *map, n_out);
  const std::size_t n_in = t.value(x).rows();
  return t.record(std::move(y), std::move(out_coords), [x, map, n_in](Tape& tape, Var self) {
    tape.grad(x) += pool_scatter_backward(tape.grad(self), *map, n_in, true);
  });
}

inline Var sum_pool(Tape& t, Var x, KernelMapPtr map, CoordinateMapPtr out_coords) {
  Matrix<double> y = mink::sum_pool(t.value(x), *map, out_coords->size());
  const std::size_t n_in = t.value(x).rows();
  return t.record(std::move(y), std::move(out_coords), [x, map, n_in](Tape& tape, Var self) {
    tape.grad(x) += pool_scatter_backward(tape.grad(self), *map, n_in, false);
  });
}

// One output row per batch; the result carries no coordinate map.
inline Var global_pool(Tape& t, Var x, PoolMode mode) {
  if (!t.coords(x)) throw std::invalid_argument("global_pool: input has no coordinates");
  auto batches = batch_indices(*t.coords(x));
  auto g = std::make_shared<GlobalPoolMap>(global_kernel_map(batches));
  const std::size_t n_in = t.value(x).rows();
  auto r = mink::global_pool(t.value(x), batches, mode);
  auto argmax = std::make_shared<std::vector<std::size_t>>(std::move(r.argmax));
  return t.record(std::move(r.features), nullptr, [x, g, n_in, mode, argmax](Tape& tape, Var self) {
    if (mode == PoolMode::max) {
      tape.grad(x) += max_pool_backward(tape.grad(self), *argmax, n_in);
    } else {
      tape.grad(x) += pool_scatter_backward(tape.grad(self), g->map, n_in, mode == PoolMode::avg);
    }
  });
}

inline Var softmax(Tape& t, Var z) {
  Matrix<double> q = softmax_rows(t.value(z));
  return t.record(std::move(q), t.coords(z), [z](Tape& tape, Var self) {
    tape.grad(z) += softmax_backward(tape.value(self), tape.grad(self));
  });
}

// Row selection: out[r] = x[index[r]].
inline Var gather_rows(Tape& t, Var x, std::vector<std::size_t> index, CoordinateMapPtr out_coords) {
  const auto& v = t.value(x);
  Matrix<double> y(index.size(), v.cols());
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= v.rows()) throw std::out_of_range("gather_rows: index out of range");
    std::copy(v.row(index[r]).begin(), v.row(index[r]).end(), y.row(r).begin());
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(index));
  return t.record(std::move(y), std::move(out_coords), [x, idx](Tape& tape, Var self) {
    const auto& g = tape.grad(self);
    auto& gx = tape.grad(x);
    for (std::size_t r = 0; r < idx->size(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) gx((*idx)[r], c) += g(r, c);
  });
}

inline Var sum(Tape& t, Var x) {
  double s = 0.0;
  for (double v : t.value(x).storage()) s += v;
  return t.record(Matrix<double>(1, 1, s), nullptr, [x](Tape& tape, Var self) {
    const double g = tape.grad(self)(0, 0);
    for (auto& v : tape.grad(x).storage()) v += g;
  });
}

// Scalar <x, weights> against a constant matrix.
inline Var dot(Tape& t, Var x, Matrix<double> weights) {
  const double s = inner(t.value(x), weights);
  auto w = std::make_shared<Matrix<double>>(std::move(weights));
  return t.record(Matrix<double>(1, 1, s), nullptr, [x, w](Tape& tape, Var self) {
    const double g = tape.grad(self)(0, 0);
    auto& gx = tape.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx.data()[i] += g * w->data()[i];
  });
}

// Mean negative log-softmax over rows whose label is not `ignore_label`.
// With every row ignored the loss is 0 and no gradient flows.
inline Var cross_entropy(Tape& t, Var logits, std::span<const std::int32_t> labels,
                         std::int32_t ignore_label = kIgnoreLabel) {
  const auto& z = t.value(logits);
  if (labels.size() != z.rows()) throw std::invalid_argument("cross_entropy: label count != logit rows");
  auto q = std::make_shared<Matrix<double>>(softmax_rows(z));
  auto lab = std::make_shared<std::vector<std::int32_t>>(labels.begin(), labels.end());
  double loss = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    const std::int32_t y = labels[r];
    if (y == ignore_label) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= z.cols()) {
      throw std::invalid_argument("cross_entropy: label " + std::to_string(y) + " outside 0.." +
                                  std::to_string(z.cols() - 1));
    }
    auto row = z.row(r);
    double mx = *std::max_element(row.begin(), row.end());
    double lse = 0.0;
    for (double v : row) lse += std::exp(v - mx);
    loss += mx + std::log(lse) - row[y];
    ++count;
  }
  if (count > 0) loss /= static_cast<double>(count);
  return t.record(Matrix<double>(1, 1, loss), nullptr, [logits, q, lab, count, ignore_label](Tape& tape, Var self) {
    if (count == 0) return;
    const double g = tape.grad(self)(0, 0) / static_cast<double>(count);
    auto& gz = tape.grad(logits);
    for (std::size_t r = 0; r < q->rows(); ++r) {
      const std::int32_t y = (*lab)[r];
      if (y == ignore_label) continue;
      for (std::size_t c = 0; c < q->cols(); ++c) gz(r, c) += g * ((*q)(r, c) - (static_cast<std::size_t>(y) == c ? 1.0 : 0.0));
    }
  });
}

// ---------------------------------------------------------------------------
// Optimization

// lr(t) = base_lr * (1 - t / max_iter)^power, clamped at 0 beyond max_iter.
struct PolySchedule {
  double base_lr = 0.1;
  double power = 0.9;
  std::size_t max_iter = 1;

  double lr(std::size_t t) const {
    if (max_iter == 0 || t >= max_iter) return 0.0;
    return base_lr * std::pow(1.0 - static_cast<double>(t) / static_cast<double>(max_iter), power);
  }
};

// buffer <- momentum * buffer + grad; value <- value - lr * buffer.
inline void sgd_step(std::span<Parameter* const> params, double lr, double momentum) {
  for (Parameter* p : params) {
    auto& v = p->value.storage();
    auto& g = p->grad.storage();
    auto& b = p->momentum.storage();
    for (std::size_t i = 0; i < v.size(); ++i) {
      b[i] = momentum * b[i] + g[i];
      v[i] -= lr * b[i];
    }
  }
}

inline void zero_grad(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

}  // namespace mink::ag
