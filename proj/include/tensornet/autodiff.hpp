#pragma once

// Reverse-mode differentiation over an explicit tape of array primitives.
//
// Every value on the tape is a dense row-major matrix (rows x cols). Primitives
// record their output together with a closure that maps the output adjoint to
// input adjoints. backward() walks the tape once in reverse recording order.
// The tape is templated on the scalar so the same graph runs in float, double
// or Dual<double> (forward-over-reverse).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tensornet/dual.hpp"
#include "tensornet/error.hpp"
#include "tensornet/gemm.hpp"

namespace tensornet {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const noexcept { return rows * cols; }
  bool operator==(const Shape &) const = default;
};

inline std::string to_string(const Shape &s) {
  return std::to_string(s.rows) + "x" + std::to_string(s.cols);
}

struct ParamEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
};

// Named trainable arrays with gradient slots. Insertion order is preserved and
// defines the canonical parameter order (serialization, gradient norms).
class ParamStore {
public:
  std::uint64_t rng_seed = 0;

  std::size_t add(std::string name, Shape shape, std::vector<double> values) {
    if (values.size() != shape.size())
      throw Error("ParamStore: '" + name + "' has " + std::to_string(values.size()) +
                  " values for shape " + to_string(shape));
    if (index_.count(name))
      throw Error("ParamStore: duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), shape, std::move(values), std::vector<double>(shape.size())});
    return entries_.size() - 1;
  }

  bool contains(const std::string &name) const { return index_.count(name) != 0; }

  std::size_t index(const std::string &name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw Error("ParamStore: no parameter named '" + name + "'");
    return it->second;
  }

  ParamEntry &at(std::size_t i) { return entries_.at(i); }
  const ParamEntry &at(std::size_t i) const { return entries_.at(i); }
  ParamEntry &at(const std::string &name) { return entries_[index(name)]; }
  const ParamEntry &at(const std::string &name) const { return entries_[index(name)]; }

  std::size_t size() const noexcept { return entries_.size(); }
  std::span<ParamEntry> entries() noexcept { return entries_; }
  std::span<const ParamEntry> entries() const noexcept { return entries_; }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto &e : entries_)
      n += e.values.size();
    return n;
  }

  void zero_grad() {
    for (auto &e : entries_)
      std::fill(e.grad.begin(), e.grad.end(), 0.0);
  }

private:
  std::vector<ParamEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

enum class NodeKind { op, param, input, constant, detached };

template <class T> class Tape;

// Handle to a tape node.
template <class T> struct Var {
  Tape<T> *tape = nullptr;
  int id = -1;

  const std::vector<T> &value() const { return tape->value(*this); }
  Shape shape() const { return tape->shape(*this); }
  std::size_t rows() const { return shape().rows; }
  std::size_t cols() const { return shape().cols; }
  bool valid() const noexcept { return tape != nullptr && id >= 0; }
};

template <class T> class Tape {
public:
  using Backward = std::function<void(Tape &, const std::vector<T> &)>;

  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    NodeKind kind = NodeKind::op;
    std::size_t param = 0;
    std::string label;
    Backward backward;
  };

  Tape() = default;
  Tape(const Tape &) = delete;
  Tape &operator=(const Tape &) = delete;

  Var<T> param(const ParamStore &store, std::size_t index, bool requires_grad = true) {
    const ParamEntry &e = store.at(index);
    std::vector<T> v(e.values.size());
    for (std::size_t k = 0; k < v.size(); ++k)
      v[k] = T(e.values[k]);
    Var<T> out = leaf(e.shape, std::move(v), NodeKind::param, e.name, requires_grad);
    nodes_[out.id].param = index;
    return out;
  }

  Var<T> param(const ParamStore &store, const std::string &name, bool requires_grad = true) {
    return param(store, store.index(name), requires_grad);
  }

  // Differentiable input (e.g. positions).
  Var<T> input(Shape shape, std::vector<T> values, std::string label = "input") {
    return leaf(shape, std::move(values), NodeKind::input, std::move(label), true);
  }

  // Structural constant: data that does not depend on any differentiable value.
  Var<T> constant(Shape shape, std::vector<T> values, std::string label = "constant") {
    return leaf(shape, std::move(values), NodeKind::constant, std::move(label), false);
  }

  // Copies a value off the graph. Gradients stop here; audit() reports it.
  Var<T> detach(Var<T> v, std::string label = "detached") {
    check(v);
    return leaf(nodes_[v.id].shape, nodes_[v.id].value, NodeKind::detached, std::move(label), false);
  }

  template <class... Vars>
  Var<T> record(Shape shape, std::vector<T> value, Backward backward, const char *op,
                const Vars &...inputs) {
    (check(inputs), ...);
    if (value.size() != shape.size())
      throw Error(std::string("tape: primitive '") + op + "' produced " +
                  std::to_string(value.size()) + " values for shape " + to_string(shape));
    Node n;
    n.shape = shape;
    n.value = std::move(value);
    n.requires_grad = (false || ... || nodes_[inputs.id].requires_grad);
    n.kind = NodeKind::op;
    n.label = op;
    if (n.requires_grad)
      n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
  }

  const std::vector<T> &value(Var<T> v) const {
    check(v);
    return nodes_[v.id].value;
  }
  Shape shape(Var<T> v) const {
    check(v);
    return nodes_[v.id].shape;
  }
  bool requires_grad(Var<T> v) const {
    check(v);
    return nodes_[v.id].requires_grad;
  }
  const Node &node(int id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Adjoint accumulator of an input; allocated on first use.
  std::vector<T> &grad(Var<T> v) {
    Node &n = nodes_[v.id];
    if (n.grad.size() != n.value.size())
      n.grad.assign(n.value.size(), T(0));
    return n.grad;
  }

  // Gradient of a node after backward(); zeros when nothing flowed into it.
  std::vector<T> gradient(Var<T> v) const {
    check(v);
    const Node &n = nodes_[v.id];
    if (n.grad.size() != n.value.size())
      return std::vector<T>(n.value.size(), T(0));
    return n.grad;
  }

  struct Seed {
    Var<T> var;
    std::vector<T> grad;
  };

  void backward(Var<T> scalar) {
    check(scalar);
    if (nodes_[scalar.id].shape.size() != 1)
      throw Error("backward: seed must be a recorded scalar, got shape " +
                  to_string(nodes_[scalar.id].shape));
    std::vector<Seed> seeds;
    seeds.push_back({scalar, {T(1)}});
    backward(seeds);
  }

  void backward(std::span<const Seed> seeds) {
    for (auto &n : nodes_)
      n.grad.clear();
    int last = -1;
    for (const Seed &s : seeds) {
      check(s.var);
      if (s.grad.size() != nodes_[s.var.id].value.size())
        throw Error("backward: seed gradient size mismatch");
      auto &g = grad(s.var);
      for (std::size_t k = 0; k < g.size(); ++k)
        g[k] += s.grad[k];
      last = std::max(last, s.var.id);
    }
    for (int id = last; id >= 0; --id) {
      Node &n = nodes_[id];
      if (!n.requires_grad || !n.backward || n.grad.size() != n.value.size())
        continue;
      n.backward(*this, n.grad);
    }
  }

  // f(param_index, gradient span) for every parameter leaf that received one.
  template <class F> void for_each_param_grad(F &&f) const {
    for (const Node &n : nodes_)
      if (n.kind == NodeKind::param && n.requires_grad && n.grad.size() == n.value.size())
        f(n.param, std::span<const T>(n.grad));
  }

  // Labels of values that were taken off the graph. Empty for a forward pass
  // built only from taped primitives.
  std::vector<std::string> audit() const {
    std::vector<std::string> out;
    for (const Node &n : nodes_)
      if (n.kind == NodeKind::detached)
        out.push_back(n.label);
    return out;
  }

private:
  Var<T> leaf(Shape shape, std::vector<T> values, NodeKind kind, std::string label, bool rg) {
    if (values.size() != shape.size())
      throw Error("tape: leaf '" + label + "' has " + std::to_string(values.size()) +
                  " values for shape " + to_string(shape));
    Node n;
    n.shape = shape;
    n.value = std::move(values);
    n.kind = kind;
    n.label = std::move(label);
    n.requires_grad = rg;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
  }

  void check(Var<T> v) const {
    if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw Error("tape: variable is not recorded on this tape");
  }

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Generic primitives
// ---------------------------------------------------------------------------

namespace detail {
template <class T> void require_shape(Var<T> v, Shape s, const char *op, const char *what) {
  if (v.shape() != s)
    throw Error(std::string(op) + ": " + what + " has shape " + to_string(v.shape()) +
                ", expected " + to_string(s));
}
template <class T> bool wants(Tape<T> &t, Var<T> v) { return t.requires_grad(v); }

template <class T> std::vector<T> transposed(const std::vector<T> &a, std::size_t rows, std::size_t cols) {
  std::vector<T> t(a.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      t[c * rows + r] = a[r * cols + c];
  return t;
}
} // namespace detail

// y = x W^T (+ b); x: rows x in, W: out x in, b: 1 x out.
template <class T> Var<T> linear(Var<T> x, Var<T> w, const Var<T> *b = nullptr) {
  Tape<T> &t = *x.tape;
  const std::size_t rows = x.rows(), in = x.cols(), out = w.rows();
  if (w.cols() != in)
    throw Error("linear: weight is " + to_string(w.shape()) + " but input has " +
                std::to_string(in) + " columns");
  if (b)
    detail::require_shape(*b, Shape{1, out}, "linear", "bias");
  const auto &xv = x.value();
  const auto &wv = w.value();
  std::vector<T> y(rows * out);
  if (b)
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(b->value().begin(), b->value().end(), y.begin() + r * out);
  const std::vector<T> wt = detail::transposed(wv, out, in);
  detail::gemm_nn(rows, out, in, xv.data(), wt.data(), y.data());
  auto backward = [x, w, bias = b ? *b : Var<T>{}, rows, in, out](Tape<T> &t, const std::vector<T> &g) {
    const auto &xv = x.value();
    const auto &wv = w.value();
    if (t.requires_grad(x))
      detail::gemm_nn(rows, in, out, g.data(), wv.data(), t.grad(x).data());
    if (t.requires_grad(w)) {
      const std::vector<T> gt = detail::transposed(g, rows, out);
      detail::gemm_nn(out, in, rows, gt.data(), xv.data(), t.grad(w).data());
    }
    if (bias.valid() && t.requires_grad(bias)) {
      auto &gb = t.grad(bias);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out; ++o)
          gb[o] += g[r * out + o];
    }
  };
  if (b)
    return t.record(Shape{rows, out}, std::move(y), backward, "linear", x, w, *b);
  return t.record(Shape{rows, out}, std::move(y), backward, "linear", x, w);
}

template <class T> Var<T> linear(Var<T> x, Var<T> w, Var<T> b) { return linear(x, w, &b); }

template <class T> Var<T> silu(Var<T> x) {
  using std::exp;
  Tape<T> &t = *x.tape;
  const auto &xv = x.value();
  std::vector<T> y(xv.size());
  std::vector<T> dy(xv.size());
  for (std::size_t k = 0; k < xv.size(); ++k) {
    const T s = T(1) / (T(1) + exp(-xv[k]));
    y[k] = xv[k] * s;
    dy[k] = s * (T(1) + xv[k] * (T(1) - s));
  }
  return t.record(
      x.shape(), std::move(y),
      [x, dy = std::move(dy)](Tape<T> &t, const std::vector<T> &g) {
        auto &gx = t.grad(x);
        for (std::size_t k = 0; k < g.size(); ++k)
          gx[k] += g[k] * dy[k];
      },
      "silu", x);
}

// Row-wise (x - mean) / sqrt(var + eps) * gamma + beta with the biased variance.
template <class T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, double eps = 1e-5) {
  using std::sqrt;
  Tape<T> &t = *x.tape;
  const std::size_t rows = x.rows(), n = x.cols();
  if (n == 0)
    throw Error("layer_norm: need at least one column");
  detail::require_shape(gamma, Shape{1, n}, "layer_norm", "gamma");
  detail::require_shape(beta, Shape{1, n}, "layer_norm", "beta");
  const auto &xv = x.value();
  const auto &gv = gamma.value();
  const auto &bv = beta.value();
  std::vector<T> y(rows * n), xhat(rows * n), inv_std(rows);
  const T tn = T(static_cast<double>(n));
  for (std::size_t r = 0; r < rows; ++r) {
    T mean{};
    for (std::size_t i = 0; i < n; ++i)
      mean += xv[r * n + i];
    mean /= tn;
    T var{};
    for (std::size_t i = 0; i < n; ++i) {
      const T d = xv[r * n + i] - mean;
      var += d * d;
    }
    var /= tn;
    inv_std[r] = T(1) / sqrt(var + T(eps));
    for (std::size_t i = 0; i < n; ++i) {
      xhat[r * n + i] = (xv[r * n + i] - mean) * inv_std[r];
      y[r * n + i] = xhat[r * n + i] * gv[i] + bv[i];
    }
  }
  return t.record(
      x.shape(), std::move(y),
      [x, gamma, beta, rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<T> &t, const std::vector<T> &g) {
        const auto &gv = gamma.value();
        const T tn = T(static_cast<double>(n));
        if (t.requires_grad(gamma)) {
          auto &gg = t.grad(gamma);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < n; ++i)
              gg[i] += g[r * n + i] * xhat[r * n + i];
        }
        if (t.requires_grad(beta)) {
          auto &gb = t.grad(beta);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < n; ++i)
              gb[i] += g[r * n + i];
        }
        if (t.requires_grad(x)) {
          auto &gx = t.grad(x);
          for (std::size_t r = 0; r < rows; ++r) {
            // dx = inv_std * (gh - mean(gh) - xhat * mean(gh * xhat)), gh = g * gamma
            T m1{}, m2{};
            for (std::size_t i = 0; i < n; ++i) {
              const T gh = g[r * n + i] * gv[i];
              m1 += gh;
              m2 += gh * xhat[r * n + i];
            }
            m1 /= tn;
            m2 /= tn;
            for (std::size_t i = 0; i < n; ++i) {
              const T gh = g[r * n + i] * gv[i];
              gx[r * n + i] += inv_std[r] * (gh - m1 - xhat[r * n + i] * m2);
            }
          }
        }
      },
      "layer_norm", x, gamma, beta);
}

template <class T> Var<T> add(Var<T> a, Var<T> b) {
  detail::require_shape(b, a.shape(), "add", "rhs");
  const auto &av = a.value(), &bv = b.value();
  std::vector<T> y(av.size());
  for (std::size_t k = 0; k < y.size(); ++k)
    y[k] = av[k] + bv[k];
  return a.tape->record(
      a.shape(), std::move(y),
      [a, b](Tape<T> &t, const std::vector<T> &g) {
        for (Var<T> v : {a, b})
          if (t.requires_grad(v)) {
            auto &gv = t.grad(v);
            for (std::size_t k = 0; k < g.size(); ++k)
              gv[k] += g[k];
          }
      },
      "add", a, b);
}

template <class T> Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_shape(b, a.shape(), "sub", "rhs");
  const auto &av = a.value(), &bv = b.value();
  std::vector<T> y(av.size());
  for (std::size_t k = 0; k < y.size(); ++k)
    y[k] = av[k] - bv[k];
  return a.tape->record(
      a.shape(), std::move(y),
      [a, b](Tape<T> &t, const std::vector<T> &g) {
        if (t.requires_grad(a)) {
          auto &ga = t.grad(a);
          for (std::size_t k = 0; k < g.size(); ++k)
            ga[k] += g[k];
        }
        if (t.requires_grad(b)) {
          auto &gb = t.grad(b);
          for (std::size_t k = 0; k < g.size(); ++k)
            gb[k] -= g[k];
        }
      },
      "sub", a, b);
}

// Elementwise product.
template <class T> Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_shape(b, a.shape(), "mul", "rhs");
  const auto &av = a.value(), &bv = b.value();
  std::vector<T> y(av.size());
  for (std::size_t k = 0; k < y.size(); ++k)
    y[k] = av[k] * bv[k];
  return a.tape->record(
      a.shape(), std::move(y),
      [a, b](Tape<T> &t, const std::vector<T> &g) {
        const auto &av = a.value(), &bv = b.value();
        if (t.requires_grad(a)) {
          auto &ga = t.grad(a);
          for (std::size_t k = 0; k < g.size(); ++k)
            ga[k] += g[k] * bv[k];
        }
        if (t.requires_grad(b)) {
          auto &gb = t.grad(b);
          for (std::size_t k = 0; k < g.size(); ++k)
            gb[k] += g[k] * av[k];
        }
      },
      "mul", a, b);
}

template <class T> Var<T> scale(Var<T> a, double s) {
  const auto &av = a.value();
  std::vector<T> y(av.size());
  for (std::size_t k = 0; k < y.size(); ++k)
    y[k] = av[k] * T(s);
  return a.tape->record(
      a.shape(), std::move(y),
      [a, s](Tape<T> &t, const std::vector<T> &g) {
        auto &ga = t.grad(a);
        for (std::size_t k = 0; k < g.size(); ++k)
          ga[k] += g[k] * T(s);
      },
      "scale", a);
}

template <class T> Var<T> add_scalar(Var<T> a, double s) {
  const auto &av = a.value();
  std::vector<T> y(av.size());
  for (std::size_t k = 0; k < y.size(); ++k)
    y[k] = av[k] + T(s);
  return a.tape->record(
      a.shape(), std::move(y),
      [a](Tape<T> &t, const std::vector<T> &g) {
        auto &ga = t.grad(a);
        for (std::size_t k = 0; k < g.size(); ++k)
          ga[k] += g[k];
      },
      "add_scalar", a);
}

template <class T> Var<T> reciprocal(Var<T> a) {
  const auto &av = a.value();
  std::vector<T> y(av.size());
  for (std::size_t k = 0; k < y.size(); ++k)
    y[k] = T(1) / av[k];
  return a.tape->record(
      a.shape(), y,
      [a, y](Tape<T> &t, const std::vector<T> &g) {
        auto &ga = t.grad(a);
        for (std::size_t k = 0; k < g.size(); ++k)
          ga[k] -= g[k] * y[k] * y[k];
      },
      "reciprocal", a);
}

template <class T> Var<T> square(Var<T> a) { return mul(a, a); }

// Horizontal concatenation of equal-row inputs.
template <class T> Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty())
    throw Error("concat_cols: no inputs");
  Tape<T> &t = *parts[0].tape;
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const auto &p : parts) {
    if (p.rows() != rows)
      throw Error("concat_cols: row mismatch");
    cols += p.cols();
  }
  std::vector<T> y(rows * cols);
  std::size_t off = 0;
  for (const auto &p : parts) {
    const auto &pv = p.value();
    const std::size_t pc = p.cols();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < pc; ++c)
        y[r * cols + off + c] = pv[r * pc + c];
    off += pc;
  }
  std::vector<Var<T>> ps(parts.begin(), parts.end());
  auto backward = [ps, rows, cols](Tape<T> &t, const std::vector<T> &g) {
    std::size_t off = 0;
    for (const auto &p : ps) {
      const std::size_t pc = p.cols();
      if (t.requires_grad(p)) {
        auto &gp = t.grad(p);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < pc; ++c)
            gp[r * pc + c] += g[r * cols + off + c];
      }
      off += pc;
    }
  };
  // Record with the parts as explicit inputs for requires_grad propagation.
  bool rg = false;
  for (const auto &p : ps)
    rg = rg || t.requires_grad(p);
  Var<T> probe = rg ? *std::find_if(ps.begin(), ps.end(), [&](const Var<T> &p) { return t.requires_grad(p); })
                    : ps[0];
  return t.record(Shape{rows, cols}, std::move(y), backward, "concat_cols", probe);
}

template <class T> Var<T> concat_cols(std::initializer_list<Var<T>> parts) {
  std::vector<Var<T>> v(parts);
  return concat_cols(std::span<const Var<T>>(v));
}

template <class T> Var<T> slice_cols(Var<T> x, std::size_t start, std::size_t len) {
  const std::size_t rows = x.rows(), cols = x.cols();
  if (start + len > cols)
    throw Error("slice_cols: range exceeds " + std::to_string(cols) + " columns");
  const auto &xv = x.value();
  std::vector<T> y(rows * len);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < len; ++c)
      y[r * len + c] = xv[r * cols + start + c];
  return x.tape->record(
      Shape{rows, len}, std::move(y),
      [x, rows, cols, start, len](Tape<T> &t, const std::vector<T> &g) {
        auto &gx = t.grad(x);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < len; ++c)
            gx[r * cols + start + c] += g[r * len + c];
      },
      "slice_cols", x);
}

// out[k] = x[index[k]]
template <class T> Var<T> gather_rows(Var<T> x, std::vector<std::size_t> index) {
  const std::size_t cols = x.cols();
  const auto &xv = x.value();
  std::vector<T> y(index.size() * cols);
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= x.rows())
      throw Error("gather_rows: index out of range");
    for (std::size_t c = 0; c < cols; ++c)
      y[k * cols + c] = xv[index[k] * cols + c];
  }
  const std::size_t n = index.size();
  return x.tape->record(
      Shape{n, cols}, std::move(y),
      [x, cols, index = std::move(index)](Tape<T> &t, const std::vector<T> &g) {
        auto &gx = t.grad(x);
        for (std::size_t k = 0; k < index.size(); ++k)
          for (std::size_t c = 0; c < cols; ++c)
            gx[index[k] * cols + c] += g[k * cols + c];
      },
      "gather_rows", x);
}

// out[index[k]] += x[k]; accumulation follows row order of x.
template <class T> Var<T> scatter_add_rows(Var<T> x, std::vector<std::size_t> index, std::size_t out_rows) {
  const std::size_t cols = x.cols();
  if (index.size() != x.rows())
    throw Error("scatter_add_rows: index length does not match rows");
  const auto &xv = x.value();
  std::vector<T> y(out_rows * cols);
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= out_rows)
      throw Error("scatter_add_rows: index out of range");
    for (std::size_t c = 0; c < cols; ++c)
      y[index[k] * cols + c] += xv[k * cols + c];
  }
  return x.tape->record(
      Shape{out_rows, cols}, std::move(y),
      [x, cols, index = std::move(index)](Tape<T> &t, const std::vector<T> &g) {
        auto &gx = t.grad(x);
        for (std::size_t k = 0; k < index.size(); ++k)
          for (std::size_t c = 0; c < cols; ++c)
            gx[k * cols + c] += g[index[k] * cols + c];
      },
      "scatter_add_rows", x);
}

template <class T> Var<T> sum_all(Var<T> x) {
  const auto &xv = x.value();
  T s{};
  for (const T &v : xv)
    s += v;
  return x.tape->record(
      Shape{1, 1}, std::vector<T>{s},
      [x](Tape<T> &t, const std::vector<T> &g) {
        auto &gx = t.grad(x);
        for (auto &v : gx)
          v += g[0];
      },
      "sum_all", x);
}

// Scales each block of `block` consecutive columns by one factor:
// y[r, c*block + k] = x[r, c*block + k] * f[r, c].
template <class T> Var<T> scale_blocks(Var<T> x, Var<T> f, std::size_t block) {
  const std::size_t rows = x.rows(), nb = f.cols();
  if (f.rows() != rows || x.cols() != nb * block)
    throw Error("scale_blocks: x is " + to_string(x.shape()) + ", factors " +
                to_string(f.shape()) + ", block " + std::to_string(block));
  const auto &xv = x.value(), &fv = f.value();
  std::vector<T> y(xv.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < nb; ++c) {
      const T s = fv[r * nb + c];
      const std::size_t base = (r * nb + c) * block;
      for (std::size_t k = 0; k < block; ++k)
        y[base + k] = xv[base + k] * s;
    }
  return x.tape->record(
      x.shape(), std::move(y),
      [x, f, rows, nb, block](Tape<T> &t, const std::vector<T> &g) {
        const auto &xv = x.value(), &fv = f.value();
        const bool gx_needed = t.requires_grad(x), gf_needed = t.requires_grad(f);
        std::vector<T> *gx = gx_needed ? &t.grad(x) : nullptr;
        std::vector<T> *gf = gf_needed ? &t.grad(f) : nullptr;
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < nb; ++c) {
            const std::size_t base = (r * nb + c) * block;
            const T s = fv[r * nb + c];
            T acc{};
            for (std::size_t k = 0; k < block; ++k) {
              if (gx)
                (*gx)[base + k] += g[base + k] * s;
              acc += g[base + k] * xv[base + k];
            }
            if (gf)
              (*gf)[r * nb + c] += acc;
          }
      },
      "scale_blocks", x, f);
}

// Mean of squares of all entries of x, as a 1x1 value.
template <class T> Var<T> mean_square(Var<T> x) {
  const double n = static_cast<double>(x.value().size());
  if (n == 0)
    throw Error("mean_square: empty input");
  return scale(sum_all(square(x)), 1.0 / n);
}

// ---------------------------------------------------------------------------
// Multilayer perceptron
// ---------------------------------------------------------------------------

template <class T> struct LinearRef {
  Var<T> weight;
  Var<T> bias; // invalid when the layer has no bias
};

// Alternating linear / SiLU with no activation after the final layer.
template <class T> Var<T> mlp(Var<T> x, std::span<const LinearRef<T>> layers) {
  if (layers.empty())
    throw Error("mlp: no layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto &layer = layers[l];
    x = layer.bias.valid() ? linear(x, layer.weight, layer.bias) : linear(x, layer.weight);
    if (l + 1 < layers.size())
      x = silu(x);
  }
  return x;
}

} // namespace tensornet
