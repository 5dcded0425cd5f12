#pragma once

// Tape-based reverse-mode differentiation over Tensor<T>. Every op records
// its output value plus a closure that scatters the output gradient into its
// inputs. Ops are coarse (a whole linear layer, a whole convolution) so the
// tape stays short.

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <unordered_map>

#include <Eigen/Core>

#include "tba/tensor.hpp"

namespace tba {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor<T>& value() const { return tape->value(id); }
  T item() const { return tape->value(id)[0]; }
  std::size_t size() const { return value().size(); }
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> v) { return push(std::move(v), false, nullptr); }
  Var<T> variable(Tensor<T> v) { return push(std::move(v), true, nullptr); }

  // Binds a parameter (once per tape); its gradient lands in param.grad
  // after backward().
  Var<T> param(Parameter<T>& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return Var<T>{this, it->second};
    Var<T> v = push(p.value, true, nullptr);
    nodes_[v.id].param = &p;
    bound_.emplace(&p, v.id);
    return v;
  }

  Var<T> push(Tensor<T> value, bool needs_grad, Backward bw) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.backward = needs_grad ? std::move(bw) : nullptr;
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<T>& value(int id) const { return nodes_[id].value; }
  Tensor<T>& mutable_value(int id) { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  bool needs_grad(const Var<T>& v) const { return v.valid() && nodes_[v.id].needs_grad; }

  // Gradient buffer of a node, allocated on first touch.
  Tensor<T>& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  bool has_grad(int id) const { return nodes_[id].grad.size() == nodes_[id].value.size(); }

  // Gradient with respect to a node after backward(); zeros if never reached.
  Tensor<T> gradient(const Var<T>& v) {
    if (!has_grad(v.id)) return Tensor<T>(nodes_[v.id].value.shape());
    return nodes_[v.id].grad;
  }

  void backward(const Var<T>& root) {
    if (root.value().size() != 1) throw std::invalid_argument("backward: root must be scalar");
    seed(root, Tensor<T>::scalar(T(1)));
    run_backward();
  }

  // Seeds several nodes with explicit output gradients, then propagates.
  void seed(const Var<T>& v, const Tensor<T>& g) {
    Tensor<T>& dst = grad(v.id);
    if (dst.size() != g.size()) throw std::invalid_argument("seed: gradient shape mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  void run_backward() {
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.needs_grad || !has_grad(id)) continue;
      if (n.backward) n.backward(*this, id);
      if (n.param != nullptr) {
        Tensor<T>& pg = n.param->grad;
        for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    Parameter<T>* param = nullptr;
    Backward backward;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, int> bound_;
};

namespace ad {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
Eigen::Map<const ColVec<T>> vec(const Tensor<T>& t) {
  return Eigen::Map<const ColVec<T>>(t.data(), static_cast<Eigen::Index>(t.size()));
}
template <typename T>
Eigen::Map<ColVec<T>> vec(Tensor<T>& t) {
  return Eigen::Map<ColVec<T>>(t.data(), static_cast<Eigen::Index>(t.size()));
}
template <typename T>
Eigen::Map<const RowMat<T>> mat(const Tensor<T>& t, int rows, int cols) {
  return Eigen::Map<const RowMat<T>>(t.data(), rows, cols);
}
template <typename T>
Eigen::Map<RowMat<T>> mat(Tensor<T>& t, int rows, int cols) {
  return Eigen::Map<RowMat<T>>(t.data(), rows, cols);
}

inline void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

template <typename T>
bool any_grad(const Var<T>& a) {
  return a.tape->needs_grad(a);
}
template <typename T, typename... Rest>
bool any_grad(const Var<T>& a, const Rest&... rest) {
  return a.tape->needs_grad(a) || any_grad(rest...);
}

// Elementwise map with derivative expressed in terms of (input, output).
template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& x, F f, DF df) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const int xi = x.id;
  return tape.push(std::move(out), any_grad(x), [xi, df](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& xv = t.value(xi);
    const Tensor<T>& yv = t.value(self);
    Tensor<T>& gx = t.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T softplus_scalar(T x) {
  // ln(1 + e^x), stable for large |x|
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary(x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}
template <typename T>
Var<T> tanh(const Var<T>& x) {
  return unary(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}
template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary(x, [](T v) { return v > T(0) ? v : T(0); },
               [](T v, T) { return v > T(0) ? T(1) : T(0); });
}
template <typename T>
Var<T> softplus(const Var<T>& x) {
  return unary(x, [](T v) { return softplus_scalar(v); },
               [](T v, T) { return sigmoid_scalar(v); });
}
template <typename T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return unary(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}
template <typename T>
Var<T> scale(const Var<T>& x, T c) {
  return unary(x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require(a.size() == b.size(), "add: size mismatch");
  Tape<T>& tape = *a.tape;
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const int ai = a.id, bi = b.id;
  return tape.push(std::move(out), any_grad(a, b), [ai, bi](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    for (int id : {ai, bi}) {
      if (!t.needs_grad(id)) continue;
      Tensor<T>& gi = t.grad(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return add(a, scale(b, T(-1)));
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require(a.size() == b.size(), "mul: size mismatch");
  Tape<T>& tape = *a.tape;
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const int ai = a.id, bi = b.id;
  return tape.push(std::move(out), any_grad(a, b), [ai, bi](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    if (t.needs_grad(ai)) {
      Tensor<T>& ga = t.grad(ai);
      const Tensor<T>& bv = t.value(bi);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(bi)) {
      Tensor<T>& gb = t.grad(bi);
      const Tensor<T>& av = t.value(ai);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

// 1 - x
template <typename T>
Var<T> one_minus(const Var<T>& x) {
  return unary(x, [](T v) { return T(1) - v; }, [](T, T) { return T(-1); });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  Tape<T>& tape = *x.tape;
  T s = 0;
  for (T v : x.value().values()) s += v;
  const int xi = x.id;
  return tape.push(Tensor<T>::scalar(s), any_grad(x), [xi](Tape<T>& t, int self) {
    const T g = t.grad(self)[0];
    Tensor<T>& gx = t.grad(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

template <typename T>
Var<T> slice(const Var<T>& x, int offset, int length) {
  require(offset >= 0 && length >= 0 && offset + length <= static_cast<int>(x.size()),
          "slice: out of range");
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = x.value();
  Tensor<T> out({length});
  std::copy(xv.data() + offset, xv.data() + offset + length, out.data());
  const int xi = x.id;
  return tape.push(std::move(out), any_grad(x), [xi, offset](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[offset + i] += g[i];
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, std::vector<int> shape) {
  Tape<T>& tape = *x.tape;
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const int xi = x.id;
  return tape.push(std::move(out), any_grad(x), [xi](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

// y = W x + b, W stored [out, in].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const int out_dim = w.value().dim(0), in_dim = w.value().dim(1);
  require(static_cast<int>(x.size()) == in_dim, "linear: input size mismatch");
  require(static_cast<int>(b.size()) == out_dim, "linear: bias size mismatch");
  Tape<T>& tape = *x.tape;
  Tensor<T> out({out_dim});
  vec(out).noalias() = mat(w.value(), out_dim, in_dim) * vec(x.value()) + vec(b.value());
  const int xi = x.id, wi = w.id, bi = b.id;
  return tape.push(std::move(out), any_grad(x, w, b),
                   [xi, wi, bi, out_dim, in_dim](Tape<T>& t, int self) {
                     const auto g = vec(t.grad(self));
                     if (t.needs_grad(xi)) {
                       vec(t.grad(xi)).noalias() +=
                           mat(t.value(wi), out_dim, in_dim).transpose() * g;
                     }
                     if (t.needs_grad(wi)) {
                       mat(t.grad(wi), out_dim, in_dim).noalias() +=
                           g * vec(t.value(xi)).transpose();
                     }
                     if (t.needs_grad(bi)) vec(t.grad(bi)) += g;
                   });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "concat: no inputs");
  Tape<T>& tape = *parts.front().tape;
  int n = 0;
  bool g = false;
  std::vector<int> ids, offsets;
  for (const auto& p : parts) {
    ids.push_back(p.id);
    offsets.push_back(n);
    n += static_cast<int>(p.size());
    g = g || tape.needs_grad(p);
  }
  Tensor<T> out({n});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor<T>& pv = parts[k].value();
    std::copy(pv.data(), pv.data() + pv.size(), out.data() + offsets[k]);
  }
  return tape.push(std::move(out), g, [ids, offsets](Tape<T>& t, int self) {
    const Tensor<T>& gy = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.needs_grad(ids[k])) continue;
      Tensor<T>& gk = t.grad(ids[k]);
      for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += gy[offsets[k] + i];
    }
  });
}

}  // namespace ad
}  // namespace tba
