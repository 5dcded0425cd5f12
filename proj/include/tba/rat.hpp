#pragma once

// Tracker array with reprioritized attentive tracking: content-based reads
// from the feature memory, a shared recurrent update, erase/add writes back
// to the memory, output heads, confidence-ranked update order and the
// thresholded early stop.

#include <algorithm>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include "tba/config.hpp"
#include "tba/nn.hpp"

namespace tba {

template <typename T>
struct TrackerState {
  Tensor<T> h;
  T prev_confidence = T(0);
};

template <typename T>
std::vector<TrackerState<T>> initial_states(const ModelConfig& cfg) {
  return std::vector<TrackerState<T>>(cfg.trackers, TrackerState<T>{Tensor<T>({cfg.state_size}), T(0)});
}

// A tracker's state while a subsequence is on the tape.
template <typename T>
struct TrackerSlot {
  Var<T> h;
  T confidence = T(0);
};

template <typename T>
struct AttentionKey {
  Var<T> key;   // [S]
  Var<T> beta;  // [1], > 1
};

// Tape handles of one tracker's output tuple. layer / shape are discrete in
// the forward pass.
template <typename T>
struct TrackerOutputVars {
  int tracker = -1;
  Var<T> confidence;  // [1]
  Var<T> layer;       // [K]
  Var<T> pose;        // [4] (sx, sy, tx, ty) or [2] (tx, ty) with fixed scale
  Var<T> shape;       // [U*V]
  Var<T> appearance;  // [D*U*V], channels first
};

// Plain-value output tuple, as consumed by the renderer and evaluation.
template <typename T>
struct TrackerOutput {
  int tracker = -1;
  T confidence = T(0);
  std::vector<T> layer;
  std::vector<T> pose;
  Tensor<T> shape;       // [U, V]
  Tensor<T> appearance;  // [D, U, V]
};

template <typename T>
TrackerOutput<T> values_of(const TrackerOutputVars<T>& o, const ModelConfig& cfg) {
  TrackerOutput<T> out;
  out.tracker = o.tracker;
  out.confidence = o.confidence.item();
  out.layer = o.layer.value().values();
  out.pose = o.pose.value().values();
  out.shape = o.shape.value().reshaped({cfg.patch_h, cfg.patch_w});
  out.appearance = o.appearance.value().reshaped({cfg.channels, cfg.patch_h, cfg.patch_w});
  return out;
}

struct Geometry {
  double scale_x = 1, scale_y = 1;
  double shift_x = 0, shift_y = 0;  // pixels, relative to frame centre
};

// s = 1 + eta * s_hat, t^x = (W / 2) * t_hat^x, t^y = (H / 2) * t_hat^y.
template <typename T>
Geometry pose_to_geometry(const std::vector<T>& pose, const ModelConfig& cfg) {
  Geometry g;
  if (pose.size() == 4) {
    g.scale_x = 1.0 + cfg.eta_x * static_cast<double>(pose[0]);
    g.scale_y = 1.0 + cfg.eta_y * static_cast<double>(pose[1]);
    g.shift_x = 0.5 * cfg.width * static_cast<double>(pose[2]);
    g.shift_y = 0.5 * cfg.height * static_cast<double>(pose[3]);
  } else if (pose.size() == 2) {
    g.shift_x = 0.5 * cfg.width * static_cast<double>(pose[0]);
    g.shift_y = 0.5 * cfg.height * static_cast<double>(pose[1]);
  } else {
    throw std::invalid_argument("pose_to_geometry: pose must have 2 or 4 components");
  }
  return g;
}

namespace ad {

// W = softmax_c(beta * cos(key, memory[c])). Cosine against a zero vector is 0.
template <typename T>
Var<T> attention_weights(const Var<T>& key, const Var<T>& beta, const Var<T>& memory) {
  const Tensor<T>& kv = key.value();
  const Tensor<T>& mv = memory.value();
  require(mv.rank() == 2 && mv.dim(1) == static_cast<int>(kv.size()),
          "attention_weights: memory must be [cells, S] with S = |key|");
  const int cells = mv.dim(0), s = mv.dim(1);
  const T b = beta.item();

  auto cosines = std::make_shared<std::vector<T>>(cells);
  auto cell_norms = std::make_shared<std::vector<T>>(cells);
  const T knorm = vec(kv).norm();
  for (int c = 0; c < cells; ++c) {
    const auto row = mat(mv, cells, s).row(c);
    (*cell_norms)[c] = row.norm();
    const T denom = knorm * (*cell_norms)[c];
    (*cosines)[c] = denom > T(0) ? row.dot(vec(kv).transpose()) / denom : T(0);
  }
  Tensor<T> w({cells});
  T mx = -std::numeric_limits<T>::infinity();
  for (int c = 0; c < cells; ++c) mx = std::max(mx, b * (*cosines)[c]);
  T z = 0;
  for (int c = 0; c < cells; ++c) {
    w[c] = std::exp(b * (*cosines)[c] - mx);
    z += w[c];
  }
  for (int c = 0; c < cells; ++c) w[c] /= z;

  const int ki = key.id, bi = beta.id, mi = memory.id;
  return key.tape->push(
      std::move(w), any_grad(key, beta, memory),
      [ki, bi, mi, cells, s, knorm, cosines, cell_norms](Tape<T>& t, int self) {
        const Tensor<T>& gw = t.grad(self);
        const Tensor<T>& wv = t.value(self);
        const Tensor<T>& kv = t.value(ki);
        const Tensor<T>& mv = t.value(mi);
        const T b = t.value(bi)[0];
        T dot = 0;
        for (int c = 0; c < cells; ++c) dot += wv[c] * gw[c];
        T gbeta = 0;
        const bool gk = t.needs_grad(ki), gm = t.needs_grad(mi);
        for (int c = 0; c < cells; ++c) {
          const T da = wv[c] * (gw[c] - dot);
          gbeta += da * (*cosines)[c];
          const T cn = (*cell_norms)[c];
          if (knorm <= T(0) || cn <= T(0)) continue;
          const T dcos = da * b;
          const T cosv = (*cosines)[c];
          const T* row = mv.data() + static_cast<std::size_t>(c) * s;
          if (gk) {
            T* gkd = t.grad(ki).data();
            for (int j = 0; j < s; ++j) {
              gkd[j] += dcos * (row[j] / (knorm * cn) - cosv * kv[j] / (knorm * knorm));
            }
          }
          if (gm) {
            T* gmd = t.grad(mi).data() + static_cast<std::size_t>(c) * s;
            for (int j = 0; j < s; ++j) {
              gmd[j] += dcos * (kv[j] / (knorm * cn) - cosv * row[j] / (cn * cn));
            }
          }
        }
        if (t.needs_grad(bi)) t.grad(bi)[0] += gbeta;
      });
}

// r = sum_c W[c] * memory[c].
template <typename T>
Var<T> attentive_read(const Var<T>& memory, const Var<T>& weights) {
  const Tensor<T>& mv = memory.value();
  const int cells = mv.dim(0), s = mv.dim(1);
  require(static_cast<int>(weights.size()) == cells, "read: weight/memory mismatch");
  Tensor<T> r({s});
  vec(r).noalias() = mat(mv, cells, s).transpose() * vec(weights.value());
  const int mi = memory.id, wi = weights.id;
  return memory.tape->push(std::move(r), any_grad(memory, weights),
                           [mi, wi, cells, s](Tape<T>& t, int self) {
                             const auto g = vec(t.grad(self));
                             if (t.needs_grad(mi)) {
                               mat(t.grad(mi), cells, s).noalias() +=
                                   vec(t.value(wi)) * g.transpose();
                             }
                             if (t.needs_grad(wi)) {
                               vec(t.grad(wi)).noalias() += mat(t.value(mi), cells, s) * g;
                             }
                           });
}

// memory'[c] = (1 - W[c] * erase) * memory[c] + W[c] * add.
template <typename T>
Var<T> erase_add_write(const Var<T>& memory, const Var<T>& weights, const Var<T>& erase,
                       const Var<T>& add) {
  const Tensor<T>& mv = memory.value();
  const int cells = mv.dim(0), s = mv.dim(1);
  require(static_cast<int>(weights.size()) == cells && static_cast<int>(erase.size()) == s &&
              static_cast<int>(add.size()) == s,
          "write: shape mismatch");
  const Tensor<T>& wv = weights.value();
  const Tensor<T>& ev = erase.value();
  const Tensor<T>& av = add.value();
  Tensor<T> out({cells, s});
  for (int c = 0; c < cells; ++c) {
    for (int j = 0; j < s; ++j) {
      out.at(c, j) = (T(1) - wv[c] * ev[j]) * mv.at(c, j) + wv[c] * av[j];
    }
  }
  const int mi = memory.id, wi = weights.id, ei = erase.id, ai = add.id;
  return memory.tape->push(std::move(out), any_grad(memory, weights, erase, add),
                           [mi, wi, ei, ai, cells, s](Tape<T>& t, int self) {
                             const Tensor<T>& g = t.grad(self);
                             const Tensor<T>& mv = t.value(mi);
                             const Tensor<T>& wv = t.value(wi);
                             const Tensor<T>& ev = t.value(ei);
                             const Tensor<T>& av = t.value(ai);
                             const bool gm = t.needs_grad(mi), gw = t.needs_grad(wi),
                                        ge = t.needs_grad(ei), ga = t.needs_grad(ai);
                             for (int c = 0; c < cells; ++c) {
                               T dw = 0;
                               for (int j = 0; j < s; ++j) {
                                 const T gcj = g.at(c, j);
                                 if (gm) t.grad(mi).at(c, j) += gcj * (T(1) - wv[c] * ev[j]);
                                 dw += gcj * (av[j] - ev[j] * mv.at(c, j));
                                 if (ge) t.grad(ei)[j] -= gcj * wv[c] * mv.at(c, j);
                                 if (ga) t.grad(ai)[j] += gcj * wv[c];
                               }
                               if (gw) t.grad(wi)[c] += dw;
                             }
                           });
}

// Straight-through Gumbel-Softmax: forward is the one-hot argmax of
// softmax((logits + noise) / tau); backward is the softmax Jacobian. With
// hard == false the relaxed sample itself is returned.
template <typename T>
Var<T> gumbel_softmax(const Var<T>& logits, const std::vector<T>& noise, T tau, bool hard = true) {
  const Tensor<T>& lv = logits.value();
  const std::size_t n = lv.size();
  require(noise.size() == n, "gumbel_softmax: noise size mismatch");
  auto soft = std::make_shared<std::vector<T>>(n);
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, (lv[i] + noise[i]) / tau);
  T z = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*soft)[i] = std::exp((lv[i] + noise[i]) / tau - mx);
    z += (*soft)[i];
  }
  for (auto& v : *soft) v /= z;
  Tensor<T> out({static_cast<int>(n)});
  if (hard) {
    const auto best = std::max_element(soft->begin(), soft->end()) - soft->begin();
    out[best] = T(1);
  } else {
    std::copy(soft->begin(), soft->end(), out.data());
  }
  const int li = logits.id;
  return logits.tape->push(std::move(out), any_grad(logits), [li, soft, tau](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    T dot = 0;
    for (std::size_t i = 0; i < g.size(); ++i) dot += (*soft)[i] * g[i];
    Tensor<T>& gl = t.grad(li);
    for (std::size_t i = 0; i < g.size(); ++i) gl[i] += (*soft)[i] * (g[i] - dot) / tau;
  });
}

// Per-element two-class relaxation: soft = sigmoid((logit + logistic noise) / tau),
// forward rounds to {0, 1}.
template <typename T>
Var<T> gumbel_sigmoid(const Var<T>& logits, const std::vector<T>& noise, T tau, bool hard = true) {
  const Tensor<T>& lv = logits.value();
  const std::size_t n = lv.size();
  require(noise.size() == n, "gumbel_sigmoid: noise size mismatch");
  auto soft = std::make_shared<std::vector<T>>(n);
  Tensor<T> out({static_cast<int>(n)});
  for (std::size_t i = 0; i < n; ++i) {
    (*soft)[i] = sigmoid_scalar((lv[i] + noise[i]) / tau);
    out[i] = hard ? ((*soft)[i] > T(0.5) ? T(1) : T(0)) : (*soft)[i];
  }
  const int li = logits.id;
  return logits.tape->push(std::move(out), any_grad(logits), [li, soft, tau](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gl = t.grad(li);
    for (std::size_t i = 0; i < g.size(); ++i) {
      gl[i] += g[i] * (*soft)[i] * (T(1) - (*soft)[i]) / tau;
    }
  });
}

}  // namespace ad

// Noise source for the discrete heads. Deterministic mode feeds zero noise,
// which turns sampling into argmax / thresholding.
template <typename T>
class OutputSampler {
 public:
  explicit OutputSampler(std::uint64_t seed, bool stochastic = true)
      : rng_(seed), stochastic_(stochastic) {}

  std::vector<T> gumbel(std::size_t n) {
    std::vector<T> g(n, T(0));
    if (!stochastic_) return g;
    for (auto& v : g) v = static_cast<T>(-std::log(-std::log(uniform())));
    return g;
  }
  std::vector<T> logistic(std::size_t n) {
    std::vector<T> g(n, T(0));
    if (!stochastic_) return g;
    for (auto& v : g) {
      const double u = uniform();
      v = static_cast<T>(std::log(u) - std::log1p(-u));
    }
    return g;
  }
  bool stochastic() const { return stochastic_; }

 private:
  double uniform() {
    std::uniform_real_distribution<double> d(1e-12, 1.0 - 1e-12);
    return d(rng_);
  }
  std::mt19937_64 rng_;
  bool stochastic_;
};

// priority[i] is the 1-based rank of tracker i by previous confidence
// (descending, ties to the lower index); order[j] is the tracker updated in
// iteration j.
struct Priority {
  std::vector<int> priority;
  std::vector<int> order;
};

template <typename T>
Priority reprioritize(const std::vector<T>& prev_confidences, bool enabled = true) {
  const int n = static_cast<int>(prev_confidences.size());
  Priority p;
  p.order.resize(n);
  std::iota(p.order.begin(), p.order.end(), 0);
  if (enabled) {
    std::stable_sort(p.order.begin(), p.order.end(), [&](int a, int b) {
      return prev_confidences[a] > prev_confidences[b];
    });
  }
  p.priority.resize(n);
  for (int j = 0; j < n; ++j) p.priority[p.order[j]] = j + 1;
  return p;
}

template <typename T>
struct AttentionTraceEntry {
  int tracker = -1;
  int priority = 0;          // 1-based iteration index
  Tensor<T> memory_before;   // [cells, S]
  Tensor<T> weights;         // [cells]
  T prev_confidence = T(0);
  T confidence = T(0);
  bool wrote = false;
};

template <typename T>
struct StepResult {
  std::vector<std::optional<TrackerOutputVars<T>>> outputs;  // indexed by tracker
  int iterations_used = 0;
  int writes = 0;
  Var<T> memory;  // memory after the last write
  std::vector<AttentionTraceEntry<T>> trace;
};

template <typename T>
class RatNetwork {
 public:
  RatNetwork() = default;
  RatNetwork(const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    const int s = cfg.cell_dim(), r = cfg.state_size;
    key_ = Linear<T>("rat.key", r, s + 1, rng);
    gru_ = GruCell<T>("rat.gru", s, r, rng);
    write_ = Linear<T>("rat.write", r, 2 * s, rng);
    fc1_ = Linear<T>("head.fc1", r, cfg.head_hidden[0], rng);
    fc2_ = Linear<T>("head.fc2", cfg.head_hidden[0], cfg.head_hidden[1], rng);
    out_ = Linear<T>("head.out", cfg.head_hidden[1], cfg.head_width(), rng);
  }

  const ModelConfig& config() const { return cfg_; }

  AttentionKey<T> compute_key(Tape<T>& tape, const Var<T>& h_prev) {
    const int s = cfg_.cell_dim();
    Var<T> kb = key_(tape, h_prev);
    return {ad::slice(kb, 0, s), ad::add_scalar(ad::softplus(ad::slice(kb, s, 1)), T(1))};
  }

  Var<T> update_state(Tape<T>& tape, const Var<T>& h_prev, const Var<T>& read) {
    return gru_(tape, h_prev, read);
  }

  Var<T> write(Tape<T>& tape, const Var<T>& memory, const Var<T>& h, const Var<T>& weights) {
    const int s = cfg_.cell_dim();
    Var<T> ev = write_(tape, h);
    Var<T> erase = ad::sigmoid(ad::slice(ev, 0, s));
    Var<T> add = ad::slice(ev, s, s);
    return ad::erase_add_write(memory, weights, erase, add);
  }

  TrackerOutputVars<T> generate_output(Tape<T>& tape, const Var<T>& h, OutputSampler<T>& sampler,
                                       bool hard = true) {
    Var<T> z = ad::relu(fc1_(tape, h));
    z = ad::relu(fc2_(tape, z));
    Var<T> y = out_(tape, z);
    const T tau = static_cast<T>(cfg_.temperature);
    int off = 0;
    TrackerOutputVars<T> o;
    o.confidence = ad::sigmoid(ad::slice(y, off, 1));
    off += 1;
    if (cfg_.layer_dims() > 0) {
      const int k = cfg_.layer_dims();
      o.layer = ad::gumbel_softmax(ad::slice(y, off, k), sampler.gumbel(k), tau, hard);
      off += k;
    } else {
      o.layer = tape.constant(Tensor<T>::ones({1}));
    }
    o.pose = ad::tanh(ad::slice(y, off, cfg_.pose_dims()));
    off += cfg_.pose_dims();
    if (cfg_.shape_dims() > 0) {
      const int n = cfg_.shape_dims();
      o.shape = ad::gumbel_sigmoid(ad::slice(y, off, n), sampler.logistic(n), tau, hard);
      off += n;
    } else {
      o.shape = tape.constant(Tensor<T>::ones({cfg_.patch_h * cfg_.patch_w}));
    }
    o.appearance = ad::sigmoid(ad::slice(y, off, cfg_.appearance_dims()));
    return o;
  }

  // One timestep over all trackers. `slots` carries h and the previous
  // confidence in and the updated values out; trackers that are not reached
  // keep theirs.
  StepResult<T> step(Tape<T>& tape, std::vector<TrackerSlot<T>>& slots, const Var<T>& memory,
                     OutputSampler<T>& sampler, bool record_trace = false) {
    const int n = static_cast<int>(slots.size());
    std::vector<T> prev(n);
    for (int i = 0; i < n; ++i) prev[i] = slots[i].confidence;
    const Priority p = reprioritize(prev, cfg_.flags.reprioritize);

    StepResult<T> res;
    res.outputs.resize(n);
    Var<T> mem = memory;
    for (int j = 0; j < n; ++j) {
      const int i = p.order[j];
      TrackerSlot<T>& slot = slots[i];
      AttentionKey<T> key = compute_key(tape, slot.h);
      Var<T> w = ad::attention_weights(key.key, key.beta, mem);
      Var<T> r = ad::attentive_read(mem, w);
      Var<T> h = update_state(tape, slot.h, r);
      TrackerOutputVars<T> out = generate_output(tape, h, sampler);
      out.tracker = i;
      const T conf = out.confidence.item();
      const T before = slot.confidence;
      slot.h = h;
      slot.confidence = conf;
      res.outputs[i] = out;
      ++res.iterations_used;

      const bool stop = cfg_.flags.act && before < T(0.5) && conf < T(0.5);
      const bool do_write = !stop && cfg_.flags.memory_write;
      if (record_trace) {
        res.trace.push_back({i, j + 1, mem.value(), w.value(), before, conf, do_write});
      }
      if (stop) break;
      if (do_write) {
        mem = write(tape, mem, h, w);
        ++res.writes;
      }
    }
    res.memory = mem;
    return res;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> ps;
    for (auto* l : {&key_, &write_, &fc1_, &fc2_, &out_}) {
      for (auto* p : l->parameters()) ps.push_back(p);
    }
    for (auto* p : gru_.parameters()) ps.push_back(p);
    return ps;
  }

  Linear<T>& key_layer() { return key_; }
  GruCell<T>& gru() { return gru_; }
  Linear<T>& write_layer() { return write_; }
  Linear<T>& head_fc1() { return fc1_; }
  Linear<T>& head_fc2() { return fc2_; }
  Linear<T>& head_out() { return out_; }

 private:
  ModelConfig cfg_;
  Linear<T> key_, write_, fc1_, fc2_, out_;
  GruCell<T> gru_;
};

}  // namespace tba
