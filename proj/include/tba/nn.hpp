#pragma once

#include <random>
#include <string>
#include <vector>

#include "tba/autodiff.hpp"

namespace tba {

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
void init_fan_in(Parameter<T>& p, int fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : p.value.values()) v = static_cast<T>(dist(rng));
}

template <typename T>
struct Linear {
  Parameter<T> weight;  // [out, in]
  Parameter<T> bias;    // [out]

  Linear() = default;
  Linear(const std::string& name, int in, int out, std::mt19937_64& rng)
      : weight(name + ".weight", Tensor<T>({out, in})), bias(name + ".bias", Tensor<T>({out})) {
    init_fan_in(weight, in, rng);
    init_fan_in(bias, in, rng);
  }

  int in_dim() const { return weight.value.dim(1); }
  int out_dim() const { return weight.value.dim(0); }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) {
    return ad::linear(x, tape.param(weight), tape.param(bias));
  }

  std::vector<Parameter<T>*> parameters() { return {&weight, &bias}; }
};

// Gated recurrent unit with the update gate interpolating towards the
// candidate: h' = (1 - z) * h + z * n, n = tanh(Wx x + bx + r * (Wh h + bh)).
// Gate rows are stacked [reset, update, candidate].
template <typename T>
struct GruCell {
  Linear<T> input;   // [3R, in]
  Linear<T> hidden;  // [3R, R]

  GruCell() = default;
  GruCell(const std::string& name, int in, int state, std::mt19937_64& rng)
      : input(name + ".input", in, 3 * state, rng), hidden(name + ".hidden", state, 3 * state, rng) {
    // PyTorch-style init scales every GRU tensor by the state size.
    for (auto* p : parameters()) init_fan_in(*p, state, rng);
  }

  int state_dim() const { return hidden.in_dim(); }

  Var<T> operator()(Tape<T>& tape, const Var<T>& h, const Var<T>& x) {
    const int r = state_dim();
    Var<T> gx = input(tape, x);
    Var<T> gh = hidden(tape, h);
    Var<T> reset = ad::sigmoid(ad::add(ad::slice(gx, 0, r), ad::slice(gh, 0, r)));
    Var<T> update = ad::sigmoid(ad::add(ad::slice(gx, r, r), ad::slice(gh, r, r)));
    Var<T> cand = ad::tanh(ad::add(ad::slice(gx, 2 * r, r), ad::mul(reset, ad::slice(gh, 2 * r, r))));
    return ad::add(ad::mul(ad::one_minus(update), h), ad::mul(update, cand));
  }

  std::vector<Parameter<T>*> parameters() {
    return {&input.weight, &input.bias, &hidden.weight, &hidden.bias};
  }
};

template <typename T>
std::size_t count_scalars(const std::vector<Parameter<T>*>& ps) {
  std::size_t n = 0;
  for (const auto* p : ps) n += p->value.size();
  return n;
}

}  // namespace tba
