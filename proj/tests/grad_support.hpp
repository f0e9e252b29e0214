#pragma once

// Helpers shared by gradient checks in the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "oracles.hpp"
#include "samediff/nn/networks.hpp"

namespace grad_support {

using samediff::Rng;
using samediff::nn::Tensor;
using samediff::nn::Var;
using oracle::DParams;
using oracle::DTensor;
namespace nn = samediff::nn;

inline constexpr double kGradTolerance = 1e-2;

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = static_cast<float>(scale * rng.normal());
  return t;
}

// Random weights make a scalar out of any tensor without hiding bugs that a
// plain sum would cancel.
inline double weighted(const DTensor& t, const std::vector<double>& w) {
  double s = 0;
  for (std::size_t i = 0; i < t.v.size(); ++i) s += w[i] * t.v[i];
  return s;
}

inline Var weighted(const Var& x, const std::vector<double>& w) {
  Tensor c(x.shape());
  for (std::size_t i = 0; i < c.size(); ++i) c.data[i] = static_cast<float>(w[i]);
  return nn::sum(nn::mul_const(x, c));
}

inline std::vector<double> random_weights(std::size_t n, Rng& rng) {
  std::vector<double> w(n);
  for (auto& e : w) e = rng.normal();
  return w;
}

inline DParams to_dparams(const nn::NamedParams& p) {
  DParams out;
  for (const auto& [name, v] : p) out.emplace_back(v.value());
  return out;
}

inline std::vector<const Tensor*> grads_of(const std::vector<Var>& vars) {
  std::vector<const Tensor*> out;
  for (const auto& v : vars) out.push_back(&v.grad());
  return out;
}

inline std::vector<const Tensor*> grads_of(const nn::NamedParams& p) {
  std::vector<const Tensor*> out;
  for (const auto& [name, v] : p) out.push_back(&v.grad());
  return out;
}

inline void zero_grads(const nn::NamedParams& p) {
  for (auto [name, v] : p) v.zero_grad();
}

// Small frames keep the double-precision reference cheap: 17 -> 7 -> 2.
inline nn::NetShape small_shape(int history, int actions) { return {17, 17, 1, history, actions}; }

inline nn::ObsBatch random_obs(const nn::NetShape& s, int n, Rng& rng) {
  nn::ObsBatch b;
  b.frames = Tensor({n, s.height, s.width, s.channels});
  for (auto& v : b.frames.data) v = static_cast<float>(rng.uniform());
  b.history = Tensor({n, s.history});
  for (auto& v : b.history.data) v = rng.bernoulli(0.2) ? 1.0f : 0.0f;
  return b;
}

inline double d_logsumexp_row(const DTensor& logits, int i) {
  const int k = logits.shape[1];
  double m = -1e300;
  for (int j = 0; j < k; ++j) m = std::max(m, logits.v[i * k + j]);
  double s = 0;
  for (int j = 0; j < k; ++j) s += std::exp(logits.v[i * k + j] - m);
  return m + std::log(s);
}


// Smallest |pre-activation| of any leaky unit in the reference trunk.
inline double kink_distance(const DParams& p, const DTensor& frames, const DTensor* history) {
  auto closest = [](const DTensor& t) {
    double m = 1e300;
    for (double x : t.v) m = std::min(m, std::abs(x));
    return m;
  };
  const DTensor c1 = oracle::conv(frames, p[0], p[1], 5, 2);
  const DTensor c2 = oracle::conv(oracle::leaky(c1, 0.01), p[2], p[3], 5, 2);
  DTensor h = oracle::flatten(oracle::leaky(c2, 0.01));
  if (history && history->shape[1] > 0) h = oracle::concat(h, *history);
  const DTensor f1 = oracle::linear(h, p[4], p[5]);
  const DTensor f2 = oracle::linear(oracle::leaky(f1, 0.01), p[6], p[7]);
  return std::min({closest(c1), closest(c2), closest(f1), closest(f2)});
}

// Random observations whose reference pre-activations all clear the leaky
// kink by `margin`. Closer than float32 forward error, the float network and
// the double reference can take different slopes and disagree for reasons
// unrelated to the gradient code.
inline nn::ObsBatch kink_free_obs(const DParams& p, const nn::NetShape& s, int n, Rng& rng,
                                  double margin = 1e-4) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    nn::ObsBatch b = random_obs(s, n, rng);
    const DTensor hist(b.history);
    if (kink_distance(p, DTensor(b.frames), &hist) >= margin) return b;
  }
  throw std::runtime_error("kink_free_obs: no batch clears the margin");
}

}  // namespace grad_support
