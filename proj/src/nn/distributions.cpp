#include "samediff/nn/distributions.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace samediff::nn {

std::vector<float> log_softmax(std::span<const float> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax of empty logits");
  const float m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (float x : logits) s += std::exp(static_cast<double>(x - m));
  const double lse = m + std::log(s);
  std::vector<float> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i)
    out[i] = static_cast<float>(static_cast<double>(logits[i]) - lse);
  return out;
}

std::vector<float> softmax(std::span<const float> logits) {
  auto p = log_softmax(logits);
  for (auto& v : p) v = std::exp(v);
  return p;
}

float log_prob(std::span<const float> logits, int action) {
  if (action < 0 || static_cast<std::size_t>(action) >= logits.size())
    throw std::out_of_range("log_prob: action " + std::to_string(action) + " out of range");
  return log_softmax(logits)[static_cast<std::size_t>(action)];
}

float entropy(std::span<const float> logits) {
  const auto lp = log_softmax(logits);
  double h = 0.0;
  for (float l : lp) h -= std::exp(static_cast<double>(l)) * l;
  return static_cast<float>(std::max(h, 0.0));
}

int sample(std::span<const float> logits, Rng& rng) {
  const auto p = softmax(logits);
  const double u = rng.uniform();
  double c = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    c += p[i];
    if (u < c) return static_cast<int>(i);
  }
  // Rounding left a sliver above the cumulative sum; take the last
  // action with nonzero mass.
  for (std::size_t i = p.size(); i-- > 0;)
    if (p[i] > 0.0f) return static_cast<int>(i);
  return static_cast<int>(p.size()) - 1;
}

int argmax(std::span<const float> logits) {
  if (logits.empty()) throw std::invalid_argument("argmax of empty logits");
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

std::span<const float> row(const Tensor& t, int i) {
  if (t.rank() != 2 || i < 0 || i >= t.dim(0)) throw std::out_of_range("row: bad index");
  const std::size_t k = static_cast<std::size_t>(t.dim(1));
  return {t.ptr() + static_cast<std::size_t>(i) * k, k};
}

Var mean_entropy(const Var& log_probs) {
  // -sum p log p, averaged over rows
  Var plogp = mul(exp(log_probs), log_probs);
  return scale(sum(plogp), -1.0f / static_cast<float>(log_probs.shape()[0]));
}

}  // namespace samediff::nn
