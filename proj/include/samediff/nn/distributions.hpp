#pragma once

// Categorical distribution helpers over a single row of logits.

#include <span>
#include <vector>

#include "samediff/nn/autograd.hpp"
#include "samediff/rng.hpp"

namespace samediff::nn {

std::vector<float> softmax(std::span<const float> logits);
std::vector<float> log_softmax(std::span<const float> logits);
float log_prob(std::span<const float> logits, int action);
float entropy(std::span<const float> logits);
int sample(std::span<const float> logits, Rng& rng);
int argmax(std::span<const float> logits);  // first index on ties

// Row i of a [N, A] tensor.
std::span<const float> row(const Tensor& t, int i);

// Differentiable mean entropy of the rows of log_softmax output [N, A].
Var mean_entropy(const Var& log_probs);

}  // namespace samediff::nn
