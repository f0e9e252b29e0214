#pragma once

#include <vector>

#include "samediff/nn/networks.hpp"

namespace samediff::nn {

struct AdamConfig {
  float lr = 3.0e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

class Adam {
 public:
  Adam() = default;
  Adam(NamedParams params, AdamConfig cfg = {});

  // Applies one update from the accumulated gradients, then clears them.
  // Parameters without a gradient are skipped. Throws NumericalError on a
  // non-finite gradient.
  void step();
  void zero_grad();

  const AdamConfig& config() const { return cfg_; }
  void set_lr(float lr) { cfg_.lr = lr; }
  long long step_count() const { return t_; }
  const NamedParams& params() const { return params_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  void restore(long long t, std::vector<Tensor> m, std::vector<Tensor> v);

 private:
  NamedParams params_;
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  long long t_ = 0;
};

}  // namespace samediff::nn
