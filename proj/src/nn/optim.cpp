#include "samediff/nn/optim.hpp"

#include <cmath>

namespace samediff::nn {

Adam::Adam(NamedParams params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& [name, p] : params_) {
    m_.emplace_back(p.shape());
    v_.emplace_back(p.shape());
  }
}

void Adam::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

void Adam::step() {
  for (const auto& [name, p] : params_)
    if (!p.grad().data.empty() && !p.grad().all_finite())
      throw NumericalError("non-finite gradient in " + name);
  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_));
  const float step_size = static_cast<float>(cfg_.lr / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var& p = params_[i].second;
    const auto& g = p.grad().data;
    if (g.empty()) continue;
    auto& w = p.mutable_value().data;
    auto& m = m_[i].data;
    auto& v = v_[i].data;
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0f - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0f - cfg_.beta2) * g[j] * g[j];
      w[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + cfg_.eps);
    }
  }
  zero_grad();
}

void Adam::restore(long long t, std::vector<Tensor> m, std::vector<Tensor> v) {
  if (m.size() != params_.size() || v.size() != params_.size())
    throw std::invalid_argument("Adam::restore: moment count mismatch");
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (m[i].shape != params_[i].second.shape() || v[i].shape != params_[i].second.shape())
      throw std::invalid_argument("Adam::restore: moment shape mismatch for " + params_[i].first);
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

}  // namespace samediff::nn
