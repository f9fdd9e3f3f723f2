#include "uniicl/optimizer.hpp"

#include <cmath>

#include "uniicl/errors.hpp"

namespace uniicl {

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(const Gradients& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto* g = grads.find(params_[i]);
    if (!g) continue;
    auto values = params_[i].to_vector();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * (*g)[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * (*g)[j] * (*g)[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      values[j] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
    params_[i].assign(values);
  }
}

void Adam::restore(std::uint64_t steps, std::vector<std::vector<double>> m,
                   std::vector<std::vector<double>> v) {
  if (m.size() != params_.size() || v.size() != params_.size())
    throw ContractError("Adam::restore: moment count does not match parameters");
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (m[i].size() != params_[i].numel() || v[i].size() != params_[i].numel())
      throw ContractError("Adam::restore: moment size mismatch");
  t_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

}  // namespace uniicl
