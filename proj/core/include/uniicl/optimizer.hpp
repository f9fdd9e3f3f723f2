#pragma once

#include <cstdint>
#include <vector>

#include "uniicl/tensor.hpp"

namespace uniicl {

struct AdamConfig {
  double learning_rate = 8e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction and a fixed learning rate. Parameters absent
/// from a step's gradient map are left untouched.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg);

  void step(const Gradients& grads);

  std::uint64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void restore(std::uint64_t steps, std::vector<std::vector<double>> m,
               std::vector<std::vector<double>> v);

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace uniicl
