#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "uniicl/backbone.hpp"
#include "uniicl/compressor.hpp"
#include "uniicl/ops.hpp"
#include "uniicl/tensor.hpp"
#include "uniicl/tokenizer.hpp"

namespace uniicl::testing {

/// Seeded generator for property tests.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  std::size_t size(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  double real(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  double normal(double stddev = 1.0) { return std::normal_distribution<double>(0.0, stddev)(rng_); }
  bool coin() { return size(0, 1) == 1; }

  std::vector<double> values(std::size_t n, double stddev = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = normal(stddev);
    return v;
  }

  Tensor tensor(Shape shape, bool requires_grad = false, double stddev = 1.0) {
    return Tensor::from(shape, values(shape_numel(shape), stddev), requires_grad);
  }

  /// Content-word ids in [kFirstWord, vocab).
  std::vector<TokenId> tokens(std::size_t n, std::size_t vocab) {
    std::vector<TokenId> ids(n);
    for (auto& id : ids) id = integer(token::kFirstWord, static_cast<int>(vocab) - 1);
    return ids;
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

inline BackboneConfig tiny_config(std::uint64_t seed = 1) {
  BackboneConfig cfg;
  cfg.vocab_size = 64;
  cfg.embed_dim = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.max_positions = 96;
  cfg.mlp_mult = 2;
  cfg.seed = seed;
  return cfg;
}

/// Random CompressorParams perturbed away from the identity init, so
/// gradient checks do not sit on a special point.
inline CompressorParams perturbed_params(const Backbone& bb, Gen& g, double stddev = 0.1) {
  auto p = CompressorParams::initialize(bb);
  auto slot = p.memory_slot.to_vector();
  for (auto& x : slot) x += g.normal(stddev);
  p.memory_slot.assign(slot);
  auto w = p.adapter.to_vector();
  for (auto& x : w) x += g.normal(stddev);
  p.adapter.assign(w);
  return p;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t entries = 0;
  // Analytic and numeric values at the worst entry.
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Elementwise |analytic − numeric| / max(|analytic|, |numeric|, floor) with
/// central differences of step h. Must run in kFloat64 mode.
inline GradCheck check_gradients(const std::function<Tensor()>& loss_fn, std::vector<Tensor> leaves,
                                 double h = 1e-5, double floor = 1e-6) {
  Tensor loss = loss_fn();
  Gradients grads = backward(loss);
  GradCheck out;
  for (auto& leaf : leaves) {
    const auto* analytic = grads.find(leaf);
    auto base = leaf.to_vector();
    for (std::size_t i = 0; i < base.size(); ++i) {
      auto probe = base;
      probe[i] = base[i] + h;
      leaf.assign(probe);
      double up = loss_fn().item();
      probe[i] = base[i] - h;
      leaf.assign(probe);
      double down = loss_fn().item();
      leaf.assign(base);
      double numeric = (up - down) / (2 * h);
      double a = analytic ? (*analytic)[i] : 0.0;
      double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst_analytic = a;
        out.worst_numeric = numeric;
      }
      ++out.entries;
    }
  }
  return out;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("uniicl_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Writes `values` into every parameter of the backbone that matches `name`.
inline void set_parameter(Backbone& bb, const std::string& name, const std::vector<double>& values) {
  for (auto& [n, t] : bb.named_parameters())
    if (n == name) {
      auto copy = t;
      copy.assign(values);
      return;
    }
  throw std::runtime_error("no parameter " + name);
}

/// Rigs the backbone so every position predicts `token` with a logit margin
/// of `margin`: a zero final-LayerNorm gain makes every hidden state equal
/// the LN bias e0, and the [d×V] head maps e0 onto `token` alone.
inline void rig_constant_prediction(Backbone& bb, TokenId token, double margin) {
  const std::size_t d = bb.embed_dim();
  const std::size_t V = bb.config().vocab_size;
  std::vector<double> gain(d, 0.0), bias(d, 0.0);
  bias[0] = 1.0;
  set_parameter(bb, "lnf_gain", gain);
  set_parameter(bb, "lnf_bias", bias);
  std::vector<double> head(d * V, 0.0);
  head[static_cast<std::size_t>(token)] = margin;
  set_parameter(bb, "lm_head", head);
}

}  // namespace uniicl::testing
