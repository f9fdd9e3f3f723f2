#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numbers>

#include "support.hpp"
#include "uniicl/errors.hpp"
#include "uniicl/ops.hpp"

namespace uniicl {
namespace {

using testing::check_gradients;
using testing::Gen;

constexpr double kTol = 1e-4;
constexpr int kSeeds = 100;

// Reduces any tensor to a scalar with fixed random weights so every output
// entry carries a distinct upstream gradient.
Tensor weighted_sum(const Tensor& t, const Tensor& w) { return sum(mul(t, w)); }

struct PrimitiveCase {
  std::string name;
  std::function<void(Gen&, std::vector<Tensor>&, std::function<Tensor()>&)> build;
};

std::vector<PrimitiveCase> primitive_cases() {
  std::vector<PrimitiveCase> cases;
  auto unary = [](std::string name, std::function<Tensor(const Tensor&)> op) {
    return PrimitiveCase{name, [op](Gen& g, std::vector<Tensor>& leaves, std::function<Tensor()>& fn) {
                           Shape s{g.size(1, 4), g.size(1, 5)};
                           auto x = g.tensor(s, true);
                           auto probe = op(x);
                           auto w = g.tensor(probe.shape());
                           leaves = {x};
                           fn = [=] { return weighted_sum(op(x), w); };
                         }};
  };
  auto binary = [](std::string name, std::function<Tensor(const Tensor&, const Tensor&)> op) {
    return PrimitiveCase{name, [op](Gen& g, std::vector<Tensor>& leaves, std::function<Tensor()>& fn) {
                           Shape s{g.size(1, 4), g.size(1, 5)};
                           auto a = g.tensor(s, true);
                           auto b = g.tensor(s, true);
                           auto w = g.tensor(s);
                           leaves = {a, b};
                           fn = [=] { return weighted_sum(op(a, b), w); };
                         }};
  };

  cases.push_back({"matmul", [](Gen& g, auto& leaves, auto& fn) {
                     auto m = g.size(1, 4), k = g.size(1, 4), n = g.size(1, 4);
                     auto a = g.tensor({m, k}, true);
                     auto b = g.tensor({k, n}, true);
                     auto w = g.tensor({m, n});
                     leaves = {a, b};
                     fn = [=] { return weighted_sum(matmul(a, b), w); };
                   }});
  cases.push_back(unary("transpose", [](const Tensor& x) { return transpose(x); }));
  cases.push_back(unary("reshape", [](const Tensor& x) { return reshape(x, {x.numel()}); }));
  cases.push_back(binary("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }));
  cases.push_back(binary("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }));
  cases.push_back(binary("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }));
  cases.push_back(unary("scale", [](const Tensor& x) { return scale(x, -1.7); }));
  cases.push_back(unary("gelu", [](const Tensor& x) { return gelu(x); }));
  cases.push_back(unary("softmax_axis0", [](const Tensor& x) { return softmax(x, 0); }));
  cases.push_back(unary("softmax_axis1", [](const Tensor& x) { return softmax(x, 1); }));
  cases.push_back(unary("mean_rows", [](const Tensor& x) { return mean_rows(x); }));
  cases.push_back(unary("slice_rows", [](const Tensor& x) { return slice_rows(x, 0, (x.rows() + 1) / 2); }));
  cases.push_back({"add_bias", [](Gen& g, auto& leaves, auto& fn) {
                     auto m = g.size(1, 4), n = g.size(1, 5);
                     auto a = g.tensor({m, n}, true);
                     auto b = g.tensor({n}, true);
                     auto w = g.tensor({m, n});
                     leaves = {a, b};
                     fn = [=] { return weighted_sum(add_bias(a, b), w); };
                   }});
  cases.push_back({"layernorm", [](Gen& g, auto& leaves, auto& fn) {
                     auto m = g.size(1, 4), n = g.size(2, 6);
                     auto x = g.tensor({m, n}, true);
                     auto gain = g.tensor({n}, true);
                     auto bias = g.tensor({n}, true);
                     auto w = g.tensor({m, n});
                     leaves = {x, gain, bias};
                     fn = [=] { return weighted_sum(layernorm(x, gain, bias), w); };
                   }});
  cases.push_back({"cross_entropy", [](Gen& g, auto& leaves, auto& fn) {
                     auto t = g.size(1, 4), v = g.size(2, 6);
                     auto logits = g.tensor({t, v}, true, 2.0);
                     std::vector<TokenId> targets(t);
                     for (auto& id : targets) id = g.integer(0, static_cast<int>(v) - 1);
                     leaves = {logits};
                     fn = [=] { return cross_entropy(logits, targets); };
                   }});
  cases.push_back({"embedding", [](Gen& g, auto& leaves, auto& fn) {
                     auto v = g.size(2, 6), d = g.size(1, 4), n = g.size(1, 6);
                     auto table = g.tensor({v, d}, true);
                     std::vector<TokenId> ids(n);
                     for (auto& id : ids) id = g.integer(0, static_cast<int>(v) - 1);
                     auto w = g.tensor({n, d});
                     leaves = {table};
                     fn = [=] { return weighted_sum(embedding(table, ids), w); };
                   }});
  cases.push_back({"concat_rows", [](Gen& g, auto& leaves, auto& fn) {
                     auto d = g.size(1, 4);
                     auto a = g.tensor({g.size(1, 3), d}, true);
                     auto b = g.tensor({d}, true);
                     auto w = g.tensor({a.rows() + 1, d});
                     leaves = {a, b};
                     fn = [=] {
                       std::vector<Tensor> parts{a, b};
                       return weighted_sum(concat_rows(parts), w);
                     };
                   }});
  cases.push_back({"repeat_rows", [](Gen& g, auto& leaves, auto& fn) {
                     auto d = g.size(1, 4), k = g.size(1, 5);
                     auto row = g.tensor({d}, true);
                     auto w = g.tensor({k, d});
                     leaves = {row};
                     fn = [=] { return weighted_sum(repeat_rows(row, k), w); };
                   }});
  cases.push_back({"sum", [](Gen& g, auto& leaves, auto& fn) {
                     auto x = g.tensor({g.size(1, 4), g.size(1, 4)}, true);
                     leaves = {x};
                     fn = [=] { return scale(sum(x), 0.5); };
                   }});
  cases.push_back({"stack", [](Gen& g, auto& leaves, auto& fn) {
                     auto a = g.tensor({1}, true);
                     auto b = g.tensor({g.size(1, 3)}, true);
                     auto w = g.tensor({1 + b.numel()});
                     leaves = {a, b};
                     fn = [=] {
                       std::vector<Tensor> parts{reshape(a, {}), b};
                       return weighted_sum(stack(parts), w);
                     };
                   }});
  cases.push_back({"cosine", [](Gen& g, auto& leaves, auto& fn) {
                     auto d = g.size(2, 6);
                     auto a = g.tensor({d}, true);
                     auto b = g.tensor({d}, true);
                     leaves = {a, b};
                     fn = [=] { return cosine(a, b); };
                   }});
  cases.push_back({"causal_attention", [](Gen& g, auto& leaves, auto& fn) {
                     auto heads = g.size(1, 2), t = g.size(1, 5);
                     auto d = heads * g.size(1, 3);
                     auto q = g.tensor({t, d}, true);
                     auto k = g.tensor({t, d}, true);
                     auto v = g.tensor({t, d}, true);
                     auto w = g.tensor({t, d});
                     leaves = {q, k, v};
                     fn = [=] { return weighted_sum(causal_attention(q, k, v, heads), w); };
                   }});
  return cases;
}

TEST(GradientCheck, EveryPrimitiveMatchesCentralDifferences) {
  PrecisionScope precision(Precision::kFloat64);
  for (const auto& c : primitive_cases()) {
    double worst = 0.0;
    for (int seed = 0; seed < kSeeds; ++seed) {
      Gen g(1000 + seed);
      std::vector<Tensor> leaves;
      std::function<Tensor()> fn;
      c.build(g, leaves, fn);
      worst = std::max(worst, check_gradients(fn, leaves).max_rel_error);
    }
    EXPECT_LT(worst, kTol) << c.name;
  }
}

TEST(GradientCheck, RandomThreeLayerNet) {
  PrecisionScope precision(Precision::kFloat64);
  for (int seed = 0; seed < 10; ++seed) {
    Gen g(seed);
    auto x = g.tensor({3, 4});
    auto w1 = g.tensor({4, 5}, true), b1 = g.tensor({5}, true);
    auto w2 = g.tensor({5, 5}, true), gain = g.tensor({5}, true), bias = g.tensor({5}, true);
    auto w3 = g.tensor({5, 6}, true);
    std::vector<TokenId> targets{1, 4, 2};
    auto fn = [=] {
      auto h1 = gelu(add_bias(matmul(x, w1), b1));
      auto h2 = layernorm(matmul(h1, w2), gain, bias);
      return cross_entropy(matmul(h2, w3), targets);
    };
    EXPECT_LT(check_gradients(fn, {w1, b1, w2, gain, bias, w3}).max_rel_error, kTol) << seed;
  }
}

TEST(Matmul, Examples) {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto m = Tensor::from({2, 2}, {3, 4, 5, 6});
  EXPECT_EQ(matmul(eye, m).to_vector(), (std::vector<double>{3, 4, 5, 6}));
  EXPECT_EQ(matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4})).to_vector(),
            std::vector<double>{11});
  Gen g(3);
  auto z = matmul(Tensor::zeros({3, 4}), g.tensor({4, 2}));
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
}

TEST(Softmax, Examples) {
  auto u = softmax(Tensor::from({3}, {0, 0, 0}), 0);
  for (double v : u.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-7);
  auto big = softmax(Tensor::from({2}, {1000, 0}), 0);
  EXPECT_NEAR(big.at(0), 1.0, 1e-7);
  EXPECT_NEAR(big.at(1), 0.0, 1e-7);
  EXPECT_TRUE(std::isfinite(big.at(0)) && std::isfinite(big.at(1)));
  auto l = softmax(Tensor::from({2}, {std::numbers::ln2, 0}), 0);
  EXPECT_NEAR(l.at(0), 2.0 / 3.0, 1e-7);
  EXPECT_NEAR(l.at(1), 1.0 / 3.0, 1e-7);
}

TEST(Softmax, RowsSumToOneForLargeInputs) {
  Gen g(11);
  for (int trial = 0; trial < 200; ++trial) {
    auto rows = g.size(1, 5), cols = g.size(1, 9);
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = g.real(-1e4, 1e4);
    auto s = softmax(Tensor::from({rows, cols}, v), 1);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < cols; ++c) total += s.at(r * cols + c);
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(Layernorm, Examples) {
  auto ones = Tensor::full({3}, 1.0), zeros = Tensor::zeros({3});
  auto flat = layernorm(Tensor::full({1, 3}, 7.5), ones, zeros);
  for (double v : flat.data()) EXPECT_EQ(v, 0.0);

  PrecisionScope precision(Precision::kFloat64);
  auto y = layernorm(Tensor::from({1, 2}, {1, -1}), Tensor::full({2}, 1.0), Tensor::zeros({2}), 1e-12);
  EXPECT_NEAR(y.at(0), 1.0, 1e-9);
  EXPECT_NEAR(y.at(1), -1.0, 1e-9);

  Gen g(5);
  auto b = layernorm(g.tensor({2, 3}), Tensor::zeros({3}), Tensor::full({3}, 0.25));
  for (double v : b.data()) EXPECT_EQ(v, 0.25);
}

TEST(Layernorm, RowsAreStandardized) {
  PrecisionScope precision(Precision::kFloat64);
  Gen g(6);
  for (int trial = 0; trial < 50; ++trial) {
    auto n = g.size(2, 12);
    auto y = layernorm(g.tensor({3, n}, false, 5.0), Tensor::full({n}, 1.0), Tensor::zeros({n}), 0.0);
    for (std::size_t r = 0; r < 3; ++r) {
      double mean = 0, var = 0;
      for (std::size_t c = 0; c < n; ++c) mean += y.at(r * n + c);
      mean /= n;
      for (std::size_t c = 0; c < n; ++c) var += std::pow(y.at(r * n + c) - mean, 2);
      var /= n;
      EXPECT_NEAR(mean, 0.0, 1e-5);
      EXPECT_NEAR(var, 1.0, 1e-5);
    }
  }
}

TEST(CrossEntropy, Examples) {
  auto perfect = Tensor::from({2, 3}, {1e4, 0, 0, 0, 0, 1e4});
  std::vector<TokenId> t{0, 2};
  EXPECT_EQ(cross_entropy(perfect, t).item(), 0.0);

  std::vector<TokenId> one{3};
  EXPECT_NEAR(cross_entropy(Tensor::zeros({1, 4}), one).item(), std::log(4.0), 1e-6);

  PrecisionScope precision(Precision::kFloat64);
  // Row 0: p = (0.5, 0.25, 0.25) on target 0; row 1: same probs on target 1.
  auto l = std::log(0.25);
  auto logits = Tensor::from({2, 3}, {std::log(0.5), l, l, std::log(0.5), l, l});
  std::vector<TokenId> targets{0, 1};
  EXPECT_NEAR(cross_entropy(logits, targets).item(), (std::log(2.0) + std::log(4.0)) / 2, 1e-12);
}

TEST(CrossEntropy, OutOfRangeTargetIsIndexError) {
  std::vector<TokenId> bad{4};
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 4}), bad), IndexError);
  std::vector<TokenId> negative{-1};
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 4}), negative), IndexError);
}

TEST(Backward, SumOfMatrixVectorProduct) {
  PrecisionScope precision(Precision::kFloat64);
  Gen g(8);
  auto w = g.tensor({3, 4}, true);
  auto x = g.tensor({4, 1});
  auto grads = backward(sum(matmul(w, x)));
  const auto& dw = grads.at(w);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(dw[r * 4 + c], x.at(c));
}

TEST(Backward, FrozenAndUnreachableTensorsGetNoEntry) {
  Gen g(9);
  auto frozen = g.tensor({2, 2}, false);
  auto live = g.tensor({2, 2}, true);
  auto unreachable = g.tensor({2, 2}, true);
  auto grads = backward(sum(mul(frozen, live)));
  EXPECT_TRUE(grads.contains(live));
  EXPECT_FALSE(grads.contains(frozen));
  EXPECT_FALSE(grads.contains(unreachable));
  EXPECT_EQ(grads.size(), 1u);
}

TEST(Backward, NonScalarLossIsContractError) {
  auto x = Tensor::zeros({2}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ContractError);
}

TEST(Backward, SharedSubgraphAccumulatesOnce) {
  PrecisionScope precision(Precision::kFloat64);
  // y = x*x, loss = sum(y + y) → d/dx = 4x; each node visited exactly once.
  auto x = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  auto y = mul(x, x);
  auto grads = backward(sum(add(y, y)));
  const auto& dx = grads.at(x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(dx[i], 4 * x.at(i));
}

TEST(Precision, Float32RoundsEveryOpOutput) {
  auto a = Tensor::from({1}, {0.1});
  EXPECT_EQ(a.at(0), static_cast<double>(0.1f));
  auto sum32 = add(a, a);
  EXPECT_EQ(sum32.at(0), static_cast<double>(0.1f + 0.1f));

  PrecisionScope precision(Precision::kFloat64);
  auto b = Tensor::from({1}, {0.1});
  EXPECT_EQ(b.at(0), 0.1);
  EXPECT_EQ(add(b, b).at(0), 0.2);
}

TEST(NoGrad, RecordsNoGraph) {
  auto x = Tensor::zeros({2}, true);
  Tensor y;
  {
    NoGradScope scope;
    y = scale(x, 3.0);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(scale(x, 3.0).requires_grad());
}

TEST(Determinism, SameSeedSameTensors) {
  auto run = [] {
    Gen g(77);
    auto a = g.tensor({4, 6});
    auto b = g.tensor({6, 3});
    return softmax(matmul(a, b), 1);
  };
  EXPECT_TRUE(bitwise_equal(run(), run()));
}

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor::from({2, 3}, {1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor::zeros({2}).item(), ContractError);
  auto r = reshape(Tensor::zeros({2}, true), {2, 1});
  EXPECT_THROW(r.assign(std::vector<double>{1, 2}), ContractError);
}

TEST(Cosine, ZeroNormIsContractError) {
  EXPECT_THROW(cosine(Tensor::zeros({3}), Tensor::full({3}, 1.0)), ContractError);
}

TEST(CausalAttention, FutureKeysDoNotAffectEarlierRows) {
  Gen g(12);
  auto q = g.tensor({5, 4}), k = g.tensor({5, 4}), v = g.tensor({5, 4});
  auto base = causal_attention(q, k, v, 2);
  auto k2 = k.to_vector(), v2 = v.to_vector();
  for (std::size_t c = 0; c < 4; ++c) {
    k2[4 * 4 + c] += 10.0;
    v2[4 * 4 + c] -= 10.0;
  }
  auto moved = causal_attention(q, Tensor::from({5, 4}, k2), Tensor::from({5, 4}, v2), 2);
  for (std::size_t i = 0; i < 4 * 4; ++i) EXPECT_EQ(base.at(i), moved.at(i));
}

}  // namespace
}  // namespace uniicl
