#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "uniicl/tensor.hpp"

namespace uniicl {

using TokenId = std::int32_t;

// Differentiable primitives. Every op checks shapes and throws
// DimensionError naming the offending shapes.

/// [m×k]·[k×n] → [m×n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// Same values under a new shape with equal element count.
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// Adds a [n] bias to every row of an [m×n] tensor.
Tensor add_bias(const Tensor& a, const Tensor& bias);
/// tanh-approximated GELU.
Tensor gelu(const Tensor& a);

/// Softmax along `axis` with max subtraction.
Tensor softmax(const Tensor& x, std::size_t axis);
/// Normalizes each last-axis row with population variance.
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Token-mean negative log-likelihood of `targets` under row-wise softmax(logits).
Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets);

/// Gathers rows of a [V×d] table.
Tensor embedding(const Tensor& table, std::span<const TokenId> ids);
/// Stacks 2-D tensors with equal column count vertically. 1-D inputs count as one row.
Tensor concat_rows(std::span<const Tensor> parts);
/// Repeats a [d] (or [1×d]) row k times → [k×d].
Tensor repeat_rows(const Tensor& row, std::size_t k);
/// Rows [begin, end) of a 2-D tensor.
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
/// Column mean of a 2-D tensor → [d].
Tensor mean_rows(const Tensor& a);
/// Sum of all entries → scalar.
Tensor sum(const Tensor& a);
/// Scalars (or any tensors) flattened end to end → [n].
Tensor stack(std::span<const Tensor> parts);

/// Cosine similarity of two equally sized vectors → scalar.
/// Throws ContractError if either has zero norm.
Tensor cosine(const Tensor& a, const Tensor& b);

/// Per-head attention weights captured during a forward pass.
struct AttentionTrace {
  std::size_t n_heads = 0;
  std::size_t seq_len = 0;
  /// weights[h][i*seq_len + j]: attention of query i on key j in head h.
  std::vector<std::vector<double>> weights;
};

/// Multi-head causal self-attention over [T×d] projections. Position i only
/// attends to positions <= i.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                        AttentionTrace* trace = nullptr);

}  // namespace uniicl
