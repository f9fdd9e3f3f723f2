#include "uniicl/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "uniicl/errors.hpp"

namespace uniicl {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const MatRM>;
using MutMap = Eigen::Map<MatRM>;
using Strided = Eigen::OuterStride<>;
using ConstStridedMap = Eigen::Map<const MatRM, 0, Strided>;
using MutStridedMap = Eigen::Map<MatRM, 0, Strided>;

void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

ConstMap as_matrix(std::span<const double> v, std::size_t r, std::size_t c) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

MutMap as_matrix(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MutMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  as_matrix(out, m, n).noalias() = as_matrix(a.data(), m, k) * as_matrix(b.data(), k, n);
  return detail::make_result(
      {m, n}, std::move(out), {a, b},
      [a, b, m, k, n](std::span<const double>, std::span<const double> g, auto pg) {
        auto gm = as_matrix(g, m, n);
        if (pg[0]) as_matrix(*pg[0], m, k).noalias() += gm * as_matrix(b.data(), k, n).transpose();
        if (pg[1]) as_matrix(*pg[1], k, n).noalias() += as_matrix(a.data(), m, k).transpose() * gm;
      });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  as_matrix(out, c, r) = as_matrix(a.data(), r, c).transpose();
  return detail::make_result({c, r}, std::move(out), {a},
                             [r, c](std::span<const double>, std::span<const double> g, auto pg) {
                               as_matrix(*pg[0], r, c) += as_matrix(g, c, r).transpose();
                             });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return detail::make_result(std::move(shape), a.to_vector(), {a},
                             [](std::span<const double>, std::span<const double> g, auto pg) {
                               for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                             });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto da = a.data(), db = b.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  return detail::make_result(a.shape(), std::move(out), {a, b},
                             [](std::span<const double>, std::span<const double> g, auto pg) {
                               for (int p = 0; p < 2; ++p)
                                 if (pg[p])
                                   for (std::size_t i = 0; i < g.size(); ++i) (*pg[p])[i] += g[i];
                             });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto da = a.data(), db = b.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
  return detail::make_result(a.shape(), std::move(out), {a, b},
                             [](std::span<const double>, std::span<const double> g, auto pg) {
                               if (pg[0])
                                 for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                               if (pg[1])
                                 for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i];
                             });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto da = a.data(), db = b.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  return detail::make_result(a.shape(), std::move(out), {a, b},
                             [a, b](std::span<const double>, std::span<const double> g, auto pg) {
                               auto da = a.data(), db = b.data();
                               if (pg[0])
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   (*pg[0])[i] += g[i] * db[i];
                               if (pg[1])
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   (*pg[1])[i] += g[i] * da[i];
                             });
}

Tensor scale(const Tensor& a, double factor) {
  auto da = a.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * factor;
  return detail::make_result(a.shape(), std::move(out), {a},
                             [factor](std::span<const double>, std::span<const double> g, auto pg) {
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 (*pg[0])[i] += g[i] * factor;
                             });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  require_rank(a, 2, "add_bias");
  if (bias.numel() != a.dim(1)) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match rows of " +
                         shape_str(a.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto da = a.data(), db = bias.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = da[i * n + j] + db[j];
  return detail::make_result(a.shape(), std::move(out), {a, bias},
                             [m, n](std::span<const double>, std::span<const double> g, auto pg) {
                               if (pg[0])
                                 for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                               if (pg[1])
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j)
                                     (*pg[1])[j] += g[i * n + j];
                             });
}

Tensor gelu(const Tensor& a) {
  auto da = a.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = da[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
  }
  return detail::make_result(
      a.shape(), std::move(out), {a}, [a](std::span<const double>, std::span<const double> g, auto pg) {
        auto da = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
          double x = da[i];
          double u = kGeluC * (x + 0.044715 * x * x * x);
          double t = std::tanh(u);
          double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
          double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
          (*pg[0])[i] += g[i] * d;
        }
      });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " +
                         shape_str(x.shape()));
  }
  const auto& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t n = shape[axis];
  auto dx = x.data();
  std::vector<double> out(dx.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, dx[base + j * inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double e = std::exp(dx[base + j * inner] - mx);
        out[base + j * inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= s;
    }
  }
  return detail::make_result(
      shape, std::move(out), {x},
      [outer, inner, n](std::span<const double> y, std::span<const double> g, auto pg) {
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
            for (std::size_t j = 0; j < n; ++j) {
              auto idx = base + j * inner;
              (*pg[0])[idx] += y[idx] * (g[idx] - dot);
            }
          }
        }
      });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() == 0 || x.cols() == 0) {
    throw DimensionError("layernorm: empty last axis in " + shape_str(x.shape()));
  }
  const std::size_t n = x.cols();
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layernorm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " do not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  auto dx = x.data(), dg = gain.data(), db = bias.data();
  std::vector<double> out(dx.size());
  std::vector<double> xhat(dx.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = dx.data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (row[j] - mean) * inv_std[r];
      out[r * n + j] = xhat[r * n + j] * dg[j] + db[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [gain, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, n](
          std::span<const double>, std::span<const double> g, auto pg) {
        auto dg = gain.data();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * n;
          const double* xr = xhat.data() + r * n;
          if (pg[1])
            for (std::size_t j = 0; j < n; ++j) (*pg[1])[j] += gr[j] * xr[j];
          if (pg[2])
            for (std::size_t j = 0; j < n; ++j) (*pg[2])[j] += gr[j];
          if (pg[0]) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              double d = gr[j] * dg[j];
              mean_d += d;
              mean_dx += d * xr[j];
            }
            mean_d /= static_cast<double>(n);
            mean_dx /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              double d = gr[j] * dg[j];
              (*pg[0])[r * n + j] += inv_std[r] * (d - mean_d - xr[j] * mean_dx);
            }
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t t = logits.dim(0), v = logits.dim(1);
  if (targets.size() != t) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(logits.shape()));
  }
  if (t == 0) throw ContractError("cross_entropy: no positions");
  for (auto id : targets) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw IndexError("cross_entropy: target " + std::to_string(id) + " outside [0, " +
                       std::to_string(v) + ")");
    }
  }
  auto dl = logits.data();
  std::vector<double> probs(t * v);
  double total = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    const double* row = dl.data() + i * v;
    double mx = *std::max_element(row, row + v);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[i * v + j] = std::exp(row[j] - mx);
      s += probs[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= s;
    total += (mx + std::log(s)) - row[targets[i]];
  }
  std::vector<TokenId> tg(targets.begin(), targets.end());
  return detail::make_result(
      {}, {total / static_cast<double>(t)}, {logits},
      [probs = std::move(probs), tg = std::move(tg), t, v](std::span<const double>,
                                                           std::span<const double> g, auto pg) {
        const double scale = g[0] / static_cast<double>(t);
        auto& out = *pg[0];
        for (std::size_t i = 0; i < t; ++i) {
          for (std::size_t j = 0; j < v; ++j) out[i * v + j] += scale * probs[i * v + j];
          out[i * v + static_cast<std::size_t>(tg[i])] -= scale;
        }
      });
}

Tensor embedding(const Tensor& table, std::span<const TokenId> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  auto dt = table.data();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("embedding: token id " + std::to_string(ids[i]) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
    std::copy_n(dt.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<TokenId> idv(ids.begin(), ids.end());
  return detail::make_result({ids.size(), d}, std::move(out), {table},
                             [idv = std::move(idv), d](std::span<const double>,
                                                       std::span<const double> g, auto pg) {
                               auto& out = *pg[0];
                               for (std::size_t i = 0; i < idv.size(); ++i) {
                                 auto base = static_cast<std::size_t>(idv[i]) * d;
                                 for (std::size_t j = 0; j < d; ++j) out[base + j] += g[i * d + j];
                               }
                             });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t d = parts.front().cols();
  std::size_t rows = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.rank() == 0 || p.rank() > 2 || p.cols() != d) {
      throw DimensionError("concat_rows: cannot stack " + shape_str(p.shape()) + " under width " +
                           std::to_string(d));
    }
    offsets.push_back(rows * d);
    rows += p.numel() / d;
  }
  std::vector<double> out;
  out.reserve(rows * d);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) sizes.push_back(p.numel());
  return detail::make_result({rows, d}, std::move(out), std::vector<Tensor>(parts.begin(), parts.end()),
                             [offsets = std::move(offsets), sizes = std::move(sizes)](
                                 std::span<const double>, std::span<const double> g, auto pg) {
                               for (std::size_t p = 0; p < pg.size(); ++p) {
                                 if (!pg[p]) continue;
                                 for (std::size_t i = 0; i < sizes[p]; ++i)
                                   (*pg[p])[i] += g[offsets[p] + i];
                               }
                             });
}

Tensor repeat_rows(const Tensor& row, std::size_t k) {
  if (row.rank() == 0 || row.rank() > 2 || row.numel() != row.cols()) {
    throw DimensionError("repeat_rows: expected a single row, got " + shape_str(row.shape()));
  }
  const std::size_t d = row.cols();
  std::vector<double> out;
  out.reserve(k * d);
  for (std::size_t i = 0; i < k; ++i) out.insert(out.end(), row.data().begin(), row.data().end());
  return detail::make_result({k, d}, std::move(out), {row},
                             [k, d](std::span<const double>, std::span<const double> g, auto pg) {
                               for (std::size_t i = 0; i < k; ++i)
                                 for (std::size_t j = 0; j < d; ++j) (*pg[0])[j] += g[i * d + j];
                             });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_rows");
  if (begin > end || end > a.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside " + shape_str(a.shape()));
  }
  const std::size_t d = a.dim(1);
  auto da = a.data();
  std::vector<double> out(da.begin() + static_cast<std::ptrdiff_t>(begin * d),
                          da.begin() + static_cast<std::ptrdiff_t>(end * d));
  return detail::make_result({end - begin, d}, std::move(out), {a},
                             [begin, d](std::span<const double>, std::span<const double> g, auto pg) {
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 (*pg[0])[begin * d + i] += g[i];
                             });
}

Tensor mean_rows(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) == 0) {
    throw DimensionError("mean_rows: expected non-empty 2-D tensor, got " + shape_str(a.shape()));
  }
  const std::size_t k = a.dim(0), d = a.dim(1);
  auto da = a.data();
  std::vector<double> out(d, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += da[i * d + j];
  for (double& v : out) v /= static_cast<double>(k);
  return detail::make_result({d}, std::move(out), {a},
                             [k, d](std::span<const double>, std::span<const double> g, auto pg) {
                               const double inv = 1.0 / static_cast<double>(k);
                               for (std::size_t i = 0; i < k; ++i)
                                 for (std::size_t j = 0; j < d; ++j)
                                   (*pg[0])[i * d + j] += g[j] * inv;
                             });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result({}, {s}, {a},
                             [](std::span<const double>, std::span<const double> g, auto pg) {
                               for (double& v : *pg[0]) v += g[0];
                             });
}

Tensor stack(std::span<const Tensor> parts) {
  std::vector<double> out;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    sizes.push_back(p.numel());
  }
  const std::size_t n = out.size();
  return detail::make_result({n}, std::move(out), std::vector<Tensor>(parts.begin(), parts.end()),
                             [sizes = std::move(sizes)](std::span<const double>,
                                                        std::span<const double> g, auto pg) {
                               std::size_t off = 0;
                               for (std::size_t p = 0; p < pg.size(); ++p) {
                                 if (pg[p])
                                   for (std::size_t i = 0; i < sizes[p]; ++i)
                                     (*pg[p])[i] += g[off + i];
                                 off += sizes[p];
                               }
                             });
}

Tensor cosine(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel() || a.numel() == 0) {
    throw DimensionError("cosine: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  auto da = a.data(), db = b.data();
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < da.size(); ++i) {
    dot += da[i] * db[i];
    na += da[i] * da[i];
    nb += db[i] * db[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na == 0.0 || nb == 0.0) throw ContractError("cosine: zero-norm input");
  const double c = dot / (na * nb);
  return detail::make_result(
      {}, {c}, {a, b}, [a, b, na, nb, c](std::span<const double>, std::span<const double> g, auto pg) {
        auto da = a.data(), db = b.data();
        // d cos / d a = b/(|a||b|) - cos * a/|a|^2
        if (pg[0])
          for (std::size_t i = 0; i < da.size(); ++i)
            (*pg[0])[i] += g[0] * (db[i] / (na * nb) - c * da[i] / (na * na));
        if (pg[1])
          for (std::size_t i = 0; i < db.size(); ++i)
            (*pg[1])[i] += g[0] * (da[i] / (na * nb) - c * db[i] / (nb * nb));
      });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                        AttentionTrace* trace) {
  require_rank(q, 2, "causal_attention");
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  const std::size_t t = q.dim(0), d = q.dim(1);
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("causal_attention: width " + std::to_string(d) +
                         " not divisible into " + std::to_string(n_heads) + " heads");
  }
  const std::size_t hd = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto ti = static_cast<Eigen::Index>(t);
  const auto hdi = static_cast<Eigen::Index>(hd);
  const Strided stride(static_cast<Eigen::Index>(d));

  std::vector<double> out(t * d, 0.0);
  // probs[h] is T×T, zero above the diagonal.
  std::vector<MatRM> probs(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    ConstStridedMap qh(q.data().data() + h * hd, ti, hdi, stride);
    ConstStridedMap kh(k.data().data() + h * hd, ti, hdi, stride);
    ConstStridedMap vh(v.data().data() + h * hd, ti, hdi, stride);
    MatRM s = (qh * kh.transpose()) * inv_sqrt;
    for (Eigen::Index i = 0; i < ti; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j <= i; ++j) mx = std::max(mx, s(i, j));
      double z = 0.0;
      for (Eigen::Index j = 0; j <= i; ++j) {
        s(i, j) = std::exp(s(i, j) - mx);
        z += s(i, j);
      }
      for (Eigen::Index j = 0; j <= i; ++j) s(i, j) /= z;
      for (Eigen::Index j = i + 1; j < ti; ++j) s(i, j) = 0.0;
    }
    MutStridedMap oh(out.data() + h * hd, ti, hdi, stride);
    oh.noalias() = s * vh;
    probs[h] = std::move(s);
  }
  if (trace) {
    trace->n_heads = n_heads;
    trace->seq_len = t;
    trace->weights.assign(n_heads, {});
    for (std::size_t h = 0; h < n_heads; ++h)
      trace->weights[h].assign(probs[h].data(), probs[h].data() + t * t);
  }
  return detail::make_result(
      {t, d}, std::move(out), {q, k, v},
      [q, k, v, probs = std::move(probs), n_heads, hd, ti, hdi, stride, inv_sqrt](
          std::span<const double>, std::span<const double> g, auto pg) {
        for (std::size_t h = 0; h < n_heads; ++h) {
          const auto off = h * hd;
          ConstStridedMap qh(q.data().data() + off, ti, hdi, stride);
          ConstStridedMap kh(k.data().data() + off, ti, hdi, stride);
          ConstStridedMap vh(v.data().data() + off, ti, hdi, stride);
          ConstStridedMap gh(g.data() + off, ti, hdi, stride);
          const MatRM& p = probs[h];
          if (pg[2]) {
            MutStridedMap gv(pg[2]->data() + off, ti, hdi, stride);
            gv.noalias() += p.transpose() * gh;
          }
          if (!pg[0] && !pg[1]) continue;
          MatRM dp = gh * vh.transpose();
          // dS = P ⊙ (dP − rowsum(dP ⊙ P)), scaled by 1/sqrt(hd).
          for (Eigen::Index i = 0; i < ti; ++i) {
            double dot = 0.0;
            for (Eigen::Index j = 0; j <= i; ++j) dot += dp(i, j) * p(i, j);
            for (Eigen::Index j = 0; j <= i; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot) * inv_sqrt;
            for (Eigen::Index j = i + 1; j < ti; ++j) dp(i, j) = 0.0;
          }
          if (pg[0]) {
            MutStridedMap gq(pg[0]->data() + off, ti, hdi, stride);
            gq.noalias() += dp * kh;
          }
          if (pg[1]) {
            MutStridedMap gk(pg[1]->data() + off, ti, hdi, stride);
            gk.noalias() += dp.transpose() * qh;
          }
        }
      });
}

}  // namespace uniicl
