#include "uniicl/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include "uniicl/errors.hpp"

namespace uniicl {

namespace {

thread_local Precision tl_precision = Precision::kFloat32;
thread_local bool tl_grad_enabled = true;
std::atomic<std::uint64_t> g_next_seq{1};

void round_values(std::vector<double>& values) {
  if (tl_precision == Precision::kFloat64) return;
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

const Shape& empty_shape() {
  static const Shape kEmpty;
  return kEmpty;
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

Precision current_precision() { return tl_precision; }

PrecisionScope::PrecisionScope(Precision p) : saved_(tl_precision) { tl_precision = p; }
PrecisionScope::~PrecisionScope() { tl_precision = saved_; }

bool grad_enabled() { return tl_grad_enabled; }

NoGradScope::NoGradScope() : saved_(tl_grad_enabled) { tl_grad_enabled = false; }
NoGradScope::~NoGradScope() { tl_grad_enabled = saved_; }

Tensor::Tensor() = default;

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  round_values(values);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from(Shape{}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_ ? node_->shape : empty_shape(); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape()));
  }
  return shape()[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->value.size() : 0; }

std::size_t Tensor::rows() const {
  if (rank() == 2) return shape()[0];
  if (rank() == 1) return 1;
  throw DimensionError("rows() needs a 1-D or 2-D tensor, got " + shape_str(shape()));
}

std::size_t Tensor::cols() const { return rank() == 0 ? 1 : shape().back(); }

std::span<const double> Tensor::data() const {
  if (!node_) return {};
  return node_->value;
}

std::vector<double> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::is_leaf() const { return node_ && node_->parents.empty() && !node_->backward; }

void Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw ContractError("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = flag;
}

void Tensor::assign(std::span<const double> values) {
  if (!is_leaf()) throw ContractError("assign on a non-leaf tensor");
  if (values.size() != node_->value.size()) {
    throw DimensionError("assign of " + std::to_string(values.size()) + " values into " +
                         shape_str(node_->shape));
  }
  std::copy(values.begin(), values.end(), node_->value.begin());
  round_values(node_->value);
}

Tensor Tensor::detach() const {
  if (!node_) return {};
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  if (t.defined()) t.node_->requires_grad = requires_grad();
  return t;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto da = a.data();
  auto db = b.data();
  return da.size() == db.size() &&
         (da.empty() || std::memcmp(da.data(), db.data(), da.size() * sizeof(double)) == 0);
}

const std::vector<double>* Gradients::find(const Tensor& t) const {
  auto it = grads_.find(t.id());
  return it == grads_.end() ? nullptr : &it->second;
}

const std::vector<double>& Gradients::at(const Tensor& t) const {
  const auto* g = find(t);
  if (!g) throw ContractError("no gradient recorded for tensor " + shape_str(t.shape()));
  return *g;
}

void Gradients::accumulate(const Tensor& t, std::span<const double> g) {
  auto& slot = grads_[t.id()];
  if (slot.empty()) slot.assign(g.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
}

void Gradients::insert(const void* id, std::vector<double> g) { grads_[id] = std::move(g); }

void Gradients::scale(double factor) {
  for (auto& [_, g] : grads_)
    for (double& v : g) v *= factor;
}

void Gradients::merge(const Gradients& other) {
  for (const auto& [id, g] : other.grads_) {
    auto& slot = grads_[id];
    if (slot.empty()) slot.assign(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
  }
}

Gradients backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  Gradients result;
  if (!loss.requires_grad()) return result;

  // Collect the reachable sub-graph of nodes that carry gradients.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{loss.node().get()};
  seen.insert(stack.back());
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

  std::unordered_map<detail::Node*, std::vector<double>> grads;
  grads[loss.node().get()] = std::vector<double>(1, 1.0);

  for (auto* n : order) {
    auto it = grads.find(n);
    if (it == grads.end()) continue;
    if (n->parents.empty()) {
      result.insert(n, std::move(it->second));
      continue;
    }
    std::vector<std::vector<double>*> parent_grads(n->parents.size(), nullptr);
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      auto* p = n->parents[i].get();
      if (!p->requires_grad) continue;
      auto& g = grads[p];
      if (g.empty()) g.assign(p->value.size(), 0.0);
      parent_grads[i] = &g;
    }
    if (n->backward) n->backward(n->value, it->second, parent_grads);
    grads.erase(it);
  }
  return result;
}

namespace detail {

Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                   BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  round_values(values);
  node->value = std::move(values);
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  bool needs_grad = false;
  if (tl_grad_enabled) {
    for (const auto& p : parents) needs_grad = needs_grad || p.requires_grad();
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

}  // namespace uniicl
