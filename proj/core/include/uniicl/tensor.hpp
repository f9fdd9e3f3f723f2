#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace uniicl {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Storage precision of newly produced tensor values. Values are held in
/// 64-bit slots; in kFloat32 mode every op rounds its output through float,
/// so results are exactly what 32-bit storage would hold. kFloat64 exists for
/// gradient-check suites.
enum class Precision { kFloat32, kFloat64 };

Precision current_precision();

/// Sets the precision for the current thread until destroyed.
class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p);
  ~PrecisionScope();
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision saved_;
};

bool grad_enabled();

/// Disables graph recording on the current thread (inference paths).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool saved_;
};

class Tensor;

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// Receives the op's own output value and gradient and accumulates into
/// parent gradients. A null entry in `parent_grads` means that parent does
/// not need a gradient.
using BackwardFn = std::function<void(std::span<const double> out_value,
                                      std::span<const double> out_grad,
                                      std::span<std::vector<double>*> parent_grads)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<NodePtr> parents;
  BackwardFn backward;
};

}  // namespace detail

/// Dense row-major tensor. Values are immutable once an op has produced
/// them; only leaf tensors (parameters) may be reassigned, which is how
/// optimizers and finite-difference checks perturb them.
class Tensor {
 public:
  Tensor();

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  /// Rows of a 2-D tensor (1 for a vector).
  std::size_t rows() const;
  /// Last-axis size.
  std::size_t cols() const;

  std::span<const double> data() const;
  std::vector<double> to_vector() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }
  double item() const;

  bool requires_grad() const;
  bool is_leaf() const;
  /// Only valid on leaves.
  void set_requires_grad(bool flag);
  /// Overwrites the values of a leaf tensor in place.
  void assign(std::span<const double> values);

  /// Same values, no graph history, requires_grad=false.
  Tensor detach() const;
  /// Deep copy of a leaf, preserving requires_grad.
  Tensor clone() const;

  bool defined() const { return static_cast<bool>(node_); }
  const void* id() const { return node_.get(); }

  // Internal plumbing used by ops.
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
  const detail::NodePtr& node() const { return node_; }

 private:
  detail::NodePtr node_;
};

/// Bitwise value equality (shape and every value).
bool bitwise_equal(const Tensor& a, const Tensor& b);

/// Gradients of leaf tensors produced by backward().
class Gradients {
 public:
  const std::vector<double>* find(const Tensor& t) const;
  bool contains(const Tensor& t) const { return find(t) != nullptr; }
  /// Throws ContractError when absent.
  const std::vector<double>& at(const Tensor& t) const;
  std::size_t size() const { return grads_.size(); }

  void accumulate(const Tensor& t, std::span<const double> g);
  void insert(const void* id, std::vector<double> g);
  void scale(double factor);

  /// Adds every entry of `other` into this map.
  void merge(const Gradients& other);

 private:
  std::unordered_map<const void*, std::vector<double>> grads_;
};

/// Reverse-mode sweep from a scalar loss. Nodes are visited in reverse
/// creation order, each exactly once. Every reachable leaf that requires a
/// gradient appears in the result; nothing else does.
Gradients backward(const Tensor& loss);

namespace detail {

/// Builds an op output. Rounds values to the current precision and records
/// the graph edge when grad mode is on and any parent requires a gradient.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                   BackwardFn fn);

}  // namespace detail

}  // namespace uniicl
