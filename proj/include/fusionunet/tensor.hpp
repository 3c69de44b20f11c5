#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace fusionunet {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a forward value becomes NaN/Inf or a loss diverges.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename Scalar>
struct Node;

template <typename Scalar>
using NodePtr = std::shared_ptr<Node<Scalar>>;

/// One vertex of the autodiff graph. Interior nodes own a backward rule that
/// pushes `grad` into the grads of `inputs`.
template <typename Scalar>
struct Node {
  Shape shape;
  Vector<Scalar> value;
  Vector<Scalar> grad;  // empty until something is accumulated
  bool requires_grad = false;
  bool released = false;
  const char* op = nullptr;  // null for leaves
  std::vector<NodePtr<Scalar>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return op == nullptr; }

  template <typename Derived>
  void accumulate(const Eigen::DenseBase<Derived>& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }

  /// Grad buffer sized and zero-filled, for rules that scatter into it.
  Vector<Scalar>& grad_buffer() {
    if (grad.size() == 0) grad = Vector<Scalar>::Zero(value.size());
    return grad;
  }
};

/// Dense N-d array with reverse-mode autodiff. Copies share the underlying
/// node; values are immutable once produced by an op.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;

  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0), bool requires_grad = false);
  Tensor(Shape shape, Vector<Scalar> values, bool requires_grad = false);
  Tensor(Shape shape, std::initializer_list<Scalar> values, bool requires_grad = false);
  explicit Tensor(NodePtr<Scalar> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), Scalar(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), Scalar(1)); }
  static Tensor scalar(Scalar v, bool requires_grad = false) {
    return Tensor(Shape{1}, v, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  Index size() const { return node_->value.size(); }

  const Vector<Scalar>& value() const { return node_->value; }
  const Scalar* data() const { return node_->value.data(); }
  /// Writable storage; only leaves may be mutated (parameters, buffers).
  Vector<Scalar>& mutable_value();
  Scalar item() const;
  Scalar at(std::initializer_list<Index> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return node_->grad.size() != 0; }
  const Vector<Scalar>& grad() const;
  void zero_grad() { node_->grad.resize(0); }

  /// Leaf copy of the value with no graph history.
  Tensor detach() const;

  /// Reverse sweep from this scalar. Frees the graph; a second call on the
  /// same loss throws.
  void backward() const;

  const NodePtr<Scalar>& node() const { return node_; }

 private:
  NodePtr<Scalar> node_;
};

/// Topologically ordered view of the graph below a root: inputs precede
/// the ops that consume them, and every node appears once.
template <typename Scalar>
class Tape {
 public:
  static Tape trace(const Tensor<Scalar>& root);

  const std::vector<Node<Scalar>*>& order() const { return order_; }
  std::size_t size() const { return order_.size(); }

 private:
  std::vector<Node<Scalar>*> order_;
};

/// Thread-local switch; with recording off, ops produce plain leaves.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

/// Wraps `value` into a result tensor. When recording is on and any input
/// needs a gradient, the node keeps `inputs` and `rule`.
template <typename Scalar>
Tensor<Scalar> make_result(const char* op, Shape shape, Vector<Scalar> value,
                           std::initializer_list<const Tensor<Scalar>*> inputs,
                           std::function<void(Node<Scalar>&)> rule);

/// Kink probe: non-smooth ops (relu, maxpool) hash their branch decisions
/// into the active sink so finite differences can detect crossings.
std::uint64_t* kink_sink();
void set_kink_sink(std::uint64_t* sink);
void mix_kink(std::uint64_t value);

/// FLOP/MAC tally filled by ops while a counter is installed.
struct CostTally {
  std::int64_t macs = 0;
  std::int64_t flops = 0;
};
CostTally* cost_tally();
void set_cost_tally(CostTally* tally);
inline void add_cost(std::int64_t macs, std::int64_t flops) {
  if (auto* t = cost_tally()) {
    t->macs += macs;
    t->flops += flops;
  }
}

}  // namespace detail

}  // namespace fusionunet
