#include "fusionunet/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace fusionunet {

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + to_string(shape));
    n *= d;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Scalar fill, bool requires_grad)
    : node_(std::make_shared<Node<Scalar>>()) {
  const Index n = numel(shape);
  node_->shape = std::move(shape);
  node_->value = Vector<Scalar>::Constant(n, fill);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Vector<Scalar> values, bool requires_grad)
    : node_(std::make_shared<Node<Scalar>>()) {
  if (numel(shape) != values.size()) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     to_string(shape));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, std::initializer_list<Scalar> values, bool requires_grad)
    : Tensor(std::move(shape),
             Vector<Scalar>(Eigen::Map<const Vector<Scalar>>(values.begin(),
                                                             static_cast<Index>(values.size()))),
             requires_grad) {}

template <typename Scalar>
Vector<Scalar>& Tensor<Scalar>::mutable_value() {
  if (!node_->is_leaf()) throw AutodiffError("cannot mutate the output of an op");
  return node_->value;
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

template <typename Scalar>
Scalar Tensor<Scalar>::at(std::initializer_list<Index> index) const {
  if (index.size() != rank()) throw ShapeError("index rank mismatch");
  Index flat = 0;
  std::size_t axis = 0;
  for (Index i : index) {
    if (i < 0 || i >= node_->shape[axis]) throw std::out_of_range("tensor index out of range");
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

template <typename Scalar>
void Tensor<Scalar>::set_requires_grad(bool on) {
  if (!node_->is_leaf()) throw AutodiffError("requires_grad can only be set on leaves");
  node_->requires_grad = on;
}

template <typename Scalar>
const Vector<Scalar>& Tensor<Scalar>::grad() const {
  if (!has_grad()) throw AutodiffError("tensor has no gradient");
  return node_->grad;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  return Tensor(node_->shape, node_->value, false);
}

template <typename Scalar>
Tape<Scalar> Tape<Scalar>::trace(const Tensor<Scalar>& root) {
  Tape tape;
  std::unordered_set<const Node<Scalar>*> seen;
  // Iterative post-order DFS: a node is emitted after all of its inputs.
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<Scalar>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

template <typename Scalar>
void Tensor<Scalar>::backward() const {
  if (size() != 1) throw AutodiffError("backward() needs a scalar loss, got " + to_string(shape()));
  if (node_->released) throw AutodiffError("backward() already ran on this graph");
  if (!node_->requires_grad) throw AutodiffError("loss is detached from every trainable tensor");

  const Tape<Scalar> tape = Tape<Scalar>::trace(*this);
  for (const Node<Scalar>* n : tape.order()) {
    if (n->released) throw AutodiffError("graph shares nodes already consumed by backward()");
  }
  node_->accumulate(Vector<Scalar>::Ones(1));
  const auto& order = tape.order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
  for (Node<Scalar>* n : order) {
    if (n->is_leaf()) continue;
    n->backward = nullptr;
    n->inputs.clear();
    n->grad.resize(0);
    n->released = true;
  }
}

namespace {
thread_local bool g_grad_enabled = true;
thread_local std::uint64_t* g_kink_sink = nullptr;
thread_local detail::CostTally* g_cost_tally = nullptr;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

template <typename Scalar>
Tensor<Scalar> make_result(const char* op, Shape shape, Vector<Scalar> value,
                           std::initializer_list<const Tensor<Scalar>*> inputs,
                           std::function<void(Node<Scalar>&)> rule) {
  if (!value.allFinite()) throw NumericError(std::string("non-finite value produced by ") + op);
  auto node = std::make_shared<Node<Scalar>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  const bool record =
      g_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                                    [](const Tensor<Scalar>* t) { return t->requires_grad(); });
  if (record) {
    node->requires_grad = true;
    for (const Tensor<Scalar>* t : inputs) node->inputs.push_back(t->node());
    node->backward = std::move(rule);
  }
  return Tensor<Scalar>(std::move(node));
}

std::uint64_t* kink_sink() { return g_kink_sink; }
void set_kink_sink(std::uint64_t* sink) { g_kink_sink = sink; }

void mix_kink(std::uint64_t value) {
  // splitmix64 finalizer folded into the running hash
  std::uint64_t z = value + 0x9e3779b97f4a7c15ULL + (*g_kink_sink << 6) + (*g_kink_sink >> 2);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  *g_kink_sink ^= z ^ (z >> 31);
}

CostTally* cost_tally() { return g_cost_tally; }
void set_cost_tally(CostTally* tally) { g_cost_tally = tally; }

template Tensor<float> make_result(const char*, Shape, Vector<float>,
                                   std::initializer_list<const Tensor<float>*>,
                                   std::function<void(Node<float>&)>);
template Tensor<double> make_result(const char*, Shape, Vector<double>,
                                    std::initializer_list<const Tensor<double>*>,
                                    std::function<void(Node<double>&)>);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace fusionunet
