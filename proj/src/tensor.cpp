#include "dnet/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace dnet {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& detail::Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

static void validate_shape(const Shape& shape) {
  if (shape.empty()) throw TensorError("tensor shape must have at least one extent");
  for (auto extent : shape)
    if (extent == 0) throw TensorError("tensor extents must be positive: " + shape_to_string(shape));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  validate_shape(shape);
  auto node = std::make_shared<detail::Node>();
  node->data.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != values.size())
    throw TensorError("value count " + std::to_string(values.size()) + " does not match shape " +
                      shape_to_string(shape));
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return full({1}, value, requires_grad); }

static const detail::Node& checked(const std::shared_ptr<detail::Node>& node) {
  if (!node) throw TensorError("use of undefined tensor");
  return *node;
}

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw TensorError("axis out of range");
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(node_).data.size(); }

std::span<const double> Tensor::data() const { return checked(node_).data; }

std::span<double> Tensor::mutable_data() {
  checked(node_);
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw TensorError("item() on tensor of shape " + shape_to_string(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  checked(node_);
  node_->requires_grad = flag;
}

bool Tensor::is_leaf() const { return checked(node_).op == nullptr; }

bool Tensor::has_grad() const { return !checked(node_).grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw TensorError("tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  checked(node_);
  return node_->ensure_grad();
}

void Tensor::zero_grad() {
  checked(node_);
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::check_finite(const std::string& context) const {
  for (double v : data())
    if (!std::isfinite(v)) throw NonFiniteError(context + ": non-finite value");
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = shape();
  node->data = node_->data;
  return Tensor(std::move(node));
}

void Tensor::backward() const {
  const auto& root = checked(node_);
  if (root.data.size() != 1)
    throw TensorError("backward() requires a scalar loss, got shape " + shape_to_string(root.shape));
  if (!root.op) throw TensorError("backward() on a tensor that is not on the graph");
  if (root.op->consumed) throw TensorError("backward() called twice on the same graph");

  // Iterative post-order DFS gives a topological order of recorded nodes.
  // Strong references keep intermediates alive while their consumers release inputs.
  std::vector<std::shared_ptr<detail::Node>> order;
  std::unordered_set<const detail::Node*> visited;
  std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
  stack.emplace_back(node_, 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->op && next < node->op->inputs.size()) {
      std::shared_ptr<detail::Node> child = node->op->inputs[next++];
      if (child->op && !child->op->consumed && visited.insert(child.get()).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = it->get();
    auto& op = *node->op;
    if (!node->grad.empty()) op.backward(*node);
    op.consumed = true;
    op.backward = nullptr;
    op.inputs.clear();
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_mode_enabled() { return g_grad_enabled; }

bool detail::any_requires_grad(const std::vector<Tensor>& inputs) {
  for (const auto& t : inputs)
    if (t.requires_grad()) return true;
  return false;
}

Tensor detail::make_result(std::string name, Shape shape, std::vector<double> data,
                           std::vector<Tensor> inputs, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (g_grad_enabled && any_requires_grad(inputs)) {
    node->requires_grad = true;
    auto op = std::make_shared<OpRecord>();
    op->name = std::move(name);
    for (auto& t : inputs) op->inputs.push_back(t.node());
    op->backward = std::move(backward);
    node->op = std::move(op);
  }
  return Tensor(std::move(node));
}

}  // namespace dnet
