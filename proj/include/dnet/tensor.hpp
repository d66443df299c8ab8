#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dnet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Raised for shape/contract violations inside tensor operations.
class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by Tensor::check_finite when NaN or Inf is present.
class NonFiniteError : public TensorError {
 public:
  using TensorError::TensorError;
};

namespace detail {

struct Node;

/// One recorded operation. Holds its inputs and a rule that pushes the
/// output gradient into the inputs' gradients.
struct OpRecord {
  std::string name;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(const Node& out)> backward;
  bool consumed = false;
};

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<OpRecord> op;  // null for leaves

  std::vector<double>& ensure_grad();
};

}  // namespace detail

/// Dense row-major tensor of doubles taking part in a define-by-run
/// reverse-mode differentiation graph. Copies share storage, like a handle.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Direct write access; only meaningful on leaves (parameter updates, init).
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Runs reverse-mode differentiation from this scalar. Leaf gradients
  /// accumulate; the recorded graph is released afterwards and a second call
  /// on the same loss throws.
  void backward() const;

  void check_finite(const std::string& context = "tensor") const;

  /// Same values, cut from the graph.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Thread-local switch that suppresses graph recording (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

namespace detail {

using BackwardFn = std::function<void(const Node& out)>;

/// Builds an op result. Records the op on the graph only when grad mode is on
/// and some input requires grad.
Tensor make_result(std::string name, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs, BackwardFn backward);

bool any_requires_grad(const std::vector<Tensor>& inputs);

}  // namespace detail

}  // namespace dnet
