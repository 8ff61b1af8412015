#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace eoc {

using Shape = std::vector<std::size_t>;

/// Raised for every shape/extent disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty unless requires_grad
  bool requires_grad = false;
  bool live = false;  // received gradient during the current backward sweep
};

/// Dense row-major array of doubles with optional gradient storage.
///
/// Copies are shallow handles onto the same storage, the way parameters are
/// shared between the model and the optimizer. Use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl().data.size(); }

  std::span<double> data() { return impl().data; }
  std::span<const double> data() const { return impl().data; }
  std::vector<double> to_vector() const { return impl().data; }

  bool requires_grad() const { return impl().requires_grad; }
  Tensor& set_requires_grad(bool flag);
  std::span<double> grad();
  std::span<const double> grad() const;
  void zero_grad();

  double item() const;
  double& operator[](std::size_t i) { return impl().data[i]; }
  double operator[](std::size_t i) const { return impl().data[i]; }

  /// Deep copy of the values; keeps requires_grad, drops graph history.
  Tensor clone() const;
  /// Deep copy of the values without gradient tracking.
  Tensor detach() const;

  TensorImpl& impl() const;
  const std::shared_ptr<TensorImpl>& handle() const { return impl_; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  friend Tensor make_result(Shape, bool);

  std::shared_ptr<TensorImpl> impl_;
};

/// Allocates an op output; gradient storage is attached when `tracked`.
Tensor make_result(Shape shape, bool tracked);

/// Ordered record of executed operations. Nodes are appended in execution
/// order, so every node's inputs are leaves or outputs of earlier nodes.
class Tape {
 public:
  struct Node {
    std::string op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    std::function<void()> backward;
  };

  /// The tape of the calling thread.
  static Tape& current();

  void record(std::string op, std::vector<Tensor> inputs, const Tensor& output,
              std::function<void()> backward);
  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  /// Reverse sweep from `loss`. Nodes whose output received no gradient are
  /// skipped; every node runs at most once. The tape is cleared afterwards.
  void backward(const Tensor& loss);

 private:
  std::vector<Node> nodes_;
};

/// True when new ops should record onto the tape.
bool grad_enabled();

/// Disables recording for its lifetime (inference, teacher passes, probes).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Whether an op over `inputs` should be tracked.
bool any_tracked(std::initializer_list<const Tensor*> inputs);

/// Accumulates d(loss)/d(t) into every reachable tensor with requires_grad.
/// Leaf gradients accumulate across calls; call zero_grad() between steps.
void backward(const Tensor& loss);

}  // namespace eoc
