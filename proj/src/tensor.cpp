#include "eocount/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace eoc {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  for (auto e : shape)
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
}

thread_local bool g_grad_enabled = true;

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_shape(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  Tensor t(std::move(impl));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != values.size())
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  Tensor t(std::move(impl));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

TensorImpl& Tensor::impl() const {
  if (!impl_) throw std::logic_error("use of an undefined tensor");
  return *impl_;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = impl().shape;
  if (axis >= s.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  auto& i = impl();
  i.requires_grad = flag;
  if (flag)
    i.grad.assign(i.data.size(), 0.0);
  else
    i.grad.clear();
  return *this;
}

std::span<double> Tensor::grad() {
  auto& i = impl();
  if (!i.requires_grad) throw std::logic_error("tensor does not require grad");
  return i.grad;
}

std::span<const double> Tensor::grad() const {
  const auto& i = impl();
  if (!i.requires_grad) throw std::logic_error("tensor does not require grad");
  return i.grad;
}

void Tensor::zero_grad() {
  auto& i = impl();
  std::fill(i.grad.begin(), i.grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return impl().data[0];
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.set_requires_grad(requires_grad());
  return t;
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = this->impl().shape;
  impl->data = this->impl().data;
  return Tensor(std::move(impl));
}

Tensor make_result(Shape shape, bool tracked) {
  auto impl = std::make_shared<TensorImpl>();
  const auto n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->data.assign(n, 0.0);
  if (tracked) {
    impl->requires_grad = true;
    impl->grad.assign(n, 0.0);
  }
  return Tensor(std::move(impl));
}

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(std::string op, std::vector<Tensor> inputs, const Tensor& output,
                  std::function<void()> backward) {
  Node node;
  node.op = std::move(op);
  node.inputs.reserve(inputs.size());
  for (const auto& t : inputs) node.inputs.push_back(t.handle());
  node.output = output.handle();
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw std::logic_error("backward() on a loss that does not require grad");

  auto& root = loss.impl();
  root.grad[0] += 1.0;
  root.live = true;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output->live) continue;
    it->backward();
    for (auto& in : it->inputs)
      if (in->requires_grad) in->live = true;
  }
  for (auto& node : nodes_) {
    node.output->live = false;
    for (auto& in : node.inputs) in->live = false;
  }
  root.live = false;
  nodes_.clear();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool any_tracked(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_enabled) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t && t->defined() && t->requires_grad(); });
}

void backward(const Tensor& loss) { Tape::current().backward(loss); }

}  // namespace eoc
