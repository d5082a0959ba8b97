#include "mkbe/ad/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mkbe::ad {

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor shape must have at least one extent");
  for (auto extent : shape) {
    if (extent == 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape));
  }
}

template <class Real>
thread_local Tape<Real>* active_tape = nullptr;

}  // namespace

template <class Real>
void check_finite(std::string_view op, std::span<const Real> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream msg;
      msg << "non-finite value " << values[i] << " at index " << i << " produced by op '" << op << "'";
      throw NonFiniteError(std::string(op), msg.str());
    }
  }
}

template <class Real>
Tensor<Real> Tensor<Real>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Real(0), requires_grad);
}

template <class Real>
Tensor<Real> Tensor<Real>::full(Shape shape, Real fill, bool requires_grad) {
  validate_shape(shape);
  std::vector<Real> values(shape_numel(shape), fill);
  return from(std::move(shape), std::move(values), requires_grad);
}

template <class Real>
Tensor<Real> Tensor<Real>::from(Shape shape, std::vector<Real> values, bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("tensor shape " + shape_str(shape) + " does not match " +
                                std::to_string(values.size()) + " values");
  }
  check_finite<Real>("from", values);
  auto node = std::make_shared<Node<Real>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  Tensor t(std::move(node));
  t.set_requires_grad(requires_grad);
  return t;
}

template <class Real>
Node<Real>& Tensor<Real>::node() {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return *node_;
}

template <class Real>
const Node<Real>& Tensor<Real>::node() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return *node_;
}

template <class Real>
std::size_t Tensor<Real>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw std::out_of_range("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

template <class Real>
std::span<Real> Tensor<Real>::mutable_data() {
  auto& n = node();
  if (!n.leaf) throw std::logic_error("op output '" + n.op + "' is immutable");
  return n.value;
}

template <class Real>
Real Tensor<Real>::item() const {
  if (size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
  return node().value[0];
}

template <class Real>
void Tensor<Real>::set_requires_grad(bool flag) {
  auto& n = node();
  n.requires_grad = flag;
  if (flag) {
    n.grad.assign(n.value.size(), Real(0));
  } else {
    n.grad.clear();
    n.grad.shrink_to_fit();
  }
}

template <class Real>
void Tensor<Real>::zero_grad() {
  auto& g = node().grad;
  std::fill(g.begin(), g.end(), Real(0));
}

template <class Real>
Tensor<Real> Tensor<Real>::clone(bool requires_grad) const {
  return from(shape(), node().value, requires_grad);
}

template <class Real>
Tape<Real>::Tape() : previous_(active_tape<Real>) {
  active_tape<Real> = this;
}

template <class Real>
Tape<Real>::~Tape() {
  active_tape<Real> = previous_;
}

template <class Real>
Tape<Real>* Tape<Real>::active() {
  return active_tape<Real>;
}

template <class Real>
void Tape<Real>::record(std::string_view op, const Tensor<Real>& output, std::function<void()> backward) {
  records_.push_back(Record{std::string(op), output.node_ptr(), std::move(backward)});
}

template <class Real>
void Tape<Real>::backward(const Tensor<Real>& loss) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward: loss is not connected to any parameter");
  }
  for (auto& rec : records_) {
    std::fill(rec.output->grad.begin(), rec.output->grad.end(), Real(0));
  }
  Tensor<Real> seed = loss;
  seed.mutable_grad()[0] += Real(1);
  visits_ = 0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    it->backward();
    ++visits_;
  }
}

template <class Real>
Tensor<Real> make_result(std::string_view op, Shape shape, std::vector<Real> values,
                         std::initializer_list<const Tensor<Real>*> inputs) {
  check_finite<Real>(op, values);
  auto node = std::make_shared<Node<Real>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = std::string(op);
  if (Tape<Real>::active() != nullptr) {
    node->requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                      [](const Tensor<Real>* t) { return t->requires_grad(); });
  }
  if (node->requires_grad) {
    node->leaf = false;
    node->grad.assign(node->value.size(), Real(0));
  }
  return Tensor<Real>(std::move(node));
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template Tensor<float> make_result(std::string_view, Shape, std::vector<float>,
                                   std::initializer_list<const Tensor<float>*>);
template Tensor<double> make_result(std::string_view, Shape, std::vector<double>,
                                    std::initializer_list<const Tensor<double>*>);
template void check_finite<float>(std::string_view, std::span<const float>);
template void check_finite<double>(std::string_view, std::span<const double>);

}  // namespace mkbe::ad
