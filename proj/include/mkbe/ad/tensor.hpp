#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mkbe::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when an op produces NaN or Inf. Carries the op name.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(std::string op, const std::string& what)
      : std::runtime_error(what), op_(std::move(op)) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

template <class Real>
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // non-empty iff requires_grad
  bool requires_grad = false;
  bool leaf = true;
  std::string op = "leaf";
};

/// Shared handle to a dense row-major array. Copies alias the same storage,
/// so a parameter handed to an op and later updated by the optimizer is one
/// object. Non-leaf values are never written after their op returns.
template <class Real>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real fill, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real v) { return from({1}, {v}); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return node().shape.size(); }
  std::size_t size() const { return node().value.size(); }

  std::span<const Real> data() const { return node().value; }
  /// Writable view; only leaves (parameters, inputs) may be mutated.
  std::span<Real> mutable_data();
  Real item() const;
  Real at(std::size_t i) const { return node().value.at(i); }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool flag);
  bool is_leaf() const { return node().leaf; }
  const std::string& op_name() const { return node().op; }

  std::span<const Real> grad() const { return node().grad; }
  /// Grad storage is shared by every handle, so const handles may write it.
  std::span<Real> mutable_grad() const { return node_->grad; }
  void zero_grad();

  /// Deep copy detached from any tape.
  Tensor clone(bool requires_grad = false) const;
  std::vector<Real> to_vector() const { return node().value; }

  Node<Real>& node();
  const Node<Real>& node() const;
  const std::shared_ptr<Node<Real>>& node_ptr() const { return node_; }

  friend bool same_storage(const Tensor& a, const Tensor& b) { return a.node_ == b.node_; }

  template <class R>
  friend class Tape;
  template <class R>
  friend Tensor<R> make_result(std::string_view op, Shape shape, std::vector<R> values,
                               std::initializer_list<const Tensor<R>*> inputs);

 private:
  explicit Tensor(std::shared_ptr<Node<Real>> node) : node_(std::move(node)) {}
  std::shared_ptr<Node<Real>> node_;
};

/// Ordered record of differentiable ops executed on one thread.
///
/// Constructing a Tape makes it the active tape of the calling thread until it
/// is destroyed; ops executed with no active tape are evaluated without
/// recording (inference). Records are appended after their inputs exist, so
/// the record order is a topological order and backward replays it in reverse.
template <class Real>
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::string_view op, const Tensor<Real>& output, std::function<void()> backward);

  /// Accumulates d(loss)/d(leaf) into every leaf that requires grad.
  /// Intermediate buffers are cleared first, so a second call adds the same
  /// gradient to leaves again.
  void backward(const Tensor<Real>& loss);

  std::size_t size() const noexcept { return records_.size(); }
  /// Number of record visits during the last backward call.
  std::size_t last_backward_visits() const noexcept { return visits_; }

 private:
  struct Record {
    std::string op;
    std::shared_ptr<Node<Real>> output;
    std::function<void()> backward;
  };
  std::vector<Record> records_;
  Tape* previous_ = nullptr;
  std::size_t visits_ = 0;
};

/// Creates an op output, checks finiteness, and marks it as requiring grad
/// when a tape is active and any input requires grad. Callers record the
/// backward closure when `out.requires_grad()` is true.
template <class Real>
Tensor<Real> make_result(std::string_view op, Shape shape, std::vector<Real> values,
                         std::initializer_list<const Tensor<Real>*> inputs);

template <class Real>
void check_finite(std::string_view op, std::span<const Real> values);

}  // namespace mkbe::ad
