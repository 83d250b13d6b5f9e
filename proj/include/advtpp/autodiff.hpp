#ifndef ADVTPP_AUTODIFF_HPP_
#define ADVTPP_AUTODIFF_HPP_

// Minimal define-by-run reverse-mode automatic differentiation over dense
// tensors of rank 0, 1 or 2. Every tensor is 64-bit floating point.
//
// Usage:
//   ad::Tape tape;
//   ad::Tensor x = tape.leaf(ad::Tensor::vector({1, 2, 3}));
//   ad::Tensor y = ad::sum(x * x);
//   ad::Gradients g = tape.backward(y);
//   g.of(x);  // [2, 4, 6]
//
// A tracked tensor keeps a raw pointer to its Tape, so the Tape must outlive
// every tensor recorded on it. Tapes are not thread-safe; use one per worker.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace advtpp::ad {

using Shape = std::vector<std::size_t>;
using NodeId = std::size_t;

std::string shape_string(const Shape& shape);

class Tape;

class Tensor {
 public:
  // Scalar zero.
  Tensor();
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values);
  static Tensor filled(Shape shape, double value);
  static Tensor zeros(Shape shape) { return filled(std::move(shape), 0.0); }
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_->size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const { return *values_; }
  double operator[](std::size_t i) const { return (*values_)[i]; }
  double at(std::size_t r, std::size_t c) const;
  // Value of a single-element tensor.
  double item() const;

  bool tracked() const { return tape_ != nullptr; }
  NodeId node() const;
  Tape* tape() const { return tape_; }

  // Same values, no tape node.
  Tensor detach() const;

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> values_;
  Tape* tape_ = nullptr;
  NodeId node_ = 0;
};

// Per-node gradient buffers produced by Tape::backward. Only nodes the root
// depends on have entries; untracked tensors never do.
class Gradients {
 public:
  bool has(const Tensor& t) const;
  // Gradient with respect to t, or nullptr when t received none.
  const Tensor* find(const Tensor& t) const;
  // Gradient with respect to t; throws if absent.
  const Tensor& of(const Tensor& t) const;
  // Gradient with respect to t, zero-filled if absent.
  Tensor or_zero(const Tensor& t) const;

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<std::optional<Tensor>> by_node_;
};

class Tape {
 public:
  // Adds grad_out-weighted vector-Jacobian products into grad_in. Entries of
  // grad_in are null for untracked inputs.
  using Backward = std::function<void(std::span<const double> grad_out,
                                      std::span<std::vector<double>*> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers value as a gradient-tracked leaf.
  Tensor leaf(const Tensor& value);

  // Builds the output tensor. If any input is tracked it must live on this
  // tape, and the output is recorded as a node with the given backward rule.
  static Tensor record(Shape shape, std::vector<double> values,
                       std::initializer_list<const Tensor*> inputs,
                       Backward backward);
  static Tensor record(Shape shape, std::vector<double> values,
                       const std::vector<const Tensor*>& inputs,
                       Backward backward);

  // Reverse sweep from a tracked scalar root, visiting nodes in exact reverse
  // creation order.
  Gradients backward(const Tensor& root) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  static constexpr NodeId kUntracked = static_cast<NodeId>(-1);

  struct Node {
    std::vector<NodeId> inputs;  // kUntracked for constant inputs
    std::vector<std::size_t> input_sizes;
    Shape shape;
    Backward backward;
  };

  std::vector<Node> nodes_;
};

// Elementwise binary ops. Shapes must match exactly, or one operand must hold
// a single element (scalar-vs-tensor); no other broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
// a^p; negative bases require an integer exponent.
Tensor power(const Tensor& a, double p);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);

// [m,k]x[k,n] -> [m,n]; [m,k]x[k] -> [m].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// Reductions remove the reduced axis. The axis-less overloads reduce every
// element to a rank-0 scalar.
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis);
// Gradient flows to the first maximal element along the axis.
Tensor max(const Tensor& a, std::size_t axis);
Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a, std::size_t axis);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
// Elements [begin, end) along axis.
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin,
             std::size_t end);
// Rows of a rank-2 tensor (or elements of a rank-1 tensor) by index.
Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& indices);

// Helpers built on the primitives above.
Tensor dot(const Tensor& a, const Tensor& b);
// [n] -> [n,1] and [n] -> [1,n].
Tensor as_column(const Tensor& a);
Tensor as_row(const Tensor& a);
// Repeats a [n] vector as every row (or column) of a matrix via matmul with
// ones, keeping broadcasting explicit.
Tensor repeat_rows(const Tensor& v, std::size_t count);
Tensor repeat_cols(const Tensor& v, std::size_t count);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double b) {
  return add(a, Tensor::scalar(b));
}
inline Tensor operator*(double a, const Tensor& b) { return scale(b, a); }

struct GradCheckResult {
  bool pass = false;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

// Compares reverse-mode gradients of a scalar function against central
// differences at every coordinate of x. Relative error per coordinate is
// |a - n| / max(|a|, |n|, 1e-8). Coordinates with |a - n| <= atol (the
// finite-difference noise floor) are exempt. Throws NumericError if f is
// non-finite at any probe point.
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& x, double h, double tol,
                           double atol = 0.0);

}  // namespace advtpp::ad

#endif  // ADVTPP_AUTODIFF_HPP_
