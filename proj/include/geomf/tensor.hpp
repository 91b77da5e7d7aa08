#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shape plus a shared, row-major value buffer. Tensors created
// outside a Tape are plain values. Tape::watch() returns a tracked alias of a
// tensor; every op applied to a tracked input records a node on that tape, and
// Tape::backward() walks the nodes in reverse creation order.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "geomf/error.hpp"

namespace geomf {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

class Tape;

class Tensor {
 public:
  Tensor() = default;
  /// Zero-filled tensor.
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor full(Shape shape, double value);
  static Tensor zeros_like(const Tensor& other);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  std::size_t dim(std::size_t axis) const;

  std::span<const double> values() const;
  /// Writable view of the storage. Only for parameter initialisation and
  /// optimizer updates; never call while a tape holds an alias of this tensor.
  std::span<double> mutable_values();

  double item() const;
  double operator[](std::size_t flat) const { return (*data_)[flat]; }
  double at(std::initializer_list<std::size_t> index) const;

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

  /// Untracked alias sharing storage.
  Tensor detach() const;
  /// Deep copy, untracked.
  Tensor clone() const;

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradient buffers of a node's inputs, handed to backward rules.
class GradientSink {
 public:
  /// Accumulation buffer of the k-th recorded input; empty if that input is
  /// not tracked (constants receive no gradient).
  std::span<double> operator[](std::size_t k);

 private:
  friend class Tape;
  GradientSink(Tape& tape, const std::vector<std::size_t>& inputs) : tape_(tape), inputs_(inputs) {}
  Tape& tape_;
  const std::vector<std::size_t>& inputs_;
};

using BackwardFn = std::function<void(std::span<const double> grad_out, GradientSink& inputs)>;

class Tape {
 public:
  static constexpr std::size_t kUntracked = std::numeric_limits<std::size_t>::max();

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `leaf` as a differentiable input; the returned alias shares storage.
  Tensor watch(const Tensor& leaf);

  /// Records `result` as produced from `inputs` with the given backward rule.
  Tensor record(Tensor result, const std::vector<const Tensor*>& inputs, BackwardFn backward);

  /// Reverse sweep from a rank-0 loss. A tape supports exactly one sweep.
  void backward(const Tensor& loss);

  /// Gradient of the loss w.r.t. `t`; zeros if `t` does not influence the loss.
  Tensor grad(const Tensor& t) const;
  /// Raw gradient buffer; empty span if no gradient reached `t`.
  std::span<const double> grad_values(const Tensor& t) const;

  std::size_t node_count() const { return nodes_.size(); }
  bool finished() const { return finished_; }

 private:
  friend class GradientSink;
  struct Node {
    Shape shape;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };
  std::span<double> gradient_buffer(std::size_t id);

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool finished_ = false;
};

/// Tape shared by the tracked inputs, nullptr if none is tracked. Throws if
/// tracked inputs live on different tapes.
Tape* common_tape(std::initializer_list<const Tensor*> inputs);

/// Records `result` on the inputs' common tape, or returns it unchanged when no
/// input is tracked. `make_backward` is only invoked when recording.
template <typename MakeBackward>
Tensor record_op(Tensor result, std::initializer_list<const Tensor*> inputs, MakeBackward&& make_backward) {
  Tape* tape = common_tape(inputs);
  if (tape == nullptr) return result;
  return tape->record(std::move(result), std::vector<const Tensor*>(inputs), make_backward());
}

// ---------------------------------------------------------------------------
// Operations. All are pure; results are tracked iff some input is tracked.

enum class BinaryKind { kAdd, kSub, kMul, kDiv };

/// Pointwise a ∘ b. `b` must equal `a` in shape or broadcast to it by the
/// trailing-axis rule: aligned from the last axis, each extent of `b` equals
/// that of `a` or is 1; missing leading axes count as 1.
Tensor elementwise(BinaryKind kind, const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor sqrt(const Tensor& a);

/// [m×k]·[k×n] → [m×n], or batched [B×m×k]·[B×k×n] → [B×m×n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// Applies w: [k×n] to the last axis of x: [..., k] → [..., n].
Tensor linear(const Tensor& x, const Tensor& w);

enum class ReduceKind { kSum, kMean };

/// Collapses `axis`.
Tensor reduce(ReduceKind kind, const Tensor& a, std::size_t axis);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);
/// Sum of every element as a rank-0 tensor.
Tensor sum_all(const Tensor& a);

/// Numerically stable softmax (max subtraction) along `axis`.
Tensor softmax(const Tensor& a, std::size_t axis);
/// Exact-erf GELU, x·Φ(x).
Tensor gelu(const Tensor& a);
double gelu(double x);

Tensor reshape(const Tensor& a, Shape shape);
/// Output axis i is input axis axes[i].
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
/// Swaps the last two axes.
Tensor transpose(const Tensor& a);
/// Concatenation along `axis`; all other extents must agree.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Row lookup table[ids[i], :] → [len(ids) × cols].
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);

/// Central differences (f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h for every coordinate of x.
Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

}  // namespace geomf
