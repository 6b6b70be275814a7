#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "constellation/diff/tensor.hpp"

namespace constellation::diff {

class Tape;

/// Handle to a node recorded on a tape. Cheap to copy; only valid while the
/// owning tape is alive.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
};

/// Records primitive operations in execution order so that gradients can be
/// propagated in reverse. Nodes only ever reference earlier nodes, so the
/// recorded graph is acyclic by construction.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input; its gradient is available after backward().
  Var leaf(Tensor value);
  /// Input that never needs a gradient.
  Var constant(Tensor value);

  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  /// True when some leaf feeds into the node, i.e. gradients are worth
  /// propagating into it.
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node during or after backward().
  Tensor& grad_buffer(std::size_t id);
  const Tensor& grad(Var v) const;

  /// Reverse sweep from a single-element output. Resets any previous
  /// gradients; nodes not on a path to `output` end up with zero gradient.
  void backward(Var output);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Tensor grad;
    bool requires_grad = false;
    bool touched = false;
  };

  std::vector<Node> nodes_;
  bool has_grads_ = false;
};

// ---------------------------------------------------------------------------
// Primitives. All of them record onto the tape of their first argument and
// throw DimensionError with both shapes on mismatch.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var maximum(Var a, Var b);

/// Matrix + row vector broadcast along rows.
Var add_row(Var m, Var row);
/// Matrix * row vector broadcast along rows.
Var mul_row(Var m, Var row);

Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);

Var matmul(Var a, Var b);

/// Concatenation of matrices along axis 0 (rows) or 1 (columns); vectors
/// only along axis 0.
Var concat(std::span<const Var> parts, std::size_t axis);
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);

/// out[r] = a[index[r]]
Var gather_rows(Var a, std::vector<std::size_t> index);
/// out[segment[r]] += a[r]; rows never targeted stay zero.
Var segment_sum(Var a, std::vector<std::size_t> segment, std::size_t segments);

Var sum(Var a);
Var mean(Var a);
/// Column sums of a matrix, returned as a vector.
Var sum_rows(Var a);

/// Softmax over the last axis (per row for matrices).
Var softmax(Var a);

Var tanh(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var relu(Var a);
Var abs(Var a);
Var softplus(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double c, Var a) { return scale(a, c); }

}  // namespace constellation::diff
