#include "constellation/diff/tape.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "constellation/errors.hpp"

namespace constellation::diff {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.values().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

MutMap as_matrix(Tensor& t) {
  return MutMap(t.values().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                       shape_string(b.shape()));
}

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw DimensionError("operands recorded on different tapes");
}

template <class Forward, class Derivative>
Var unary(Var a, Forward f, Derivative dydx) {
  Tape& tape = *a.tape;
  const Tensor& x = tape.value(a);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return tape.record(std::move(y), {a.id}, [a, dydx](Tape& t, std::size_t self) {
    if (!t.requires_grad(a.id)) return;
    const Tensor& x = t.value(a.id);
    const Tensor& y = t.value(self);
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * dydx(x[i], y[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::leaf(Tensor value) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = std::any_of(inputs.begin(), inputs.end(), [this](std::size_t i) { return nodes_[i].requires_grad; });
  node.inputs = std::move(inputs);
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (!node.touched) {
    node.grad = Tensor(node.value.shape(), 0.0);
    node.touched = true;
  }
  return node.grad;
}

const Tensor& Tape::grad(Var v) const {
  const Node& node = nodes_[v.id];
  if (!has_grads_) throw DomainError("gradient requested before backward()");
  if (!node.touched) {
    // Off the path to the output: zero by definition.
    auto& self = const_cast<Node&>(node);
    self.grad = Tensor(node.value.shape(), 0.0);
    self.touched = true;
  }
  return node.grad;
}

void Tape::backward(Var output) {
  if (output.tape != this) throw DomainError("backward() on a foreign variable");
  if (value(output).size() != 1) {
    throw DimensionError("backward() needs a scalar output, got shape " + shape_string(value(output).shape()));
  }
  for (Node& node : nodes_) {
    node.touched = false;
    node.grad = Tensor();
  }
  has_grads_ = true;
  grad_buffer(output.id)[0] = 1.0;
  for (std::size_t id = output.id + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.touched || !node.backward || !node.requires_grad) continue;
    node.backward(*this, id);
  }
}

// ---------------------------------------------------------------------------

Var add(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape() != y.shape()) mismatch("add", x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return a.tape->record(std::move(out), {a.id, b.id}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    for (Var v : {a, b}) {
      if (!t.requires_grad(v.id)) continue;
      Tensor& gv = t.grad_buffer(v.id);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape() != y.shape()) mismatch("sub", x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return a.tape->record(std::move(out), {a.id, b.id}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    if (t.requires_grad(a.id)) {
      Tensor& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b.id)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape() != y.shape()) mismatch("mul", x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return a.tape->record(std::move(out), {a.id, b.id}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& x = t.value(a.id);
    const Tensor& y = t.value(b.id);
    if (t.requires_grad(a.id)) {
      Tensor& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (t.requires_grad(b.id)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

Var div(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape() != y.shape()) mismatch("div", x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / y[i];
  return a.tape->record(std::move(out), {a.id, b.id}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& x = t.value(a.id);
    const Tensor& y = t.value(b.id);
    if (t.requires_grad(a.id)) {
      Tensor& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / y[i];
    }
    if (t.requires_grad(b.id)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * x[i] / (y[i] * y[i]);
    }
  });
}

Var maximum(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape() != y.shape()) mismatch("maximum", x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::max(x[i], y[i]);
  return a.tape->record(std::move(out), {a.id, b.id}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& x = t.value(a.id);
    const Tensor& y = t.value(b.id);
    // Ties route the gradient to the first operand.
    if (t.requires_grad(a.id)) {
      Tensor& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] >= y[i]) ga[i] += g[i];
    }
    if (t.requires_grad(b.id)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] < y[i]) gb[i] += g[i];
    }
  });
}

Var add_row(Var m, Var row) {
  require_same_tape(m, row);
  const Tensor& x = m.value();
  const Tensor& r = row.value();
  if (x.rank() != 2 || r.rank() != 1 || r.size() != x.cols()) mismatch("add_row", x, r);
  Tensor out = x;
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += r[j];
  return m.tape->record(std::move(out), {m.id, row.id}, [m, row](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const std::size_t c = g.cols();
    if (t.requires_grad(m.id)) {
      Tensor& gm = t.grad_buffer(m.id);
      for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
    }
    if (t.requires_grad(row.id)) {
      Tensor& gr = t.grad_buffer(row.id);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < c; ++j) gr[j] += g[i * c + j];
    }
  });
}

Var mul_row(Var m, Var row) {
  require_same_tape(m, row);
  const Tensor& x = m.value();
  const Tensor& r = row.value();
  if (x.rank() != 2 || r.rank() != 1 || r.size() != x.cols()) mismatch("mul_row", x, r);
  Tensor out = x;
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= r[j];
  return m.tape->record(std::move(out), {m.id, row.id}, [m, row](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& x = t.value(m.id);
    const Tensor& r = t.value(row.id);
    const std::size_t c = g.cols();
    if (t.requires_grad(m.id)) {
      Tensor& gm = t.grad_buffer(m.id);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < c; ++j) gm[i * c + j] += g[i * c + j] * r[j];
    }
    if (t.requires_grad(row.id)) {
      Tensor& gr = t.grad_buffer(row.id);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < c; ++j) gr[j] += g[i * c + j] * x[i * c + j];
    }
  });
}

Var scale(Var a, double factor) {
  return unary(a, [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

Var add_scalar(Var a, double offset) {
  return unary(a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.rows()) mismatch("matmul", x, y);
  Tensor out(Shape{x.rows(), y.cols()});
  as_matrix(out).noalias() = as_matrix(x) * as_matrix(y);
  return a.tape->record(std::move(out), {a.id, b.id}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    if (t.requires_grad(a.id)) as_matrix(t.grad_buffer(a.id)).noalias() += as_matrix(g) * as_matrix(t.value(b.id)).transpose();
    if (t.requires_grad(b.id)) as_matrix(t.grad_buffer(b.id)).noalias() += as_matrix(t.value(a.id)).transpose() * as_matrix(g);
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of nothing");
  Tape& tape = *parts.front().tape;
  const Tensor& first = parts.front().value();
  std::vector<std::size_t> ids;
  for (Var p : parts) {
    require_same_tape(parts.front(), p);
    ids.push_back(p.id);
  }
  if (first.rank() == 1) {
    if (axis != 0) throw DimensionError("concat: vectors only concatenate along axis 0");
    std::vector<double> values;
    for (Var p : parts) {
      if (p.value().rank() != 1) mismatch("concat", first, p.value());
      values.insert(values.end(), p.value().data().begin(), p.value().data().end());
    }
    std::vector<Var> keep(parts.begin(), parts.end());
    return tape.record(Tensor::vector(std::move(values)), ids, [keep](Tape& t, std::size_t self) {
      const Tensor& g = t.grad_buffer(self);
      std::size_t offset = 0;
      for (Var p : keep) {
        const std::size_t n = t.value(p.id).size();
        if (t.requires_grad(p.id)) {
          Tensor& gp = t.grad_buffer(p.id);
          for (std::size_t i = 0; i < n; ++i) gp[i] += g[offset + i];
        }
        offset += n;
      }
    });
  }
  if (first.rank() != 2 || axis > 1) throw DimensionError("concat: unsupported rank/axis for " + shape_string(first.shape()));
  std::size_t rows = 0, cols = 0;
  for (Var p : parts) {
    const Tensor& v = p.value();
    if (v.rank() != 2) mismatch("concat", first, v);
    if (axis == 0) {
      if (v.cols() != first.cols()) mismatch("concat", first, v);
      rows += v.rows();
    } else {
      if (v.rows() != first.rows()) mismatch("concat", first, v);
      cols += v.cols();
    }
  }
  if (axis == 0) cols = first.cols();
  else rows = first.rows();
  Tensor out(Shape{rows, cols});
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& v = p.value();
    if (axis == 0) {
      std::copy(v.data().begin(), v.data().end(), out.values().begin() + static_cast<std::ptrdiff_t>(offset * cols));
      offset += v.rows();
    } else {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < v.cols(); ++c) out[r * cols + offset + c] = v[r * v.cols() + c];
      offset += v.cols();
    }
  }
  std::vector<Var> keep(parts.begin(), parts.end());
  return tape.record(std::move(out), ids, [keep, axis](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const std::size_t cols = g.cols();
    std::size_t offset = 0;
    for (Var p : keep) {
      const Tensor& v = t.value(p.id);
      const bool want = t.requires_grad(p.id);
      if (axis == 0) {
        if (want) {
          Tensor& gp = t.grad_buffer(p.id);
          for (std::size_t i = 0; i < v.size(); ++i) gp[i] += g[offset * cols + i];
        }
        offset += v.rows();
      } else {
        if (want) {
          Tensor& gp = t.grad_buffer(p.id);
          for (std::size_t r = 0; r < v.rows(); ++r)
            for (std::size_t c = 0; c < v.cols(); ++c) gp[r * v.cols() + c] += g[r * cols + offset + c];
        }
        offset += v.cols();
      }
    }
  });
}

Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  const bool is_vector = x.rank() == 1;
  if (x.rank() == 0 || axis > 1 || (is_vector && axis != 0)) {
    throw DimensionError("slice: unsupported axis " + std::to_string(axis) + " for shape " + shape_string(x.shape()));
  }
  const std::size_t extent = is_vector ? x.size() : x.shape()[axis];
  if (begin > end || end > extent) {
    throw DimensionError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for shape " +
                         shape_string(x.shape()));
  }
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor out;
  if (is_vector) {
    out = Tensor::vector({x.data().begin() + static_cast<std::ptrdiff_t>(begin),
                          x.data().begin() + static_cast<std::ptrdiff_t>(end)});
  } else if (axis == 0) {
    out = Tensor(Shape{end - begin, cols}, std::vector<double>(x.data().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                                                               x.data().begin() + static_cast<std::ptrdiff_t>(end * cols)));
  } else {
    out = Tensor(Shape{rows, end - begin});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = begin; c < end; ++c) out[r * (end - begin) + c - begin] = x[r * cols + c];
  }
  return a.tape->record(std::move(out), {a.id}, [a, axis, begin, end, is_vector](Tape& t, std::size_t self) {
    if (!t.requires_grad(a.id)) return;
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(a.id);
    const std::size_t cols = ga.cols();
    if (is_vector || axis == 0) {
      const std::size_t offset = is_vector ? begin : begin * cols;
      for (std::size_t i = 0; i < g.size(); ++i) ga[offset + i] += g[i];
    } else {
      const std::size_t width = end - begin;
      for (std::size_t r = 0; r < ga.rows(); ++r)
        for (std::size_t c = 0; c < width; ++c) ga[r * cols + begin + c] += g[r * width + c];
    }
  });
}

Var gather_rows(Var a, std::vector<std::size_t> index) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw DimensionError("gather_rows needs a matrix, got " + shape_string(x.shape()));
  const std::size_t cols = x.cols();
  Tensor out(Shape{index.size(), cols});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= x.rows()) {
      throw DimensionError("gather_rows index " + std::to_string(index[r]) + " out of range for shape " +
                           shape_string(x.shape()));
    }
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(index[r] * cols), cols,
                out.values().begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  return a.tape->record(std::move(out), {a.id}, [a, index = std::move(index)](Tape& t, std::size_t self) {
    if (!t.requires_grad(a.id)) return;
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(a.id);
    const std::size_t cols = g.cols();
    for (std::size_t r = 0; r < index.size(); ++r)
      for (std::size_t c = 0; c < cols; ++c) ga[index[r] * cols + c] += g[r * cols + c];
  });
}

Var segment_sum(Var a, std::vector<std::size_t> segment, std::size_t segments) {
  const Tensor& x = a.value();
  if (x.rank() != 2 || segment.size() != x.rows()) {
    throw DimensionError("segment_sum: " + std::to_string(segment.size()) + " segment ids for shape " +
                         shape_string(x.shape()));
  }
  const std::size_t cols = x.cols();
  Tensor out(Shape{segments, cols});
  for (std::size_t r = 0; r < segment.size(); ++r) {
    if (segment[r] >= segments) throw DimensionError("segment_sum: segment id out of range");
    for (std::size_t c = 0; c < cols; ++c) out[segment[r] * cols + c] += x[r * cols + c];
  }
  return a.tape->record(std::move(out), {a.id}, [a, segment = std::move(segment)](Tape& t, std::size_t self) {
    if (!t.requires_grad(a.id)) return;
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(a.id);
    const std::size_t cols = g.cols();
    for (std::size_t r = 0; r < segment.size(); ++r)
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[segment[r] * cols + c];
  });
}

Var sum(Var a) {
  const Tensor& x = a.value();
  double total = 0.0;
  for (double v : x.data()) total += v;
  return a.tape->record(Tensor::scalar(total), {a.id}, [a](Tape& t, std::size_t self) {
    if (!t.requires_grad(a.id)) return;
    const double g = t.grad_buffer(self)[0];
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var sum_rows(Var a) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw DimensionError("sum_rows needs a matrix, got " + shape_string(x.shape()));
  const std::size_t cols = x.cols();
  Tensor out(Shape{cols});
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += x[r * cols + c];
  return a.tape->record(std::move(out), {a.id}, [a](Tape& t, std::size_t self) {
    if (!t.requires_grad(a.id)) return;
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(a.id);
    const std::size_t cols = g.size();
    for (std::size_t r = 0; r < ga.rows(); ++r)
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[c];
  });
}

Var softmax(Var a) {
  const Tensor& x = a.value();
  if (x.rank() == 0) throw DimensionError("softmax of a scalar");
  Tensor y(x.shape());
  const std::size_t cols = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* in = x.values().data() + r * cols;
    double* out = y.values().data() + r * cols;
    const double peak = *std::max_element(in, in + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += (out[c] = std::exp(in[c] - peak));
    for (std::size_t c = 0; c < cols; ++c) out[c] /= total;
  }
  return a.tape->record(std::move(y), {a.id}, [a](Tape& t, std::size_t self) {
    if (!t.requires_grad(a.id)) return;
    const Tensor& y = t.value(self);
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(a.id);
    const std::size_t cols = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
    }
  });
}

Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var relu(Var a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var abs(Var a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var softplus(Var a) {
  return unary(
      a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) { return stable_sigmoid(x); });
}

}  // namespace constellation::diff
