#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "constellation/diff/tape.hpp"
#include "helpers.hpp"

namespace testutil {

using namespace constellation::diff;

// Shapes and a body for each primitive, so every op gets the same property
// check over many random draws.
struct OpCase {
  std::string name;
  std::vector<Shape> shapes;
  std::function<Var(Tape&, std::span<const Var>)> body;
  // Keeps inputs away from domain edges (log, div).
  std::function<void(std::vector<Tensor>&)> prepare = [](std::vector<Tensor>&) {};
};

// Contract every op to a scalar with random weights so all output
// coordinates contribute differently.
inline Var contract(Tape& tape, Var out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(out, tape.constant(random_tensor(rng, out.shape()))));
}

inline void make_positive(Tensor& t) {
  for (double& v : t.values()) v = 0.5 + std::abs(v);
}

inline std::vector<OpCase> op_cases() {
  std::vector<OpCase> cases;
  cases.push_back({"add", {{3, 4}, {3, 4}}, [](Tape&, std::span<const Var> v) { return add(v[0], v[1]); }});
  cases.push_back({"sub", {{3, 4}, {3, 4}}, [](Tape&, std::span<const Var> v) { return sub(v[0], v[1]); }});
  cases.push_back({"mul", {{3, 4}, {3, 4}}, [](Tape&, std::span<const Var> v) { return mul(v[0], v[1]); }});
  cases.push_back({"div", {{3, 4}, {3, 4}}, [](Tape&, std::span<const Var> v) { return div(v[0], v[1]); },
                   [](std::vector<Tensor>& in) { make_positive(in[1]); }});
  cases.push_back({"maximum", {{3, 4}, {3, 4}}, [](Tape&, std::span<const Var> v) { return maximum(v[0], v[1]); }});
  cases.push_back({"add_row", {{3, 4}, {4}}, [](Tape&, std::span<const Var> v) { return add_row(v[0], v[1]); }});
  cases.push_back({"mul_row", {{3, 4}, {4}}, [](Tape&, std::span<const Var> v) { return mul_row(v[0], v[1]); }});
  cases.push_back({"scale", {{3, 4}}, [](Tape&, std::span<const Var> v) { return scale(v[0], -1.7); }});
  cases.push_back({"add_scalar", {{5}}, [](Tape&, std::span<const Var> v) { return add_scalar(v[0], 0.3); }});
  cases.push_back({"matmul", {{3, 4}, {4, 2}}, [](Tape&, std::span<const Var> v) { return matmul(v[0], v[1]); }});
  cases.push_back({"concat_rows", {{2, 3}, {4, 3}}, [](Tape&, std::span<const Var> v) { return concat(v, 0); }});
  cases.push_back({"concat_cols", {{3, 2}, {3, 5}}, [](Tape&, std::span<const Var> v) { return concat(v, 1); }});
  cases.push_back({"slice", {{4, 5}}, [](Tape&, std::span<const Var> v) { return slice(v[0], 1, 1, 4); }});
  cases.push_back({"gather_rows", {{4, 3}},
                   [](Tape&, std::span<const Var> v) { return gather_rows(v[0], {2, 0, 2, 3, 1}); }});
  cases.push_back({"segment_sum", {{5, 3}},
                   [](Tape&, std::span<const Var> v) { return segment_sum(v[0], {0, 2, 2, 1, 0}, 4); }});
  cases.push_back({"sum", {{3, 4}}, [](Tape&, std::span<const Var> v) { return sum(v[0]); }});
  cases.push_back({"mean", {{3, 4}}, [](Tape&, std::span<const Var> v) { return mean(v[0]); }});
  cases.push_back({"sum_rows", {{3, 4}}, [](Tape&, std::span<const Var> v) { return sum_rows(v[0]); }});
  cases.push_back({"softmax_vec", {{6}}, [](Tape&, std::span<const Var> v) { return softmax(v[0]); }});
  cases.push_back({"softmax_mat", {{3, 4}}, [](Tape&, std::span<const Var> v) { return softmax(v[0]); }});
  cases.push_back({"tanh", {{3, 4}}, [](Tape&, std::span<const Var> v) { return tanh(v[0]); }});
  cases.push_back({"sigmoid", {{3, 4}}, [](Tape&, std::span<const Var> v) { return sigmoid(v[0]); }});
  cases.push_back({"exp", {{3, 4}}, [](Tape&, std::span<const Var> v) { return exp(v[0]); }});
  cases.push_back({"log", {{3, 4}}, [](Tape&, std::span<const Var> v) { return log(v[0]); },
                   [](std::vector<Tensor>& in) { make_positive(in[0]); }});
  cases.push_back({"square", {{3, 4}}, [](Tape&, std::span<const Var> v) { return square(v[0]); }});
  cases.push_back({"relu", {{3, 4}}, [](Tape&, std::span<const Var> v) { return relu(v[0]); }});
  cases.push_back({"abs", {{3, 4}}, [](Tape&, std::span<const Var> v) { return abs(v[0]); }});
  cases.push_back({"softplus", {{3, 4}}, [](Tape&, std::span<const Var> v) { return softplus(v[0]); }});
  // Reused inputs accumulate gradient from several paths.
  cases.push_back({"fan_out", {{3, 3}},
                   [](Tape&, std::span<const Var> v) { return matmul(tanh(v[0]), mul(v[0], v[0])); }});
  return cases;
}

}  // namespace testutil
