#include "constellation/diff/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "constellation/errors.hpp"

namespace constellation::diff {

namespace {

double checked_value(const ScalarFunction& fn, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
  const Var out = fn(tape, vars);
  const double v = out.value().item();
  if (!std::isfinite(v)) throw NonFiniteError("grad_check: function value is not finite");
  return v;
}

std::vector<std::size_t> pick_coordinates(std::size_t size, std::size_t limit, std::mt19937_64& rng) {
  std::vector<std::size_t> all(size);
  std::iota(all.begin(), all.end(), 0);
  if (limit == 0 || limit >= size) return all;
  for (std::size_t i = 0; i < limit; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, size - 1);
    std::swap(all[i], all[pick(rng)]);
  }
  all.resize(limit);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace

double evaluate(const ScalarFunction& fn, const std::vector<Tensor>& inputs) { return checked_value(fn, inputs); }

std::vector<Tensor> gradients(const ScalarFunction& fn, const std::vector<Tensor>& inputs, double* value) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
  const Var out = fn(tape, vars);
  if (value) *value = out.value().item();
  tape.backward(out);
  std::vector<Tensor> grads;
  grads.reserve(vars.size());
  for (Var v : vars) grads.push_back(tape.grad(v));
  return grads;
}

GradCheckResult grad_check(const ScalarFunction& fn, const std::vector<Tensor>& inputs, const GradCheckOptions& options) {
  double base = 0.0;
  const std::vector<Tensor> analytic = gradients(fn, inputs, &base);
  if (!std::isfinite(base)) throw NonFiniteError("grad_check: function value is not finite");
  for (const Tensor& g : analytic)
    if (!g.all_finite()) throw NonFiniteError("grad_check: reverse-mode gradient is not finite");

  GradCheckResult result;
  std::mt19937_64 rng(options.seed);
  std::vector<Tensor> probe = inputs;
  const double eps = options.eps;
  // Size of one rounding unit of f seen through a central difference.
  const double roundoff = std::numeric_limits<double>::epsilon() * std::abs(base) / eps;

  auto shifted = [&](std::size_t input, std::size_t index, double delta) {
    const double saved = probe[input][index];
    probe[input][index] = saved + delta;
    const double v = checked_value(fn, probe);
    probe[input][index] = saved;
    return v;
  };

  for (std::size_t input = 0; input < inputs.size(); ++input) {
    for (std::size_t index : pick_coordinates(inputs[input].size(), options.max_coords_per_input, rng)) {
      const double plus = shifted(input, index, eps);
      const double minus = shifted(input, index, -eps);
      const double fd = (plus - minus) / (2.0 * eps);
      const double ad = analytic[input][index];
      const double raw_err = std::abs(ad - fd) / std::max(1e-8, std::abs(ad) + std::abs(fd));
      double floor = 0.0;
      if (options.resolution_floor > 0.0) {
        // Truncation error is far below rounding at these steps, so the
        // spread between two step sizes measures the quotient's own noise.
        const double fd_half = (shifted(input, index, eps / 2.0) - shifted(input, index, -eps / 2.0)) / eps;
        floor = options.resolution_floor * std::max(roundoff, std::abs(fd - fd_half));
      }
      const double err = std::abs(ad - fd) / std::max({1e-8, floor, std::abs(ad) + std::abs(fd)});

      if (raw_err > options.kink_probe_threshold) {
        // A kink keeps its one-sided slope jump as the step shrinks; a smooth
        // function's jump shrinks with the step. Rounding noise grows as the
        // step shrinks too, so the jump must also clear the rounding scale.
        const double jump = std::abs((plus - base) - (base - minus)) / eps;
        const double small = eps / 4.0;
        const double jump_small = std::abs((shifted(input, index, small) - base) - (base - shifted(input, index, -small))) / small;
        if (jump > std::max(1e-9, 1e3 * roundoff) && jump_small > 0.5 * jump) {
          result.excluded.push_back({input, index});
          continue;
        }
      }
      ++result.checked;
      if (floor > std::abs(ad) + std::abs(fd)) ++result.below_resolution;
      result.raw_max_rel_error = std::max(result.raw_max_rel_error, raw_err);
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst = {input, index};
      }
    }
  }
  return result;
}

}  // namespace constellation::diff
