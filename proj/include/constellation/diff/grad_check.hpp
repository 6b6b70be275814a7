#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "constellation/diff/tape.hpp"

namespace constellation::diff {

/// Scalar-valued function of tape variables, rebuilt from scratch on every
/// evaluation.
using ScalarFunction = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckOptions {
  double eps = 1e-5;
  /// Coordinates above this error get a one-sided probe to tell kinks
  /// (relu at 0, |x| at 0, ties in max) from genuine mismatches.
  double kink_probe_threshold = 1e-6;
  /// 0 checks every coordinate; otherwise a seeded random subset per input.
  std::size_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
  /// When > 0 the error denominator is at least this multiple of the central
  /// difference's estimated resolution: the larger of one rounding unit of
  /// f / eps and the spread between the quotients at eps and eps / 2.
  /// Gradients under that scale cannot be resolved at this eps and are
  /// compared on the absolute scale instead. Costs two extra evaluations.
  double resolution_floor = 0.0;
};

struct Coordinate {
  std::size_t input = 0;
  std::size_t index = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  Coordinate worst{};
  std::size_t checked = 0;
  /// Error with only the fixed 1e-8 floor, whatever resolution_floor says.
  double raw_max_rel_error = 0.0;
  /// Checked coordinates whose gradient fell under the resolution floor.
  std::size_t below_resolution = 0;
  /// Coordinates sitting on a nondifferentiable point; not counted above.
  std::vector<Coordinate> excluded;
};

/// Relative error max over coordinates of |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)
/// between reverse mode and central differences. Throws NonFiniteError if
/// any evaluation is not finite.
GradCheckResult grad_check(const ScalarFunction& fn, const std::vector<Tensor>& inputs, const GradCheckOptions& options = {});

/// Reverse-mode gradients of `fn` at `inputs`, one tensor per input.
std::vector<Tensor> gradients(const ScalarFunction& fn, const std::vector<Tensor>& inputs, double* value = nullptr);

double evaluate(const ScalarFunction& fn, const std::vector<Tensor>& inputs);

}  // namespace constellation::diff
