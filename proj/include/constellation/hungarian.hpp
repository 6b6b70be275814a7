#pragma once

#include <cstddef>
#include <vector>

#include "constellation/diff/tensor.hpp"

namespace constellation {

/// A bijection pairing row i with column row_to_col[i].
struct Assignment {
  std::vector<std::size_t> row_to_col;
  double cost = 0.0;

  bool is_permutation() const;
};

/// Minimum-cost perfect matching of a square cost matrix (Kuhn-Munkres with
/// potentials, O(n^3)). Ties resolve towards the lowest-index augmenting
/// path. Throws DimensionError for non-square input and NonFiniteError for
/// NaN/inf entries. `cost` in the result is summed in row order.
Assignment hungarian(const diff::Tensor& cost);

/// Sum of cost[i][perm[i]] in row order.
double assignment_cost(const diff::Tensor& cost, const std::vector<std::size_t>& perm);

}  // namespace constellation
