#include "constellation/hungarian.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "constellation/errors.hpp"

namespace constellation {

bool Assignment::is_permutation() const {
  std::vector<bool> seen(row_to_col.size(), false);
  for (std::size_t c : row_to_col) {
    if (c >= seen.size() || seen[c]) return false;
    seen[c] = true;
  }
  return true;
}

double assignment_cost(const diff::Tensor& cost, const std::vector<std::size_t>& perm) {
  double total = 0.0;
  for (std::size_t i = 0; i < perm.size(); ++i) total += cost.at(i, perm[i]);
  return total;
}

Assignment hungarian(const diff::Tensor& cost) {
  if (cost.rank() != 2 || cost.rows() != cost.cols()) {
    throw DimensionError("hungarian needs a square matrix, got " + diff::shape_string(cost.shape()));
  }
  if (!cost.all_finite()) throw NonFiniteError("hungarian: cost matrix has non-finite entries");
  const std::size_t n = cost.rows();
  Assignment out;
  if (n == 0) return out;

  // 1-based arrays; column 0 is the virtual start of each augmenting path.
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> row_potential(n + 1, 0.0), col_potential(n + 1, 0.0);
  std::vector<std::size_t> col_owner(n + 1, 0), way(n + 1, 0);
  for (std::size_t row = 1; row <= n; ++row) {
    col_owner[0] = row;
    std::size_t col0 = 0;
    std::vector<double> min_slack(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[col0] = true;
      const std::size_t r = col_owner[col0];
      double delta = inf;
      std::size_t next = 0;
      for (std::size_t c = 1; c <= n; ++c) {
        if (used[c]) continue;
        const double reduced = cost.at(r - 1, c - 1) - row_potential[r] - col_potential[c];
        if (reduced < min_slack[c]) {
          min_slack[c] = reduced;
          way[c] = col0;
        }
        if (min_slack[c] < delta) {
          delta = min_slack[c];
          next = c;
        }
      }
      for (std::size_t c = 0; c <= n; ++c) {
        if (used[c]) {
          row_potential[col_owner[c]] += delta;
          col_potential[c] -= delta;
        } else {
          min_slack[c] -= delta;
        }
      }
      col0 = next;
    } while (col_owner[col0] != 0);
    do {
      const std::size_t prev = way[col0];
      col_owner[col0] = col_owner[prev];
      col0 = prev;
    } while (col0 != 0);
  }

  out.row_to_col.assign(n, 0);
  for (std::size_t c = 1; c <= n; ++c) out.row_to_col[col_owner[c] - 1] = c - 1;
  out.cost = assignment_cost(cost, out.row_to_col);
  return out;
}

}  // namespace constellation
