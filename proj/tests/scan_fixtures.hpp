#pragma once

#include <cmath>
#include <vector>

#include "constellation/scan.hpp"

namespace testutil {

inline double inverse_softplus(double s) { return std::log(std::expm1(s - 1e-6)); }

// Scan parameters whose encoder maps symbol k to exactly (mu[k], sigma[k]):
// two saturated tanh layers turn the one-hot input into a one-hot hidden
// state, and the last layer reads the rows out.
inline constellation::diff::ParamSet handmade_scan(const constellation::scan::Vocabulary& vocab, std::size_t dz,
                                             const std::vector<std::vector<double>>& mu,
                                             const std::vector<std::vector<double>>& sigma) {
  auto p = constellation::scan::init_scan_params(vocab.size(), dz, 1);
  for (auto& [name, t] : p) {
    if (name.rfind("scan/enc", 0) == 0) t.fill(0.0);
  }
  for (std::size_t k = 0; k < vocab.size(); ++k) {
    p["scan/enc/0/w"].at(k, k) = 40.0;
    p["scan/enc/1/w"].at(k, k) = 40.0;
    for (std::size_t d = 0; d < dz; ++d) {
      p["scan/enc/2/w"].at(k, d) = mu[k][d];
      p["scan/enc/2/w"].at(k, dz + d) = inverse_softplus(sigma[k][d]);
    }
  }
  return p;
}

}  // namespace testutil
