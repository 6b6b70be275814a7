#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "constellation/model.hpp"
#include "constellation/scan.hpp"
#include "constellation/scenegen.hpp"

namespace constellation::imagine {

using Constraints = std::vector<std::pair<std::size_t, double>>;

/// z with the listed dims overwritten. A repeated dim keeps the last value and
/// is noted in `log`. Throws DomainError for dims outside z.
std::vector<double> impose(std::vector<double> z, const Constraints& constraints,
                           std::vector<std::string>* log = nullptr);

/// Half of the uniform mask mass.
inline double default_keep_threshold(std::size_t feature_dim) { return 1.0 / (2.0 * static_cast<double>(feature_dim)); }

std::vector<std::size_t> kept_features(const std::vector<double>& mask, double keep_thresh);

/// Rows of `decoded` (masked scale) turned back into slot units on the kept
/// features, with every other feature taken from the matched original row.
///
/// The `object_count` decoded rows farthest from the empty default (on kept
/// features) become objects, defaulting to the original's object count; the
/// rest are empty. Objects are matched to the non-empty originals by kept
/// feature distance. Decoded objects left without an original get appearance
/// features drawn from N(0, 1) with `prior_rng` (zeros when it is null).
/// Throws AbstractionFailure when no feature reaches `keep_thresh`.
SlotMatrix fill_in(const diff::Tensor& decoded, const SlotMatrix& original, const std::vector<double>& mask,
                   double keep_thresh, std::optional<std::size_t> object_count = std::nullopt,
                   Rng* prior_rng = nullptr);

/// Number of decoded rows whose kept features lie farther than `radius`
/// from the empty default.
std::size_t decoded_object_count(const diff::Tensor& decoded, const std::vector<double>& mask, double keep_thresh,
                                 double radius);

struct Imagined {
  std::vector<double> z;
  std::vector<double> z_imposed;
  Constraints constraints;
  std::vector<std::string> notes;
  diff::Tensor decoded;
  SlotMatrix slots;
};

/// Object count requested by an active count symbol, if any.
std::optional<std::size_t> requested_count(const scan::SymbolVector& symbols, const scan::Vocabulary& vocab);

/// Encode -> mu_q -> impose symbol constraints -> decode -> fill_in.
Imagined reimagine(const SlotMatrix& scene, const scan::SymbolVector& symbols, const model::Model& model,
                   const scan::ScanModel& scan_model, double keep_thresh, std::uint64_t seed = 0);

/// z ~ N(0, I), constrained dims overwritten, decoded; appearance drawn from
/// the whitened slot prior.
Imagined ancestral_generate(const scan::SymbolVector& symbols, Rng& rng, const model::Model& model,
                            const scan::ScanModel& scan_model, double keep_thresh, double empty_radius);

}  // namespace constellation::imagine
