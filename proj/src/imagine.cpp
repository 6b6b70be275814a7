#include "constellation/imagine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "constellation/errors.hpp"
#include "constellation/hungarian.hpp"
#include "constellation/rng.hpp"

namespace constellation::imagine {

using diff::Shape;
using diff::Tensor;

std::vector<double> impose(std::vector<double> z, const Constraints& constraints, std::vector<std::string>* log) {
  std::vector<bool> written(z.size(), false);
  for (const auto& [dim, value] : constraints) {
    if (dim >= z.size()) {
      throw DomainError("constraint on dim " + std::to_string(dim) + " but z has " + std::to_string(z.size()));
    }
    if (written[dim] && log) log->push_back("dim " + std::to_string(dim) + " constrained twice; keeping the last value");
    z[dim] = value;
    written[dim] = true;
  }
  return z;
}

std::vector<std::size_t> kept_features(const std::vector<double>& mask, double keep_thresh) {
  std::vector<std::size_t> kept;
  for (std::size_t j = 0; j < mask.size(); ++j) {
    if (mask[j] >= keep_thresh) kept.push_back(j);
  }
  if (kept.empty()) throw AbstractionFailure("no mask entry reaches the keep threshold " + std::to_string(keep_thresh));
  return kept;
}

namespace {

// Decoded rows in slot units on the kept features.
std::vector<std::vector<double>> unscale(const Tensor& decoded, const std::vector<double>& mask,
                                         const std::vector<std::size_t>& kept) {
  std::vector<std::vector<double>> rows(decoded.rows(), std::vector<double>(kept.size()));
  for (std::size_t i = 0; i < decoded.rows(); ++i) {
    for (std::size_t k = 0; k < kept.size(); ++k) rows[i][k] = decoded.at(i, kept[k]) / mask[kept[k]];
  }
  return rows;
}

double squared_norm(const std::vector<double>& v) {
  return std::inner_product(v.begin(), v.end(), v.begin(), 0.0);
}

}  // namespace

std::size_t decoded_object_count(const Tensor& decoded, const std::vector<double>& mask, double keep_thresh,
                                 double radius) {
  const auto kept = kept_features(mask, keep_thresh);
  std::size_t n = 0;
  for (const auto& row : unscale(decoded, mask, kept)) n += squared_norm(row) > radius * radius;
  return n;
}

SlotMatrix fill_in(const Tensor& decoded, const SlotMatrix& original, const std::vector<double>& mask,
                   double keep_thresh, std::optional<std::size_t> object_count, Rng* prior_rng) {
  const std::size_t K = original.slots(), d = original.features.cols();
  if (decoded.rank() != 2 || decoded.rows() != K || decoded.cols() != d || mask.size() != d) {
    throw DimensionError("fill_in: decoded " + diff::shape_string(decoded.shape()) + ", original " +
                         diff::shape_string(original.features.shape()) + ", mask of " + std::to_string(mask.size()));
  }
  const auto kept = kept_features(mask, keep_thresh);
  std::vector<bool> is_kept(d, false);
  for (std::size_t j : kept) is_kept[j] = true;
  const auto rows = unscale(decoded, mask, kept);

  std::vector<std::size_t> originals;
  for (std::size_t i = 0; i < K; ++i) {
    if (!original.empty[i]) originals.push_back(i);
  }
  const std::size_t n_objects = std::min(K, object_count.value_or(originals.size()));

  // Decoded rows farthest from the empty default become objects; stable sort
  // keeps generation order among ties.
  std::vector<std::size_t> order(K);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return squared_norm(rows[a]) > squared_norm(rows[b]); });
  std::vector<std::size_t> objects(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_objects));
  std::sort(objects.begin(), objects.end());

  // Rectangular matching padded to a square with zero-cost dummies.
  const std::size_t n = std::max(objects.size(), originals.size());
  Tensor cost(Shape{n, n}, 0.0);
  for (std::size_t a = 0; a < objects.size(); ++a) {
    for (std::size_t b = 0; b < originals.size(); ++b) {
      double c = 0.0;
      for (std::size_t k = 0; k < kept.size(); ++k) {
        const double diff = rows[objects[a]][k] - original.features.at(originals[b], kept[k]);
        c += diff * diff;
      }
      cost.at(a, b) = c;
    }
  }
  const Assignment match = hungarian(cost);

  SlotMatrix out;
  out.features = Tensor(Shape{K, d}, 0.0);
  out.empty.assign(K, true);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t a = 0; a < objects.size(); ++a) {
    const std::size_t row = objects[a];
    const std::size_t b = match.row_to_col[a];
    SlotRow values{};
    if (b < originals.size()) {
      values = original.row(originals[b]);
    } else {
      for (std::size_t j = 0; j < d; ++j) values[j] = prior_rng ? normal(*prior_rng) : 0.0;
    }
    for (std::size_t k = 0; k < kept.size(); ++k) values[kept[k]] = rows[row][k];
    out.set_row(row, values);
    out.empty[row] = false;
  }
  return out;
}

std::optional<std::size_t> requested_count(const scan::SymbolVector& symbols, const scan::Vocabulary& vocab) {
  for (std::size_t b = 0; b < vocab.blocks.size(); ++b) {
    if (vocab.blocks[b].name == "count" && b < symbols.active.size() && symbols.active[b]) {
      return static_cast<std::size_t>(vocab.count_first) + *symbols.active[b];
    }
  }
  return std::nullopt;
}

Imagined reimagine(const SlotMatrix& scene, const scan::SymbolVector& symbols, const model::Model& model,
                   const scan::ScanModel& scan_model, double keep_thresh, std::uint64_t seed) {
  Imagined out;
  out.z = model.encode(scene).mu;
  out.constraints = scan_model.constraints(symbols, &out.notes);
  out.z_imposed = impose(out.z, out.constraints, &out.notes);
  out.decoded = model.decode(out.z_imposed);
  Rng rng(mix_seed(seed, kTagEval));
  out.slots = fill_in(out.decoded, scene, model.mask(), keep_thresh, requested_count(symbols, scan_model.vocab()), &rng);
  return out;
}

Imagined ancestral_generate(const scan::SymbolVector& symbols, Rng& rng, const model::Model& model,
                            const scan::ScanModel& scan_model, double keep_thresh, double empty_radius) {
  Imagined out;
  out.z = model::prior_sample(rng, model.config().latent_dim);
  out.constraints = scan_model.constraints(symbols, &out.notes);
  out.z_imposed = impose(out.z, out.constraints, &out.notes);
  out.decoded = model.decode(out.z_imposed);
  const auto mask = model.mask();
  const std::size_t K = model.config().slots;
  SlotMatrix blank;
  blank.features = Tensor(Shape{K, model.config().feature_dim}, 0.0);
  blank.empty.assign(K, true);
  const std::size_t count = requested_count(symbols, scan_model.vocab())
                                .value_or(decoded_object_count(out.decoded, mask, keep_thresh, empty_radius));
  out.slots = fill_in(out.decoded, blank, mask, keep_thresh, count, &rng);
  return out;
}

}  // namespace constellation::imagine
