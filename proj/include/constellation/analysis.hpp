#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "constellation/image.hpp"
#include "constellation/model.hpp"
#include "constellation/scenegen.hpp"

namespace constellation::analysis {

using diff::Tensor;

inline constexpr std::size_t kFactorCount = 5;
inline constexpr std::array<const char*, kFactorCount> kFactorNames = {"center_x", "center_y", "orientation",
                                                                       "curviness", "count"};
using FactorRow = std::array<double, kFactorCount>;
FactorRow factor_row(const RelationalFactors& f);

/// `points` values evenly spread over [center - half_width, center + half_width].
std::vector<double> traversal_values(double center, double half_width = 2.5, std::size_t points = 4);

/// One filled-in scene per value of z[dim], decoded from the posterior mean.
std::vector<SlotMatrix> latent_traversal(const model::Model& model, const SlotMatrix& scene, std::size_t dim,
                                         const std::vector<double>& values, double keep_thresh);

// -- information measures (nats) ---------------------------------------------

/// Equal-mass bins by rank; equal values always share a bin.
std::vector<int> equal_mass_bins(const std::vector<double>& values, std::size_t bins);
std::vector<int> equal_width_bins(const std::vector<double>& values, std::size_t bins);
/// Distinct values become consecutive bins.
std::vector<int> discrete_bins(const std::vector<double>& values);

double entropy(const std::vector<int>& bins);
double mutual_information(const std::vector<int>& a, const std::vector<int>& b);

struct MiConfig {
  std::size_t latent_bins = 20;
  std::size_t factor_bins = 20;
};

struct MiResult {
  Tensor mi;  // d_z x 5
  std::vector<double> factor_entropy;
};

/// Rows of `latents` are per-scene posterior means. Count is binned by value,
/// the other factors into equal-width bins. Needs at least 1000 scenes.
MiResult mutual_info_matrix(const std::vector<std::vector<double>>& latents, const std::vector<FactorRow>& factors,
                            const MiConfig& config = {});

/// Mean over factors of (top MI - second MI) / H(factor); factors with zero
/// entropy are skipped and named in `skipped`.
double mig_score(const Tensor& mi, const std::vector<double>& factor_entropy, std::vector<std::size_t>* skipped = nullptr);

/// Mean consecutive distance of `ordered` over the mean of `trials` random
/// orderings of the same points. nullopt for fewer than three points, 1 when
/// every ordering has zero length.
std::optional<double> ordering_score(const std::vector<Point>& ordered, Rng& rng, std::size_t trials = 100);

/// Input positions (un-whitened) of the scene's objects, ordered by the
/// decoded row each is matched to under posterior-mean decoding.
std::vector<Point> decoded_order(const model::Model& model, const SlotMatrix& scene, const WhitenStats& stats);

// -- figures ------------------------------------------------------------------

std::string mask_bar_svg(const std::vector<double>& mask);
std::string heatmap_svg(const Tensor& mi);
std::string loss_curves_svg(const std::vector<nlohmann::json>& rows, const std::vector<std::string>& keys);
/// Rows of images side by side with a thin separator.
Image image_grid(const std::vector<std::vector<Image>>& rows);

struct FigureInputs {
  std::vector<double> mask;
  std::optional<Tensor> mi;
  std::vector<nlohmann::json> metrics;
  std::vector<std::vector<Image>> traversal;  // one row per latent dim
};

/// Writes the figures and a manifest.json listing them; returns the file names.
std::vector<std::string> emit_figures(const std::filesystem::path& dir, const FigureInputs& inputs);

}  // namespace constellation::analysis
