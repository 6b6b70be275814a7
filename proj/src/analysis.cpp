#include "constellation/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "constellation/errors.hpp"
#include "constellation/hungarian.hpp"
#include "constellation/imagine.hpp"

namespace constellation::analysis {

using diff::Shape;

FactorRow factor_row(const RelationalFactors& f) {
  return {f.center_x, f.center_y, f.orientation, f.curviness, static_cast<double>(f.count)};
}

std::vector<double> traversal_values(double center, double half_width, std::size_t points) {
  if (points == 0) return {};
  if (points == 1) return {center};
  std::vector<double> out(points);
  for (std::size_t i = 0; i < points; ++i) {
    out[i] = center - half_width + 2.0 * half_width * static_cast<double>(i) / static_cast<double>(points - 1);
  }
  return out;
}

std::vector<SlotMatrix> latent_traversal(const model::Model& model, const SlotMatrix& scene, std::size_t dim,
                                         const std::vector<double>& values, double keep_thresh) {
  const std::size_t d_z = model.config().latent_dim;
  if (dim >= d_z) throw DomainError("traversal dim " + std::to_string(dim) + " outside latent of size " + std::to_string(d_z));
  const auto mu = model.encode(scene).mu;
  std::vector<std::vector<double>> zs;
  for (double v : values) {
    zs.push_back(mu);
    zs.back()[dim] = v;
  }
  const auto decoded = model.decode(zs);
  const auto mask = model.mask();
  std::vector<SlotMatrix> out;
  for (const auto& d : decoded) out.push_back(imagine::fill_in(d, scene, mask, keep_thresh));
  return out;
}

// ---------------------------------------------------------------------------

std::vector<int> equal_mass_bins(const std::vector<double>& values, std::size_t bins) {
  if (bins == 0) throw DomainError("bin count must be positive");
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  std::vector<double> thresholds;
  for (std::size_t k = 1; k < bins && n > 0; ++k) thresholds.push_back(sorted[k * n / bins]);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = static_cast<int>(std::upper_bound(thresholds.begin(), thresholds.end(), values[i]) - thresholds.begin());
  }
  return out;
}

std::vector<int> equal_width_bins(const std::vector<double>& values, std::size_t bins) {
  if (bins == 0) throw DomainError("bin count must be positive");
  std::vector<int> out(values.size(), 0);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double span = *hi - *lo;
  if (!(span > 0.0)) return out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double u = (values[i] - *lo) / span * static_cast<double>(bins);
    out[i] = std::min(static_cast<int>(bins) - 1, static_cast<int>(u));
  }
  return out;
}

std::vector<int> discrete_bins(const std::vector<double>& values) {
  std::vector<double> distinct = values;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  std::vector<int> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = static_cast<int>(std::lower_bound(distinct.begin(), distinct.end(), values[i]) - distinct.begin());
  }
  return out;
}

double entropy(const std::vector<int>& bins) {
  std::map<int, std::size_t> counts;
  for (int b : bins) ++counts[b];
  const double n = static_cast<double>(bins.size());
  double h = 0.0;
  for (const auto& [bin, c] : counts) {
    const double p = static_cast<double>(c) / n;
    h -= p * std::log(p);
  }
  return h;
}

double mutual_information(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw DimensionError("mutual_information: sample counts differ");
  if (a.empty()) return 0.0;
  std::map<int, std::size_t> ca, cb;
  std::map<std::pair<int, int>, std::size_t> joint;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++ca[a[i]];
    ++cb[b[i]];
    ++joint[{a[i], b[i]}];
  }
  const double n = static_cast<double>(a.size());
  double mi = 0.0;
  for (const auto& [key, c] : joint) {
    const double pxy = static_cast<double>(c) / n;
    const double px = static_cast<double>(ca[key.first]) / n;
    const double py = static_cast<double>(cb[key.second]) / n;
    mi += pxy * std::log(pxy / (px * py));
  }
  return std::max(0.0, mi);
}

MiResult mutual_info_matrix(const std::vector<std::vector<double>>& latents, const std::vector<FactorRow>& factors,
                            const MiConfig& config) {
  if (latents.size() != factors.size()) throw DimensionError("latent and factor sample counts differ");
  if (latents.size() < 1000) throw DomainError("mutual information needs at least 1000 scenes, got " + std::to_string(latents.size()));
  const std::size_t n = latents.size(), d_z = latents.front().size();
  std::vector<std::vector<int>> factor_bins;
  MiResult out;
  for (std::size_t f = 0; f < kFactorCount; ++f) {
    std::vector<double> column(n);
    for (std::size_t i = 0; i < n; ++i) column[i] = factors[i][f];
    factor_bins.push_back(f == kFactorCount - 1 ? discrete_bins(column) : equal_width_bins(column, config.factor_bins));
    out.factor_entropy.push_back(entropy(factor_bins.back()));
  }
  out.mi = Tensor(Shape{d_z, kFactorCount}, 0.0);
  for (std::size_t d = 0; d < d_z; ++d) {
    std::vector<double> column(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (latents[i].size() != d_z) throw DimensionError("latent rows differ in size");
      column[i] = latents[i][d];
    }
    const auto bins = equal_mass_bins(column, config.latent_bins);
    for (std::size_t f = 0; f < kFactorCount; ++f) out.mi.at(d, f) = mutual_information(bins, factor_bins[f]);
  }
  return out;
}

double mig_score(const Tensor& mi, const std::vector<double>& factor_entropy, std::vector<std::size_t>* skipped) {
  if (mi.rank() != 2 || mi.cols() != factor_entropy.size()) throw DimensionError("mig_score: shape mismatch");
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t f = 0; f < mi.cols(); ++f) {
    if (!(factor_entropy[f] > 0.0)) {
      if (skipped) skipped->push_back(f);
      continue;
    }
    std::vector<double> column(mi.rows());
    for (std::size_t d = 0; d < mi.rows(); ++d) column[d] = mi.at(d, f);
    std::sort(column.begin(), column.end(), std::greater<>());
    const double top = column.empty() ? 0.0 : column[0];
    const double second = column.size() > 1 ? column[1] : 0.0;
    total += std::clamp((top - second) / factor_entropy[f], 0.0, 1.0);
    ++used;
  }
  return used ? total / static_cast<double>(used) : 0.0;
}

namespace {

double path_length(const std::vector<Point>& p) {
  double total = 0.0;
  for (std::size_t i = 1; i < p.size(); ++i) total += std::hypot(p[i].x - p[i - 1].x, p[i].y - p[i - 1].y);
  return total;
}

}  // namespace

std::optional<double> ordering_score(const std::vector<Point>& ordered, Rng& rng, std::size_t trials) {
  if (ordered.size() < 3 || trials == 0) return std::nullopt;
  const double own = path_length(ordered);
  std::vector<Point> shuffled = ordered;
  double random_total = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    random_total += path_length(shuffled);
  }
  const double random_mean = random_total / static_cast<double>(trials);
  if (!(random_mean > 0.0)) return 1.0;
  return own / random_mean;
}

std::vector<Point> decoded_order(const model::Model& model, const SlotMatrix& scene, const WhitenStats& stats) {
  const auto decoded = model.decode(model.encode(scene).mu);
  const auto mask = model.mask();
  const std::size_t K = scene.slots(), d = scene.features.cols();
  Tensor cost(Shape{K, K});
  for (std::size_t i = 0; i < K; ++i) {
    for (std::size_t j = 0; j < K; ++j) {
      double c = 0.0;
      for (std::size_t f = 0; f < d; ++f) {
        const double diff = scene.features.at(i, f) * mask[f] - decoded.at(j, f);
        c += diff * diff;
      }
      cost.at(i, j) = c;
    }
  }
  const auto match = hungarian(cost);
  std::vector<std::pair<std::size_t, Point>> rows;
  for (std::size_t i = 0; i < K; ++i) {
    if (scene.empty[i]) continue;
    const SlotRow raw = stats.un_whiten(scene.row(i));
    rows.push_back({match.row_to_col[i], Point{raw[slot::x], raw[slot::y]}});
  }
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<Point> out;
  for (const auto& r : rows) out.push_back(r.second);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::string fmt(double v, int precision = 3) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(precision) << v;
  return out.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

}  // namespace

std::string mask_bar_svg(const std::vector<double>& mask) {
  static const char* labels[] = {"x", "y", "size", "angle", "hue", "sat", "val", "sq", "tri", "circ"};
  const int bar = 36, height = 200, width = static_cast<int>(mask.size()) * bar + 40;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height + 40 << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t j = 0; j < mask.size(); ++j) {
    const double h = mask[j] * height;
    const int x = 20 + static_cast<int>(j) * bar;
    svg << "<rect x=\"" << x + 4 << "\" y=\"" << fmt(height - h + 10) << "\" width=\"" << bar - 8 << "\" height=\""
        << fmt(h) << "\" fill=\"steelblue\"/>\n";
    svg << "<text x=\"" << x + bar / 2 << "\" y=\"" << height + 28 << "\" font-size=\"11\" text-anchor=\"middle\">"
        << (j < 10 ? labels[j] : std::to_string(j).c_str()) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string heatmap_svg(const Tensor& mi) {
  const int cell = 40, left = 50, top = 30;
  const std::size_t rows = mi.rows(), cols = mi.cols();
  double peak = 0.0;
  for (double v : mi.data()) peak = std::max(peak, v);
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + cols * cell + 10 << "\" height=\""
      << top + rows * cell + 10 << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t f = 0; f < cols; ++f) {
    svg << "<text x=\"" << left + f * cell + cell / 2 << "\" y=\"20\" font-size=\"9\" text-anchor=\"middle\">"
        << (f < kFactorCount ? kFactorNames[f] : "") << "</text>\n";
  }
  for (std::size_t d = 0; d < rows; ++d) {
    svg << "<text x=\"40\" y=\"" << top + d * cell + cell / 2 + 4 << "\" font-size=\"11\" text-anchor=\"end\">z" << d
        << "</text>\n";
    for (std::size_t f = 0; f < cols; ++f) {
      const double u = peak > 0.0 ? mi.at(d, f) / peak : 0.0;
      const int shade = static_cast<int>(std::lround(255.0 * (1.0 - u)));
      svg << "<rect class=\"cell\" x=\"" << left + f * cell << "\" y=\"" << top + d * cell << "\" width=\"" << cell
          << "\" height=\"" << cell << "\" fill=\"rgb(" << shade << "," << shade << ",255)\"/>\n";
    }
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string loss_curves_svg(const std::vector<nlohmann::json>& rows, const std::vector<std::string>& keys) {
  static const char* colours[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
  const int width = 600, height = 300, pad = 40;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (rows.empty()) {
    svg << "</svg>\n";
    return svg.str();
  }
  const double max_step = std::max(1.0, rows.back().value("step", 1.0));
  for (std::size_t k = 0; k < keys.size(); ++k) {
    // log10 of |value| on a shared axis
    std::vector<std::pair<double, double>> pts;
    for (const auto& r : rows) {
      if (!r.contains(keys[k])) continue;
      const double v = std::abs(r.at(keys[k]).get<double>());
      pts.emplace_back(r.at("step").get<double>(), std::log10(std::max(v, 1e-6)));
    }
    if (pts.empty()) continue;
    svg << "<polyline fill=\"none\" stroke=\"" << colours[k % 6] << "\" points=\"";
    for (const auto& [s, v] : pts) {
      const double x = pad + (width - 2 * pad) * s / max_step;
      const double y = height / 2.0 - v * (height - 2 * pad) / 12.0;
      svg << fmt(x, 1) << "," << fmt(y, 1) << " ";
    }
    svg << "\"/>\n<text x=\"" << width - pad - 60 << "\" y=\"" << 20 + 14 * k << "\" font-size=\"11\" fill=\""
        << colours[k % 6] << "\">" << keys[k] << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

Image image_grid(const std::vector<std::vector<Image>>& rows) {
  constexpr int gap = 2;
  int cell_w = 0, cell_h = 0;
  std::size_t cols = 0;
  for (const auto& r : rows) {
    cols = std::max(cols, r.size());
    for (const auto& im : r) {
      cell_w = std::max(cell_w, im.width);
      cell_h = std::max(cell_h, im.height);
    }
  }
  if (rows.empty() || cols == 0) return Image(1, 1, Rgb{255, 255, 255});
  Image grid(static_cast<int>(cols) * (cell_w + gap) + gap, static_cast<int>(rows.size()) * (cell_h + gap) + gap,
             Rgb{255, 255, 255});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      grid.blit(rows[r][c], gap + static_cast<int>(c) * (cell_w + gap), gap + static_cast<int>(r) * (cell_h + gap));
    }
  }
  return grid;
}

std::vector<std::string> emit_figures(const std::filesystem::path& dir, const FigureInputs& inputs) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> files;
  if (!inputs.mask.empty()) {
    write_text(dir / "mask.svg", mask_bar_svg(inputs.mask));
    files.push_back("mask.svg");
  }
  if (inputs.mi) {
    write_text(dir / "mutual_info.svg", heatmap_svg(*inputs.mi));
    files.push_back("mutual_info.svg");
  }
  if (!inputs.metrics.empty()) {
    write_text(dir / "loss_curves.svg", loss_curves_svg(inputs.metrics, {"rec", "reg", "condition", "reorder", "lambda"}));
    files.push_back("loss_curves.svg");
  }
  if (!inputs.traversal.empty()) {
    write_png(dir / "traversal.png", image_grid(inputs.traversal));
    files.push_back("traversal.png");
  }
  nlohmann::json manifest{{"figures", files}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  return files;
}

}  // namespace constellation::analysis
