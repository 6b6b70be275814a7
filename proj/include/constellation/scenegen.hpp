#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "constellation/diff/tensor.hpp"
#include "constellation/image.hpp"

namespace constellation {

using Rng = std::mt19937_64;

enum class Sprite : int { square = 0, triangle = 1, circle = 2 };

std::string sprite_name(Sprite s);
Sprite sprite_from_name(const std::string& name);

/// Arrangement factors of the line super-structure a scene is built from.
struct RelationalFactors {
  double center_x = 0.0;
  double center_y = 0.0;
  double orientation = 0.0;  // radians
  double curviness = 0.0;    // 0 straight .. 1 closed circle
  int count = 2;
};

struct ObjectAppearance {
  double hue = 0.0;
  double saturation = 0.0;
  double value = 0.0;
  double size = 0.1;
  double angle = 0.0;
  Sprite shape = Sprite::square;
};

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct SceneObject {
  Point position;
  ObjectAppearance appearance;
};

struct SceneSpec {
  RelationalFactors relational;
  std::vector<SceneObject> objects;
};

struct Range {
  double lo = 0.0;
  double hi = 1.0;
};

inline void to_json(nlohmann::json& j, const Range& r) { j = nlohmann::json::array({r.lo, r.hi}); }
inline void from_json(const nlohmann::json& j, Range& r) {
  r.lo = j.at(0).get<double>();
  r.hi = j.at(1).get<double>();
}

struct GenConfig {
  Range center_x{-0.5, 0.5};
  Range center_y{-0.5, 0.5};
  Range orientation{0.0, 1.5707963267948966};
  Range curviness{0.0, 1.0};
  int count_min = 2;
  int count_max = 6;
  Range hue{0.0, 1.0};
  Range saturation{0.0, 1.0};
  Range value{0.0, 1.0};
  Range size{0.05, 0.2};
  Range angle{0.0, 6.283185307179586};
  double arc_length = 1.0;
  int slots = 8;

  /// Throws ConfigError on min > max or out-of-domain values.
  void validate() const;
};

void to_json(nlohmann::json& j, const GenConfig& c);
void from_json(const nlohmann::json& j, GenConfig& c);

// Slot feature layout before whitening.
namespace slot {
inline constexpr std::size_t x = 0;
inline constexpr std::size_t y = 1;
inline constexpr std::size_t size = 2;
inline constexpr std::size_t angle = 3;
inline constexpr std::size_t hue = 4;
inline constexpr std::size_t saturation = 5;
inline constexpr std::size_t value = 6;
inline constexpr std::size_t shape0 = 7;  // one-hot over Sprite, three entries
inline constexpr std::size_t dim = 10;
}  // namespace slot

using SlotRow = std::array<double, slot::dim>;

SlotRow raw_features(const SceneObject& object);

/// Per-feature mean and (population) standard deviation over non-empty slots.
struct WhitenStats {
  static constexpr double min_std = 1e-6;
  SlotRow mean{};
  SlotRow std{};

  SlotRow whiten(const SlotRow& raw) const;
  SlotRow un_whiten(const SlotRow& whitened) const;
};

void to_json(nlohmann::json& j, const WhitenStats& s);
void from_json(const nlohmann::json& j, WhitenStats& s);

/// K whitened slot rows; empty rows hold the default (all zeros).
struct SlotMatrix {
  diff::Tensor features;  // K x slot::dim
  std::vector<bool> empty;

  std::size_t slots() const { return empty.size(); }
  std::size_t object_count() const;
  SlotRow row(std::size_t i) const;
  void set_row(std::size_t i, const SlotRow& values);
};

SceneSpec sample_scene_spec(Rng& rng, const GenConfig& config);

/// Points spaced evenly by arc length along a circular arc whose subtended
/// angle is 2*pi*curviness; the point centroid sits at the center factors.
std::vector<Point> realize_positions(const RelationalFactors& relational, double arc_length);

WhitenStats compute_whiten_stats(const std::vector<SceneSpec>& corpus);

/// Throws CapacityError if the scene has more objects than `slots`. All K
/// rows are shuffled with `rng`.
SlotMatrix to_slot_matrix(const SceneSpec& spec, std::size_t slots, const WhitenStats& stats, Rng& rng);

/// Un-whitens the non-empty rows into objects, clamping appearance factors to
/// their valid ranges and picking the shape by the largest one-hot entry.
std::vector<SceneObject> objects_from_slots(const SlotMatrix& slots, const WhitenStats& stats, const GenConfig& config);

Image render_objects(const std::vector<SceneObject>& objects, int resolution);
Image render_scene(const SceneSpec& spec, int resolution);

// ---------------------------------------------------------------------------
// Dataset files: JSON lines, a header followed by one record per scene.

inline constexpr int kDatasetSchemaVersion = 1;

struct DatasetHeader {
  int schema_version = kDatasetSchemaVersion;
  std::size_t slots = 8;
  std::size_t feature_dim = slot::dim;
  std::size_t records = 0;
  WhitenStats stats;
  GenConfig config;
};

struct SceneRecord {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  SceneSpec spec;
  SlotMatrix slots;
};

struct Dataset {
  DatasetHeader header;
  std::vector<SceneRecord> records;
};

/// Scene i uses seed base_seed + i; whitening stats come from the generated
/// corpus itself.
Dataset generate_dataset(const GenConfig& config, std::size_t count, std::uint64_t base_seed);
/// Generates scenes whitened with existing stats (held-out splits).
Dataset generate_dataset(const GenConfig& config, std::size_t count, std::uint64_t base_seed, const WhitenStats& stats);

void write_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace constellation
