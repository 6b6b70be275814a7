#include "constellation/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "constellation/errors.hpp"
#include "constellation/rng.hpp"

namespace constellation {

using nlohmann::json;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
// Below this subtended angle the arc radius L0/phi blows up; use the chord.
constexpr double kStraightThreshold = 1e-3;
constexpr int kMaxRejections = 10000;

void check_range(const char* name, const Range& r) {
  if (!(r.lo <= r.hi)) {
    throw ConfigError(std::string("range '") + name + "' has min " + std::to_string(r.lo) + " > max " + std::to_string(r.hi));
  }
}

double uniform(Rng& rng, const Range& r) {
  if (r.lo == r.hi) return r.lo;
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

bool inside_unit_box(const std::vector<Point>& points) {
  return std::all_of(points.begin(), points.end(),
                     [](const Point& p) { return std::abs(p.x) <= 1.0 && std::abs(p.y) <= 1.0; });
}

json relational_json(const RelationalFactors& r) {
  return {{"center_x", r.center_x}, {"center_y", r.center_y}, {"orientation", r.orientation},
          {"curviness", r.curviness}, {"count", r.count}};
}

RelationalFactors relational_from(const json& j) {
  RelationalFactors r;
  r.center_x = j.at("center_x").get<double>();
  r.center_y = j.at("center_y").get<double>();
  r.orientation = j.at("orientation").get<double>();
  r.curviness = j.at("curviness").get<double>();
  r.count = j.at("count").get<int>();
  return r;
}

json object_json(const SceneObject& o) {
  const auto& a = o.appearance;
  return {{"x", o.position.x}, {"y", o.position.y}, {"hue", a.hue}, {"saturation", a.saturation},
          {"value", a.value}, {"size", a.size}, {"angle", a.angle}, {"shape", sprite_name(a.shape)}};
}

SceneObject object_from(const json& j) {
  SceneObject o;
  o.position = {j.at("x").get<double>(), j.at("y").get<double>()};
  auto& a = o.appearance;
  a.hue = j.at("hue").get<double>();
  a.saturation = j.at("saturation").get<double>();
  a.value = j.at("value").get<double>();
  a.size = j.at("size").get<double>();
  a.angle = j.at("angle").get<double>();
  a.shape = sprite_from_name(j.at("shape").get<std::string>());
  return o;
}

}  // namespace

std::string sprite_name(Sprite s) {
  switch (s) {
    case Sprite::square: return "square";
    case Sprite::triangle: return "triangle";
    case Sprite::circle: return "circle";
  }
  return "square";
}

Sprite sprite_from_name(const std::string& name) {
  if (name == "square") return Sprite::square;
  if (name == "triangle") return Sprite::triangle;
  if (name == "circle") return Sprite::circle;
  throw FormatError("unknown sprite shape '" + name + "'");
}

void GenConfig::validate() const {
  check_range("center_x", center_x);
  check_range("center_y", center_y);
  check_range("orientation", orientation);
  check_range("curviness", curviness);
  check_range("hue", hue);
  check_range("saturation", saturation);
  check_range("value", value);
  check_range("size", size);
  check_range("angle", angle);
  if (count_min > count_max) throw ConfigError("count range has min > max");
  if (count_min < 2) throw ConfigError("count_min must be at least 2");
  if (curviness.lo < 0.0 || curviness.hi > 1.0) throw ConfigError("curviness must lie in [0, 1]");
  if (!(arc_length > 0.0)) throw ConfigError("arc_length must be positive");
  if (slots < count_max) throw ConfigError("slots must be at least count_max");
}

void to_json(json& j, const GenConfig& c) {
  j = json{{"center_x", c.center_x}, {"center_y", c.center_y}, {"orientation", c.orientation},
           {"curviness", c.curviness}, {"count_min", c.count_min}, {"count_max", c.count_max},
           {"hue", c.hue}, {"saturation", c.saturation}, {"value", c.value}, {"size", c.size},
           {"angle", c.angle}, {"arc_length", c.arc_length}, {"slots", c.slots}};
}

void from_json(const json& j, GenConfig& c) {
  GenConfig d;
  c.center_x = j.value("center_x", d.center_x);
  c.center_y = j.value("center_y", d.center_y);
  c.orientation = j.value("orientation", d.orientation);
  c.curviness = j.value("curviness", d.curviness);
  c.count_min = j.value("count_min", d.count_min);
  c.count_max = j.value("count_max", d.count_max);
  c.hue = j.value("hue", d.hue);
  c.saturation = j.value("saturation", d.saturation);
  c.value = j.value("value", d.value);
  c.size = j.value("size", d.size);
  c.angle = j.value("angle", d.angle);
  c.arc_length = j.value("arc_length", d.arc_length);
  c.slots = j.value("slots", d.slots);
}

SlotRow raw_features(const SceneObject& object) {
  const auto& a = object.appearance;
  SlotRow row{};
  row[slot::x] = object.position.x;
  row[slot::y] = object.position.y;
  row[slot::size] = a.size;
  row[slot::angle] = a.angle;
  row[slot::hue] = a.hue;
  row[slot::saturation] = a.saturation;
  row[slot::value] = a.value;
  row[slot::shape0 + static_cast<std::size_t>(a.shape)] = 1.0;
  return row;
}

SlotRow WhitenStats::whiten(const SlotRow& raw) const {
  SlotRow out{};
  for (std::size_t j = 0; j < slot::dim; ++j) out[j] = (raw[j] - mean[j]) / std[j];
  return out;
}

SlotRow WhitenStats::un_whiten(const SlotRow& whitened) const {
  SlotRow out{};
  for (std::size_t j = 0; j < slot::dim; ++j) out[j] = whitened[j] * std[j] + mean[j];
  return out;
}

void to_json(json& j, const WhitenStats& s) { j = json{{"mean", s.mean}, {"std", s.std}}; }

void from_json(const json& j, WhitenStats& s) {
  s.mean = j.at("mean").get<SlotRow>();
  s.std = j.at("std").get<SlotRow>();
}

std::size_t SlotMatrix::object_count() const {
  return static_cast<std::size_t>(std::count(empty.begin(), empty.end(), false));
}

SlotRow SlotMatrix::row(std::size_t i) const {
  SlotRow out{};
  for (std::size_t j = 0; j < slot::dim; ++j) out[j] = features.at(i, j);
  return out;
}

void SlotMatrix::set_row(std::size_t i, const SlotRow& values) {
  for (std::size_t j = 0; j < slot::dim; ++j) features.at(i, j) = values[j];
}

std::vector<Point> realize_positions(const RelationalFactors& relational, double arc_length) {
  const int n = relational.count;
  if (n < 2) throw DomainError("realize_positions needs count >= 2, got " + std::to_string(n));
  if (!(arc_length > 0.0)) throw DomainError("realize_positions needs a positive arc length");

  const double kappa = relational.curviness;
  const double phi = kTwoPi * kappa;
  // Spacing moves from L0/(n-1) (open line) to L0/n (closed circle).
  const double spacing = arc_length / (static_cast<double>(n - 1) + kappa);
  const double middle = 0.5 * spacing * static_cast<double>(n - 1);

  std::vector<Point> local(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    const double s = spacing * k - middle;
    if (phi < kStraightThreshold) {
      local[k] = {s, 0.0};
    } else {
      const double radius = arc_length / phi;
      const double theta = s / radius;
      local[k] = {radius * std::sin(theta), radius * (1.0 - std::cos(theta))};
    }
  }
  Point centroid;
  for (const Point& p : local) {
    centroid.x += p.x;
    centroid.y += p.y;
  }
  centroid.x /= n;
  centroid.y /= n;

  const double c = std::cos(relational.orientation), s = std::sin(relational.orientation);
  std::vector<Point> out;
  out.reserve(local.size());
  for (const Point& p : local) {
    const double x = p.x - centroid.x, y = p.y - centroid.y;
    out.push_back({relational.center_x + c * x - s * y, relational.center_y + s * x + c * y});
  }
  return out;
}

SceneSpec sample_scene_spec(Rng& rng, const GenConfig& config) {
  config.validate();
  for (int attempt = 0; attempt < kMaxRejections; ++attempt) {
    SceneSpec spec;
    auto& r = spec.relational;
    r.center_x = uniform(rng, config.center_x);
    r.center_y = uniform(rng, config.center_y);
    r.orientation = uniform(rng, config.orientation);
    r.curviness = uniform(rng, config.curviness);
    r.count = std::uniform_int_distribution<int>(config.count_min, config.count_max)(rng);
    const auto positions = realize_positions(r, config.arc_length);
    if (!inside_unit_box(positions)) continue;

    std::uniform_int_distribution<int> shape(0, 2);
    for (const Point& p : positions) {
      SceneObject o;
      o.position = p;
      auto& a = o.appearance;
      a.hue = uniform(rng, config.hue);
      a.saturation = uniform(rng, config.saturation);
      a.value = uniform(rng, config.value);
      a.size = uniform(rng, config.size);
      a.angle = uniform(rng, config.angle);
      a.shape = static_cast<Sprite>(shape(rng));
      spec.objects.push_back(o);
    }
    return spec;
  }
  throw ConfigError("no scene fits inside [-1, 1]^2 with the configured ranges");
}

WhitenStats compute_whiten_stats(const std::vector<SceneSpec>& corpus) {
  // Welford's streaming update.
  SlotRow mean{}, m2{};
  std::size_t n = 0;
  for (const SceneSpec& spec : corpus) {
    for (const SceneObject& o : spec.objects) {
      ++n;
      const SlotRow row = raw_features(o);
      for (std::size_t j = 0; j < slot::dim; ++j) {
        const double delta = row[j] - mean[j];
        mean[j] += delta / static_cast<double>(n);
        m2[j] += delta * (row[j] - mean[j]);
      }
    }
  }
  if (n == 0) throw DomainError("compute_whiten_stats: corpus has no objects");
  WhitenStats stats;
  stats.mean = mean;
  for (std::size_t j = 0; j < slot::dim; ++j) {
    stats.std[j] = std::max(WhitenStats::min_std, std::sqrt(m2[j] / static_cast<double>(n)));
  }
  return stats;
}

SlotMatrix to_slot_matrix(const SceneSpec& spec, std::size_t slots, const WhitenStats& stats, Rng& rng) {
  if (spec.objects.size() > slots) {
    throw CapacityError("scene has " + std::to_string(spec.objects.size()) + " objects but only " +
                        std::to_string(slots) + " slots");
  }
  std::vector<std::size_t> order(slots);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  SlotMatrix out{diff::Tensor(diff::Shape{slots, slot::dim}, 0.0), std::vector<bool>(slots, true)};
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    out.set_row(order[i], stats.whiten(raw_features(spec.objects[i])));
    out.empty[order[i]] = false;
  }
  return out;
}

std::vector<SceneObject> objects_from_slots(const SlotMatrix& slots, const WhitenStats& stats, const GenConfig& config) {
  std::vector<SceneObject> out;
  for (std::size_t i = 0; i < slots.slots(); ++i) {
    if (slots.empty[i]) continue;
    const SlotRow raw = stats.un_whiten(slots.row(i));
    SceneObject o;
    o.position = {raw[slot::x], raw[slot::y]};
    auto& a = o.appearance;
    a.size = std::clamp(raw[slot::size], config.size.lo, config.size.hi);
    a.angle = raw[slot::angle];
    a.hue = std::clamp(raw[slot::hue], config.hue.lo, config.hue.hi);
    a.saturation = std::clamp(raw[slot::saturation], config.saturation.lo, config.saturation.hi);
    a.value = std::clamp(raw[slot::value], config.value.lo, config.value.hi);
    const auto first = raw.begin() + static_cast<std::ptrdiff_t>(slot::shape0);
    a.shape = static_cast<Sprite>(std::max_element(first, first + 3) - first);
    out.push_back(o);
  }
  return out;
}

namespace {

bool inside_sprite(const ObjectAppearance& a, double u, double v) {
  // Size s gives a sprite extent of s/2 scene units.
  const double half = a.size / 4.0;
  switch (a.shape) {
    case Sprite::square: return std::abs(u) <= half && std::abs(v) <= half;
    case Sprite::circle: return u * u + v * v <= half * half;
    case Sprite::triangle: {
      // Equilateral, side 2*half, apex up, centred on its centroid.
      const double side = 2.0 * half;
      const double height = side * std::sqrt(3.0) / 2.0;
      const double bottom = -height / 3.0;
      const double top = 2.0 * height / 3.0;
      if (v < bottom || v > top) return false;
      const double half_width = (top - v) / std::sqrt(3.0);
      return std::abs(u) <= half_width;
    }
  }
  return false;
}

}  // namespace

Image render_objects(const std::vector<SceneObject>& objects, int resolution) {
  if (resolution < 16) throw DomainError("render resolution must be at least 16, got " + std::to_string(resolution));
  Image image(resolution, resolution, Rgb{128, 128, 128});
  const double scale = resolution / 2.0;
  for (const SceneObject& o : objects) {
    const auto& a = o.appearance;
    const Rgb colour = hsv_to_rgb(a.hue, a.saturation, a.value);
    const double c = std::cos(a.angle), s = std::sin(a.angle);
    const double reach = a.size / 2.0;
    const int x0 = std::max(0, static_cast<int>(std::floor((o.position.x - reach + 1.0) * scale)));
    const int x1 = std::min(resolution - 1, static_cast<int>(std::ceil((o.position.x + reach + 1.0) * scale)));
    const int y0 = std::max(0, static_cast<int>(std::floor((1.0 - o.position.y - reach) * scale)));
    const int y1 = std::min(resolution - 1, static_cast<int>(std::ceil((1.0 - o.position.y + reach) * scale)));
    for (int py = y0; py <= y1; ++py) {
      for (int px = x0; px <= x1; ++px) {
        const double sx = (px + 0.5) / scale - 1.0;
        const double sy = 1.0 - (py + 0.5) / scale;
        const double dx = sx - o.position.x, dy = sy - o.position.y;
        const double u = c * dx + s * dy, v = -s * dx + c * dy;
        if (inside_sprite(a, u, v)) image.set(px, py, colour);
      }
    }
  }
  return image;
}

Image render_scene(const SceneSpec& spec, int resolution) { return render_objects(spec.objects, resolution); }

Dataset generate_dataset(const GenConfig& config, std::size_t count, std::uint64_t base_seed, const WhitenStats& stats) {
  config.validate();
  if (count == 0) throw ConfigError("dataset must contain at least one scene");
  Dataset out;
  out.header.slots = static_cast<std::size_t>(config.slots);
  out.header.records = count;
  out.header.stats = stats;
  out.header.config = config;
  out.records.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto& rec = out.records[i];
    rec.index = i;
    rec.seed = base_seed + i;
    Rng rng(rec.seed);
    rec.spec = sample_scene_spec(rng, config);
    Rng order(mix_seed(rec.seed, kTagSlotOrder));
    rec.slots = to_slot_matrix(rec.spec, out.header.slots, stats, order);
  }
  return out;
}

Dataset generate_dataset(const GenConfig& config, std::size_t count, std::uint64_t base_seed) {
  config.validate();
  if (count == 0) throw ConfigError("dataset must contain at least one scene");
  std::vector<SceneSpec> specs;
  specs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(base_seed + i);
    specs.push_back(sample_scene_spec(rng, config));
  }
  return generate_dataset(config, count, base_seed, compute_whiten_stats(specs));
}

void write_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write dataset " + path.string());
  const auto& h = dataset.header;
  json header{{"schema_version", h.schema_version}, {"K", h.slots}, {"d_o", h.feature_dim},
              {"records", dataset.records.size()}, {"whiten", h.stats}, {"gen", h.config}};
  out << header.dump() << '\n';
  for (const auto& rec : dataset.records) {
    json objects = json::array();
    for (const auto& o : rec.spec.objects) objects.push_back(object_json(o));
    json slots = json::array();
    for (std::size_t i = 0; i < rec.slots.slots(); ++i) slots.push_back(rec.slots.row(i));
    json r{{"index", rec.index}, {"seed", rec.seed}, {"relational", relational_json(rec.spec.relational)},
           {"objects", objects}, {"slots", slots}, {"empty", rec.slots.empty}};
    out << r.dump() << '\n';
  }
  if (!out) throw IoError("write failed for dataset " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read dataset " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty dataset file");

  Dataset out;
  try {
    const json header = json::parse(line);
    out.header.schema_version = header.at("schema_version").get<int>();
    if (out.header.schema_version != kDatasetSchemaVersion) {
      throw FormatError(path.string() + ": schema version " + std::to_string(out.header.schema_version) +
                        ", expected " + std::to_string(kDatasetSchemaVersion));
    }
    out.header.slots = header.at("K").get<std::size_t>();
    out.header.feature_dim = header.at("d_o").get<std::size_t>();
    out.header.records = header.at("records").get<std::size_t>();
    out.header.stats = header.at("whiten").get<WhitenStats>();
    out.header.config = header.at("gen").get<GenConfig>();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": bad header: " + e.what());
  }
  if (out.header.feature_dim != slot::dim) {
    throw FormatError(path.string() + ": d_o " + std::to_string(out.header.feature_dim) + " unsupported");
  }

  const std::size_t K = out.header.slots;
  out.records.reserve(out.header.records);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::size_t index = out.records.size();
    SceneRecord rec;
    try {
      const json r = json::parse(line);
      rec.index = r.at("index").get<std::size_t>();
      rec.seed = r.at("seed").get<std::uint64_t>();
      rec.spec.relational = relational_from(r.at("relational"));
      for (const auto& o : r.at("objects")) rec.spec.objects.push_back(object_from(o));
      const auto& slots = r.at("slots");
      const auto empty = r.at("empty").get<std::vector<bool>>();
      if (slots.size() != K || empty.size() != K) {
        throw FormatError(path.string() + ": record " + std::to_string(index) + " has " + std::to_string(slots.size()) +
                          " slots but header K = " + std::to_string(K));
      }
      rec.slots = SlotMatrix{diff::Tensor(diff::Shape{K, slot::dim}, 0.0), empty};
      for (std::size_t i = 0; i < K; ++i) {
        const auto row = slots.at(i).get<std::vector<double>>();
        if (row.size() != slot::dim) {
          throw FormatError(path.string() + ": record " + std::to_string(index) + " slot " + std::to_string(i) +
                            " has " + std::to_string(row.size()) + " features");
        }
        for (std::size_t j = 0; j < slot::dim; ++j) rec.slots.features.at(i, j) = row[j];
      }
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ": record " + std::to_string(index) + " is malformed or truncated: " + e.what());
    }
    out.records.push_back(std::move(rec));
  }
  if (out.records.size() != out.header.records) {
    throw FormatError(path.string() + ": truncated, header promises " + std::to_string(out.header.records) +
                      " records but found " + std::to_string(out.records.size()));
  }
  return out;
}

}  // namespace constellation
