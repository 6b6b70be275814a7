#include "constellation/diff/params.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "constellation/errors.hpp"

namespace constellation::diff {

BoundParams::BoundParams(Tape& tape, const ParamSet& params) : tape_(&tape) {
  for (const auto& [name, value] : params) vars_.emplace(name, tape.leaf(value));
}

Var BoundParams::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw DomainError("unknown parameter '" + name + "'");
  return it->second;
}

ParamSet BoundParams::gradients() const {
  ParamSet out;
  for (const auto& [name, var] : vars_) out.emplace(name, tape_->grad(var));
  return out;
}

void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, double lr) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw DomainError("adam_step: gradient for unknown parameter '" + name + "'");
    if (it->second.shape() != g.shape()) {
      throw DimensionError("adam_step: parameter '" + name + "' has shape " + shape_string(it->second.shape()) +
                           " but gradient " + shape_string(g.shape()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(AdamState::beta1, t);
  const double correction2 = 1.0 - std::pow(AdamState::beta2, t);
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    auto [mit, fresh_m] = state.first_moment.try_emplace(name, g.shape(), 0.0);
    auto [vit, fresh_v] = state.second_moment.try_emplace(name, g.shape(), 0.0);
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    if (m.shape() != g.shape() || v.shape() != g.shape()) {
      throw DimensionError("adam_step: moment shape mismatch for '" + name + "'");
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = AdamState::beta1 * m[i] + (1.0 - AdamState::beta1) * g[i];
      v[i] = AdamState::beta2 * v[i] + (1.0 - AdamState::beta2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      p[i] -= lr * m_hat / (std::sqrt(v_hat) + AdamState::epsilon);
    }
  }
}

double LrSchedule::at(std::int64_t step) const {
  const double decayed = initial * std::pow(0.5, static_cast<double>(step) / half_life);
  return std::max(floor, decayed);
}

namespace {

void write_le(std::ofstream& out, double value) {
  auto bits = std::bit_cast<std::uint64_t>(value);
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFFu);
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

double read_le(const unsigned char* bytes) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return std::filesystem::path(stem.string() + suffix);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& stem, const ParamSet& tensors, const nlohmann::json& meta) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  std::ofstream bin(with_suffix(stem, ".bin"), std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot write " + with_suffix(stem, ".bin").string());
  nlohmann::json manifest;
  manifest["format"] = "float64-le";
  manifest["meta"] = meta.is_null() ? nlohmann::json::object() : meta;
  auto& list = manifest["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    list.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    for (double v : t.data()) write_le(bin, v);
    offset += t.size();
  }
  if (!bin) throw IoError("write failed for " + with_suffix(stem, ".bin").string());
  std::ofstream js(with_suffix(stem, ".json"), std::ios::trunc);
  if (!js) throw IoError("cannot write " + with_suffix(stem, ".json").string());
  js << manifest.dump(2) << '\n';
}

ParamSet load_checkpoint(const std::filesystem::path& stem, nlohmann::json* meta) {
  std::ifstream js(with_suffix(stem, ".json"));
  if (!js) throw IoError("cannot read " + with_suffix(stem, ".json").string());
  nlohmann::json manifest;
  try {
    js >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint manifest " + with_suffix(stem, ".json").string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "float64-le") throw FormatError("unsupported checkpoint format");

  std::ifstream bin(with_suffix(stem, ".bin"), std::ios::binary);
  if (!bin) throw IoError("cannot read " + with_suffix(stem, ".bin").string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  ParamSet out;
  for (const auto& entry : manifest.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    const std::size_t n = shape_size(shape);
    if ((offset + n) * 8 > bytes.size()) throw FormatError("checkpoint payload truncated at '" + entry.at("name").get<std::string>() + "'");
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = read_le(bytes.data() + (offset + i) * 8);
    out.emplace(entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(values)));
  }
  if (meta) *meta = manifest.value("meta", nlohmann::json::object());
  return out;
}

ParamSet flatten(const AdamState& state) {
  ParamSet flat;
  for (const auto& [name, t] : state.first_moment) flat.emplace("m/" + name, t);
  for (const auto& [name, t] : state.second_moment) flat.emplace("v/" + name, t);
  return flat;
}

AdamState unflatten_adam(const ParamSet& flat, std::int64_t step) {
  AdamState state;
  state.step = step;
  for (const auto& [name, t] : flat) {
    if (name.rfind("m/", 0) == 0) state.first_moment.emplace(name.substr(2), t);
    else if (name.rfind("v/", 0) == 0) state.second_moment.emplace(name.substr(2), t);
    else throw FormatError("unexpected optimizer tensor '" + name + "'");
  }
  return state;
}

}  // namespace constellation::diff
