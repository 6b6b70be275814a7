#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "constellation/diff/tape.hpp"

namespace constellation::diff {

/// Named parameter tensors. Ordered by name so that iteration, checkpoints
/// and optimizer updates are deterministic.
using ParamSet = std::map<std::string, Tensor>;

/// Parameters recorded as leaves on one tape.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ParamSet& params);
  /// Binds existing variables, e.g. the inputs of a gradient check.
  BoundParams(Tape& tape, std::map<std::string, Var> vars) : tape_(&tape), vars_(std::move(vars)) {}

  Var operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }

  /// Gradients of every bound parameter after tape.backward().
  ParamSet gradients() const;

 private:
  Tape* tape_;
  std::map<std::string, Var> vars_;
};

struct AdamState {
  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double epsilon = 1e-8;

  ParamSet first_moment;
  ParamSet second_moment;
  std::int64_t step = 0;
};

/// Bias-corrected Adam update of every parameter that has a gradient.
void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, double lr);

struct LrSchedule {
  double initial = 1e-3;
  double floor = 1e-4;
  /// Steps per halving.
  double half_life = 4000.0;

  double at(std::int64_t step) const;
};

// Checkpoints: `<stem>.bin` holds the tensors back to back as little-endian
// float64, `<stem>.json` lists name, shape and offset of each plus free-form
// metadata.
void save_checkpoint(const std::filesystem::path& stem, const ParamSet& tensors, const nlohmann::json& meta = {});
ParamSet load_checkpoint(const std::filesystem::path& stem, nlohmann::json* meta = nullptr);

/// Adam moments stored with "m/" and "v/" prefixes.
ParamSet flatten(const AdamState& state);
AdamState unflatten_adam(const ParamSet& flat, std::int64_t step);

}  // namespace constellation::diff
