#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "constellation/diff/params.hpp"
#include "constellation/scenegen.hpp"

namespace constellation::model {

using diff::BoundParams;
using diff::ParamSet;
using diff::Tensor;
using diff::Var;

// Layer widths of the relational encoder and slot decoder.
inline constexpr std::size_t kEdgeUnits[] = {64, 64};
inline constexpr std::size_t kNodeUnits[] = {128, 128};
inline constexpr std::size_t kGlobalHidden[] = {256, 256};
inline constexpr std::size_t kInputUnits[] = {64, 128, 32};
inline constexpr std::size_t kLstmUnits = 64;
inline constexpr std::size_t kOutputHidden = 128;
inline constexpr std::size_t kMessagePassingRounds = 2;
inline constexpr double kSigmaFloor = 1e-6;

struct ModelConfig {
  std::size_t feature_dim = slot::dim;
  std::size_t latent_dim = 8;
  std::size_t slots = 8;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Fresh parameters: fan-in scaled uniform weights, zero biases, zero mask
/// logits (uniform mask) and zero condition predictor.
ParamSet init_params(const ModelConfig& config, std::uint64_t seed);

/// Diagonal Gaussian over the relational latent, one row per scene.
struct RelationalPosterior {
  Var mu;     // B x d_z
  Var sigma;  // B x d_z
};

// Tape-level building blocks. Slot matrices of a batch are stacked
// scene-major: row b*K + i is slot i of scene b.

Var mask_probabilities(const BoundParams& params);
/// a_i = o_i * m for every row.
Var apply_mask(Var slots, Var mask);
/// Permutation invariant graph encoder over the K slots of each scene.
RelationalPosterior encode(Var abstract, std::size_t batch, std::size_t slots, const BoundParams& params);
/// z = mu + sigma * noise
Var sample(const RelationalPosterior& posterior, Var noise);
/// LSTM slot decoder; returns the K decoded rows of each scene in generation
/// order, stacked scene-major.
Var decode(Var z, std::size_t slots, const BoundParams& params);

/// Adds `<name>/w` (in x out, U(+-1/sqrt(in))) and a zero `<name>/b`.
void add_dense(ParamSet& params, std::mt19937_64& rng, const std::string& name, std::size_t in, std::size_t out);

/// Shared MLP: tanh on hidden layers, optionally on the last one too.
Var mlp(Var x, const BoundParams& params, const std::string& prefix, std::size_t layers, bool activate_final);

/// z ~ N(0, I)
std::vector<double> prior_sample(std::mt19937_64& rng, std::size_t latent_dim);

/// Value-level wrapper around a parameter snapshot for evaluation.
class Model {
 public:
  Model(ModelConfig config, ParamSet params);

  const ModelConfig& config() const { return config_; }
  const ParamSet& params() const { return params_; }

  std::vector<double> mask() const;

  struct Posterior {
    std::vector<double> mu;
    std::vector<double> sigma;
  };

  Posterior encode(const SlotMatrix& slots) const;
  std::vector<Posterior> encode(const std::vector<const SlotMatrix*>& scenes) const;

  /// K x d_o decoded (masked-scale) slot rows.
  Tensor decode(const std::vector<double>& z) const;
  std::vector<Tensor> decode(const std::vector<std::vector<double>>& zs) const;

 private:
  ModelConfig config_;
  ParamSet params_;
};

/// Stacks slot matrices scene-major into a (B*K) x d_o tensor.
Tensor stack_slots(const std::vector<const SlotMatrix*>& scenes);

}  // namespace constellation::model
