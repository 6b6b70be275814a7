#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "constellation/diff/params.hpp"
#include "constellation/hungarian.hpp"
#include "constellation/model.hpp"

namespace constellation::objective {

using diff::Tensor;
using diff::Var;

/// Pairs encoded abstract rows with decoded rows by squared distance.
Assignment pair_slots(const Tensor& abstract, const Tensor& decoded);

/// Per-scene assignments over a scene-major (B*K) x d stack.
std::vector<Assignment> pair_batch(const Tensor& abstract, const Tensor& decoded, std::size_t slots);

// Loss terms. Inputs are scene-major stacks of B scenes with K slots; every
// scalar returned is the mean over the B scenes of the per-scene value.

/// 1/2 sum over matched pairs of ||a_i - decoded_j||^2.
Var recon_loss(Var abstract, Var decoded, const std::vector<Assignment>& pairs);
/// beta * KL(N(mu, sigma) || N(0, I)).
Var kl_loss(const model::RelationalPosterior& posterior, double beta);
/// H(m) = -sum m ln m.
Var entropy_term(Var mask);
/// Per-feature 1/2 sum over matched pairs of (o_i - decoded_j / max(m, floor))^2.
Var star_recon_per_feature(Var slots, Var decoded, Var mask, const std::vector<Assignment>& pairs,
                           double mask_floor = 1e-4);
/// sum_j (1 - m_j) |star_j - gamma_j|
Var condition_loss(Var star, Var mask, Var gamma);
/// sum over i >= 1 of ||decoded_i - decoded_{i-1}||^2 in generation order.
Var reorder_loss(Var decoded, std::size_t slots);

/// Closed-form KL between diagonal Gaussians, KL(N(mu_p, s_p) || N(mu_q, s_q)).
double gaussian_kl(const std::vector<double>& mu_p, const std::vector<double>& sigma_p,
                   const std::vector<double>& mu_q, const std::vector<double>& sigma_q);

// ---------------------------------------------------------------------------

struct GecoConfig {
  /// Reconstruction target per scene (whitened, masked units).
  double target = 0.05;
  /// Weight of the newest constraint value in the moving average.
  double ema_rate = 0.01;
  double step_size = 0.01;
  double lambda_min = 1e-3;
  double lambda_max = 1e3;
};

struct GecoState {
  double lambda = 1.0;
  double constraint_ma = 0.0;
};

/// C_ma <- (1 - a) C_ma + a (L_rec - target); lambda <- clip(lambda exp(step C_ma)).
GecoState geco_update(const GecoState& state, double recon, const GecoConfig& config);

struct ObjectiveConfig {
  std::size_t batch_size = 16;
  std::int64_t steps = 20000;
  double lr_initial = 1e-3;
  double lr_floor = 1e-4;
  double lr_half_life_fraction = 0.2;
  /// KL weight relative to reconstruction; GECO starts from lambda = 1 / beta.
  double beta = 0.01;
  GecoConfig geco;
  double entropy_weight = 0.05;
  double reorder_weight = 0.1;
  bool reorder_enabled = true;
  double condition_decay_fraction = 0.5;
  double condition_mask_floor = 1e-4;
  std::int64_t log_every = 100;
  std::int64_t checkpoint_every = 1000;
  std::uint64_t seed = 0;

  void validate() const;
  diff::LrSchedule lr_schedule() const;
  /// Linear decay 1 -> 0 over the first condition_decay_fraction of training.
  double condition_weight(std::int64_t step) const;
};

void to_json(nlohmann::json& j, const GecoConfig& c);
void from_json(const nlohmann::json& j, GecoConfig& c);
void to_json(nlohmann::json& j, const ObjectiveConfig& c);
void from_json(const nlohmann::json& j, ObjectiveConfig& c);

struct LossReport {
  std::int64_t step = 0;
  double recon = 0.0;
  double kl = 0.0;
  double entropy = 0.0;
  double condition = 0.0;
  double reorder = 0.0;
  double total = 0.0;
  double lambda = 0.0;
  double lr = 0.0;
  double condition_weight = 0.0;
  std::vector<double> mask;
  std::vector<Assignment> pairs;

  nlohmann::json to_json() const;
};

/// Weights applied to the terms of one objective evaluation.
struct TermWeights {
  double lambda = 1.0;
  double beta = 1.0;
  double entropy = 0.05;
  double reorder = 0.1;
  double condition = 1.0;
  double mask_floor = 1e-4;
};

struct ObjectiveTerms {
  Var recon, kl, entropy, star, condition, reorder, total;
  std::vector<Assignment> pairs;
};

/// Full forward pass and weighted objective on one batch.
ObjectiveTerms evaluate_objective(const diff::BoundParams& params, Var slots, Var noise, std::size_t batch,
                                  std::size_t slot_count, const TermWeights& weights);

struct TrainState {
  diff::ParamSet params;
  diff::AdamState adam;
  GecoState geco;
  std::int64_t step = 0;
};

/// One optimisation step: forward, matching, losses, backward, Adam, GECO.
/// Throws NonFiniteError (with the report in the message) on a non-finite loss.
LossReport train_step(const std::vector<const SlotMatrix*>& batch, const Tensor& noise, TrainState& state,
                      const ObjectiveConfig& config, double lr);

/// Owns the corpus view, batching and noise streams of one training run.
class Trainer {
 public:
  Trainer(model::ModelConfig model_config, ObjectiveConfig config, const std::vector<SlotMatrix>& corpus);

  const TrainState& state() const { return state_; }
  TrainState& state() { return state_; }
  const ObjectiveConfig& config() const { return config_; }
  const model::ModelConfig& model_config() const { return model_config_; }

  LossReport step();

  /// Batch indices used at a given step; pure function of (seed, step).
  std::vector<std::size_t> batch_indices(std::int64_t step) const;
  Tensor noise(std::int64_t step) const;

  void save_checkpoint(const std::filesystem::path& dir) const;
  void load_checkpoint(const std::filesystem::path& dir);

 private:
  model::ModelConfig model_config_;
  ObjectiveConfig config_;
  const std::vector<SlotMatrix>* corpus_;
  TrainState state_;
  mutable std::int64_t cached_epoch_ = -1;
  mutable std::vector<std::size_t> cached_perm_;
};

struct TrainLoopResult {
  std::vector<LossReport> logged;
  TrainState final_state;
};

/// Runs until config.steps, writing `metrics.jsonl` and checkpoints into
/// `run_dir`. When `resume` is set and a checkpoint exists it continues from
/// there, keeping only the metrics rows up to the checkpointed step.
TrainLoopResult train_loop(const std::vector<SlotMatrix>& corpus, const model::ModelConfig& model_config,
                           const ObjectiveConfig& config, const std::filesystem::path& run_dir, bool resume = false,
                           std::int64_t stop_after = -1);

}  // namespace constellation::objective
