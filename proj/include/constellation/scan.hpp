#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "constellation/diff/params.hpp"
#include "constellation/model.hpp"
#include "constellation/scenegen.hpp"

namespace constellation::scan {

using diff::ParamSet;
using diff::Tensor;
using diff::Var;

struct Block {
  std::string name;
  std::vector<std::string> symbols;
};

/// Symbol blocks plus the cut points used to quantize ground-truth factors.
struct Vocabulary {
  std::vector<Block> blocks;
  double straight_below = 0.15;
  double circle_above = 0.85;
  /// Horizontal/vertical blocks split these ranges into thirds.
  Range center_x{-0.5, 0.5};
  Range center_y{-0.5, 0.5};
  /// Orientation below `flat_below` is horizontal_line, above `steep_above` vertical_line.
  double flat_below = 0.5235987755982988;
  double steep_above = 1.0471975511965976;
  int count_first = 2;

  /// curviness, count, horizontal, vertical, orientation.
  static Vocabulary standard(const GenConfig& config = {});

  std::size_t size() const;
  std::size_t offset(std::size_t block) const;
  std::optional<std::pair<std::size_t, std::size_t>> find(const std::string& symbol) const;
  std::size_t block_index(const std::string& name) const;
  std::string listing() const;
};

void to_json(nlohmann::json& j, const Vocabulary& v);
void from_json(const nlohmann::json& j, Vocabulary& v);

/// At most one active symbol per block; nullopt means unspecified.
struct SymbolVector {
  std::vector<std::optional<std::size_t>> active;

  static SymbolVector none(const Vocabulary& vocab);
  std::size_t active_count() const;
  std::vector<double> multi_hot(const Vocabulary& vocab) const;
  /// Throws DomainError unless entries are 0/1 with at most one per block.
  static SymbolVector from_multi_hot(const Vocabulary& vocab, const std::vector<double>& l);
  std::vector<std::string> names(const Vocabulary& vocab) const;
  bool operator==(const SymbolVector&) const = default;
};

/// Comma separated names. Unknown names throw DomainError listing the
/// vocabulary; a second symbol in one block replaces the first and is
/// reported through `overrides`.
SymbolVector parse_symbols(const Vocabulary& vocab, const std::string& text,
                           std::vector<std::string>* overrides = nullptr);

SymbolVector label_scene(const RelationalFactors& factors, const Vocabulary& vocab);

// ---------------------------------------------------------------------------

inline constexpr std::size_t kEncoderUnits[] = {64, 64};
inline constexpr std::size_t kDecoderUnits[] = {64, 64};

struct ScanConfig {
  double beta_s = 1.0;
  double lambda_assoc = 10.0;
  std::size_t batch_size = 64;
  std::int64_t steps = 6000;
  double lr = 1e-3;
  /// Probability that a block keeps its label in a training pair.
  double keep_probability = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const ScanConfig& c);
void from_json(const nlohmann::json& j, ScanConfig& c);

ParamSet init_scan_params(std::size_t vocab_size, std::size_t latent_dim, std::uint64_t seed);

struct SymbolPosterior {
  Var mu;
  Var sigma;
};

/// MLP over l emitting [mu || raw sigma]; sigma = softplus + 1e-6.
SymbolPosterior encode_symbol(Var l, const diff::BoundParams& params);
/// Logits over the |l| symbol entries.
Var decode_symbol(Var z, const diff::BoundParams& params);

struct ScanTerms {
  Var total, recon, prior_kl, assoc_kl;
};

/// Batch mean of BCE(l, decode(z_s)) + beta_s KL(q_s || N(0,I)) +
/// lambda_assoc KL(q(z|a) || q_s). The scene posterior is detached.
ScanTerms scan_loss(Var l, Var noise, Var scene_mu, Var scene_sigma, const diff::BoundParams& params,
                    double beta_s, double lambda_assoc);

/// Trained symbol model over a frozen Constellation encoder.
class ScanModel {
 public:
  ScanModel(Vocabulary vocab, std::size_t latent_dim, ParamSet params);

  const Vocabulary& vocab() const { return vocab_; }
  const ParamSet& params() const { return params_; }
  std::size_t latent_dim() const { return latent_dim_; }
  double sigma_thresh() const { return sigma_thresh_; }

  model::Model::Posterior posterior(const SymbolVector& symbols) const;
  /// Posterior of a single active symbol.
  model::Model::Posterior symbol_posterior(std::size_t block, std::size_t index) const;
  /// Dims with sigma_s < sigma_thresh for one symbol.
  std::vector<std::size_t> confident_dims(std::size_t block, std::size_t index) const;

  /// (dim, mu_s) for the confident dims of every active symbol, in block
  /// order; later symbols win on shared dims and are noted in `conflicts`.
  std::vector<std::pair<std::size_t, double>> constraints(const SymbolVector& symbols,
                                                           std::vector<std::string>* conflicts = nullptr) const;

  struct Classification {
    SymbolVector symbols;
    std::vector<std::vector<double>> scores;  // per block, log density per symbol
    std::vector<bool> uninformative;
  };
  Classification classify(const std::vector<double>& scene_mu) const;

  void save(const std::filesystem::path& stem, const nlohmann::json& extra = {}) const;
  static ScanModel load(const std::filesystem::path& stem);

 private:
  void refresh_threshold();

  Vocabulary vocab_;
  std::size_t latent_dim_;
  ParamSet params_;
  double sigma_thresh_ = 0.0;
  std::vector<std::vector<model::Model::Posterior>> single_;  // per block, per symbol
};

struct ScanTrainingPair {
  model::Model::Posterior scene;
  SymbolVector label;
};

struct ScanLogRow {
  std::int64_t step = 0;
  double total = 0.0, recon = 0.0, prior_kl = 0.0, assoc_kl = 0.0;
  nlohmann::json to_json() const;
};

struct ScanTrainResult {
  ScanModel model;
  std::vector<ScanLogRow> log;
};

/// Trains the symbol model on fixed (posterior, full label) pairs; each step
/// hides a random subset of blocks per pair.
ScanTrainResult train_scan(const std::vector<ScanTrainingPair>& pairs, const Vocabulary& vocab,
                           std::size_t latent_dim, const ScanConfig& config, std::int64_t log_every = 100);

}  // namespace constellation::scan
