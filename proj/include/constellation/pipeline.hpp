#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "constellation/analysis.hpp"
#include "constellation/model.hpp"
#include "constellation/objective.hpp"
#include "constellation/scan.hpp"
#include "constellation/scenegen.hpp"

namespace constellation {

struct DataConfig {
  GenConfig gen;
  std::size_t scenes = 10000;
  std::uint64_t seed = 1;
  int resolution = 64;
};

struct EvalConfig {
  std::size_t scenes = 1000;
  /// Held-out scenes use seeds offset by this from the training seed.
  std::uint64_t held_out_offset = 1000000;
  analysis::MiConfig mi;
  /// <= 0 means 1 / (2 d_o).
  double keep_thresh = 0.0;
  /// Decoded rows closer than this to the empty default count as empty.
  double empty_radius = 0.5;
  std::size_t ordering_trials = 100;
  std::uint64_t seed = 0;
};

/// Everything a run needs, one JSON document with sections
/// {data, model, objective, scan, eval} plus the symbol vocabulary.
struct PipelineConfig {
  DataConfig data;
  model::ModelConfig model;
  objective::ObjectiveConfig objective;
  scan::ScanConfig scan;
  EvalConfig eval;
  scan::Vocabulary vocab = scan::Vocabulary::standard();

  void validate() const;
  double keep_thresh() const;
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
void from_json(const nlohmann::json& j, PipelineConfig& c);

/// Parses and validates a config file. Syntax errors and unknown keys are
/// reported as ConfigError with the offending line.
PipelineConfig load_config(const std::filesystem::path& path);
PipelineConfig parse_config(const std::string& text);

std::vector<SlotMatrix> slot_matrices(const Dataset& dataset);

/// Held-out scenes whitened with the training stats.
Dataset held_out(const Dataset& train, const EvalConfig& config);

struct PositionError {
  double x = 0.0;
  double y = 0.0;
  std::size_t objects = 0;
};

/// Mean squared error per coordinate, in whitened units, between each
/// object's position and its matched decoded row (posterior mean, un-masked).
PositionError matched_position_error(const model::Model& model, const std::vector<SlotMatrix>& scenes);

struct EvalReport {
  std::vector<double> mask;
  double position_mass = 0.0;
  PositionError position_error;
  analysis::MiResult mi;
  double mig = 0.0;
  std::optional<double> ordering_median;
  std::size_t ordering_scenes = 0;

  nlohmann::json to_json() const;
};

EvalReport evaluate_model(const model::Model& model, const Dataset& test, const EvalConfig& config);

/// Scene posteriors paired with their full labels.
std::vector<scan::ScanTrainingPair> scan_pairs(const model::Model& model, const Dataset& dataset,
                                               const scan::Vocabulary& vocab);

struct ScanEval {
  std::vector<double> block_accuracy;
  std::vector<bool> uninformative;
  nlohmann::json to_json(const scan::Vocabulary& vocab) const;
};

/// Per-block classification accuracy against label_scene.
ScanEval evaluate_scan(const scan::ScanModel& scan_model, const std::vector<scan::ScanTrainingPair>& pairs);

/// Loads `<run>/checkpoint/model` as an evaluation model.
model::Model load_model(const std::filesystem::path& run_dir);

}  // namespace constellation
