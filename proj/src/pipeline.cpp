#include "constellation/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "constellation/errors.hpp"
#include "constellation/hungarian.hpp"
#include "constellation/imagine.hpp"
#include "constellation/rng.hpp"

namespace constellation {

using nlohmann::json;

void PipelineConfig::validate() const {
  data.gen.validate();
  if (data.scenes == 0) throw ConfigError("data.scenes must be positive");
  if (data.resolution < 16) throw ConfigError("data.resolution must be at least 16");
  if (model.slots != static_cast<std::size_t>(data.gen.slots)) {
    throw ConfigError("model.slots (" + std::to_string(model.slots) + ") differs from data.gen.slots (" +
                      std::to_string(data.gen.slots) + ")");
  }
  if (model.feature_dim != slot::dim) throw ConfigError("model.feature_dim must be " + std::to_string(slot::dim));
  if (model.latent_dim == 0) throw ConfigError("model.latent_dim must be positive");
  objective.validate();
  scan.validate();
  if (eval.mi.latent_bins == 0 || eval.mi.factor_bins == 0) throw ConfigError("eval bin counts must be positive");
  if (vocab.blocks.empty()) throw ConfigError("vocabulary has no blocks");
}

double PipelineConfig::keep_thresh() const {
  return eval.keep_thresh > 0.0 ? eval.keep_thresh : imagine::default_keep_threshold(model.feature_dim);
}

void to_json(json& j, const PipelineConfig& c) {
  j = json{{"data", {{"gen", c.data.gen}, {"scenes", c.data.scenes}, {"seed", c.data.seed}, {"resolution", c.data.resolution}}},
           {"model", c.model},
           {"objective", c.objective},
           {"scan", c.scan},
           {"eval",
            {{"scenes", c.eval.scenes},
             {"held_out_offset", c.eval.held_out_offset},
             {"latent_bins", c.eval.mi.latent_bins},
             {"factor_bins", c.eval.mi.factor_bins},
             {"keep_thresh", c.eval.keep_thresh},
             {"empty_radius", c.eval.empty_radius},
             {"ordering_trials", c.eval.ordering_trials},
             {"seed", c.eval.seed}}},
           {"vocabulary", c.vocab}};
}

void from_json(const json& j, PipelineConfig& c) {
  c = PipelineConfig{};
  if (j.contains("data")) {
    const auto& d = j.at("data");
    if (d.contains("gen")) c.data.gen = d.at("gen").get<GenConfig>();
    c.data.scenes = d.value("scenes", c.data.scenes);
    c.data.seed = d.value("seed", c.data.seed);
    c.data.resolution = d.value("resolution", c.data.resolution);
  }
  if (j.contains("model")) c.model = j.at("model").get<model::ModelConfig>();
  if (j.contains("objective")) c.objective = j.at("objective").get<objective::ObjectiveConfig>();
  if (j.contains("scan")) c.scan = j.at("scan").get<scan::ScanConfig>();
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    c.eval.scenes = e.value("scenes", c.eval.scenes);
    c.eval.held_out_offset = e.value("held_out_offset", c.eval.held_out_offset);
    c.eval.mi.latent_bins = e.value("latent_bins", c.eval.mi.latent_bins);
    c.eval.mi.factor_bins = e.value("factor_bins", c.eval.mi.factor_bins);
    c.eval.keep_thresh = e.value("keep_thresh", c.eval.keep_thresh);
    c.eval.empty_radius = e.value("empty_radius", c.eval.empty_radius);
    c.eval.ordering_trials = e.value("ordering_trials", c.eval.ordering_trials);
    c.eval.seed = e.value("seed", c.eval.seed);
  }
  c.vocab = j.contains("vocabulary") ? j.at("vocabulary").get<scan::Vocabulary>() : scan::Vocabulary::standard(c.data.gen);
}

namespace {

std::size_t line_of(const std::string& text, std::size_t offset) {
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(std::min(offset, text.size())), '\n'));
}

void check_keys(const json& given, const json& known, const std::string& path, const std::string& text) {
  if (!given.is_object() || !known.is_object()) return;
  for (const auto& [key, value] : given.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!known.contains(key)) {
      const std::size_t at = text.find("\"" + key + "\"");
      throw ConfigError("line " + std::to_string(line_of(text, at)) + ": unknown config key '" + where + "'");
    }
    check_keys(value, known.at(key), where, text);
  }
}

}  // namespace

PipelineConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("line " + std::to_string(line_of(text, e.byte == 0 ? 0 : e.byte - 1)) + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("line 1: config must be a JSON object");
  PipelineConfig c;
  try {
    c = j.get<PipelineConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config has a value of the wrong type: ") + e.what());
  }
  check_keys(j, json(c), "", text);
  c.validate();
  return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

std::vector<SlotMatrix> slot_matrices(const Dataset& dataset) {
  std::vector<SlotMatrix> out;
  out.reserve(dataset.records.size());
  for (const auto& r : dataset.records) out.push_back(r.slots);
  return out;
}

Dataset held_out(const Dataset& train, const EvalConfig& config) {
  const std::uint64_t base = (train.records.empty() ? 0 : train.records.front().seed) + config.held_out_offset;
  return generate_dataset(train.header.config, config.scenes, base, train.header.stats);
}

PositionError matched_position_error(const model::Model& model, const std::vector<SlotMatrix>& scenes) {
  std::vector<const SlotMatrix*> ptrs;
  for (const auto& s : scenes) ptrs.push_back(&s);
  const auto posteriors = model.encode(ptrs);
  std::vector<std::vector<double>> mus;
  for (const auto& p : posteriors) mus.push_back(p.mu);
  const auto decoded = model.decode(mus);
  const auto mask = model.mask();
  PositionError err;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto& scene = scenes[s];
    const std::size_t K = scene.slots(), d = scene.features.cols();
    diff::Tensor cost(diff::Shape{K, K});
    for (std::size_t i = 0; i < K; ++i) {
      for (std::size_t j = 0; j < K; ++j) {
        double c = 0.0;
        for (std::size_t f = 0; f < d; ++f) {
          const double diff = scene.features.at(i, f) * mask[f] - decoded[s].at(j, f);
          c += diff * diff;
        }
        cost.at(i, j) = c;
      }
    }
    const auto match = hungarian(cost);
    for (std::size_t i = 0; i < K; ++i) {
      if (scene.empty[i]) continue;
      const std::size_t j = match.row_to_col[i];
      const double dx = scene.features.at(i, slot::x) - decoded[s].at(j, slot::x) / mask[slot::x];
      const double dy = scene.features.at(i, slot::y) - decoded[s].at(j, slot::y) / mask[slot::y];
      err.x += dx * dx;
      err.y += dy * dy;
      ++err.objects;
    }
  }
  if (err.objects) {
    err.x /= static_cast<double>(err.objects);
    err.y /= static_cast<double>(err.objects);
  }
  return err;
}

json EvalReport::to_json() const {
  json mi_rows = json::array();
  for (std::size_t d = 0; d < mi.mi.rows(); ++d) mi_rows.push_back(mi.mi.row(d));
  json j{{"mask", mask},
         {"position_mass", position_mass},
         {"position_mse", {{"x", position_error.x}, {"y", position_error.y}, {"objects", position_error.objects}}},
         {"mutual_info", mi_rows},
         {"factor_entropy", mi.factor_entropy},
         {"factors", analysis::kFactorNames},
         {"mig", mig},
         {"ordering_scenes", ordering_scenes}};
  j["ordering_median"] = ordering_median ? json(*ordering_median) : json(nullptr);
  return j;
}

EvalReport evaluate_model(const model::Model& model, const Dataset& test, const EvalConfig& config) {
  EvalReport report;
  report.mask = model.mask();
  report.position_mass = report.mask.at(slot::x) + report.mask.at(slot::y);
  const auto scenes = slot_matrices(test);
  report.position_error = matched_position_error(model, scenes);

  std::vector<const SlotMatrix*> ptrs;
  for (const auto& s : scenes) ptrs.push_back(&s);
  std::vector<std::vector<double>> mus;
  for (const auto& p : model.encode(ptrs)) mus.push_back(p.mu);
  std::vector<analysis::FactorRow> factors;
  for (const auto& r : test.records) factors.push_back(analysis::factor_row(r.spec.relational));
  if (mus.size() >= 1000) {
    report.mi = analysis::mutual_info_matrix(mus, factors, config.mi);
    report.mig = analysis::mig_score(report.mi.mi, report.mi.factor_entropy);
  }

  Rng rng(mix_seed(config.seed, kTagEval));
  std::vector<double> scores;
  for (const auto& r : test.records) {
    const auto ordered = analysis::decoded_order(model, r.slots, test.header.stats);
    if (auto s = analysis::ordering_score(ordered, rng, config.ordering_trials)) scores.push_back(*s);
  }
  report.ordering_scenes = scores.size();
  if (!scores.empty()) {
    std::sort(scores.begin(), scores.end());
    const std::size_t n = scores.size();
    report.ordering_median = n % 2 ? scores[n / 2] : 0.5 * (scores[n / 2 - 1] + scores[n / 2]);
  }
  return report;
}

std::vector<scan::ScanTrainingPair> scan_pairs(const model::Model& model, const Dataset& dataset,
                                               const scan::Vocabulary& vocab) {
  std::vector<const SlotMatrix*> ptrs;
  for (const auto& r : dataset.records) ptrs.push_back(&r.slots);
  const auto posteriors = model.encode(ptrs);
  std::vector<scan::ScanTrainingPair> out;
  for (std::size_t i = 0; i < posteriors.size(); ++i) {
    out.push_back({posteriors[i], scan::label_scene(dataset.records[i].spec.relational, vocab)});
  }
  return out;
}

json ScanEval::to_json(const scan::Vocabulary& vocab) const {
  json j = json::object();
  for (std::size_t b = 0; b < vocab.blocks.size(); ++b) {
    j[vocab.blocks[b].name] = {{"accuracy", block_accuracy[b]}, {"uninformative", static_cast<bool>(uninformative[b])}};
  }
  return j;
}

ScanEval evaluate_scan(const scan::ScanModel& scan_model, const std::vector<scan::ScanTrainingPair>& pairs) {
  const std::size_t blocks = scan_model.vocab().blocks.size();
  ScanEval out;
  out.block_accuracy.assign(blocks, 0.0);
  out.uninformative.assign(blocks, false);
  std::vector<std::size_t> labelled(blocks, 0);
  for (const auto& p : pairs) {
    const auto c = scan_model.classify(p.scene.mu);
    for (std::size_t b = 0; b < blocks; ++b) {
      out.uninformative[b] = c.uninformative[b];
      if (!p.label.active[b]) continue;
      ++labelled[b];
      out.block_accuracy[b] += c.symbols.active[b] == p.label.active[b];
    }
  }
  for (std::size_t b = 0; b < blocks; ++b) {
    if (labelled[b]) out.block_accuracy[b] /= static_cast<double>(labelled[b]);
  }
  return out;
}

model::Model load_model(const std::filesystem::path& run_dir) {
  json meta;
  auto params = diff::load_checkpoint(run_dir / "checkpoint" / "model", &meta);
  return model::Model(meta.at("model").get<model::ModelConfig>(), std::move(params));
}

}  // namespace constellation
