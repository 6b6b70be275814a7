#include "constellation/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <optional>

#include "constellation/analysis.hpp"
#include "constellation/errors.hpp"
#include "constellation/imagine.hpp"
#include "constellation/pipeline.hpp"
#include "constellation/rng.hpp"

namespace constellation::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string config;
  std::string data;
  std::string out;
  std::string checkpoint;
  std::string scan;
  std::string symbols;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> scene;
  std::optional<std::size_t> dim;
  bool resume = false;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed for " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  return json::parse(f);
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::vector<json> rows;
  std::ifstream f(path);
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty()) rows.push_back(json::parse(line));
  }
  return rows;
}

// --config wins; otherwise the snapshot stored in the checkpoint run.
PipelineConfig resolve_config(const Options& o) {
  if (!o.config.empty()) return load_config(o.config);
  if (!o.checkpoint.empty() && fs::exists(fs::path(o.checkpoint) / "config.json")) {
    return load_config(fs::path(o.checkpoint) / "config.json");
  }
  return parse_config("{}");
}

std::string require(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string(flag) + " is required");
  return value;
}

// Dataset given explicitly or recorded by `train`.
fs::path dataset_path(const Options& o) {
  if (!o.data.empty()) return o.data;
  if (!o.checkpoint.empty() && fs::exists(fs::path(o.checkpoint) / "run.json")) {
    return read_json(fs::path(o.checkpoint) / "run.json").at("data").get<std::string>();
  }
  throw ConfigError("--data is required");
}

void snapshot(const fs::path& dir, const PipelineConfig& config, const json& run) {
  fs::create_directories(dir);
  write_text(dir / "config.json", json(config).dump(2) + "\n");
  write_text(dir / "run.json", run.dump(2) + "\n");
}

Image render_slots(const SlotMatrix& slots, const Dataset& data, int resolution) {
  return render_objects(objects_from_slots(slots, data.header.stats, data.header.config), resolution);
}

const SceneRecord& pick_scene(const Dataset& data, std::size_t index) {
  if (index >= data.records.size()) {
    throw DomainError("scene " + std::to_string(index) + " outside dataset of " + std::to_string(data.records.size()));
  }
  return data.records[index];
}

int cmd_gen(const Options& o, std::ostream& out) {
  auto config = resolve_config(o);
  if (o.seed) config.data.seed = *o.seed;
  const fs::path path = require(o.out, "--out");
  const Dataset data = generate_dataset(config.data.gen, config.data.scenes, config.data.seed);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_dataset(path, data);
  out << "wrote " << data.records.size() << " scenes to " << path.string() << "\n";
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  auto config = resolve_config(o);
  if (o.seed) config.objective.seed = *o.seed;
  const fs::path run_dir = require(o.out, "--out");
  const fs::path data_path = dataset_path(o);
  const Dataset data = read_dataset(data_path);
  if (data.header.slots != config.model.slots) throw ConfigError("dataset slot count differs from model.slots");
  snapshot(run_dir, config, {{"command", "train"}, {"data", fs::absolute(data_path).string()}});
  const auto corpus = slot_matrices(data);
  const auto result = objective::train_loop(corpus, config.model, config.objective, run_dir, o.resume);
  const model::Model model(config.model, result.final_state.params);
  analysis::FigureInputs figures;
  figures.mask = model.mask();
  figures.metrics = read_jsonl(run_dir / "metrics.jsonl");
  analysis::emit_figures(run_dir / "figures", figures);
  out << "trained " << result.final_state.step << " steps; lambda " << result.final_state.geco.lambda << "\n";
  return kExitOk;
}

int cmd_train_scan(const Options& o, std::ostream& out) {
  auto config = resolve_config(o);
  if (o.seed) config.scan.seed = *o.seed;
  const fs::path run_dir = require(o.checkpoint, "--checkpoint");
  const fs::path out_dir = require(o.out, "--out");
  const fs::path data_path = dataset_path(o);
  const Dataset data = read_dataset(data_path);
  const auto model = load_model(run_dir);
  snapshot(out_dir, config,
           {{"command", "train-scan"}, {"data", fs::absolute(data_path).string()}, {"checkpoint", fs::absolute(run_dir).string()}});
  const auto pairs = scan_pairs(model, data, config.vocab);
  const auto result = scan::train_scan(pairs, config.vocab, model.config().latent_dim, config.scan);
  result.model.save(out_dir / "scan");
  std::string log;
  for (const auto& row : result.log) log += row.to_json().dump() + "\n";
  write_text(out_dir / "metrics.jsonl", log);
  write_text(out_dir / "train_accuracy.json", evaluate_scan(result.model, pairs).to_json(config.vocab).dump(2) + "\n");
  out << "scan model written to " << (out_dir / "scan").string() << "\n";
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  const auto config = resolve_config(o);
  const fs::path run_dir = require(o.checkpoint, "--checkpoint");
  const fs::path out_dir = o.out.empty() ? run_dir / "eval" : fs::path(o.out);
  const Dataset train = read_dataset(dataset_path(o));
  const Dataset test = held_out(train, config.eval);
  const auto model = load_model(run_dir);
  const EvalReport report = evaluate_model(model, test, config.eval);
  json j = report.to_json();
  if (!o.scan.empty()) {
    const auto scan_model = scan::ScanModel::load(fs::path(o.scan) / "scan");
    j["scan"] = evaluate_scan(scan_model, scan_pairs(model, test, config.vocab)).to_json(config.vocab);
  }
  write_text(out_dir / "report.json", j.dump(2) + "\n");

  analysis::FigureInputs figures;
  figures.mask = report.mask;
  if (report.mi.mi.rows() > 0) figures.mi = report.mi.mi;
  if (fs::exists(run_dir / "metrics.jsonl")) figures.metrics = read_jsonl(run_dir / "metrics.jsonl");
  const auto& scene = test.records.front().slots;
  const double keep = config.keep_thresh();
  for (std::size_t d = 0; d < model.config().latent_dim; ++d) {
    std::vector<Image> row;
    for (const auto& s : analysis::latent_traversal(model, scene, d, analysis::traversal_values(0.0), keep)) {
      row.push_back(render_slots(s, test, config.data.resolution));
    }
    figures.traversal.push_back(std::move(row));
  }
  analysis::emit_figures(out_dir / "figures", figures);
  out << j.dump(2) << "\n";
  return kExitOk;
}

int cmd_traverse(const Options& o, std::ostream& out) {
  const auto config = resolve_config(o);
  const fs::path run_dir = require(o.checkpoint, "--checkpoint");
  const fs::path out_dir = o.out.empty() ? run_dir / "traverse" : fs::path(o.out);
  const Dataset data = read_dataset(dataset_path(o));
  const auto model = load_model(run_dir);
  const auto& record = pick_scene(data, o.scene.value_or(0));
  const auto mu = model.encode(record.slots).mu;
  std::vector<std::size_t> dims;
  if (o.dim) {
    dims.push_back(*o.dim);
  } else {
    for (std::size_t d = 0; d < mu.size(); ++d) dims.push_back(d);
  }
  std::vector<std::vector<Image>> grid;
  json report{{"scene", record.index}, {"mu", mu}, {"dims", json::array()}};
  for (std::size_t d : dims) {
    if (d >= mu.size()) throw DomainError("--dim " + std::to_string(d) + " outside latent of size " + std::to_string(mu.size()));
    const auto values = analysis::traversal_values(mu[d]);
    std::vector<Image> row;
    for (const auto& s : analysis::latent_traversal(model, record.slots, d, values, config.keep_thresh())) {
      row.push_back(render_slots(s, data, config.data.resolution));
    }
    grid.push_back(std::move(row));
    report["dims"].push_back({{"dim", d}, {"values", values}});
  }
  fs::create_directories(out_dir);
  write_png(out_dir / "traversal.png", analysis::image_grid(grid));
  write_text(out_dir / "traversal.json", report.dump(2) + "\n");
  out << "traversal written to " << (out_dir / "traversal.png").string() << "\n";
  return kExitOk;
}

int cmd_imagine(const Options& o, std::ostream& out) {
  const auto config = resolve_config(o);
  const fs::path run_dir = require(o.checkpoint, "--checkpoint");
  const fs::path out_dir = o.out.empty() ? run_dir / "imagine" : fs::path(o.out);
  const auto scan_model = scan::ScanModel::load(fs::path(require(o.scan, "--scan")) / "scan");
  const auto symbols = scan::parse_symbols(scan_model.vocab(), o.symbols);
  const Dataset data = read_dataset(dataset_path(o));
  const auto model = load_model(run_dir);
  const double keep = config.keep_thresh();

  imagine::Imagined result;
  json report{{"symbols", symbols.names(scan_model.vocab())}};
  std::vector<Image> panels;
  if (o.scene) {
    const auto& record = pick_scene(data, *o.scene);
    result = imagine::reimagine(record.slots, symbols, model, scan_model, keep, o.seed.value_or(config.eval.seed));
    panels.push_back(render_slots(record.slots, data, config.data.resolution));
    report["scene"] = record.index;
  } else {
    Rng rng(mix_seed(o.seed.value_or(config.eval.seed), kTagEval));
    result = imagine::ancestral_generate(symbols, rng, model, scan_model, keep, config.eval.empty_radius);
  }
  panels.push_back(render_slots(result.slots, data, config.data.resolution));
  json constraints = json::array();
  for (const auto& [dim, value] : result.constraints) constraints.push_back({{"dim", dim}, {"value", value}});
  report["constraints"] = constraints;
  report["notes"] = result.notes;
  report["z"] = result.z;
  report["z_imposed"] = result.z_imposed;
  json objects = json::array();
  for (const auto& obj : objects_from_slots(result.slots, data.header.stats, data.header.config)) {
    objects.push_back({{"x", obj.position.x}, {"y", obj.position.y}});
  }
  report["positions"] = objects;
  fs::create_directories(out_dir);
  write_png(out_dir / "imagined.png", analysis::image_grid({panels}));
  write_text(out_dir / "imagine.json", report.dump(2) + "\n");
  out << report.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Relational abstraction over object slots: data, training, analysis and imagination"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  std::size_t scene = 0, dim = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON config (defaults apply to missing keys)");
    sub->add_option("--seed", seed, "Seed override for this command");
  };
  auto* gen = app.add_subcommand("gen", "Generate a dataset");
  add_common(gen);
  gen->add_option("--out", o.out, "Dataset file (JSON lines)")->required();

  auto* train = app.add_subcommand("train", "Train the relational model");
  add_common(train);
  train->add_option("--data", o.data, "Dataset file")->required();
  train->add_option("--out", o.out, "Run directory")->required();
  train->add_flag("--resume", o.resume, "Continue from the run's checkpoint");

  auto* train_scan = app.add_subcommand("train-scan", "Train the symbol model on a frozen encoder");
  add_common(train_scan);
  train_scan->add_option("--checkpoint", o.checkpoint, "Run directory of a trained model")->required();
  train_scan->add_option("--data", o.data, "Dataset file (default: the one the model was trained on)");
  train_scan->add_option("--out", o.out, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Held-out metrics and figures");
  add_common(eval);
  eval->add_option("--checkpoint", o.checkpoint, "Run directory")->required();
  eval->add_option("--data", o.data, "Training dataset file");
  eval->add_option("--scan", o.scan, "Symbol model directory");
  eval->add_option("--out", o.out, "Output directory");

  auto* traverse = app.add_subcommand("traverse", "Latent traversal images");
  add_common(traverse);
  traverse->add_option("--checkpoint", o.checkpoint, "Run directory")->required();
  traverse->add_option("--data", o.data, "Dataset file");
  traverse->add_option("--scene", scene, "Scene index");
  traverse->add_option("--dim", dim, "Single latent dim (default: all)");
  traverse->add_option("--out", o.out, "Output directory");

  auto* imag = app.add_subcommand("imagine", "Re-imagine a scene or generate one under symbols");
  add_common(imag);
  imag->add_option("--checkpoint", o.checkpoint, "Run directory")->required();
  imag->add_option("--scan", o.scan, "Symbol model directory")->required();
  imag->add_option("--symbols", o.symbols, "Comma-separated symbol names");
  imag->add_option("--data", o.data, "Dataset file");
  imag->add_option("--scene", scene, "Scene to re-imagine (omit for ancestral generation)");
  imag->add_option("--out", o.out, "Output directory");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n";
    return kExitConfig;
  }

  auto* sub = app.get_subcommands().front();
  if (sub->count("--seed")) o.seed = seed;
  if (sub->get_option_no_throw("--scene") && sub->count("--scene")) o.scene = scene;
  if (sub->get_option_no_throw("--dim") && sub->count("--dim")) o.dim = dim;

  try {
    const std::string name = sub->get_name();
    if (name == "gen") return cmd_gen(o, out);
    if (name == "train") return cmd_train(o, out);
    if (name == "train-scan") return cmd_train_scan(o, out);
    if (name == "eval") return cmd_eval(o, out);
    if (name == "traverse") return cmd_traverse(o, out);
    return cmd_imagine(o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DomainError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace constellation::cli
