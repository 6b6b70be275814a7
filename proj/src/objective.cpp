#include "constellation/objective.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "constellation/errors.hpp"
#include "constellation/rng.hpp"

namespace constellation::objective {

using diff::Shape;
using diff::Tape;

Assignment pair_slots(const Tensor& abstract, const Tensor& decoded) {
  if (abstract.shape() != decoded.shape() || abstract.rank() != 2) {
    throw DimensionError("pair_slots: shapes " + diff::shape_string(abstract.shape()) + " and " +
                         diff::shape_string(decoded.shape()));
  }
  const std::size_t K = abstract.rows(), d = abstract.cols();
  Tensor cost(Shape{K, K});
  for (std::size_t i = 0; i < K; ++i) {
    for (std::size_t j = 0; j < K; ++j) {
      double c = 0.0;
      for (std::size_t f = 0; f < d; ++f) {
        const double diff = abstract.at(i, f) - decoded.at(j, f);
        c += diff * diff;
      }
      cost.at(i, j) = c;
    }
  }
  return hungarian(cost);
}

std::vector<Assignment> pair_batch(const Tensor& abstract, const Tensor& decoded, std::size_t slots) {
  if (abstract.shape() != decoded.shape() || slots == 0 || abstract.rows() % slots != 0) {
    throw DimensionError("pair_batch: shapes " + diff::shape_string(abstract.shape()) + " and " +
                         diff::shape_string(decoded.shape()) + " with K = " + std::to_string(slots));
  }
  const std::size_t batch = abstract.rows() / slots, d = abstract.cols();
  std::vector<Assignment> out;
  out.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    auto block = [&](const Tensor& t) {
      return Tensor(Shape{slots, d}, std::vector<double>(t.data().begin() + static_cast<std::ptrdiff_t>(b * slots * d),
                                                         t.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * slots * d)));
    };
    out.push_back(pair_slots(block(abstract), block(decoded)));
  }
  return out;
}

namespace {

std::vector<std::size_t> matched_rows(const std::vector<Assignment>& pairs, std::size_t rows) {
  if (pairs.empty()) throw DimensionError("no assignments given");
  const std::size_t K = pairs.front().row_to_col.size();
  if (K * pairs.size() != rows) {
    throw DimensionError(std::to_string(pairs.size()) + " assignments of size " + std::to_string(K) + " for " +
                         std::to_string(rows) + " rows");
  }
  std::vector<std::size_t> index(rows);
  for (std::size_t b = 0; b < pairs.size(); ++b) {
    if (pairs[b].row_to_col.size() != K || !pairs[b].is_permutation()) throw DomainError("invalid assignment");
    for (std::size_t i = 0; i < K; ++i) index[b * K + i] = b * K + pairs[b].row_to_col[i];
  }
  return index;
}

}  // namespace

Var recon_loss(Var abstract, Var decoded, const std::vector<Assignment>& pairs) {
  const Var matched = diff::gather_rows(decoded, matched_rows(pairs, abstract.value().rows()));
  return diff::scale(diff::sum(diff::square(diff::sub(abstract, matched))), 0.5 / static_cast<double>(pairs.size()));
}

Var kl_loss(const model::RelationalPosterior& posterior, double beta) {
  // 1/2 sum (mu^2 + sigma^2 - 1 - 2 ln sigma)
  const Var s = posterior.sigma;
  const Var terms = diff::sub(diff::add(diff::square(posterior.mu), diff::square(s)), diff::scale(diff::log(s), 2.0));
  const double batch = static_cast<double>(posterior.mu.value().rows());
  const double n = static_cast<double>(posterior.mu.value().size());
  return diff::scale(diff::add_scalar(diff::sum(terms), -n), 0.5 * beta / batch);
}

Var entropy_term(Var mask) {
  // 0 ln 0 = 0: the log argument is floored so exact zeros stay finite.
  const Var safe = diff::maximum(mask, mask.tape->constant(Tensor(mask.shape(), std::numeric_limits<double>::min())));
  return diff::scale(diff::sum(diff::mul(mask, diff::log(safe))), -1.0);
}

Var star_recon_per_feature(Var slots, Var decoded, Var mask, const std::vector<Assignment>& pairs, double mask_floor) {
  Tape& tape = *slots.tape;
  const std::size_t d = mask.value().size();
  const Var floored = diff::maximum(mask, tape.constant(Tensor(Shape{d}, mask_floor)));
  const Var inverse = diff::div(tape.constant(Tensor(Shape{d}, 1.0)), floored);
  const Var matched = diff::gather_rows(decoded, matched_rows(pairs, slots.value().rows()));
  const Var residual = diff::sub(slots, diff::mul_row(matched, inverse));
  return diff::scale(diff::sum_rows(diff::square(residual)), 0.5 / static_cast<double>(pairs.size()));
}

Var condition_loss(Var star, Var mask, Var gamma) {
  const Var keep = diff::add_scalar(diff::scale(mask, -1.0), 1.0);
  return diff::sum(diff::mul(keep, diff::abs(diff::sub(star, gamma))));
}

Var reorder_loss(Var decoded, std::size_t slots) {
  const std::size_t rows = decoded.value().rows();
  if (slots == 0 || rows % slots != 0) throw DimensionError("reorder_loss: rows not a multiple of K");
  const std::size_t batch = rows / slots;
  std::vector<std::size_t> next, prev;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 1; i < slots; ++i) {
      next.push_back(b * slots + i);
      prev.push_back(b * slots + i - 1);
    }
  }
  const Var step = diff::sub(diff::gather_rows(decoded, std::move(next)), diff::gather_rows(decoded, std::move(prev)));
  return diff::scale(diff::sum(diff::square(step)), 1.0 / static_cast<double>(batch));
}

double gaussian_kl(const std::vector<double>& mu_p, const std::vector<double>& sigma_p, const std::vector<double>& mu_q,
                   const std::vector<double>& sigma_q) {
  const std::size_t n = mu_p.size();
  if (sigma_p.size() != n || mu_q.size() != n || sigma_q.size() != n) throw DimensionError("gaussian_kl: size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ratio = sigma_p[i] / sigma_q[i];
    const double shift = (mu_p[i] - mu_q[i]) / sigma_q[i];
    kl += 0.5 * (ratio * ratio + shift * shift - 1.0) - std::log(ratio);
  }
  return kl;
}

// ---------------------------------------------------------------------------

GecoState geco_update(const GecoState& state, double recon, const GecoConfig& config) {
  GecoState next;
  next.constraint_ma = (1.0 - config.ema_rate) * state.constraint_ma + config.ema_rate * (recon - config.target);
  next.lambda = std::clamp(state.lambda * std::exp(config.step_size * next.constraint_ma), config.lambda_min,
                           config.lambda_max);
  return next;
}

void ObjectiveConfig::validate() const {
  if (batch_size == 0) throw ConfigError("objective.batch_size must be positive");
  if (steps <= 0) throw ConfigError("objective.steps must be positive");
  if (!(lr_initial >= 0.0) || !(lr_floor >= 0.0)) throw ConfigError("learning rates must be non-negative");
  if (!(beta > 0.0)) throw ConfigError("objective.beta must be positive");
  if (!(geco.lambda_min > 0.0) || geco.lambda_min > geco.lambda_max) throw ConfigError("invalid GECO lambda bounds");
  if (!(geco.ema_rate > 0.0 && geco.ema_rate <= 1.0)) throw ConfigError("geco.ema_rate must lie in (0, 1]");
  if (log_every <= 0 || checkpoint_every <= 0) throw ConfigError("log_every and checkpoint_every must be positive");
  if (!(condition_decay_fraction > 0.0)) throw ConfigError("condition_decay_fraction must be positive");
}

diff::LrSchedule ObjectiveConfig::lr_schedule() const {
  return {lr_initial, lr_floor, std::max(1.0, lr_half_life_fraction * static_cast<double>(steps))};
}

double ObjectiveConfig::condition_weight(std::int64_t step) const {
  const double horizon = condition_decay_fraction * static_cast<double>(steps);
  return std::clamp(1.0 - static_cast<double>(step) / horizon, 0.0, 1.0);
}

void to_json(nlohmann::json& j, const GecoConfig& c) {
  j = nlohmann::json{{"target", c.target}, {"ema_rate", c.ema_rate}, {"step_size", c.step_size},
                     {"lambda_min", c.lambda_min}, {"lambda_max", c.lambda_max}};
}

void from_json(const nlohmann::json& j, GecoConfig& c) {
  GecoConfig d;
  c.target = j.value("target", d.target);
  c.ema_rate = j.value("ema_rate", d.ema_rate);
  c.step_size = j.value("step_size", d.step_size);
  c.lambda_min = j.value("lambda_min", d.lambda_min);
  c.lambda_max = j.value("lambda_max", d.lambda_max);
}

void to_json(nlohmann::json& j, const ObjectiveConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},
                     {"steps", c.steps},
                     {"lr_initial", c.lr_initial},
                     {"lr_floor", c.lr_floor},
                     {"lr_half_life_fraction", c.lr_half_life_fraction},
                     {"beta", c.beta},
                     {"geco", c.geco},
                     {"entropy_weight", c.entropy_weight},
                     {"reorder_weight", c.reorder_weight},
                     {"reorder_enabled", c.reorder_enabled},
                     {"condition_decay_fraction", c.condition_decay_fraction},
                     {"condition_mask_floor", c.condition_mask_floor},
                     {"log_every", c.log_every},
                     {"checkpoint_every", c.checkpoint_every},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ObjectiveConfig& c) {
  ObjectiveConfig d;
  c.batch_size = j.value("batch_size", d.batch_size);
  c.steps = j.value("steps", d.steps);
  c.lr_initial = j.value("lr_initial", d.lr_initial);
  c.lr_floor = j.value("lr_floor", d.lr_floor);
  c.lr_half_life_fraction = j.value("lr_half_life_fraction", d.lr_half_life_fraction);
  c.beta = j.value("beta", d.beta);
  c.geco = j.value("geco", d.geco);
  c.entropy_weight = j.value("entropy_weight", d.entropy_weight);
  c.reorder_weight = j.value("reorder_weight", d.reorder_weight);
  c.reorder_enabled = j.value("reorder_enabled", d.reorder_enabled);
  c.condition_decay_fraction = j.value("condition_decay_fraction", d.condition_decay_fraction);
  c.condition_mask_floor = j.value("condition_mask_floor", d.condition_mask_floor);
  c.log_every = j.value("log_every", d.log_every);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.seed = j.value("seed", d.seed);
}

nlohmann::json LossReport::to_json() const {
  return {{"step", step},         {"rec", recon},   {"reg", kl},         {"entropy", entropy},
          {"condition", condition}, {"reorder", reorder}, {"total", total}, {"lambda", lambda},
          {"lr", lr},             {"condition_weight", condition_weight}, {"mask", mask}};
}

ObjectiveTerms evaluate_objective(const diff::BoundParams& params, Var slots, Var noise, std::size_t batch,
                                  std::size_t slot_count, const TermWeights& w) {
  ObjectiveTerms t;
  const Var mask = model::mask_probabilities(params);
  const Var abstract = model::apply_mask(slots, mask);
  const auto posterior = model::encode(abstract, batch, slot_count, params);
  const Var z = model::sample(posterior, noise);
  const Var decoded = model::decode(z, slot_count, params);
  t.pairs = pair_batch(abstract.value(), decoded.value(), slot_count);

  t.recon = recon_loss(abstract, decoded, t.pairs);
  t.kl = kl_loss(posterior, w.beta);
  t.entropy = entropy_term(mask);
  t.star = star_recon_per_feature(slots, decoded, mask, t.pairs, w.mask_floor);
  t.condition = condition_loss(t.star, mask, params["objective/gamma"]);
  t.reorder = reorder_loss(decoded, slot_count);

  Var total = diff::add(diff::scale(t.recon, w.lambda), t.kl);
  total = diff::add(total, diff::scale(t.entropy, -w.entropy));
  if (w.reorder != 0.0) total = diff::add(total, diff::scale(t.reorder, w.reorder));
  if (w.condition != 0.0) total = diff::add(total, diff::scale(t.condition, w.condition));
  t.total = total;
  return t;
}

LossReport train_step(const std::vector<const SlotMatrix*>& batch, const Tensor& noise, TrainState& state,
                      const ObjectiveConfig& config, double lr) {
  if (batch.empty()) throw DomainError("train_step: empty batch");
  const std::size_t K = batch.front()->slots();
  Tape tape;
  diff::BoundParams params(tape, state.params);
  const Var slots = tape.constant(model::stack_slots(batch));
  const Var eps = tape.constant(noise);

  TermWeights w;
  w.lambda = state.geco.lambda;
  w.beta = 1.0;
  w.entropy = config.entropy_weight;
  w.reorder = config.reorder_enabled ? config.reorder_weight : 0.0;
  w.condition = config.condition_weight(state.step);
  w.mask_floor = config.condition_mask_floor;
  const ObjectiveTerms terms = evaluate_objective(params, slots, eps, batch.size(), K, w);

  LossReport report;
  report.step = state.step + 1;
  report.recon = terms.recon.value().item();
  report.kl = terms.kl.value().item();
  report.entropy = terms.entropy.value().item();
  report.condition = terms.condition.value().item();
  report.reorder = terms.reorder.value().item();
  report.total = terms.total.value().item();
  report.lambda = w.lambda;
  report.lr = lr;
  report.condition_weight = w.condition;
  report.mask = tape.value(params["mask/logits"]).data();
  {
    // Report probabilities, not logits.
    double peak = *std::max_element(report.mask.begin(), report.mask.end());
    double total = 0.0;
    for (double& v : report.mask) total += (v = std::exp(v - peak));
    for (double& v : report.mask) v /= total;
  }
  report.pairs = terms.pairs;

  if (!std::isfinite(report.total)) throw NonFiniteError("non-finite loss at step " + std::to_string(report.step) + ": " + report.to_json().dump());
  tape.backward(terms.total);
  const diff::ParamSet grads = params.gradients();
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) {
      throw NonFiniteError("non-finite gradient for '" + name + "' at step " + std::to_string(report.step) + ": " +
                           report.to_json().dump());
    }
  }
  diff::adam_step(state.params, grads, state.adam, lr);
  state.geco = geco_update(state.geco, report.recon, config.geco);
  ++state.step;
  return report;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(model::ModelConfig model_config, ObjectiveConfig config, const std::vector<SlotMatrix>& corpus)
    : model_config_(model_config), config_(std::move(config)), corpus_(&corpus) {
  config_.validate();
  if (corpus.size() < config_.batch_size) {
    throw ConfigError("corpus of " + std::to_string(corpus.size()) + " scenes is smaller than the batch size " +
                      std::to_string(config_.batch_size));
  }
  state_.params = model::init_params(model_config_, config_.seed);
  state_.geco.lambda = std::clamp(1.0 / config_.beta, config_.geco.lambda_min, config_.geco.lambda_max);
}

std::vector<std::size_t> Trainer::batch_indices(std::int64_t step) const {
  const std::size_t n = corpus_->size();
  const std::size_t B = config_.batch_size;
  std::vector<std::size_t> out(B);
  for (std::size_t k = 0; k < B; ++k) {
    const std::size_t position = static_cast<std::size_t>(step) * B + k;
    const auto epoch = static_cast<std::int64_t>(position / n);
    if (epoch != cached_epoch_) {
      cached_perm_.resize(n);
      std::iota(cached_perm_.begin(), cached_perm_.end(), 0);
      Rng rng(mix_seed(mix_seed(config_.seed, kTagEpoch), static_cast<std::uint64_t>(epoch)));
      std::shuffle(cached_perm_.begin(), cached_perm_.end(), rng);
      cached_epoch_ = epoch;
    }
    out[k] = cached_perm_[position % n];
  }
  return out;
}

Tensor Trainer::noise(std::int64_t step) const {
  Rng rng(mix_seed(mix_seed(config_.seed, kTagNoise), static_cast<std::uint64_t>(step)));
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor out(Shape{config_.batch_size, model_config_.latent_dim});
  for (double& v : out.values()) v = normal(rng);
  return out;
}

LossReport Trainer::step() {
  const auto indices = batch_indices(state_.step);
  std::vector<const SlotMatrix*> batch;
  batch.reserve(indices.size());
  for (std::size_t i : indices) batch.push_back(&(*corpus_)[i]);
  const double lr = config_.lr_schedule().at(state_.step);
  return train_step(batch, noise(state_.step), state_, config_, lr);
}

void Trainer::save_checkpoint(const std::filesystem::path& dir) const {
  nlohmann::json meta{{"step", state_.step},
                      {"lambda", state_.geco.lambda},
                      {"constraint_ma", state_.geco.constraint_ma},
                      {"adam_step", state_.adam.step},
                      {"model", model_config_}};
  diff::save_checkpoint(dir / "model", state_.params, meta);
  diff::save_checkpoint(dir / "optimizer", diff::flatten(state_.adam), {{"adam_step", state_.adam.step}});
}

void Trainer::load_checkpoint(const std::filesystem::path& dir) {
  nlohmann::json meta;
  state_.params = diff::load_checkpoint(dir / "model", &meta);
  state_.step = meta.at("step").get<std::int64_t>();
  state_.geco.lambda = meta.at("lambda").get<double>();
  state_.geco.constraint_ma = meta.at("constraint_ma").get<double>();
  state_.adam = diff::unflatten_adam(diff::load_checkpoint(dir / "optimizer"), meta.at("adam_step").get<std::int64_t>());
}

TrainLoopResult train_loop(const std::vector<SlotMatrix>& corpus, const model::ModelConfig& model_config,
                           const ObjectiveConfig& config, const std::filesystem::path& run_dir, bool resume,
                           std::int64_t stop_after) {
  std::filesystem::create_directories(run_dir);
  Trainer trainer(model_config, config, corpus);
  const auto checkpoint_dir = run_dir / "checkpoint";
  const auto metrics_path = run_dir / "metrics.jsonl";

  std::vector<std::string> kept_rows;
  if (resume && std::filesystem::exists(checkpoint_dir / "model.json")) {
    trainer.load_checkpoint(checkpoint_dir);
    std::ifstream old(metrics_path);
    std::string line;
    while (std::getline(old, line)) {
      if (line.empty()) continue;
      if (nlohmann::json::parse(line).at("step").get<std::int64_t>() <= trainer.state().step) kept_rows.push_back(line);
    }
  }
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + metrics_path.string());
  for (const auto& row : kept_rows) metrics << row << '\n';

  TrainLoopResult result;
  const std::int64_t last = stop_after >= 0 ? std::min(stop_after, config.steps) : config.steps;
  while (trainer.state().step < last) {
    LossReport report = trainer.step();
    const std::int64_t done = trainer.state().step;
    if (done % config.log_every == 0) {
      metrics << report.to_json().dump() << '\n';
      metrics.flush();
      report.pairs.clear();
      result.logged.push_back(std::move(report));
    }
    if (done % config.checkpoint_every == 0) trainer.save_checkpoint(checkpoint_dir);
  }
  trainer.save_checkpoint(checkpoint_dir);
  if (!metrics) throw IoError("write failed for " + metrics_path.string());
  result.final_state = trainer.state();
  return result;
}

}  // namespace constellation::objective
