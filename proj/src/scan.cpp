#include "constellation/scan.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "constellation/errors.hpp"
#include "constellation/rng.hpp"

namespace constellation::scan {

using diff::Shape;
using diff::Tape;
using nlohmann::json;

Vocabulary Vocabulary::standard(const GenConfig& config) {
  Vocabulary v;
  v.blocks = {{"curviness", {"straight", "curved", "circle"}},
              {"count", {"two", "three", "four", "five", "six"}},
              {"horizontal", {"left", "center_x", "right"}},
              {"vertical", {"bottom", "center_y", "top"}},
              {"orientation", {"horizontal_line", "vertical_line", "diagonal"}}};
  v.center_x = config.center_x;
  v.center_y = config.center_y;
  const double span = config.orientation.hi - config.orientation.lo;
  v.flat_below = config.orientation.lo + span / 3.0;
  v.steep_above = config.orientation.lo + 2.0 * span / 3.0;
  return v;
}

std::size_t Vocabulary::size() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.symbols.size();
  return n;
}

std::size_t Vocabulary::offset(std::size_t block) const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < block; ++i) n += blocks.at(i).symbols.size();
  return n;
}

std::optional<std::pair<std::size_t, std::size_t>> Vocabulary::find(const std::string& symbol) const {
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& s = blocks[b].symbols;
    if (auto it = std::find(s.begin(), s.end(), symbol); it != s.end()) {
      return std::pair{b, static_cast<std::size_t>(it - s.begin())};
    }
  }
  return std::nullopt;
}

std::size_t Vocabulary::block_index(const std::string& name) const {
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    if (blocks[b].name == name) return b;
  }
  throw DomainError("no vocabulary block named '" + name + "'");
}

std::string Vocabulary::listing() const {
  std::ostringstream out;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    out << (b ? "; " : "") << blocks[b].name << ": ";
    for (std::size_t i = 0; i < blocks[b].symbols.size(); ++i) out << (i ? "," : "") << blocks[b].symbols[i];
  }
  return out.str();
}

void to_json(json& j, const Vocabulary& v) {
  json blocks = json::array();
  for (const auto& b : v.blocks) blocks.push_back({{"name", b.name}, {"symbols", b.symbols}});
  j = json{{"blocks", blocks},
           {"thresholds",
            {{"straight_below", v.straight_below},
             {"circle_above", v.circle_above},
             {"center_x", v.center_x},
             {"center_y", v.center_y},
             {"flat_below", v.flat_below},
             {"steep_above", v.steep_above},
             {"count_first", v.count_first}}}};
}

void from_json(const json& j, Vocabulary& v) {
  v = Vocabulary::standard();
  if (j.contains("blocks")) {
    v.blocks.clear();
    for (const auto& b : j.at("blocks")) {
      v.blocks.push_back({b.at("name").get<std::string>(), b.at("symbols").get<std::vector<std::string>>()});
    }
  }
  if (j.contains("thresholds")) {
    const auto& t = j.at("thresholds");
    v.straight_below = t.value("straight_below", v.straight_below);
    v.circle_above = t.value("circle_above", v.circle_above);
    v.center_x = t.value("center_x", v.center_x);
    v.center_y = t.value("center_y", v.center_y);
    v.flat_below = t.value("flat_below", v.flat_below);
    v.steep_above = t.value("steep_above", v.steep_above);
    v.count_first = t.value("count_first", v.count_first);
  }
  std::vector<std::string> seen;
  for (const auto& b : v.blocks) {
    for (const auto& s : b.symbols) {
      if (std::find(seen.begin(), seen.end(), s) != seen.end()) throw ConfigError("symbol '" + s + "' appears twice");
      seen.push_back(s);
    }
  }
}

SymbolVector SymbolVector::none(const Vocabulary& vocab) { return {std::vector<std::optional<std::size_t>>(vocab.blocks.size())}; }

std::size_t SymbolVector::active_count() const {
  return static_cast<std::size_t>(std::count_if(active.begin(), active.end(), [](const auto& a) { return a.has_value(); }));
}

std::vector<double> SymbolVector::multi_hot(const Vocabulary& vocab) const {
  if (active.size() != vocab.blocks.size()) throw DimensionError("symbol vector does not match the vocabulary");
  std::vector<double> l(vocab.size(), 0.0);
  for (std::size_t b = 0; b < active.size(); ++b) {
    if (!active[b]) continue;
    if (*active[b] >= vocab.blocks[b].symbols.size()) throw DomainError("symbol index out of range");
    l[vocab.offset(b) + *active[b]] = 1.0;
  }
  return l;
}

SymbolVector SymbolVector::from_multi_hot(const Vocabulary& vocab, const std::vector<double>& l) {
  if (l.size() != vocab.size()) {
    throw DomainError("multi-hot vector has " + std::to_string(l.size()) + " entries, vocabulary has " +
                      std::to_string(vocab.size()));
  }
  SymbolVector out = none(vocab);
  for (std::size_t b = 0; b < vocab.blocks.size(); ++b) {
    const std::size_t base = vocab.offset(b);
    for (std::size_t i = 0; i < vocab.blocks[b].symbols.size(); ++i) {
      const double x = l[base + i];
      if (x != 0.0 && x != 1.0) throw DomainError("multi-hot entries must be 0 or 1");
      if (x == 1.0) {
        if (out.active[b]) throw DomainError("block '" + vocab.blocks[b].name + "' has more than one active symbol");
        out.active[b] = i;
      }
    }
  }
  return out;
}

std::vector<std::string> SymbolVector::names(const Vocabulary& vocab) const {
  std::vector<std::string> out;
  for (std::size_t b = 0; b < active.size(); ++b) {
    if (active[b]) out.push_back(vocab.blocks.at(b).symbols.at(*active[b]));
  }
  return out;
}

SymbolVector parse_symbols(const Vocabulary& vocab, const std::string& text, std::vector<std::string>* overrides) {
  SymbolVector out = SymbolVector::none(vocab);
  std::stringstream in(text);
  std::string token;
  while (std::getline(in, token, ',')) {
    token.erase(0, token.find_first_not_of(" \t"));
    token.erase(token.find_last_not_of(" \t") + 1);
    if (token.empty()) continue;
    const auto hit = vocab.find(token);
    if (!hit) throw DomainError("unknown symbol '" + token + "'; vocabulary is " + vocab.listing());
    auto& slot = out.active[hit->first];
    if (slot && overrides) {
      overrides->push_back(token + " replaces " + vocab.blocks[hit->first].symbols[*slot]);
    }
    slot = hit->second;
  }
  return out;
}

namespace {

std::size_t thirds(double v, const Range& r) {
  const double step = (r.hi - r.lo) / 3.0;
  if (v < r.lo + step) return 0;
  if (v < r.lo + 2.0 * step) return 1;
  return 2;
}

}  // namespace

SymbolVector label_scene(const RelationalFactors& f, const Vocabulary& vocab) {
  SymbolVector out = SymbolVector::none(vocab);
  for (std::size_t b = 0; b < vocab.blocks.size(); ++b) {
    const auto& name = vocab.blocks[b].name;
    std::optional<std::size_t> idx;
    if (name == "curviness") {
      idx = f.curviness < vocab.straight_below ? 0 : (f.curviness > vocab.circle_above ? 2 : 1);
    } else if (name == "count") {
      const int i = f.count - vocab.count_first;
      if (i >= 0 && static_cast<std::size_t>(i) < vocab.blocks[b].symbols.size()) idx = static_cast<std::size_t>(i);
    } else if (name == "horizontal") {
      idx = thirds(f.center_x, vocab.center_x);
    } else if (name == "vertical") {
      idx = thirds(f.center_y, vocab.center_y);
    } else if (name == "orientation") {
      // symbols: horizontal_line, vertical_line, diagonal
      idx = f.orientation < vocab.flat_below ? 0 : (f.orientation > vocab.steep_above ? 1 : 2);
    }
    if (idx && *idx < vocab.blocks[b].symbols.size()) out.active[b] = idx;
  }
  return out;
}

// ---------------------------------------------------------------------------

void ScanConfig::validate() const {
  if (beta_s < 0.0 || lambda_assoc < 0.0) throw ConfigError("scan weights must be non-negative");
  if (batch_size == 0 || steps <= 0) throw ConfigError("scan batch_size and steps must be positive");
  if (!(keep_probability > 0.0 && keep_probability <= 1.0)) throw ConfigError("keep_probability must lie in (0, 1]");
  if (!(lr > 0.0)) throw ConfigError("scan lr must be positive");
}

void to_json(json& j, const ScanConfig& c) {
  j = json{{"beta_s", c.beta_s},     {"lambda_assoc", c.lambda_assoc}, {"batch_size", c.batch_size},
           {"steps", c.steps},       {"lr", c.lr},                     {"keep_probability", c.keep_probability},
           {"seed", c.seed}};
}

void from_json(const json& j, ScanConfig& c) {
  ScanConfig d;
  c.beta_s = j.value("beta_s", d.beta_s);
  c.lambda_assoc = j.value("lambda_assoc", d.lambda_assoc);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.steps = j.value("steps", d.steps);
  c.lr = j.value("lr", d.lr);
  c.keep_probability = j.value("keep_probability", d.keep_probability);
  c.seed = j.value("seed", d.seed);
}

ParamSet init_scan_params(std::size_t vocab_size, std::size_t latent_dim, std::uint64_t seed) {
  if (vocab_size == 0 || latent_dim == 0) throw ConfigError("scan dimensions must be positive");
  std::mt19937_64 rng(mix_seed(mix_seed(seed, kTagScan), kTagInit));
  ParamSet p;
  model::add_dense(p, rng, "scan/enc/0", vocab_size, kEncoderUnits[0]);
  model::add_dense(p, rng, "scan/enc/1", kEncoderUnits[0], kEncoderUnits[1]);
  model::add_dense(p, rng, "scan/enc/2", kEncoderUnits[1], 2 * latent_dim);
  model::add_dense(p, rng, "scan/dec/0", latent_dim, kDecoderUnits[0]);
  model::add_dense(p, rng, "scan/dec/1", kDecoderUnits[0], kDecoderUnits[1]);
  model::add_dense(p, rng, "scan/dec/2", kDecoderUnits[1], vocab_size);
  return p;
}

SymbolPosterior encode_symbol(Var l, const diff::BoundParams& params) {
  const Var out = model::mlp(l, params, "scan/enc", 3, false);
  const std::size_t width = out.value().cols();
  if (width % 2 != 0) throw DimensionError("symbol encoder output width is odd");
  const std::size_t d = width / 2;
  return {diff::slice(out, 1, 0, d), diff::add_scalar(diff::softplus(diff::slice(out, 1, d, 2 * d)), model::kSigmaFloor)};
}

Var decode_symbol(Var z, const diff::BoundParams& params) { return model::mlp(z, params, "scan/dec", 3, false); }

ScanTerms scan_loss(Var l, Var noise, Var scene_mu, Var scene_sigma, const diff::BoundParams& params, double beta_s,
                    double lambda_assoc) {
  Tape& tape = *l.tape;
  const Var mu_q = tape.constant(scene_mu.value());
  const Var sigma_q = tape.constant(scene_sigma.value());
  const double batch = static_cast<double>(l.value().rows());

  const SymbolPosterior q = encode_symbol(l, params);
  const Var z = diff::add(q.mu, diff::mul(q.sigma, noise));
  const Var logits = decode_symbol(z, params);
  // BCE with logits: softplus(x) - l x
  const Var bce = diff::sum(diff::sub(diff::softplus(logits), diff::mul(l, logits)));

  const double n = static_cast<double>(q.mu.value().size());
  const Var prior_terms = diff::sub(diff::add(diff::square(q.mu), diff::square(q.sigma)), diff::scale(diff::log(q.sigma), 2.0));
  const Var prior_kl = diff::scale(diff::add_scalar(diff::sum(prior_terms), -n), 0.5);

  // KL(q(z|a) || q_s) = sum ln(s_s / s_q) + (s_q^2 + (mu_q - mu_s)^2) / (2 s_s^2) - 1/2
  const Var var_s = diff::square(q.sigma);
  const Var spread = diff::add(diff::square(sigma_q), diff::square(diff::sub(mu_q, q.mu)));
  const Var assoc_terms = diff::add(diff::sub(diff::log(q.sigma), diff::log(sigma_q)),
                                    diff::scale(diff::div(spread, var_s), 0.5));
  const Var assoc_kl = diff::add_scalar(diff::sum(assoc_terms), -0.5 * n);

  ScanTerms t;
  t.recon = diff::scale(bce, 1.0 / batch);
  t.prior_kl = diff::scale(prior_kl, 1.0 / batch);
  t.assoc_kl = diff::scale(assoc_kl, 1.0 / batch);
  t.total = diff::add(diff::add(t.recon, diff::scale(t.prior_kl, beta_s)), diff::scale(t.assoc_kl, lambda_assoc));
  return t;
}

// ---------------------------------------------------------------------------

ScanModel::ScanModel(Vocabulary vocab, std::size_t latent_dim, ParamSet params)
    : vocab_(std::move(vocab)), latent_dim_(latent_dim), params_(std::move(params)) {
  refresh_threshold();
}

model::Model::Posterior ScanModel::posterior(const SymbolVector& symbols) const {
  Tape tape;
  diff::BoundParams bound(tape, params_);
  const auto l = symbols.multi_hot(vocab_);
  const Var in = tape.constant(Tensor(Shape{1, l.size()}, l));
  const SymbolPosterior q = encode_symbol(in, bound);
  return {q.mu.value().data(), q.sigma.value().data()};
}

void ScanModel::refresh_threshold() {
  single_.clear();
  std::vector<double> sigmas;
  for (std::size_t b = 0; b < vocab_.blocks.size(); ++b) {
    single_.emplace_back();
    for (std::size_t i = 0; i < vocab_.blocks[b].symbols.size(); ++i) {
      SymbolVector s = SymbolVector::none(vocab_);
      s.active[b] = i;
      single_.back().push_back(posterior(s));
      if (single_.back().back().mu.size() != latent_dim_) throw DimensionError("scan params do not match latent_dim");
      sigmas.insert(sigmas.end(), single_.back().back().sigma.begin(), single_.back().back().sigma.end());
    }
  }
  if (sigmas.empty()) throw ConfigError("empty vocabulary");
  // median; even count averages the middle pair
  std::sort(sigmas.begin(), sigmas.end());
  const std::size_t n = sigmas.size();
  const double median = n % 2 ? sigmas[n / 2] : 0.5 * (sigmas[n / 2 - 1] + sigmas[n / 2]);
  sigma_thresh_ = 0.5 * median;
}

model::Model::Posterior ScanModel::symbol_posterior(std::size_t block, std::size_t index) const {
  return single_.at(block).at(index);
}

std::vector<std::size_t> ScanModel::confident_dims(std::size_t block, std::size_t index) const {
  const auto& q = single_.at(block).at(index);
  std::vector<std::size_t> dims;
  for (std::size_t d = 0; d < q.sigma.size(); ++d) {
    if (q.sigma[d] < sigma_thresh_) dims.push_back(d);
  }
  return dims;
}

std::vector<std::pair<std::size_t, double>> ScanModel::constraints(const SymbolVector& symbols,
                                                                   std::vector<std::string>* conflicts) const {
  std::vector<std::pair<std::size_t, double>> out;
  std::vector<std::string> owner(latent_dim_);
  for (std::size_t b = 0; b < symbols.active.size(); ++b) {
    if (!symbols.active[b]) continue;
    const std::size_t i = *symbols.active[b];
    const auto& q = single_.at(b).at(i);
    const std::string& name = vocab_.blocks[b].symbols[i];
    for (std::size_t d : confident_dims(b, i)) {
      auto it = std::find_if(out.begin(), out.end(), [d](const auto& c) { return c.first == d; });
      if (it != out.end()) {
        if (conflicts) conflicts->push_back("dim " + std::to_string(d) + ": " + name + " overrides " + owner[d]);
        it->second = q.mu[d];
      } else {
        out.emplace_back(d, q.mu[d]);
      }
      owner[d] = name;
    }
  }
  return out;
}

ScanModel::Classification ScanModel::classify(const std::vector<double>& scene_mu) const {
  if (scene_mu.size() != latent_dim_) throw DimensionError("scene posterior has the wrong latent size");
  Classification out;
  out.symbols = SymbolVector::none(vocab_);
  out.scores.resize(vocab_.blocks.size());
  out.uninformative.assign(vocab_.blocks.size(), false);
  for (std::size_t b = 0; b < vocab_.blocks.size(); ++b) {
    std::vector<bool> use(latent_dim_, false);
    for (std::size_t i = 0; i < vocab_.blocks[b].symbols.size(); ++i) {
      for (std::size_t d : confident_dims(b, i)) use[d] = true;
    }
    if (std::none_of(use.begin(), use.end(), [](bool u) { return u; })) {
      out.uninformative[b] = true;
      continue;
    }
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < vocab_.blocks[b].symbols.size(); ++i) {
      const auto& q = single_[b][i];
      double score = 0.0;
      for (std::size_t d = 0; d < latent_dim_; ++d) {
        if (!use[d]) continue;
        const double u = (scene_mu[d] - q.mu[d]) / q.sigma[d];
        score += -0.5 * u * u - std::log(q.sigma[d]) - 0.5 * std::log(2.0 * std::numbers::pi);
      }
      out.scores[b].push_back(score);
      if (score > best) {
        best = score;
        out.symbols.active[b] = i;
      }
    }
  }
  return out;
}

void ScanModel::save(const std::filesystem::path& stem, const json& extra) const {
  json meta = extra;
  meta["vocabulary"] = vocab_;
  meta["latent_dim"] = latent_dim_;
  meta["sigma_thresh"] = sigma_thresh_;
  diff::save_checkpoint(stem, params_, meta);
}

ScanModel ScanModel::load(const std::filesystem::path& stem) {
  json meta;
  ParamSet params = diff::load_checkpoint(stem, &meta);
  return ScanModel(meta.at("vocabulary").get<Vocabulary>(), meta.at("latent_dim").get<std::size_t>(), std::move(params));
}

json ScanLogRow::to_json() const {
  return {{"step", step}, {"total", total}, {"recon", recon}, {"prior_kl", prior_kl}, {"assoc_kl", assoc_kl}};
}

ScanTrainResult train_scan(const std::vector<ScanTrainingPair>& pairs, const Vocabulary& vocab, std::size_t latent_dim,
                           const ScanConfig& config, std::int64_t log_every) {
  config.validate();
  if (pairs.empty()) throw DomainError("no scan training pairs");
  for (const auto& p : pairs) {
    if (p.scene.mu.size() != latent_dim || p.scene.sigma.size() != latent_dim) {
      throw DimensionError("scene posterior does not match latent_dim");
    }
  }
  ParamSet params = init_scan_params(vocab.size(), latent_dim, config.seed);
  diff::AdamState adam;
  std::vector<ScanLogRow> log;
  Rng rng(mix_seed(config.seed, kTagScan));
  std::uniform_int_distribution<std::size_t> pick(0, pairs.size() - 1);
  std::bernoulli_distribution keep(config.keep_probability);
  std::uniform_int_distribution<std::size_t> pick_block(0, vocab.blocks.size() - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t B = config.batch_size, L = vocab.size();

  for (std::int64_t step = 0; step < config.steps; ++step) {
    Tensor l(Shape{B, L}), mu(Shape{B, latent_dim}), sigma(Shape{B, latent_dim}), noise(Shape{B, latent_dim});
    for (std::size_t r = 0; r < B; ++r) {
      const auto& p = pairs[pick(rng)];
      SymbolVector label = p.label;
      std::vector<bool> kept(label.active.size());
      bool any = false;
      for (std::size_t b = 0; b < kept.size(); ++b) any |= (kept[b] = keep(rng) && label.active[b].has_value());
      if (!any) {
        // keep one labelled block so every pair carries some supervision
        std::vector<std::size_t> labelled;
        for (std::size_t b = 0; b < kept.size(); ++b) {
          if (label.active[b]) labelled.push_back(b);
        }
        if (!labelled.empty()) kept[labelled[pick_block(rng) % labelled.size()]] = true;
      }
      for (std::size_t b = 0; b < kept.size(); ++b) {
        if (!kept[b]) label.active[b].reset();
      }
      const auto hot = label.multi_hot(vocab);
      std::copy(hot.begin(), hot.end(), l.values().begin() + static_cast<std::ptrdiff_t>(r * L));
      for (std::size_t d = 0; d < latent_dim; ++d) {
        mu.at(r, d) = p.scene.mu[d];
        sigma.at(r, d) = p.scene.sigma[d];
      }
    }
    for (double& v : noise.values()) v = normal(rng);

    Tape tape;
    diff::BoundParams bound(tape, params);
    const ScanTerms t = scan_loss(tape.constant(l), tape.constant(noise), tape.constant(mu), tape.constant(sigma), bound,
                                  config.beta_s, config.lambda_assoc);
    const double total = t.total.value().item();
    if (!std::isfinite(total)) throw NonFiniteError("non-finite scan loss at step " + std::to_string(step + 1));
    tape.backward(t.total);
    diff::adam_step(params, bound.gradients(), adam, config.lr);
    if (log_every > 0 && (step + 1) % log_every == 0) {
      log.push_back({step + 1, total, t.recon.value().item(), t.prior_kl.value().item(), t.assoc_kl.value().item()});
    }
  }
  return {ScanModel(vocab, latent_dim, std::move(params)), std::move(log)};
}

}  // namespace constellation::scan
