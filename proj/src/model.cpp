#include "constellation/model.hpp"

#include <cmath>
#include <string>

#include "constellation/errors.hpp"
#include "constellation/rng.hpp"

namespace constellation::model {

using diff::Shape;
using diff::Tape;

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"feature_dim", c.feature_dim}, {"latent_dim", c.latent_dim}, {"slots", c.slots}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.feature_dim = j.value("feature_dim", d.feature_dim);
  c.latent_dim = j.value("latent_dim", d.latent_dim);
  c.slots = j.value("slots", d.slots);
}

void add_dense(ParamSet& params, std::mt19937_64& rng, const std::string& name, std::size_t in, std::size_t out) {
  const double limit = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> u(-limit, limit);
  Tensor w(Shape{in, out});
  for (double& v : w.values()) v = u(rng);
  params.emplace(name + "/w", std::move(w));
  params.emplace(name + "/b", Tensor(Shape{out}, 0.0));
}

namespace {

template <std::size_t N>
void add_mlp(ParamSet& params, std::mt19937_64& rng, const std::string& prefix, std::size_t in,
             const std::size_t (&units)[N], std::size_t extra_out = 0) {
  std::size_t width = in;
  for (std::size_t l = 0; l < N; ++l) {
    add_dense(params, rng, prefix + "/" + std::to_string(l), width, units[l]);
    width = units[l];
  }
  if (extra_out) add_dense(params, rng, prefix + "/" + std::to_string(N), width, extra_out);
}

std::string round_prefix(std::size_t r, const char* part) { return "enc/round" + std::to_string(r) + "/" + part; }

}  // namespace

ParamSet init_params(const ModelConfig& config, std::uint64_t seed) {
  if (config.feature_dim == 0 || config.latent_dim == 0 || config.slots == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  std::mt19937_64 rng(mix_seed(seed, kTagInit));
  ParamSet p;
  const std::size_t d_o = config.feature_dim, d_z = config.latent_dim;
  p.emplace("mask/logits", Tensor(Shape{d_o}, 0.0));
  p.emplace("objective/gamma", Tensor(Shape{d_o}, 0.0));

  std::size_t node_width = d_o;
  for (std::size_t r = 0; r < kMessagePassingRounds; ++r) {
    add_mlp(p, rng, round_prefix(r, "edge"), 2 * node_width, kEdgeUnits);
    add_mlp(p, rng, round_prefix(r, "node"), node_width + kEdgeUnits[1], kNodeUnits);
    node_width = kNodeUnits[1];
  }
  add_mlp(p, rng, "enc/global", node_width, kGlobalHidden, 2 * d_z);

  add_mlp(p, rng, "dec/g", d_z, kInputUnits);
  {
    const std::size_t gates = 4 * kLstmUnits;
    const double limit = 1.0 / std::sqrt(static_cast<double>(kLstmUnits));
    std::uniform_real_distribution<double> u(-limit, limit);
    Tensor wx(Shape{kInputUnits[2], gates}), wh(Shape{kLstmUnits, gates});
    for (double& v : wx.values()) v = u(rng);
    for (double& v : wh.values()) v = u(rng);
    p.emplace("dec/lstm/wx", std::move(wx));
    p.emplace("dec/lstm/wh", std::move(wh));
    p.emplace("dec/lstm/b", Tensor(Shape{gates}, 0.0));
  }
  const std::size_t out_units[] = {kOutputHidden};
  add_mlp(p, rng, "dec/f", kLstmUnits, out_units, d_o);
  return p;
}

Var mlp(Var x, const BoundParams& params, const std::string& prefix, std::size_t layers, bool activate_final) {
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string name = prefix + "/" + std::to_string(l);
    x = diff::add_row(diff::matmul(x, params[name + "/w"]), params[name + "/b"]);
    if (l + 1 < layers || activate_final) x = diff::tanh(x);
  }
  return x;
}

Var mask_probabilities(const BoundParams& params) { return diff::softmax(params["mask/logits"]); }

Var apply_mask(Var slots, Var mask) {
  const auto& s = slots.value();
  const auto& m = mask.value();
  if (s.rank() != 2 || m.rank() != 1 || s.cols() != m.size()) {
    throw DimensionError("apply_mask: slots " + diff::shape_string(s.shape()) + " vs mask " + diff::shape_string(m.shape()));
  }
  return diff::mul_row(slots, mask);
}

RelationalPosterior encode(Var abstract, std::size_t batch, std::size_t slots, const BoundParams& params) {
  if (slots == 0) throw DomainError("encode needs at least one slot");
  if (abstract.value().rows() != batch * slots) {
    throw DimensionError("encode: " + std::to_string(abstract.value().rows()) + " rows for batch " +
                         std::to_string(batch) + " x " + std::to_string(slots) + " slots");
  }
  // Fully connected directed graph per scene without self-edges.
  std::vector<std::size_t> sender, receiver, scene_of_node(batch * slots);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < slots; ++i) {
      scene_of_node[b * slots + i] = b;
      for (std::size_t j = 0; j < slots; ++j) {
        if (i == j) continue;
        sender.push_back(b * slots + i);
        receiver.push_back(b * slots + j);
      }
    }
  }
  const std::size_t nodes = batch * slots;
  Var h = abstract;
  for (std::size_t r = 0; r < kMessagePassingRounds; ++r) {
    const Var endpoints[] = {diff::gather_rows(h, sender), diff::gather_rows(h, receiver)};
    const Var edges = mlp(diff::concat(endpoints, 1), params, round_prefix(r, "edge"), 2, true);
    const Var incoming = diff::segment_sum(edges, receiver, nodes);
    const Var node_in[] = {h, incoming};
    h = mlp(diff::concat(node_in, 1), params, round_prefix(r, "node"), 2, true);
  }
  const Var globals = mlp(diff::segment_sum(h, scene_of_node, batch), params, "enc/global", 3, false);
  const std::size_t d_z = globals.value().cols() / 2;
  RelationalPosterior out;
  out.mu = diff::slice(globals, 1, 0, d_z);
  out.sigma = diff::add_scalar(diff::softplus(diff::slice(globals, 1, d_z, 2 * d_z)), kSigmaFloor);
  return out;
}

Var sample(const RelationalPosterior& posterior, Var noise) {
  return diff::add(posterior.mu, diff::mul(posterior.sigma, noise));
}

Var decode(Var z, std::size_t slots, const BoundParams& params) {
  if (slots == 0) throw DomainError("decode needs K >= 1");
  if (z.value().rank() != 2) throw DimensionError("decode expects a B x d_z latent matrix");
  Tape& tape = *z.tape;
  const std::size_t batch = z.value().rows();
  const Var input = mlp(z, params, "dec/g", 3, true);
  // The input contribution to the gates is the same at every step.
  const Var input_gates = diff::add_row(diff::matmul(input, params["dec/lstm/wx"]), params["dec/lstm/b"]);
  const Var wh = params["dec/lstm/wh"];
  const std::size_t u = kLstmUnits;

  Var h = tape.constant(Tensor(Shape{batch, u}, 0.0));
  Var c = tape.constant(Tensor(Shape{batch, u}, 0.0));
  std::vector<Var> hidden;
  hidden.reserve(slots);
  for (std::size_t t = 0; t < slots; ++t) {
    const Var gates = diff::add(input_gates, diff::matmul(h, wh));
    const Var in_gate = diff::sigmoid(diff::slice(gates, 1, 0, u));
    const Var forget_gate = diff::sigmoid(diff::slice(gates, 1, u, 2 * u));
    const Var candidate = diff::tanh(diff::slice(gates, 1, 2 * u, 3 * u));
    const Var out_gate = diff::sigmoid(diff::slice(gates, 1, 3 * u, 4 * u));
    c = diff::add(diff::mul(forget_gate, c), diff::mul(in_gate, candidate));
    h = diff::mul(out_gate, diff::tanh(c));
    hidden.push_back(h);
  }
  // Step-major (t*B + b) to scene-major (b*K + t).
  std::vector<std::size_t> order(batch * slots);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < slots; ++t) order[b * slots + t] = t * batch + b;
  const Var stacked = diff::gather_rows(diff::concat(hidden, 0), std::move(order));
  return mlp(stacked, params, "dec/f", 2, false);
}

std::vector<double> prior_sample(std::mt19937_64& rng, std::size_t latent_dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> z(latent_dim);
  for (double& v : z) v = normal(rng);
  return z;
}

Tensor stack_slots(const std::vector<const SlotMatrix*>& scenes) {
  if (scenes.empty()) throw DomainError("stack_slots: no scenes");
  const std::size_t K = scenes.front()->slots();
  const std::size_t d_o = scenes.front()->features.cols();
  Tensor out(Shape{scenes.size() * K, d_o});
  for (std::size_t b = 0; b < scenes.size(); ++b) {
    const auto& f = scenes[b]->features;
    if (f.rows() != K || f.cols() != d_o) throw DimensionError("stack_slots: scenes disagree on K or d_o");
    std::copy(f.data().begin(), f.data().end(), out.values().begin() + static_cast<std::ptrdiff_t>(b * K * d_o));
  }
  return out;
}

// ---------------------------------------------------------------------------

Model::Model(ModelConfig config, ParamSet params) : config_(config), params_(std::move(params)) {}

std::vector<double> Model::mask() const {
  Tape tape;
  BoundParams p(tape, params_);
  return mask_probabilities(p).value().data();
}

Model::Posterior Model::encode(const SlotMatrix& slots) const { return encode(std::vector<const SlotMatrix*>{&slots}).front(); }

std::vector<Model::Posterior> Model::encode(const std::vector<const SlotMatrix*>& scenes) const {
  constexpr std::size_t kChunk = 256;
  std::vector<Posterior> out;
  out.reserve(scenes.size());
  for (std::size_t start = 0; start < scenes.size(); start += kChunk) {
    const std::vector<const SlotMatrix*> chunk(scenes.begin() + static_cast<std::ptrdiff_t>(start),
                                               scenes.begin() + static_cast<std::ptrdiff_t>(std::min(scenes.size(), start + kChunk)));
    Tape tape;
    BoundParams p(tape, params_);
    const Var slots = tape.constant(stack_slots(chunk));
    if (slots.value().cols() != config_.feature_dim) throw DimensionError("slot feature dimension does not match the model");
    const auto posterior = model::encode(apply_mask(slots, mask_probabilities(p)), chunk.size(), chunk.front()->slots(), p);
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      out.push_back({posterior.mu.value().row(b), posterior.sigma.value().row(b)});
    }
  }
  return out;
}

Tensor Model::decode(const std::vector<double>& z) const { return decode(std::vector<std::vector<double>>{z}).front(); }

std::vector<Tensor> Model::decode(const std::vector<std::vector<double>>& zs) const {
  std::vector<Tensor> out;
  if (zs.empty()) return out;
  const std::size_t d_z = config_.latent_dim, K = config_.slots, d_o = config_.feature_dim;
  Tensor stacked(Shape{zs.size(), d_z});
  for (std::size_t b = 0; b < zs.size(); ++b) {
    if (zs[b].size() != d_z) throw DimensionError("decode: latent of size " + std::to_string(zs[b].size()));
    std::copy(zs[b].begin(), zs[b].end(), stacked.values().begin() + static_cast<std::ptrdiff_t>(b * d_z));
  }
  Tape tape;
  BoundParams p(tape, params_);
  const Tensor& decoded = model::decode(tape.constant(std::move(stacked)), K, p).value();
  for (std::size_t b = 0; b < zs.size(); ++b) {
    out.emplace_back(Shape{K, d_o}, std::vector<double>(decoded.data().begin() + static_cast<std::ptrdiff_t>(b * K * d_o),
                                                        decoded.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * K * d_o)));
  }
  return out;
}

}  // namespace constellation::model
