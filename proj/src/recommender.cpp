#include "metarec/recommender.hpp"

#include <algorithm>
#include <stdexcept>

#include "metarec/rng.hpp"

namespace metarec {

Arch arch_from_string(const std::string& s) {
  if (s == "recurrent") return Arch::kRecurrent;
  if (s == "self_attention") return Arch::kSelfAttention;
  throw std::invalid_argument("unknown architecture '" + s + "'");
}

std::string arch_to_string(Arch a) {
  return a == Arch::kRecurrent ? "recurrent" : "self_attention";
}

void RecommenderConfig::validate() const {
  if (item_vocab < 2) throw std::invalid_argument("recommender: vocab must include pad + items");
  if (embed_dim < 1 || hidden_dim < 1) throw std::invalid_argument("recommender: dims must be > 0");
  if (n_layers < 1 || n_layers > 2) throw std::invalid_argument("recommender: 1 or 2 layers");
  if (max_length < 2) throw std::invalid_argument("recommender: max_length too small");
  if (num_levels < 2) throw std::invalid_argument("recommender: need at least 2 rating levels");
}

namespace {

// Shapes for one architecture, name -> (rows, cols). Bias tensors are any
// whose last path segment starts with 'b'.
std::map<std::string, std::pair<int64_t, int64_t>> shape_table(const RecommenderConfig& c) {
  std::map<std::string, std::pair<int64_t, int64_t>> s;
  s["model/item_emb"] = {c.item_vocab, c.embed_dim};
  if (c.architecture == Arch::kRecurrent) {
    for (int l = 0; l < c.n_layers; ++l) {
      const int64_t in = l == 0 ? c.embed_dim : c.hidden_dim;
      const std::string p = "model/gru" + std::to_string(l) + "/";
      for (const char* gate : {"z", "r", "h"}) {
        s[p + "w_" + gate] = {in, c.hidden_dim};
        s[p + "u_" + gate] = {c.hidden_dim, c.hidden_dim};
        s[p + "b_" + gate] = {1, c.hidden_dim};
      }
    }
    s["model/head/w"] = {c.hidden_dim, 1};
  } else {
    s["model/pos_emb"] = {c.max_length, c.embed_dim};
    for (int l = 0; l < c.n_layers; ++l) {
      const std::string p = "model/attn" + std::to_string(l) + "/";
      s[p + "wq"] = {c.embed_dim, c.embed_dim};
      s[p + "wk"] = {c.embed_dim, c.embed_dim};
      s[p + "wv"] = {c.embed_dim, c.embed_dim};
      s[p + "w1"] = {c.embed_dim, c.hidden_dim};
      s[p + "b1"] = {1, c.hidden_dim};
      s[p + "w2"] = {c.hidden_dim, c.embed_dim};
      s[p + "b2"] = {1, c.embed_dim};
    }
    s["model/head/w"] = {c.embed_dim, 1};
  }
  s["model/head/b"] = {1, 1};
  return s;
}

bool is_bias(const std::string& name) {
  const size_t slash = name.rfind('/');
  const size_t start = slash == std::string::npos ? 0 : slash + 1;
  return name[start] == 'b';
}

}  // namespace

ParameterSet init_params(const RecommenderConfig& config, uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ParameterSet params;
  for (const auto& [name, shape] : shape_table(config)) {
    Tensor t(shape.first, shape.second);
    if (!is_bias(name)) {
      const double a = std::sqrt(6.0 / static_cast<double>(shape.first + shape.second));
      for (auto& v : t.data) v = rng.uniform(-a, a);
    }
    params.emplace(name, std::move(t));
  }
  for (int64_t j = 0; j < config.embed_dim; ++j) params["model/item_emb"].at(0, j) = 0.0;
  return params;
}

ad::Var GraphParams::at(const std::string& name) const {
  auto it = vars.find(name);
  if (it == vars.end()) throw std::invalid_argument("no parameter named '" + name + "'");
  return it->second;
}

GraphParams lift_params(ad::Graph& g, const ParameterSet& params, bool requires_grad,
                        const std::string& name_prefix) {
  GraphParams out;
  for (const auto& [name, tensor] : params)
    out.vars.emplace(name, g.leaf(tensor, requires_grad, name_prefix + name));
  return out;
}

ParameterSet materialize(const ad::Graph& g, const GraphParams& params) {
  ParameterSet out;
  for (const auto& [name, var] : params.vars) out.emplace(name, g.value(var));
  return out;
}

std::vector<ad::Var> ordered_vars(const GraphParams& params) {
  std::vector<ad::Var> out;
  out.reserve(params.vars.size());
  for (const auto& [name, var] : params.vars) out.push_back(var);
  return out;
}

Batch make_batch(std::span<const SubSequence> subs, const RecommenderConfig& config, bool trim) {
  if (subs.empty()) throw std::invalid_argument("make_batch: no sub-sequences");
  const int64_t T = subs[0].padded_length();
  int64_t longest = 1;
  for (const auto& s : subs) {
    if (s.padded_length() != T) throw std::invalid_argument("make_batch: mixed padded lengths");
    longest = std::max(longest, s.real_length);
  }
  const int64_t W = trim ? longest : T;
  const int64_t B = static_cast<int64_t>(subs.size());

  Batch batch;
  batch.count = B;
  batch.window = W;
  batch.max_length = static_cast<int>(T);
  batch.items.resize(static_cast<size_t>(B * W), 0);
  batch.levels.resize(static_cast<size_t>(B * W), 0);
  batch.targets = Tensor(B * W, 1);
  batch.real_mask = Tensor(B * W, 1);
  batch.supervised_mask = Tensor(B * W, 1);

  for (int64_t b = 0; b < B; ++b) {
    const auto& s = subs[static_cast<size_t>(b)];
    for (int64_t t = 0; t < W; ++t) {
      const size_t src = static_cast<size_t>(T - W + t);
      const size_t dst = static_cast<size_t>(b * W + t);
      batch.items[dst] = s.item_ids[src];
      batch.levels[dst] = s.rating_levels[src];
      batch.targets.data[dst] = s.target_ratings[src];
      batch.real_mask.data[dst] = s.loss_mask[src];
      batch.supervised_mask.data[dst] =
          config.final_position_only ? (t == W - 1 ? s.loss_mask[src] : 0.0) : s.loss_mask[src];
    }
  }
  return batch;
}

namespace {

// Gathers column t of the sequence-major block: rows {b*W + t}.
std::vector<int64_t> step_rows(int64_t B, int64_t W, int64_t t) {
  std::vector<int64_t> idx(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) idx[static_cast<size_t>(b)] = b * W + t;
  return idx;
}

struct GateWeights {
  ad::Var w, u, b;
};

ad::Var gate_preact(ad::Graph& g, const GateWeights& gw, ad::Var x, ad::Var h, int64_t rows) {
  auto p = g.add(g.matmul(x, gw.w), g.matmul(h, gw.u));
  return g.add(p, g.broadcast_row(gw.b, rows));
}

ad::Var gru_layer(ad::Graph& g, const GraphParams& theta, const std::string& prefix, ad::Var x_all,
                  const Batch& batch, int64_t hidden) {
  const int64_t B = batch.count, W = batch.window;
  GateWeights gz{theta.at(prefix + "w_z"), theta.at(prefix + "u_z"), theta.at(prefix + "b_z")};
  GateWeights gr{theta.at(prefix + "w_r"), theta.at(prefix + "u_r"), theta.at(prefix + "b_r")};
  GateWeights gh{theta.at(prefix + "w_h"), theta.at(prefix + "u_h"), theta.at(prefix + "b_h")};

  auto h = g.constant(Tensor(B, hidden));
  std::vector<ad::Var> steps;
  steps.reserve(static_cast<size_t>(W));
  for (int64_t t = 0; t < W; ++t) {
    auto x_t = g.gather_rows(x_all, step_rows(B, W, t));
    auto z = g.sigmoid(gate_preact(g, gz, x_t, h, B));
    auto r = g.sigmoid(gate_preact(g, gr, x_t, h, B));
    auto hr = g.mul(r, h);
    auto cand = g.tanh(g.add(g.add(g.matmul(x_t, gh.w), g.matmul(hr, gh.u)),
                             g.broadcast_row(gh.b, B)));
    auto h_new = g.add(g.mul(z, cand), g.mul(g.affine(z, -1.0, 1.0), h));
    // Pad positions keep the previous state exactly (zero through the pad run).
    Tensor m(B, hidden);
    for (int64_t b = 0; b < B; ++b) {
      const double mv = batch.real_mask.data[static_cast<size_t>(b * W + t)];
      for (int64_t j = 0; j < hidden; ++j) m.at(b, j) = mv;
    }
    auto mask = g.constant(std::move(m));
    h = g.add(g.mul(mask, h_new), g.mul(g.affine(mask, -1.0, 1.0), h));
    steps.push_back(h);
  }
  // Step-major concat rows (t*B + b) -> sequence-major rows (b*W + t).
  auto stacked = g.concat_rows(steps);
  std::vector<int64_t> perm(static_cast<size_t>(B * W));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t t = 0; t < W; ++t) perm[static_cast<size_t>(b * W + t)] = t * B + b;
  return g.gather_rows(stacked, std::move(perm));
}

ad::Var attention_layer(ad::Graph& g, const GraphParams& theta, const std::string& prefix,
                        ad::Var x_all, const Batch& batch, int64_t embed) {
  const int64_t B = batch.count, W = batch.window;
  auto wq = theta.at(prefix + "wq");
  auto wk = theta.at(prefix + "wk");
  auto wv = theta.at(prefix + "wv");
  const double scale = 1.0 / std::sqrt(static_cast<double>(embed));

  // Per-slice causal attention over real rows only; pad rows contribute and
  // receive nothing, so a slice's outputs do not depend on its padding.
  std::vector<ad::Var> slice_outs;
  std::vector<int64_t> all_real;
  for (int64_t b = 0; b < B; ++b) {
    std::vector<int64_t> rows;
    for (int64_t t = 0; t < W; ++t)
      if (batch.real_mask.data[static_cast<size_t>(b * W + t)] == 1.0)
        rows.push_back(b * W + t);
    const int64_t n = static_cast<int64_t>(rows.size());
    if (n == 0) continue;
    all_real.insert(all_real.end(), rows.begin(), rows.end());
    auto x = g.gather_rows(x_all, rows);
    auto q = g.matmul(x, wq);
    auto k = g.matmul(x, wk);
    auto v = g.matmul(x, wv);
    auto scores = g.affine(g.matmul(q, k, false, true), scale, 0.0);
    std::vector<uint8_t> allowed(static_cast<size_t>(n * n), 0);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j <= i; ++j) allowed[static_cast<size_t>(i * n + j)] = 1;
    auto attn = g.masked_softmax_rows(scores, std::move(allowed));
    slice_outs.push_back(g.matmul(attn, v));
  }
  auto attended = g.scatter_rows(g.concat_rows(slice_outs), std::move(all_real), B * W);

  // Residual + position-wise feed-forward with its own residual.
  auto a = g.add(x_all, attended);
  auto w1 = theta.at(prefix + "w1");
  auto b1 = theta.at(prefix + "b1");
  auto w2 = theta.at(prefix + "w2");
  auto b2 = theta.at(prefix + "b2");
  auto f = g.relu(g.add(g.matmul(a, w1), g.broadcast_row(b1, B * W)));
  auto ff = g.add(g.matmul(f, w2), g.broadcast_row(b2, B * W));
  return g.add(a, ff);
}

}  // namespace

ad::Var forward_batch(ad::Graph& g, const GraphParams& theta, const Batch& batch,
                      const RecommenderConfig& config) {
  const int64_t B = batch.count, W = batch.window;
  for (int64_t id : batch.items)
    if (id < 0 || id >= config.item_vocab)
      throw std::invalid_argument("forward_batch: item id out of range");

  auto x = g.gather_rows(theta.at("model/item_emb"), batch.items);

  ad::Var features;
  if (config.architecture == Arch::kRecurrent) {
    features = x;
    for (int l = 0; l < config.n_layers; ++l)
      features = gru_layer(g, theta, "model/gru" + std::to_string(l) + "/", features, batch,
                           config.hidden_dim);
  } else {
    // Positions are window-relative so the most recent item always reads the
    // last positional row regardless of padding.
    std::vector<int64_t> pos(static_cast<size_t>(B * W));
    const int64_t off = config.max_length - W;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t t = 0; t < W; ++t) pos[static_cast<size_t>(b * W + t)] = off + t;
    features = g.add(x, g.gather_rows(theta.at("model/pos_emb"), std::move(pos)));
    for (int l = 0; l < config.n_layers; ++l)
      features = attention_layer(g, theta, "model/attn" + std::to_string(l) + "/", features, batch,
                                 config.embed_dim);
  }

  auto logits = g.add(g.matmul(features, theta.at("model/head/w")),
                      g.broadcast_scalar(theta.at("model/head/b"), B * W, 1));
  return g.sigmoid(logits);
}

ad::Var itemwise_loss_batch(ad::Graph& g, ad::Var predictions, const Batch& batch) {
  auto err = g.sub(predictions, g.constant(batch.targets));
  return g.mul(g.constant(batch.supervised_mask), g.square(err));
}

std::vector<double> forward(const ParameterSet& theta, const RecommenderConfig& config,
                            const SubSequence& sub) {
  ad::Graph g;
  auto params = lift_params(g, theta, false);
  auto batch = make_batch(std::span<const SubSequence>(&sub, 1), config, /*trim=*/false);
  auto pred = forward_batch(g, params, batch, config);
  return g.value(pred).data;
}

std::vector<double> itemwise_loss(const std::vector<double>& predictions, const SubSequence& sub) {
  if (predictions.size() != sub.item_ids.size())
    throw std::invalid_argument("itemwise_loss: prediction/subsequence length mismatch");
  std::vector<double> out(predictions.size());
  for (size_t t = 0; t < out.size(); ++t) {
    const double e = predictions[t] - sub.target_ratings[t];
    out[t] = sub.loss_mask[t] * e * e;
  }
  return out;
}

}  // namespace metarec
