#include "metarec/lossfx.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "metarec/rng.hpp"

namespace metarec {

LossStrategy strategy_from_string(const std::string& s) {
  if (s == "basic") return LossStrategy::kBasic;
  if (s == "maml") return LossStrategy::kMaml;
  if (s == "melo") return LossStrategy::kMelo;
  if (s == "focal") return LossStrategy::kFocal;
  if (s == "stats") return LossStrategy::kStats;
  throw std::invalid_argument("unknown loss strategy '" + s + "'");
}

std::string strategy_to_string(LossStrategy s) {
  switch (s) {
    case LossStrategy::kBasic: return "basic";
    case LossStrategy::kMaml: return "maml";
    case LossStrategy::kMelo: return "melo";
    case LossStrategy::kFocal: return "focal";
    case LossStrategy::kStats: return "stats";
  }
  return "?";
}

void EncoderConfig::validate() const {
  if (num_levels < 2) throw std::invalid_argument("encoder: need at least 2 rating levels");
  if (rating_embed_dim < 1 || hidden_dim < 1)
    throw std::invalid_argument("encoder: dims must be > 0");
  if (focal_gamma < 0.0) throw std::invalid_argument("encoder: focal_gamma must be >= 0");
  if (stats_feature_width() < 1)
    throw std::invalid_argument("encoder: stats feature mask excludes everything");
}

int64_t EncoderConfig::stats_feature_width() const {
  int64_t w = 0;
  if (stats_use_mean) w += 1;
  if (stats_use_std) w += 1;
  if (stats_use_label_dist) w += num_levels;
  if (stats_use_pred_dist) w += num_levels;
  if (stats_use_mean_loss) w += 1;
  return w;
}

namespace {

bool is_bias(const std::string& name) {
  const size_t slash = name.rfind('/');
  return name[slash == std::string::npos ? 0 : slash + 1] == 'b';
}

}  // namespace

ParameterSet init_encoder_params(const EncoderConfig& config, LossStrategy strategy,
                                 uint64_t seed) {
  config.validate();
  std::map<std::string, std::pair<int64_t, int64_t>> shapes;
  if (strategy == LossStrategy::kMelo) {
    shapes["encoder/rating_emb"] = {config.num_levels + 1, config.rating_embed_dim};
    for (const char* gate : {"i", "f", "o", "c"}) {
      const std::string p = "encoder/lstm/";
      shapes[p + "w_" + gate] = {config.rating_embed_dim, config.hidden_dim};
      shapes[p + "u_" + gate] = {config.hidden_dim, config.hidden_dim};
      shapes[p + "b_" + gate] = {1, config.hidden_dim};
    }
    shapes["encoder/head/w"] = {config.hidden_dim, 1};
    shapes["encoder/head/b"] = {1, 1};
  } else if (strategy == LossStrategy::kStats) {
    shapes["encoder/mlp/w1"] = {config.stats_feature_width(), config.hidden_dim};
    shapes["encoder/mlp/b1"] = {1, config.hidden_dim};
    shapes["encoder/mlp/w2"] = {config.hidden_dim, 1};
    shapes["encoder/mlp/b2"] = {1, 1};
  }

  Rng rng(seed);
  ParameterSet params;
  for (const auto& [name, shape] : shapes) {
    Tensor t(shape.first, shape.second);
    if (!is_bias(name)) {
      const double a = std::sqrt(6.0 / static_cast<double>(shape.first + shape.second));
      for (auto& v : t.data) v = rng.uniform(-a, a);
    }
    params.emplace(name, std::move(t));
  }
  if (strategy == LossStrategy::kMelo)
    for (int64_t j = 0; j < config.rating_embed_dim; ++j) params["encoder/rating_emb"].at(0, j) = 0.0;
  return params;
}

namespace {

std::vector<int64_t> step_rows(int64_t B, int64_t W, int64_t t) {
  std::vector<int64_t> idx(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) idx[static_cast<size_t>(b)] = b * W + t;
  return idx;
}

ad::Var gate(ad::Graph& g, const GraphParams& phi, const char* name, ad::Var x, ad::Var h,
             int64_t rows) {
  const std::string p = "encoder/lstm/";
  auto pre = g.add(g.matmul(x, phi.at(p + "w_" + name)), g.matmul(h, phi.at(p + "u_" + name)));
  return g.add(pre, g.broadcast_row(phi.at(p + "b_" + name), rows));
}

}  // namespace

ad::Var encode_weights_batch(ad::Graph& g, const GraphParams& phi, const Batch& batch,
                             const EncoderConfig& config) {
  const int64_t B = batch.count, W = batch.window, H = config.hidden_dim;
  for (int lvl : batch.levels)
    if (lvl < 0 || lvl > config.num_levels)
      throw std::invalid_argument("encode_weights: rating level out of range");

  std::vector<int64_t> emb_rows(batch.levels.begin(), batch.levels.end());
  auto x_all = g.gather_rows(phi.at("encoder/rating_emb"), std::move(emb_rows));

  auto h = g.constant(Tensor(B, H));
  auto c = g.constant(Tensor(B, H));
  std::vector<ad::Var> steps;
  steps.reserve(static_cast<size_t>(W));
  for (int64_t t = 0; t < W; ++t) {
    auto x_t = g.gather_rows(x_all, step_rows(B, W, t));
    auto i = g.sigmoid(gate(g, phi, "i", x_t, h, B));
    auto f = g.sigmoid(gate(g, phi, "f", x_t, h, B));
    auto o = g.sigmoid(gate(g, phi, "o", x_t, h, B));
    auto cand = g.tanh(gate(g, phi, "c", x_t, h, B));
    auto c_new = g.add(g.mul(f, c), g.mul(i, cand));
    auto h_new = g.mul(o, g.tanh(c_new));
    Tensor m(B, H);
    for (int64_t b = 0; b < B; ++b) {
      const double mv = batch.real_mask.data[static_cast<size_t>(b * W + t)];
      for (int64_t j = 0; j < H; ++j) m.at(b, j) = mv;
    }
    auto mask = g.constant(std::move(m));
    auto keep = g.affine(mask, -1.0, 1.0);
    c = g.add(g.mul(mask, c_new), g.mul(keep, c));
    h = g.add(g.mul(mask, h_new), g.mul(keep, h));
    steps.push_back(h);
  }
  auto stacked = g.concat_rows(steps);
  std::vector<int64_t> perm(static_cast<size_t>(B * W));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t t = 0; t < W; ++t) perm[static_cast<size_t>(b * W + t)] = t * B + b;
  auto h_seq = g.gather_rows(stacked, std::move(perm));

  auto raw = g.add(g.matmul(h_seq, phi.at("encoder/head/w")),
                   g.broadcast_scalar(phi.at("encoder/head/b"), B * W, 1));
  return config.relu_weights ? g.relu(raw) : g.softplus(raw);
}

std::vector<double> encode_weights(const ParameterSet& phi, const EncoderConfig& config,
                                   const SubSequence& sub) {
  ad::Graph g;
  auto params = lift_params(g, phi, false);
  RecommenderConfig rc;
  rc.item_vocab = 2;  // unused by the encoder path
  rc.max_length = static_cast<int>(sub.padded_length());
  rc.num_levels = config.num_levels;
  auto batch = make_batch(std::span<const SubSequence>(&sub, 1), rc, /*trim=*/false);
  return g.value(encode_weights_batch(g, params, batch, config)).data;
}

ad::Var weighted_episode_loss(ad::Graph& g, ad::Var gammas, ad::Var losses, int64_t n_subs) {
  if (n_subs < 1) throw std::invalid_argument("weighted_episode_loss: empty support set");
  return g.affine(g.sum_all(g.mul(gammas, losses)), 1.0 / static_cast<double>(n_subs), 0.0);
}

double weighted_episode_loss(const std::vector<std::vector<double>>& gammas,
                             const std::vector<std::vector<double>>& losses) {
  if (losses.empty()) throw std::invalid_argument("weighted_episode_loss: empty support set");
  if (gammas.size() != losses.size())
    throw std::invalid_argument("weighted_episode_loss: gamma/loss count mismatch");
  double total = 0.0;
  for (size_t s = 0; s < losses.size(); ++s) {
    if (gammas[s].size() != losses[s].size())
      throw std::invalid_argument("weighted_episode_loss: length mismatch in sub-sequence " +
                                  std::to_string(s));
    for (size_t t = 0; t < losses[s].size(); ++t) total += gammas[s][t] * losses[s][t];
  }
  return total / static_cast<double>(losses.size());
}

ad::Var focal_loss_batch(ad::Graph& g, ad::Var predictions, const Batch& batch, double gamma_f) {
  if (gamma_f < 0.0) throw std::invalid_argument("focal loss: gamma_f must be >= 0");
  auto err = g.sub(predictions, g.constant(batch.targets));
  auto weighted = g.mul(g.abs_pow(err, gamma_f), g.square(err));
  return g.mul(g.constant(batch.supervised_mask), weighted);
}

std::vector<double> focal_regression_loss(const std::vector<double>& predictions,
                                          const SubSequence& sub, double gamma_f) {
  if (gamma_f < 0.0) throw std::invalid_argument("focal loss: gamma_f must be >= 0");
  if (predictions.size() != sub.item_ids.size())
    throw std::invalid_argument("focal loss: prediction/subsequence length mismatch");
  std::vector<double> out(predictions.size());
  for (size_t t = 0; t < out.size(); ++t) {
    const double e = predictions[t] - sub.target_ratings[t];
    out[t] = sub.loss_mask[t] * (std::pow(std::abs(e), gamma_f) * (e * e));
  }
  return out;
}

ad::Var stats_episode_loss(ad::Graph& g, const GraphParams& phi, ad::Var predictions,
                           const Batch& batch, const EncoderConfig& config) {
  const int64_t B = batch.count, W = batch.window;
  const int64_t k = config.num_levels;
  auto losses = g.mul(g.constant(batch.supervised_mask),
                      g.square(g.sub(predictions, g.constant(batch.targets))));

  std::vector<ad::Var> feature_cols;
  std::vector<ad::Var> mean_losses;
  for (int64_t b = 0; b < B; ++b) {
    std::vector<int64_t> rows;
    for (int64_t t = 0; t < W; ++t)
      if (batch.real_mask.data[static_cast<size_t>(b * W + t)] == 1.0) rows.push_back(b * W + t);
    const int64_t n = static_cast<int64_t>(rows.size());
    if (n == 0) throw std::invalid_argument("stats loss: sub-sequence with no real positions");

    auto pred = g.gather_rows(predictions, rows);
    auto mean = g.mean_all(pred);
    std::vector<ad::Var> feats;
    if (config.stats_use_mean) feats.push_back(mean);
    if (config.stats_use_std) {
      auto centered = g.sub(pred, g.broadcast_scalar(mean, n, 1));
      auto var = g.mean_all(g.square(centered));
      feats.push_back(g.sqrt(g.affine(var, 1.0, 1e-12)));
    }
    if (config.stats_use_label_dist) {
      Tensor dist(k, 1);
      for (int64_t r : rows) {
        const int lvl = batch.levels[static_cast<size_t>(r)];
        dist.data[static_cast<size_t>(lvl - 1)] += 1.0 / static_cast<double>(n);
      }
      feats.push_back(g.constant(std::move(dist)));
    }
    if (config.stats_use_pred_dist) {
      // Nearest-level binning of the current predictions; piecewise constant in
      // theta, so a constant is its exact gradient almost everywhere.
      Tensor dist(k, 1);
      const Tensor& pv = g.value(pred);
      for (int64_t i = 0; i < n; ++i) {
        const double denorm = pv.data[static_cast<size_t>(i)] * static_cast<double>(k - 1) + 1.0;
        const int64_t lvl = std::clamp<int64_t>(std::llround(denorm), 1, k);
        dist.data[static_cast<size_t>(lvl - 1)] += 1.0 / static_cast<double>(n);
      }
      feats.push_back(g.constant(std::move(dist)));
    }
    auto mean_loss = g.mean_all(g.gather_rows(losses, std::move(rows)));
    if (config.stats_use_mean_loss) feats.push_back(mean_loss);
    mean_losses.push_back(mean_loss);
    feature_cols.push_back(feats.size() == 1 ? feats[0] : g.concat_rows(feats));
  }

  auto features = g.reshape(g.concat_rows(feature_cols), B, config.stats_feature_width());
  auto hidden = g.tanh(g.add(g.matmul(features, phi.at("encoder/mlp/w1")),
                             g.broadcast_row(phi.at("encoder/mlp/b1"), B)));
  auto raw = g.add(g.matmul(hidden, phi.at("encoder/mlp/w2")),
                   g.broadcast_scalar(phi.at("encoder/mlp/b2"), B, 1));
  auto weight = config.relu_weights ? g.relu(raw) : g.softplus(raw);
  auto per_slice = g.mul(weight, g.concat_rows(mean_losses));
  return g.affine(g.sum_all(per_slice), 1.0 / static_cast<double>(B), 0.0);
}

ad::Var inner_episode_loss(ad::Graph& g, LossStrategy strategy, const GraphParams& phi,
                           ad::Var predictions, const Batch& batch, const EncoderConfig& config,
                           ad::Var gammas) {
  switch (strategy) {
    case LossStrategy::kBasic:
    case LossStrategy::kMaml: {
      auto losses = itemwise_loss_batch(g, predictions, batch);
      return g.affine(g.sum_all(losses), 1.0 / static_cast<double>(batch.count), 0.0);
    }
    case LossStrategy::kMelo: {
      auto losses = itemwise_loss_batch(g, predictions, batch);
      if (!gammas.valid()) gammas = encode_weights_batch(g, phi, batch, config);
      return weighted_episode_loss(g, gammas, losses, batch.count);
    }
    case LossStrategy::kFocal: {
      auto losses = focal_loss_batch(g, predictions, batch, config.focal_gamma);
      return g.affine(g.sum_all(losses), 1.0 / static_cast<double>(batch.count), 0.0);
    }
    case LossStrategy::kStats:
      return stats_episode_loss(g, phi, predictions, batch, config);
  }
  throw std::logic_error("inner_episode_loss: unhandled strategy");
}

}  // namespace metarec
