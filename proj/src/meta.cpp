#include "metarec/meta.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "metarec/eval.hpp"
#include "metarec/rng.hpp"

namespace metarec {

const double kNoValue = std::numeric_limits<double>::quiet_NaN();

std::string format_metric(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void TrainConfig::validate() const {
  if (inner_lr <= 0.0 || outer_lr <= 0.0) throw std::invalid_argument("train: learning rates must be > 0");
  if (inner_steps < 0) throw std::invalid_argument("train: inner_steps must be >= 0");
  if (meta_batch_size < 1) throw std::invalid_argument("train: meta_batch_size must be >= 1");
  if (episodes_total < 0) throw std::invalid_argument("train: episodes_total must be >= 0");
  if (clip_norm <= 0.0) throw std::invalid_argument("train: clip_norm must be > 0");
  if (min_lr_ratio <= 0.0 || min_lr_ratio > 1.0) throw std::invalid_argument("train: bad min_lr_ratio");
  if (val_interval < 1) throw std::invalid_argument("train: val_interval must be >= 1");
  if (threads < 1) throw std::invalid_argument("train: threads must be >= 1");
}

double cosine_lr(double beta, double beta_min, int64_t step, int64_t total) {
  if (total <= 0) return beta;
  const double frac = static_cast<double>(step) / static_cast<double>(total);
  return beta_min + 0.5 * (beta - beta_min) * (1.0 + std::cos(3.141592653589793238462643 * frac));
}

double clip_global_norm(std::map<std::string, Tensor>& grads, double clip) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (double v : g.data) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > clip) {
    const double scale = clip / norm;
    for (auto& [name, g] : grads)
      for (double& v : g.data) v *= scale;
  }
  return norm;
}

namespace {

// The formula without the step bump, so one optimizer step can cover several
// parameter collections.
void adam_apply(ParameterSet& params, const std::map<std::string, Tensor>& grads,
                OptimizerState& state, double lr) {
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) throw std::invalid_argument("adam: missing gradient for " + name);
    const Tensor& g = git->second;
    Tensor& m = state.m.try_emplace(name, Tensor(p.rows, p.cols)).first->second;
    Tensor& v = state.v.try_emplace(name, Tensor(p.rows, p.cols)).first->second;
    for (size_t i = 0; i < p.data.size(); ++i) {
      m.data[i] = state.beta1 * m.data[i] + (1.0 - state.beta1) * g.data[i];
      v.data[i] = state.beta2 * v.data[i] + (1.0 - state.beta2) * g.data[i] * g.data[i];
      const double mhat = m.data[i] / c1;
      const double vhat = v.data[i] / c2;
      p.data[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace

void adam_update(ParameterSet& params, const std::map<std::string, Tensor>& grads,
                 OptimizerState& state, double lr) {
  ++state.step;
  adam_apply(params, grads, state, lr);
}

GraphParams adapt_by_gradient(ad::Graph& g, const GraphParams& start, const InnerLossFn& loss_fn,
                              double alpha, int steps, bool first_order) {
  GraphParams cur = start;
  for (int j = 0; j < steps; ++j) {
    auto loss = loss_fn(g, cur);
    auto wrt = ordered_vars(cur);
    auto grads = g.gradient(loss, wrt);
    GraphParams next;
    size_t k = 0;
    for (const auto& [name, var] : cur.vars) {
      auto grad = grads[k++];
      if (first_order) grad = g.stop_gradient(grad);
      next.vars.emplace(name, g.add(var, g.affine(grad, -alpha, 0.0)));
    }
    cur = std::move(next);
  }
  return cur;
}

GraphParams inner_adapt(ad::Graph& g, const GraphParams& theta, const GraphParams& phi,
                        std::span<const SubSequence> support, LossStrategy strategy,
                        const RecommenderConfig& rc, const EncoderConfig& ec, double alpha,
                        int steps, bool first_order, bool force_unit_gamma) {
  if (steps == 0) return theta;
  if (support.empty()) throw std::invalid_argument("inner_adapt: empty support set");
  const Batch batch = make_batch(support, rc);

  // Adaptive weights depend only on (phi, ratings); one computation serves all
  // inner steps.
  ad::Var gammas;
  if (strategy == LossStrategy::kMelo) {
    if (force_unit_gamma) {
      Tensor ones(batch.count * batch.window, 1);
      ones.fill(1.0);
      gammas = g.constant(std::move(ones));
    } else {
      gammas = encode_weights_batch(g, phi, batch, ec);
    }
  }

  auto loss_fn = [&](ad::Graph& gg, const GraphParams& cur) {
    auto pred = forward_batch(gg, cur, batch, rc);
    return inner_episode_loss(gg, strategy, phi, pred, batch, ec, gammas);
  };
  return adapt_by_gradient(g, theta, loss_fn, alpha, steps, first_order);
}

ad::Var query_loss(ad::Graph& g, const GraphParams& adapted, std::span<const SubSequence> query,
                   const RecommenderConfig& rc) {
  if (query.empty()) throw std::invalid_argument("query_loss: empty query set");
  const Batch batch = make_batch(query, rc);
  auto pred = forward_batch(g, adapted, batch, rc);
  auto losses = itemwise_loss_batch(g, pred, batch);
  return g.affine(g.sum_all(losses), 1.0 / static_cast<double>(batch.count), 0.0);
}

EpisodeGradients episode_gradients(const ParameterSet& theta, const ParameterSet& phi,
                                   const Episode& episode, const RecommenderConfig& rc,
                                   const EncoderConfig& ec, const TrainConfig& tc,
                                   bool force_unit_gamma) {
  try {
    ad::Graph g;
    g.reserve(1 << 14);
    auto theta_vars = lift_params(g, theta, true);
    auto phi_vars = lift_params(g, phi, true);
    auto adapted = inner_adapt(g, theta_vars, phi_vars, episode.support, tc.mode, rc, ec,
                               tc.inner_lr, tc.effective_inner_steps(), tc.first_order,
                               force_unit_gamma);
    auto loss = query_loss(g, adapted, episode.query, rc);

    std::vector<ad::Var> wrt = ordered_vars(theta_vars);
    const size_t n_theta = wrt.size();
    for (auto v : ordered_vars(phi_vars)) wrt.push_back(v);
    auto grads = g.gradient(loss, wrt);

    EpisodeGradients out;
    out.loss = g.value(loss).scalar();
    size_t k = 0;
    for (const auto& [name, var] : theta_vars.vars) out.theta.emplace(name, g.value(grads[k++]));
    for (const auto& [name, var] : phi_vars.vars) out.phi.emplace(name, g.value(grads[k++]));
    (void)n_theta;
    return out;
  } catch (const std::exception& e) {
    throw std::runtime_error("episode for user " + std::to_string(episode.user_index) +
                             " failed: " + e.what());
  }
}

void parallel_for(int threads, int64_t n, const std::function<void(int64_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  auto worker = [&] {
    for (;;) {
      const int64_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const int count = static_cast<int>(std::min<int64_t>(threads, n));
  pool.reserve(static_cast<size_t>(count));
  for (int t = 0; t < count; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

OuterStepResult outer_step(ParameterSet& theta, ParameterSet& phi,
                           std::span<const Episode> batch, const RecommenderConfig& rc,
                           const EncoderConfig& ec, const TrainConfig& tc, OptimizerState& opt,
                           double lr) {
  if (batch.empty()) throw std::invalid_argument("outer_step: empty batch");

  std::vector<EpisodeGradients> per_episode(batch.size());
  parallel_for(tc.threads, static_cast<int64_t>(batch.size()), [&](int64_t i) {
    per_episode[static_cast<size_t>(i)] =
        episode_gradients(theta, phi, batch[static_cast<size_t>(i)], rc, ec, tc);
  });

  // Fixed batch-order reduction keeps results identical for any thread count.
  std::map<std::string, Tensor> grads;
  for (const auto& [name, p] : theta) grads.emplace(name, Tensor(p.rows, p.cols));
  for (const auto& [name, p] : phi) grads.emplace(name, Tensor(p.rows, p.cols));
  double loss_sum = 0.0;
  for (const auto& eg : per_episode) {
    loss_sum += eg.loss;
    for (const auto& [name, g] : eg.theta) {
      auto& acc = grads.at(name);
      for (size_t i = 0; i < g.data.size(); ++i) acc.data[i] += g.data[i];
    }
    for (const auto& [name, g] : eg.phi) {
      auto& acc = grads.at(name);
      for (size_t i = 0; i < g.data.size(); ++i) acc.data[i] += g.data[i];
    }
  }
  for (const auto& [name, g] : grads)
    if (!all_finite(g)) throw std::runtime_error("outer_step: non-finite gradient for " + name);

  OuterStepResult res;
  res.grad_norm = clip_global_norm(grads, tc.clip_norm);
  res.mean_query_loss = loss_sum / static_cast<double>(batch.size());

  std::map<std::string, Tensor> theta_grads, phi_grads;
  for (const auto& [name, p] : theta) theta_grads.emplace(name, std::move(grads.at(name)));
  for (const auto& [name, p] : phi) phi_grads.emplace(name, std::move(grads.at(name)));
  ++opt.step;
  adam_apply(theta, theta_grads, opt, lr);
  adam_apply(phi, phi_grads, opt, lr);

  // The pad rows receive exactly-zero gradients by construction; keep them
  // pinned against any future drift all the same.
  if (auto it = theta.find("model/item_emb"); it != theta.end())
    for (int64_t j = 0; j < it->second.cols; ++j) it->second.at(0, j) = 0.0;
  if (auto it = phi.find("encoder/rating_emb"); it != phi.end())
    for (int64_t j = 0; j < it->second.cols; ++j) it->second.at(0, j) = 0.0;
  return res;
}

TrainResult train(const std::vector<Episode>& train_episodes,
                  const std::vector<Episode>& val_episodes, const RecommenderConfig& rc,
                  const EncoderConfig& ec, const TrainConfig& tc) {
  tc.validate();
  rc.validate();
  ec.validate();
  if (train_episodes.empty() && tc.episodes_total > 0)
    throw std::invalid_argument("train: no training episodes");

  TrainResult result;
  result.theta = init_params(rc, tc.seed);
  result.phi = init_encoder_params(ec, tc.mode, tc.seed + 1);
  result.best_theta = result.theta;
  result.best_phi = result.phi;
  result.best_val_rmse = std::numeric_limits<double>::infinity();
  result.best_step = 0;

  const double beta_min = tc.outer_lr * tc.min_lr_ratio;
  const std::string mode_name = strategy_to_string(tc.mode);
  Rng sampler(tc.seed);

  EvalOptions val_opts;
  val_opts.mode = tc.mode;
  val_opts.inner_steps = tc.effective_inner_steps();
  val_opts.inner_lr = tc.inner_lr;
  val_opts.threads = tc.threads;
  val_opts.seed = tc.seed;
  val_opts.dataset_tag = "val";

  auto run_validation = [&](int64_t step, double lr) {
    if (val_episodes.empty()) return;
    auto report = evaluate(result.theta, result.phi, val_episodes, rc, ec, val_opts);
    result.log.push_back(
        {step, "val", mode_name, kNoValue, report.rmse, report.mae, lr});
    if (report.rmse < result.best_val_rmse) {
      result.best_val_rmse = report.rmse;
      result.best_step = step;
      result.best_theta = result.theta;
      result.best_phi = result.phi;
    }
  };

  for (int64_t step = 0; step < tc.episodes_total; ++step) {
    const double lr = cosine_lr(tc.outer_lr, beta_min, step, tc.episodes_total);
    std::vector<Episode> batch;
    batch.reserve(static_cast<size_t>(tc.meta_batch_size));
    for (int b = 0; b < tc.meta_batch_size; ++b) {
      const int64_t idx = sampler.uniform_int(0, static_cast<int64_t>(train_episodes.size()) - 1);
      batch.push_back(train_episodes[static_cast<size_t>(idx)]);
    }
    auto res = outer_step(result.theta, result.phi, batch, rc, ec, tc, result.opt, lr);
    result.log.push_back({step, "train", mode_name, res.mean_query_loss, kNoValue, kNoValue, lr});
    if ((step + 1) % tc.val_interval == 0 || step + 1 == tc.episodes_total)
      run_validation(step + 1, lr);
  }
  if (tc.episodes_total == 0) run_validation(0, tc.outer_lr);

  if (!std::isfinite(result.best_val_rmse)) {
    result.best_theta = result.theta;
    result.best_phi = result.phi;
    result.best_val_rmse = kNoValue;
    result.best_step = tc.episodes_total;
  }
  return result;
}

}  // namespace metarec
