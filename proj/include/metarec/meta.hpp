#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "metarec/autodiff.hpp"
#include "metarec/episode.hpp"
#include "metarec/lossfx.hpp"
#include "metarec/recommender.hpp"

namespace metarec {

struct TrainConfig {
  LossStrategy mode = LossStrategy::kMelo;
  double inner_lr = 0.01;   // alpha
  double outer_lr = 1e-3;   // beta
  int inner_steps = 3;      // J; basic mode always adapts 0 steps
  int meta_batch_size = 8;
  int64_t episodes_total = 2000;  // outer steps
  double clip_norm = 5.0;
  bool first_order = false;
  uint64_t seed = 0;
  double min_lr_ratio = 0.01;  // cosine floor = outer_lr * ratio
  int64_t val_interval = 100;
  int threads = 1;

  int effective_inner_steps() const {
    return mode == LossStrategy::kBasic ? 0 : inner_steps;
  }
  void validate() const;
};

struct OptimizerState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// lr(0) = beta, lr(total) = beta_min, half-cosine in between.
double cosine_lr(double beta, double beta_min, int64_t step, int64_t total);

// Scales grads in place so the joint global norm is at most clip; returns the
// pre-clip norm.
double clip_global_norm(std::map<std::string, Tensor>& grads, double clip);

void adam_update(ParameterSet& params, const std::map<std::string, Tensor>& grads,
                 OptimizerState& state, double lr);

// Unrolled gradient descent on an arbitrary in-graph loss; the returned
// parameters are graph expressions, so differentiating through them yields
// exact second-order meta-gradients (or first-order ones when the inner
// gradients are detached).
using InnerLossFn = std::function<ad::Var(ad::Graph&, const GraphParams&)>;
GraphParams adapt_by_gradient(ad::Graph& g, const GraphParams& start, const InnerLossFn& loss_fn,
                              double alpha, int steps, bool first_order);

// Strategy-specific adaptation on one episode's support set. force_unit_gamma
// replaces the melo weights with exact ones (diagnostic for the reduction-to-
// plain-MAML property).
GraphParams inner_adapt(ad::Graph& g, const GraphParams& theta, const GraphParams& phi,
                        std::span<const SubSequence> support, LossStrategy strategy,
                        const RecommenderConfig& rc, const EncoderConfig& ec, double alpha,
                        int steps, bool first_order, bool force_unit_gamma = false);

// Unweighted mean masked squared error over the query slices at the adapted
// parameters; the outer objective term for one episode.
ad::Var query_loss(ad::Graph& g, const GraphParams& adapted,
                   std::span<const SubSequence> query, const RecommenderConfig& rc);

// Gradients of one episode's query loss w.r.t. the meta parameters.
struct EpisodeGradients {
  std::map<std::string, Tensor> theta;
  std::map<std::string, Tensor> phi;
  double loss = 0.0;
};
EpisodeGradients episode_gradients(const ParameterSet& theta, const ParameterSet& phi,
                                   const Episode& episode, const RecommenderConfig& rc,
                                   const EncoderConfig& ec, const TrainConfig& tc,
                                   bool force_unit_gamma = false);

// One meta-update: sum of episode gradients in batch order, joint clip, Adam.
struct OuterStepResult {
  double mean_query_loss = 0.0;
  double grad_norm = 0.0;  // pre-clip
};
OuterStepResult outer_step(ParameterSet& theta, ParameterSet& phi,
                           std::span<const Episode> batch, const RecommenderConfig& rc,
                           const EncoderConfig& ec, const TrainConfig& tc, OptimizerState& opt,
                           double lr);

// One metrics-log line; quiet-NaN marks an empty cell.
struct MetricsRow {
  int64_t step = 0;
  std::string split;
  std::string mode;
  double loss = 0.0;
  double rmse = 0.0;
  double mae = 0.0;
  double lr = 0.0;
};
extern const double kNoValue;
std::string format_metric(double v);

struct TrainResult {
  ParameterSet theta;
  ParameterSet phi;
  OptimizerState opt;
  ParameterSet best_theta;
  ParameterSet best_phi;
  double best_val_rmse = 0.0;
  int64_t best_step = 0;
  std::vector<MetricsRow> log;
};

TrainResult train(const std::vector<Episode>& train_episodes,
                  const std::vector<Episode>& val_episodes, const RecommenderConfig& rc,
                  const EncoderConfig& ec, const TrainConfig& tc);

// Deterministic helper used by training and sweeps alike.
void parallel_for(int threads, int64_t n, const std::function<void(int64_t)>& fn);

}  // namespace metarec
