#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metarec/autodiff.hpp"
#include "metarec/recommender.hpp"

namespace metarec {

// Which inner-loop loss the adaptation uses. kBasic shares the plain-MSE path
// with kMaml; the difference (no inner steps) lives in the training config.
enum class LossStrategy { kBasic, kMaml, kMelo, kFocal, kStats };

LossStrategy strategy_from_string(const std::string& s);
std::string strategy_to_string(LossStrategy s);

struct EncoderConfig {
  int num_levels = 5;
  int64_t rating_embed_dim = 16;
  int64_t hidden_dim = 32;
  bool relu_weights = false;  // softplus by default
  double focal_gamma = 1.0;   // focal strategy exponent
  // Stats strategy feature toggles (Table-style ablations).
  bool stats_use_mean = true;
  bool stats_use_std = true;
  bool stats_use_label_dist = true;
  bool stats_use_pred_dist = true;
  bool stats_use_mean_loss = true;

  int64_t stats_feature_width() const;
  void validate() const;
};

// Encoder parameters for the strategy: the recurrent rating encoder for melo
// ("encoder/..."), a 2-layer perceptron for stats ("encoder/mlp/...") and an
// empty set for the rest.
ParameterSet init_encoder_params(const EncoderConfig& config, LossStrategy strategy,
                                 uint64_t seed);

// Per-position adaptive weights for every sub-sequence in the batch, shape
// [count*window, 1]. Long short-term-memory recurrence over rating-level
// embeddings (pad positions carry the state through unchanged), then a
// projected softplus. Differentiable w.r.t. phi; independent of theta.
ad::Var encode_weights_batch(ad::Graph& g, const GraphParams& phi, const Batch& batch,
                             const EncoderConfig& config);

// Value-level wrapper for one sub-sequence: gamma per padded position.
std::vector<double> encode_weights(const ParameterSet& phi, const EncoderConfig& config,
                                   const SubSequence& sub);

// (1/N) sum_s <gamma_s, loss_s>, both arguments sequence-major [N*window, 1].
ad::Var weighted_episode_loss(ad::Graph& g, ad::Var gammas, ad::Var losses, int64_t n_subs);
double weighted_episode_loss(const std::vector<std::vector<double>>& gammas,
                             const std::vector<std::vector<double>>& losses);

// mask * |e|^gamma_f * e^2 per position; gamma_f = 0 recovers plain MSE.
ad::Var focal_loss_batch(ad::Graph& g, ad::Var predictions, const Batch& batch, double gamma_f);
std::vector<double> focal_regression_loss(const std::vector<double>& predictions,
                                          const SubSequence& sub, double gamma_f);

// Sub-sequence statistics -> per-slice scalar weight; the stats episode loss
// is (1/N) sum_s weight_s * mean-masked-loss_s. Discrete prediction binning is
// inserted as constants (its derivative is zero almost everywhere).
ad::Var stats_episode_loss(ad::Graph& g, const GraphParams& phi, ad::Var predictions,
                           const Batch& batch, const EncoderConfig& config);

// The strategy's inner episode loss over one support batch. For melo, a
// precomputed gamma block may be supplied (it depends only on phi and the
// ratings, so one computation serves every inner step).
ad::Var inner_episode_loss(ad::Graph& g, LossStrategy strategy, const GraphParams& phi,
                           ad::Var predictions, const Batch& batch, const EncoderConfig& config,
                           ad::Var gammas = {});

}  // namespace metarec
