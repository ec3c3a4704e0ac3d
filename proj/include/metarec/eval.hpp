#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "metarec/dataset.hpp"
#include "metarec/episode.hpp"
#include "metarec/meta.hpp"

namespace metarec {

struct MetricsReport {
  double rmse = 0.0;
  double mae = 0.0;
  int64_t n_predictions = 0;
  struct LevelBucket {
    int64_t count = 0;
    double mean_predicted = 0.0;  // denormalized scale
  };
  std::vector<LevelBucket> per_level;  // indexed by true level - 1
  std::string mode;
  std::string dataset;
  uint64_t seed = 0;
};

struct EvalOptions {
  LossStrategy mode = LossStrategy::kMelo;
  int inner_steps = 3;
  double inner_lr = 0.01;
  int threads = 1;
  std::string dataset_tag;
  uint64_t seed = 0;
};

// Adapts on each episode's support set, reads the final-position prediction of
// the longest query slice, denormalizes and scores against the true level.
MetricsReport evaluate(const ParameterSet& theta, const ParameterSet& phi,
                       std::span<const Episode> episodes, const RecommenderConfig& rc,
                       const EncoderConfig& ec, const EvalOptions& opts);

struct BaselineResult {
  double rmse = 0.0;
  double mae = 0.0;
};
// Closed-form error of always predicting level c under the given distribution.
BaselineResult constant_baseline(const std::vector<int64_t>& level_counts, int c);

double denormalize(double prediction, int num_levels);

// One trained model per mode, compared side by side in the case study.
struct ModeModel {
  std::string name;
  ParameterSet theta;
  ParameterSet phi;
  LossStrategy mode = LossStrategy::kMaml;
  int inner_steps = 3;
  double inner_lr = 0.01;
};

struct CaseStudyRow {
  std::string mode;
  int64_t step = 0;      // position whose rating is predicted (1-based)
  double predicted = 0.0;  // denormalized
  int truth = 0;           // true level
};

// Rolling one-step-ahead predictions along one user's sequence after
// adaptation: predict the rating at each position step > warmup from the items
// up to and including it.
std::vector<CaseStudyRow> case_study(std::span<const ModeModel> models, const UserSequence& user,
                                     const RecommenderConfig& rc, const EncoderConfig& ec,
                                     int warmup = 1);

struct EpisodeParams {
  int n_support = 25;
  int n_query = 3;
  int max_length = 30;
  int num_levels = 5;
};

struct SplitSequences {
  std::vector<UserSequence> train;
  std::vector<UserSequence> val;
  std::vector<UserSequence> test;
};

struct SweepSpec {
  std::string protocol;  // "length_sweep" or "inner_steps"
  std::vector<int> values;
  std::vector<uint64_t> seeds;
  std::vector<LossStrategy> modes;
};

struct SweepCell {
  std::string protocol;
  int value = 0;
  uint64_t seed = 0;
  std::string mode;
  double test_rmse = 0.0;
  double test_mae = 0.0;
  double best_val_rmse = 0.0;
};

// One full train+evaluate per (value, seed, mode) cell; seeds are shared
// across cells so columns are comparable.
std::vector<SweepCell> sweep(const SweepSpec& spec, const SplitSequences& splits,
                             const EpisodeParams& ep, const RecommenderConfig& rc,
                             const EncoderConfig& ec, const TrainConfig& base);

}  // namespace metarec
