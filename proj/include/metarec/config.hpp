#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metarec/dataset.hpp"
#include "metarec/lossfx.hpp"
#include "metarec/meta.hpp"
#include "metarec/recommender.hpp"

namespace metarec {

struct PathsConfig {
  std::string dataset = "data/ratings.csv";
  std::string episodes = "data/episodes";
  std::string checkpoints = "runs/checkpoints";
  std::string reports = "runs/reports";
};

struct DataConfig {
  int num_levels = 5;
  int64_t min_item_ratings = 50;
  int min_length = 5;
  int max_length = 30;
  int n_support = 25;
  int n_query = 3;
  double train_fraction = 0.8;
  double val_fraction = 0.1;  // test takes the remainder
  uint64_t split_seed = 77;
  int64_t val_episode_cap = 600;
  int64_t test_episode_cap = 1000;
  // Synthesis
  int64_t n_users = 0;
  int64_t n_items = 0;
  uint64_t synth_seed = 0;
  std::vector<RatingProfile> profiles;  // empty selects the built-in trio
};

struct ModelConfig {
  std::string architecture = "recurrent";
  int64_t embed_dim = 64;
  int64_t hidden_dim = 64;
  int n_layers = 1;
  bool final_position_only = false;
  // Loss-strategy extras
  int64_t rating_embed_dim = 16;
  int64_t encoder_hidden = 32;
  bool relu_weights = false;
  double focal_gamma = 1.0;
  bool stats_use_mean = true;
  bool stats_use_std = true;
  bool stats_use_label_dist = true;
  bool stats_use_pred_dist = true;
  bool stats_use_mean_loss = true;
};

struct TrainSection {
  std::string mode = "melo";
  double inner_lr = 0.01;
  double outer_lr = 1e-3;
  int inner_steps = 3;
  int meta_batch_size = 8;
  int64_t episodes_total = 2000;
  double clip_norm = 5.0;
  bool first_order = false;
  uint64_t seed = 0;
  double min_lr_ratio = 0.01;
  int64_t val_interval = 100;
  int threads = 1;
};

struct EvalSection {
  std::string checkpoint;
  std::vector<std::string> case_study_checkpoints;
  std::string split = "test";
  int64_t episode_cap = 0;  // 0 keeps every episode
  int warmup = 1;
};

struct SweepSection {
  std::string protocol = "inner_steps";
  std::vector<int> values;  // empty selects the protocol's default grid
  std::vector<uint64_t> seeds = {0, 1, 2};
  std::vector<std::string> modes = {"maml", "melo"};
  int64_t episodes_total = 0;  // 0 inherits train.episodes_total
};

struct RunConfig {
  std::string name = "run";
  PathsConfig paths;
  DataConfig data;
  ModelConfig model;
  TrainSection train;
  EvalSection eval;
  SweepSection sweep;

  RecommenderConfig recommender(int64_t item_vocab) const;
  EncoderConfig encoder() const;
  TrainConfig trainer() const;
  void validate() const;
};

// The generous / fair / grumpy rating profiles, weighted 70/20/10, sequence
// lengths 5..10.
std::vector<RatingProfile> default_profiles();

// Parses a config document, or the manifest of a previous run (the embedded
// resolved config is extracted), rejecting unknown keys at every level.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Canonical resolved form: every field spelled out, keys sorted.
std::string resolved_config_json(const RunConfig& config);

uint64_t fnv1a64(const std::string& bytes);
inline uint64_t config_hash(const RunConfig& config) {
  return fnv1a64(resolved_config_json(config));
}

// Run provenance next to the outputs. Wall time varies between runs and is
// deliberately kept out of the metric/checkpoint artifacts themselves.
void write_manifest(const std::string& path, const std::string& command, const RunConfig& config,
                    double wall_seconds, const std::string& error = {});

}  // namespace metarec
