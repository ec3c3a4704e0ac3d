#include "metarec/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace metarec {

using nlohmann::json;

std::vector<RatingProfile> default_profiles() {
  std::vector<RatingProfile> p(3);
  p[0] = {"generous", {0.05, 0.04, 0.04, 0.15, 0.72}, 5, 10, 0.7};
  p[1] = {"fair", {0.28, 0.11, 0.18, 0.12, 0.31}, 5, 10, 0.2};
  p[2] = {"grumpy", {0.58, 0.17, 0.10, 0.07, 0.08}, 5, 10, 0.1};
  return p;
}

RecommenderConfig RunConfig::recommender(int64_t item_vocab) const {
  RecommenderConfig rc;
  rc.architecture = arch_from_string(model.architecture);
  rc.item_vocab = item_vocab;
  rc.embed_dim = model.embed_dim;
  rc.hidden_dim = model.hidden_dim;
  rc.n_layers = model.n_layers;
  rc.max_length = data.max_length;
  rc.num_levels = data.num_levels;
  rc.final_position_only = model.final_position_only;
  return rc;
}

EncoderConfig RunConfig::encoder() const {
  EncoderConfig ec;
  ec.num_levels = data.num_levels;
  ec.rating_embed_dim = model.rating_embed_dim;
  ec.hidden_dim = model.encoder_hidden;
  ec.relu_weights = model.relu_weights;
  ec.focal_gamma = model.focal_gamma;
  ec.stats_use_mean = model.stats_use_mean;
  ec.stats_use_std = model.stats_use_std;
  ec.stats_use_label_dist = model.stats_use_label_dist;
  ec.stats_use_pred_dist = model.stats_use_pred_dist;
  ec.stats_use_mean_loss = model.stats_use_mean_loss;
  return ec;
}

TrainConfig RunConfig::trainer() const {
  TrainConfig tc;
  tc.mode = strategy_from_string(train.mode);
  tc.inner_lr = train.inner_lr;
  tc.outer_lr = train.outer_lr;
  tc.inner_steps = train.inner_steps;
  tc.meta_batch_size = train.meta_batch_size;
  tc.episodes_total = train.episodes_total;
  tc.clip_norm = train.clip_norm;
  tc.first_order = train.first_order;
  tc.seed = train.seed;
  tc.min_lr_ratio = train.min_lr_ratio;
  tc.val_interval = train.val_interval;
  tc.threads = train.threads;
  return tc;
}

void RunConfig::validate() const {
  trainer().validate();
  encoder().validate();
  arch_from_string(model.architecture);
  if (data.num_levels < 2) throw std::invalid_argument("data: num_levels must be >= 2");
  if (data.min_length < 3)
    throw std::invalid_argument("data: min_length must be >= 3 to form episodes");
  if (data.max_length < data.min_length)
    throw std::invalid_argument("data: max_length must be >= min_length");
  if (data.n_support < 1 || data.n_query < 1)
    throw std::invalid_argument("data: episode caps must be >= 1");
  if (data.train_fraction <= 0.0 || data.val_fraction < 0.0 ||
      data.train_fraction + data.val_fraction >= 1.0)
    throw std::invalid_argument("data: split fractions must leave room for a test share");
  if (eval.warmup < 1) throw std::invalid_argument("eval: warmup must be >= 1");
  if (sweep.protocol != "inner_steps" && sweep.protocol != "length_sweep")
    throw std::invalid_argument("sweep: unknown protocol '" + sweep.protocol + "'");
  for (const auto& m : sweep.modes) strategy_from_string(m);
}

namespace {

[[noreturn]] void bad_key(const std::string& where, const std::string& key) {
  throw std::invalid_argument("config: unknown key '" + key + "' in " + where);
}

void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
}

void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) bad_key(where, key);
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw std::invalid_argument(std::string("config: bad value for '") + key + "'");
  }
}

void parse_paths(const json& j, PathsConfig& p) {
  require_object(j, "paths");
  check_keys(j, "paths", {"dataset", "episodes", "checkpoints", "reports"});
  read(j, "dataset", p.dataset);
  read(j, "episodes", p.episodes);
  read(j, "checkpoints", p.checkpoints);
  read(j, "reports", p.reports);
}

void parse_profiles(const json& j, std::vector<RatingProfile>& out) {
  if (!j.is_array()) throw std::invalid_argument("config: data.profiles must be an array");
  out.clear();
  for (const auto& e : j) {
    require_object(e, "data.profiles[]");
    check_keys(e, "data.profiles[]",
               {"name", "proportions", "min_length", "max_length", "weight"});
    RatingProfile p;
    read(e, "name", p.name);
    read(e, "proportions", p.proportions);
    read(e, "min_length", p.min_length);
    read(e, "max_length", p.max_length);
    read(e, "weight", p.weight);
    out.push_back(std::move(p));
  }
}

void parse_data(const json& j, DataConfig& d) {
  require_object(j, "data");
  check_keys(j, "data",
             {"num_levels", "min_item_ratings", "min_length", "max_length", "n_support",
              "n_query", "train_fraction", "val_fraction", "split_seed", "val_episode_cap",
              "test_episode_cap", "n_users", "n_items", "synth_seed", "profiles"});
  read(j, "num_levels", d.num_levels);
  read(j, "min_item_ratings", d.min_item_ratings);
  read(j, "min_length", d.min_length);
  read(j, "max_length", d.max_length);
  read(j, "n_support", d.n_support);
  read(j, "n_query", d.n_query);
  read(j, "train_fraction", d.train_fraction);
  read(j, "val_fraction", d.val_fraction);
  read(j, "split_seed", d.split_seed);
  read(j, "val_episode_cap", d.val_episode_cap);
  read(j, "test_episode_cap", d.test_episode_cap);
  read(j, "n_users", d.n_users);
  read(j, "n_items", d.n_items);
  read(j, "synth_seed", d.synth_seed);
  if (j.contains("profiles")) parse_profiles(j.at("profiles"), d.profiles);
}

void parse_model(const json& j, ModelConfig& m) {
  require_object(j, "model");
  check_keys(j, "model",
             {"architecture", "embed_dim", "hidden_dim", "n_layers", "final_position_only",
              "rating_embed_dim", "encoder_hidden", "relu_weights", "focal_gamma",
              "stats_use_mean", "stats_use_std", "stats_use_label_dist", "stats_use_pred_dist",
              "stats_use_mean_loss"});
  read(j, "architecture", m.architecture);
  read(j, "embed_dim", m.embed_dim);
  read(j, "hidden_dim", m.hidden_dim);
  read(j, "n_layers", m.n_layers);
  read(j, "final_position_only", m.final_position_only);
  read(j, "rating_embed_dim", m.rating_embed_dim);
  read(j, "encoder_hidden", m.encoder_hidden);
  read(j, "relu_weights", m.relu_weights);
  read(j, "focal_gamma", m.focal_gamma);
  read(j, "stats_use_mean", m.stats_use_mean);
  read(j, "stats_use_std", m.stats_use_std);
  read(j, "stats_use_label_dist", m.stats_use_label_dist);
  read(j, "stats_use_pred_dist", m.stats_use_pred_dist);
  read(j, "stats_use_mean_loss", m.stats_use_mean_loss);
}

void parse_train(const json& j, TrainSection& t) {
  require_object(j, "train");
  check_keys(j, "train",
             {"mode", "inner_lr", "outer_lr", "inner_steps", "meta_batch_size", "episodes_total",
              "clip_norm", "first_order", "seed", "min_lr_ratio", "val_interval", "threads"});
  read(j, "mode", t.mode);
  read(j, "inner_lr", t.inner_lr);
  read(j, "outer_lr", t.outer_lr);
  read(j, "inner_steps", t.inner_steps);
  read(j, "meta_batch_size", t.meta_batch_size);
  read(j, "episodes_total", t.episodes_total);
  read(j, "clip_norm", t.clip_norm);
  read(j, "first_order", t.first_order);
  read(j, "seed", t.seed);
  read(j, "min_lr_ratio", t.min_lr_ratio);
  read(j, "val_interval", t.val_interval);
  read(j, "threads", t.threads);
}

void parse_eval(const json& j, EvalSection& e) {
  require_object(j, "eval");
  check_keys(j, "eval",
             {"checkpoint", "case_study_checkpoints", "split", "episode_cap", "warmup"});
  read(j, "checkpoint", e.checkpoint);
  read(j, "case_study_checkpoints", e.case_study_checkpoints);
  read(j, "split", e.split);
  read(j, "episode_cap", e.episode_cap);
  read(j, "warmup", e.warmup);
}

void parse_sweep(const json& j, SweepSection& s) {
  require_object(j, "sweep");
  check_keys(j, "sweep", {"protocol", "values", "seeds", "modes", "episodes_total"});
  read(j, "protocol", s.protocol);
  read(j, "values", s.values);
  read(j, "seeds", s.seeds);
  read(j, "modes", s.modes);
  read(j, "episodes_total", s.episodes_total);
}

json profiles_json(const std::vector<RatingProfile>& profiles) {
  auto arr = json::array();
  for (const auto& p : profiles)
    arr.push_back({{"name", p.name},
                   {"proportions", p.proportions},
                   {"min_length", p.min_length},
                   {"max_length", p.max_length},
                   {"weight", p.weight}});
  return arr;
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: not valid JSON: ") + e.what());
  }
  require_object(j, "the document root");

  // A manifest wraps the resolved config it was produced from.
  if (j.contains("config") && j.contains("config_hash")) j = j.at("config");

  check_keys(j, "the document root",
             {"name", "paths", "data", "model", "train", "eval", "sweep"});
  RunConfig c;
  read(j, "name", c.name);
  if (j.contains("paths")) parse_paths(j.at("paths"), c.paths);
  if (j.contains("data")) parse_data(j.at("data"), c.data);
  if (j.contains("model")) parse_model(j.at("model"), c.model);
  if (j.contains("train")) parse_train(j.at("train"), c.train);
  if (j.contains("eval")) parse_eval(j.at("eval"), c.eval);
  if (j.contains("sweep")) parse_sweep(j.at("sweep"), c.sweep);
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

std::string resolved_config_json(const RunConfig& c) {
  json j;
  j["name"] = c.name;
  j["paths"] = {{"dataset", c.paths.dataset},
                {"episodes", c.paths.episodes},
                {"checkpoints", c.paths.checkpoints},
                {"reports", c.paths.reports}};
  j["data"] = {{"num_levels", c.data.num_levels},
               {"min_item_ratings", c.data.min_item_ratings},
               {"min_length", c.data.min_length},
               {"max_length", c.data.max_length},
               {"n_support", c.data.n_support},
               {"n_query", c.data.n_query},
               {"train_fraction", c.data.train_fraction},
               {"val_fraction", c.data.val_fraction},
               {"split_seed", c.data.split_seed},
               {"val_episode_cap", c.data.val_episode_cap},
               {"test_episode_cap", c.data.test_episode_cap},
               {"n_users", c.data.n_users},
               {"n_items", c.data.n_items},
               {"synth_seed", c.data.synth_seed},
               {"profiles", profiles_json(c.data.profiles.empty() ? default_profiles()
                                                                  : c.data.profiles)}};
  j["model"] = {{"architecture", c.model.architecture},
                {"embed_dim", c.model.embed_dim},
                {"hidden_dim", c.model.hidden_dim},
                {"n_layers", c.model.n_layers},
                {"final_position_only", c.model.final_position_only},
                {"rating_embed_dim", c.model.rating_embed_dim},
                {"encoder_hidden", c.model.encoder_hidden},
                {"relu_weights", c.model.relu_weights},
                {"focal_gamma", c.model.focal_gamma},
                {"stats_use_mean", c.model.stats_use_mean},
                {"stats_use_std", c.model.stats_use_std},
                {"stats_use_label_dist", c.model.stats_use_label_dist},
                {"stats_use_pred_dist", c.model.stats_use_pred_dist},
                {"stats_use_mean_loss", c.model.stats_use_mean_loss}};
  j["train"] = {{"mode", c.train.mode},
                {"inner_lr", c.train.inner_lr},
                {"outer_lr", c.train.outer_lr},
                {"inner_steps", c.train.inner_steps},
                {"meta_batch_size", c.train.meta_batch_size},
                {"episodes_total", c.train.episodes_total},
                {"clip_norm", c.train.clip_norm},
                {"first_order", c.train.first_order},
                {"seed", c.train.seed},
                {"min_lr_ratio", c.train.min_lr_ratio},
                {"val_interval", c.train.val_interval},
                {"threads", c.train.threads}};
  j["eval"] = {{"checkpoint", c.eval.checkpoint},
               {"case_study_checkpoints", c.eval.case_study_checkpoints},
               {"split", c.eval.split},
               {"episode_cap", c.eval.episode_cap},
               {"warmup", c.eval.warmup}};
  j["sweep"] = {{"protocol", c.sweep.protocol},
                {"values", c.sweep.values},
                {"seeds", c.sweep.seeds},
                {"modes", c.sweep.modes},
                {"episodes_total", c.sweep.episodes_total}};
  return j.dump(2);
}

uint64_t fnv1a64(const std::string& bytes) {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

void write_manifest(const std::string& path, const std::string& command, const RunConfig& config,
                    double wall_seconds, const std::string& error) {
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx",
                static_cast<unsigned long long>(config_hash(config)));
  json m;
  m["command"] = command;
  m["version"] = "metarec-0.1.0";
  m["config_hash"] = hex;
  m["seed"] = config.train.seed;
  m["threads"] = config.train.threads;
  m["wall_time_seconds"] = wall_seconds;
  if (!error.empty()) m["error"] = error;
  m["config"] = json::parse(resolved_config_json(config));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("manifest: cannot open '" + path + "' for writing");
  out << m.dump(2) << "\n";
}

}  // namespace metarec
