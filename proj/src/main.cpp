#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "metarec/checkpoint.hpp"
#include "metarec/config.hpp"
#include "metarec/csv.hpp"
#include "metarec/dataset.hpp"
#include "metarec/episode.hpp"
#include "metarec/eval.hpp"
#include "metarec/meta.hpp"
#include "metarec/rng.hpp"

namespace fs = std::filesystem;
using namespace metarec;

namespace {

struct CommandOptions {
  std::string config_path;
  int64_t seed = -1;   // -1 = keep the config's seed
  int threads = 0;     // 0 = keep the config's thread count
  std::string out;     // re-roots output directories when set
};

void add_common(CLI::App* sub, CommandOptions& opts) {
  sub->add_option("--config", opts.config_path, "Run configuration (JSON or a run manifest)")
      ->required();
  sub->add_option("--seed", opts.seed, "Override the training/synthesis seed");
  sub->add_option("--threads", opts.threads, "Override the worker thread count");
  sub->add_option("--out", opts.out, "Re-root output directories under this directory");
}

RunConfig load_and_resolve(const CommandOptions& opts, bool synth_output) {
  RunConfig cfg = load_run_config(opts.config_path);
  if (opts.seed >= 0) {
    cfg.train.seed = static_cast<uint64_t>(opts.seed);
    cfg.data.synth_seed = static_cast<uint64_t>(opts.seed);
  }
  if (opts.threads > 0) cfg.train.threads = opts.threads;
  if (!opts.out.empty()) {
    cfg.paths.episodes = opts.out + "/episodes";
    cfg.paths.checkpoints = opts.out + "/checkpoints";
    cfg.paths.reports = opts.out + "/reports";
    if (synth_output)
      cfg.paths.dataset = opts.out + "/" + fs::path(cfg.paths.dataset).filename().string();
  }
  cfg.validate();
  return cfg;
}

void require_input(const std::string& path, const std::string& what) {
  if (!fs::exists(path))
    throw std::invalid_argument(what + " '" + path + "' does not exist");
}

void ensure_parent(const std::string& file) {
  const fs::path dir = fs::path(file).parent_path();
  if (!dir.empty()) fs::create_directories(dir);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<RatingProfile> effective_profiles(const RunConfig& cfg) {
  return cfg.data.profiles.empty() ? default_profiles() : cfg.data.profiles;
}

SplitSequences split_users(std::vector<UserSequence> users, const DataConfig& d) {
  Rng rng(d.split_seed);
  rng.shuffle(users);
  const size_t n = users.size();
  size_t n_train = static_cast<size_t>(std::llround(d.train_fraction * static_cast<double>(n)));
  size_t n_val = static_cast<size_t>(std::llround(d.val_fraction * static_cast<double>(n)));
  n_train = std::min(n_train, n);
  n_val = std::min(n_val, n - n_train);
  SplitSequences s;
  s.train.assign(users.begin(), users.begin() + static_cast<int64_t>(n_train));
  s.val.assign(users.begin() + static_cast<int64_t>(n_train),
               users.begin() + static_cast<int64_t>(n_train + n_val));
  s.test.assign(users.begin() + static_cast<int64_t>(n_train + n_val), users.end());
  return s;
}

std::vector<Episode> build_split_episodes(const std::vector<UserSequence>& users,
                                          const DataConfig& d, int64_t cap) {
  std::vector<Episode> eps;
  eps.reserve(users.size());
  for (const auto& u : users) {
    if (static_cast<int>(u.items.size()) < 3) continue;
    eps.push_back(build_episode(u, d.n_support, d.n_query, d.max_length, d.num_levels));
    if (cap > 0 && static_cast<int64_t>(eps.size()) == cap) break;
  }
  return eps;
}

std::vector<int64_t> level_histogram(const std::vector<UserSequence>& users, int num_levels) {
  std::vector<int64_t> counts(static_cast<size_t>(num_levels), 0);
  for (const auto& u : users)
    for (int r : u.ratings) counts[static_cast<size_t>(r - 1)] += 1;
  return counts;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  csv::write_row(out, {"step", "split", "mode", "loss", "rmse", "mae", "lr"});
  for (const auto& r : rows)
    csv::write_row(out, {std::to_string(r.step), r.split, r.mode, format_metric(r.loss),
                         format_metric(r.rmse), format_metric(r.mae), format_metric(r.lr)});
}

Preprocessed load_prepared_dataset(const RunConfig& cfg) {
  auto log = load_log(cfg.paths.dataset, cfg.data.num_levels);
  return preprocess(log, static_cast<int>(cfg.data.min_item_ratings), cfg.data.max_length,
                    cfg.data.min_length);
}

// ---------------------------------------------------------------------------

int cmd_prepare(const RunConfig& cfg) {
  require_input(cfg.paths.dataset, "dataset");
  auto prepared = load_prepared_dataset(cfg);
  if (prepared.users.empty())
    throw std::runtime_error("no users survive preprocessing; relax the data thresholds");
  auto splits = split_users(prepared.users, cfg.data);

  auto train_eps = build_split_episodes(splits.train, cfg.data, 0);
  auto val_eps = build_split_episodes(splits.val, cfg.data, cfg.data.val_episode_cap);
  auto test_eps = build_split_episodes(splits.test, cfg.data, cfg.data.test_episode_cap);

  fs::create_directories(cfg.paths.episodes);
  write_episodes_jsonl(cfg.paths.episodes + "/train.jsonl", train_eps);
  write_episodes_jsonl(cfg.paths.episodes + "/val.jsonl", val_eps);
  write_episodes_jsonl(cfg.paths.episodes + "/test.jsonl", test_eps);
  write_vocab(cfg.paths.episodes + "/vocab.json", prepared.vocab);

  int64_t n_ratings = 0;
  for (const auto& u : prepared.users) n_ratings += static_cast<int64_t>(u.ratings.size());
  const auto counts = level_histogram(prepared.users, cfg.data.num_levels);
  const double balance = balance_score(counts);
  const double avg_len =
      static_cast<double>(n_ratings) / static_cast<double>(prepared.users.size());

  char line[128];
  std::string report;
  std::snprintf(line, sizeof line, "#Users          %zu\n", prepared.users.size());
  report += line;
  std::snprintf(line, sizeof line, "#Items          %lld\n",
                static_cast<long long>(prepared.vocab.size() - 1));
  report += line;
  std::snprintf(line, sizeof line, "#Ratings        %lld\n", static_cast<long long>(n_ratings));
  report += line;
  std::snprintf(line, sizeof line, "Average length  %.1f\n", avg_len);
  report += line;
  std::snprintf(line, sizeof line, "Balance score   %.2f\n", balance);
  report += line;

  const std::string stats_path = cfg.paths.reports + "/" + cfg.name + "_dataset_stats.txt";
  ensure_parent(stats_path);
  std::ofstream stats(stats_path, std::ios::binary);
  stats << report;
  std::cout << report;
  std::cout << "episodes: train " << train_eps.size() << ", val " << val_eps.size() << ", test "
            << test_eps.size() << "\n";
  return 0;
}

int cmd_synth(const RunConfig& cfg) {
  auto profiles = effective_profiles(cfg);
  ensure_parent(cfg.paths.dataset);
  if (cfg.data.n_users == 0) {
    std::ofstream out(cfg.paths.dataset, std::ios::binary);
    out << "user_id,item_id,rating,timestamp\r\n";
    std::cerr << "warning: n_users is 0; wrote a header-only dataset\n";
    return 0;
  }
  auto users = synthesize(profiles, cfg.data.n_users, cfg.data.n_items, cfg.data.synth_seed);
  write_log_csv(cfg.paths.dataset, users);
  std::cout << "wrote " << cfg.paths.dataset << " (" << users.size() << " users)\n";
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  require_input(cfg.paths.episodes + "/train.jsonl", "episode file");
  require_input(cfg.paths.episodes + "/val.jsonl", "episode file");
  require_input(cfg.paths.episodes + "/vocab.json", "vocabulary");

  auto vocab = read_vocab(cfg.paths.episodes + "/vocab.json");
  auto train_eps = read_episodes_jsonl(cfg.paths.episodes + "/train.jsonl");
  auto val_eps = read_episodes_jsonl(cfg.paths.episodes + "/val.jsonl");
  if (train_eps.empty() && cfg.train.episodes_total > 0)
    throw std::invalid_argument("training episode file is empty; re-run prepare with looser "
                                "data thresholds");

  const auto rc = cfg.recommender(vocab.size());
  const auto ec = cfg.encoder();
  const auto tc = cfg.trainer();
  auto result = train(train_eps, val_eps, rc, ec, tc);

  write_metrics_csv(cfg.paths.reports + "/" + cfg.name + "_metrics.csv", result.log);

  fs::create_directories(cfg.paths.checkpoints);
  Checkpoint final_ckpt;
  final_ckpt.model = result.theta;
  final_ckpt.encoder = result.phi;
  final_ckpt.opt = result.opt;
  final_ckpt.step = tc.episodes_total;
  final_ckpt.mode = cfg.train.mode;
  final_ckpt.config_hash = config_hash(cfg);
  save_checkpoint(cfg.paths.checkpoints + "/" + cfg.name + "_final.ckpt", final_ckpt);

  Checkpoint best_ckpt;
  best_ckpt.model = result.best_theta;
  best_ckpt.encoder = result.best_phi;
  best_ckpt.step = result.best_step;
  best_ckpt.mode = cfg.train.mode;
  best_ckpt.config_hash = config_hash(cfg);
  save_checkpoint(cfg.paths.checkpoints + "/" + cfg.name + "_best.ckpt", best_ckpt);

  std::cout << "trained " << cfg.train.mode << " for " << tc.episodes_total
            << " steps; best validation rmse " << format_metric(result.best_val_rmse) << " at step "
            << result.best_step << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  if (cfg.eval.checkpoint.empty())
    throw std::invalid_argument("eval.checkpoint must name a checkpoint file");
  require_input(cfg.eval.checkpoint, "checkpoint");
  const std::string episodes_path = cfg.paths.episodes + "/" + cfg.eval.split + ".jsonl";
  require_input(episodes_path, "episode file");
  require_input(cfg.paths.episodes + "/vocab.json", "vocabulary");

  auto vocab = read_vocab(cfg.paths.episodes + "/vocab.json");
  auto episodes = read_episodes_jsonl(episodes_path);
  if (cfg.eval.episode_cap > 0 &&
      static_cast<int64_t>(episodes.size()) > cfg.eval.episode_cap)
    episodes.resize(static_cast<size_t>(cfg.eval.episode_cap));

  auto ckpt = load_checkpoint(cfg.eval.checkpoint);
  const auto rc = cfg.recommender(vocab.size());
  if (ckpt.model.at("model/item_emb").rows != rc.item_vocab)
    throw std::invalid_argument("checkpoint vocabulary does not match the prepared dataset");

  EvalOptions opts;
  opts.mode = strategy_from_string(ckpt.mode);
  opts.inner_steps = cfg.train.inner_steps;
  opts.inner_lr = cfg.train.inner_lr;
  opts.threads = cfg.train.threads;
  opts.dataset_tag = cfg.eval.split;
  opts.seed = cfg.train.seed;
  auto report = evaluate(ckpt.model, ckpt.encoder, episodes, rc, cfg.encoder(), opts);

  const std::string report_path = cfg.paths.reports + "/" + cfg.name + "_eval.csv";
  ensure_parent(report_path);
  {
    std::ofstream out(report_path, std::ios::binary);
    csv::write_row(out, {"split", "mode", "seed", "n_predictions", "rmse", "mae"});
    csv::write_row(out, {report.dataset, report.mode, std::to_string(report.seed),
                         std::to_string(report.n_predictions), format_metric(report.rmse),
                         format_metric(report.mae)});
  }
  {
    std::ofstream out(cfg.paths.reports + "/" + cfg.name + "_eval_levels.csv", std::ios::binary);
    csv::write_row(out, {"level", "count", "mean_predicted"});
    for (size_t l = 0; l < report.per_level.size(); ++l)
      csv::write_row(out, {std::to_string(l + 1), std::to_string(report.per_level[l].count),
                           format_metric(report.per_level[l].count > 0
                                             ? report.per_level[l].mean_predicted
                                             : kNoValue)});
  }
  std::cout << cfg.eval.split << " rmse " << format_metric(report.rmse) << ", mae "
            << format_metric(report.mae) << " over " << report.n_predictions << " episodes\n";
  return 0;
}

int cmd_sweep(const RunConfig& cfg) {
  require_input(cfg.paths.dataset, "dataset");
  auto prepared = load_prepared_dataset(cfg);
  auto splits = split_users(prepared.users, cfg.data);

  SweepSpec spec;
  spec.protocol = cfg.sweep.protocol;
  spec.values = cfg.sweep.values;
  if (spec.values.empty())
    spec.values = spec.protocol == "inner_steps" ? std::vector<int>{0, 1, 2, 3, 4, 5}
                                                 : std::vector<int>{10, 15, 20, 25, 30};
  spec.seeds = cfg.sweep.seeds;
  for (const auto& m : cfg.sweep.modes) spec.modes.push_back(strategy_from_string(m));

  EpisodeParams ep;
  ep.n_support = cfg.data.n_support;
  ep.n_query = cfg.data.n_query;
  ep.max_length = cfg.data.max_length;
  ep.num_levels = cfg.data.num_levels;

  auto base = cfg.trainer();
  if (cfg.sweep.episodes_total > 0) base.episodes_total = cfg.sweep.episodes_total;

  auto cells = sweep(spec, splits, ep, cfg.recommender(prepared.vocab.size()), cfg.encoder(),
                     base);

  const std::string path = cfg.paths.reports + "/" + cfg.name + "_sweep.csv";
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary);
  csv::write_row(out, {"protocol", "value", "seed", "mode", "test_rmse", "test_mae",
                       "best_val_rmse"});
  for (const auto& c : cells)
    csv::write_row(out, {c.protocol, std::to_string(c.value), std::to_string(c.seed), c.mode,
                         format_metric(c.test_rmse), format_metric(c.test_mae),
                         format_metric(c.best_val_rmse)});
  std::cout << "sweep wrote " << cells.size() << " cells to " << path << "\n";
  return 0;
}

// Stand-in for hand-picking a user that typifies each rating temperament: the
// user whose empirical level distribution is closest (L1) to the profile.
const UserSequence* representative_user(const std::vector<UserSequence>& users,
                                        const RatingProfile& profile, int num_levels,
                                        int min_length) {
  const UserSequence* best = nullptr;
  double best_dist = std::numeric_limits<double>::infinity();
  for (const auto& u : users) {
    if (static_cast<int>(u.items.size()) < min_length) continue;
    std::vector<double> dist(static_cast<size_t>(num_levels), 0.0);
    for (int r : u.ratings) dist[static_cast<size_t>(r - 1)] += 1.0 / u.ratings.size();
    double d = 0.0;
    for (size_t l = 0; l < dist.size(); ++l) d += std::abs(dist[l] - profile.proportions[l]);
    if (d < best_dist) {
      best_dist = d;
      best = &u;
    }
  }
  return best;
}

int cmd_case_study(const RunConfig& cfg) {
  if (cfg.eval.case_study_checkpoints.empty())
    throw std::invalid_argument("eval.case_study_checkpoints must list at least one checkpoint");
  require_input(cfg.paths.dataset, "dataset");
  for (const auto& p : cfg.eval.case_study_checkpoints) require_input(p, "checkpoint");

  auto prepared = load_prepared_dataset(cfg);
  const auto rc = cfg.recommender(prepared.vocab.size());
  const auto ec = cfg.encoder();

  std::vector<ModeModel> models;
  for (const auto& path : cfg.eval.case_study_checkpoints) {
    auto ckpt = load_checkpoint(path);
    if (ckpt.model.at("model/item_emb").rows != rc.item_vocab)
      throw std::invalid_argument("checkpoint '" + path +
                                  "' does not match the dataset vocabulary");
    ModeModel m;
    m.name = ckpt.mode;
    for (const auto& other : models)
      if (other.name == m.name) m.name += "+";
    m.theta = std::move(ckpt.model);
    m.phi = std::move(ckpt.encoder);
    m.mode = strategy_from_string(ckpt.mode);
    m.inner_steps = cfg.train.inner_steps;
    m.inner_lr = cfg.train.inner_lr;
    models.push_back(std::move(m));
  }

  fs::create_directories(cfg.paths.reports);
  for (const auto& profile : effective_profiles(cfg)) {
    const auto* user = representative_user(prepared.users, profile, cfg.data.num_levels,
                                           cfg.eval.warmup + 2);
    if (user == nullptr)
      throw std::runtime_error("no user long enough to represent profile '" + profile.name + "'");
    auto rows = case_study(models, *user, rc, ec, cfg.eval.warmup);

    const std::string base = cfg.paths.reports + "/" + cfg.name + "_case_study_" + profile.name;
    {
      std::ofstream out(base + ".csv", std::ios::binary);
      csv::write_row(out, {"mode", "step", "predicted", "true"});
      for (const auto& r : rows)
        csv::write_row(out, {r.mode, std::to_string(r.step), format_metric(r.predicted),
                             std::to_string(r.truth)});
    }
    {
      std::ofstream out(base + "_means.csv", std::ios::binary);
      csv::write_row(out, {"mode", "mean_predicted", "mean_true"});
      for (const auto& m : models) {
        double sum_p = 0.0, sum_t = 0.0;
        int64_t n = 0;
        for (const auto& r : rows)
          if (r.mode == m.name) {
            sum_p += r.predicted;
            sum_t += r.truth;
            ++n;
          }
        csv::write_row(out, {m.name, format_metric(sum_p / n), format_metric(sum_t / n)});
      }
    }
    std::cout << "case study for '" << profile.name << "': user " << user->user_index << ", "
              << rows.size() << " rows\n";
  }
  return 0;
}

int run_command(const std::string& name, const CommandOptions& opts) {
  RunConfig cfg;
  try {
    cfg = load_and_resolve(opts, name == "synth");
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  const bool wants_manifest =
      name == "train" || name == "eval" || name == "sweep" || name == "case-study";
  const std::string manifest_name = name == "case-study" ? "case_study" : name;
  const std::string manifest_path =
      cfg.paths.reports + "/" + cfg.name + "_" + manifest_name + "_manifest.json";
  const auto t0 = std::chrono::steady_clock::now();

  auto finish_manifest = [&](const std::string& error) {
    if (!wants_manifest) return;
    try {
      ensure_parent(manifest_path);
      write_manifest(manifest_path, name, cfg, seconds_since(t0), error);
    } catch (const std::exception& e) {
      std::cerr << "warning: could not write manifest: " << e.what() << "\n";
    }
  };

  try {
    int code = 0;
    if (name == "prepare")
      code = cmd_prepare(cfg);
    else if (name == "synth")
      code = cmd_synth(cfg);
    else if (name == "train")
      code = cmd_train(cfg);
    else if (name == "eval")
      code = cmd_eval(cfg);
    else if (name == "sweep")
      code = cmd_sweep(cfg);
    else
      code = cmd_case_study(cfg);
    finish_manifest({});
    return code;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    finish_manifest(e.what());
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learned adaptive-loss trainer for sequential rating prediction"};
  app.require_subcommand(1);

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"prepare", "Preprocess a ratings CSV into episode files and a stats report"},
      {"synth", "Generate a synthetic ratings dataset from rating profiles"},
      {"train", "Meta-train on prepared episodes"},
      {"eval", "Evaluate a checkpoint on a prepared split"},
      {"sweep", "Train/evaluate over a value grid (adaptation steps or sequence length)"},
      {"case-study", "Rolling per-user predictions for representative rating profiles"},
  };
  std::vector<CommandOptions> opts(commands.size());
  std::vector<CLI::App*> subs;
  for (size_t i = 0; i < commands.size(); ++i) {
    auto* sub = app.add_subcommand(commands[i].first, commands[i].second);
    add_common(sub, opts[i]);
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  for (size_t i = 0; i < subs.size(); ++i)
    if (subs[i]->parsed()) return run_command(commands[i].first, opts[i]);
  return 2;
}
