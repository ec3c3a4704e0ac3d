#include "metarec/eval.hpp"

#include <cmath>
#include <stdexcept>

namespace metarec {

double denormalize(double prediction, int num_levels) {
  return prediction * (num_levels - 1.0) + 1.0;
}

namespace {

// Adapt on the support set inside a throwaway graph and pull the adapted
// parameters back out as plain tensors.
ParameterSet adapted_parameters(const ParameterSet& theta, const ParameterSet& phi,
                                const Episode& episode, LossStrategy mode,
                                const RecommenderConfig& rc, const EncoderConfig& ec,
                                double inner_lr, int inner_steps) {
  const int steps = mode == LossStrategy::kBasic ? 0 : inner_steps;
  ad::Graph g;
  g.reserve(1 << 12);
  auto theta_vars = lift_params(g, theta, true);
  auto phi_vars = lift_params(g, phi, false);
  // No outer gradient is taken here, so detaching the inner gradients changes
  // nothing and skips the second-order bookkeeping.
  auto adapted = inner_adapt(g, theta_vars, phi_vars, episode.support, mode, rc, ec, inner_lr,
                             steps, /*first_order=*/true);
  return materialize(g, adapted);
}

SubSequence padded_prefix(const UserSequence& user, int64_t take, int max_length,
                          int num_levels) {
  SubSequence sub;
  sub.real_length = take;
  sub.item_ids.assign(static_cast<size_t>(max_length), 0);
  sub.rating_levels.assign(static_cast<size_t>(max_length), 0);
  sub.target_ratings.assign(static_cast<size_t>(max_length), 0.0);
  sub.loss_mask.assign(static_cast<size_t>(max_length), 0.0);
  const int64_t pad = max_length - take;
  for (int64_t i = 0; i < take; ++i) {
    sub.item_ids[static_cast<size_t>(pad + i)] = user.items[static_cast<size_t>(i)];
    sub.rating_levels[static_cast<size_t>(pad + i)] = user.ratings[static_cast<size_t>(i)];
    sub.target_ratings[static_cast<size_t>(pad + i)] =
        (user.ratings[static_cast<size_t>(i)] - 1.0) / (num_levels - 1.0);
    sub.loss_mask[static_cast<size_t>(pad + i)] = 1.0;
  }
  return sub;
}

}  // namespace

MetricsReport evaluate(const ParameterSet& theta, const ParameterSet& phi,
                       std::span<const Episode> episodes, const RecommenderConfig& rc,
                       const EncoderConfig& ec, const EvalOptions& opts) {
  if (episodes.empty()) throw std::invalid_argument("evaluate: no episodes");

  struct Outcome {
    double predicted = 0.0;
    int truth = 0;
  };
  std::vector<Outcome> outcomes(episodes.size());
  parallel_for(opts.threads, static_cast<int64_t>(episodes.size()), [&](int64_t i) {
    const Episode& ep = episodes[static_cast<size_t>(i)];
    if (ep.query.empty()) throw std::invalid_argument("evaluate: episode without query slices");
    auto adapted =
        adapted_parameters(theta, phi, ep, opts.mode, rc, ec, opts.inner_lr, opts.inner_steps);
    const SubSequence& probe = ep.query.back();  // longest context
    const auto preds = forward(adapted, rc, probe);
    outcomes[static_cast<size_t>(i)] = {denormalize(preds.back(), rc.num_levels),
                                        probe.rating_levels.back()};
  });

  MetricsReport report;
  report.mode = strategy_to_string(opts.mode);
  report.dataset = opts.dataset_tag;
  report.seed = opts.seed;
  report.per_level.resize(static_cast<size_t>(rc.num_levels));
  std::vector<double> level_sums(static_cast<size_t>(rc.num_levels), 0.0);
  double se = 0.0, ae = 0.0;
  for (const auto& o : outcomes) {
    const double err = o.predicted - o.truth;
    se += err * err;
    ae += std::abs(err);
    if (o.truth < 1 || o.truth > rc.num_levels)
      throw std::runtime_error("evaluate: rating level out of range");
    report.per_level[static_cast<size_t>(o.truth - 1)].count += 1;
    level_sums[static_cast<size_t>(o.truth - 1)] += o.predicted;
  }
  report.n_predictions = static_cast<int64_t>(outcomes.size());
  const double n = static_cast<double>(report.n_predictions);
  report.rmse = std::sqrt(se / n);
  report.mae = ae / n;
  for (size_t l = 0; l < report.per_level.size(); ++l)
    if (report.per_level[l].count > 0)
      report.per_level[l].mean_predicted = level_sums[l] / report.per_level[l].count;
  return report;
}

BaselineResult constant_baseline(const std::vector<int64_t>& level_counts, int c) {
  int64_t n = 0;
  double se = 0.0, ae = 0.0;
  for (size_t l = 0; l < level_counts.size(); ++l) {
    const int64_t count = level_counts[l];
    if (count < 0) throw std::invalid_argument("constant_baseline: negative count");
    const double err = c - (static_cast<double>(l) + 1.0);
    n += count;
    se += count * err * err;
    ae += count * std::abs(err);
  }
  if (n == 0) throw std::invalid_argument("constant_baseline: no ratings");
  return {std::sqrt(se / static_cast<double>(n)), ae / static_cast<double>(n)};
}

std::vector<CaseStudyRow> case_study(std::span<const ModeModel> models, const UserSequence& user,
                                     const RecommenderConfig& rc, const EncoderConfig& ec,
                                     int warmup) {
  const int64_t length = static_cast<int64_t>(user.items.size());
  if (warmup < 1 || warmup >= length)
    throw std::invalid_argument("case_study: warmup must be in [1, length)");

  const Episode episode = build_episode(user, 25, 3, rc.max_length, rc.num_levels);
  std::vector<CaseStudyRow> rows;
  rows.reserve(models.size() * static_cast<size_t>(length - warmup));
  for (const auto& model : models) {
    auto adapted = adapted_parameters(model.theta, model.phi, episode, model.mode, rc, ec,
                                      model.inner_lr, model.inner_steps);
    for (int64_t pos = warmup + 1; pos <= length; ++pos) {
      const SubSequence prefix = padded_prefix(user, pos, rc.max_length, rc.num_levels);
      const auto preds = forward(adapted, rc, prefix);
      rows.push_back({model.name, pos, denormalize(preds.back(), rc.num_levels),
                      user.ratings[static_cast<size_t>(pos - 1)]});
    }
  }
  return rows;
}

namespace {

std::vector<Episode> episodes_from(const std::vector<UserSequence>& seqs,
                                   const EpisodeParams& ep) {
  std::vector<Episode> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) {
    const int64_t len = static_cast<int64_t>(s.items.size());
    if (len < 3 || len > ep.max_length) continue;
    out.push_back(build_episode(s, ep.n_support, ep.n_query, ep.max_length, ep.num_levels));
  }
  return out;
}

}  // namespace

std::vector<SweepCell> sweep(const SweepSpec& spec, const SplitSequences& splits,
                             const EpisodeParams& ep, const RecommenderConfig& rc,
                             const EncoderConfig& ec, const TrainConfig& base) {
  if (spec.values.empty() || spec.seeds.empty() || spec.modes.empty())
    throw std::invalid_argument("sweep: values, seeds and modes must be non-empty");
  const bool by_length = spec.protocol == "length_sweep";
  if (!by_length && spec.protocol != "inner_steps")
    throw std::invalid_argument("sweep: unknown protocol " + spec.protocol);

  std::vector<Episode> fixed_train, fixed_val, fixed_test;
  if (!by_length) {
    fixed_train = episodes_from(splits.train, ep);
    fixed_val = episodes_from(splits.val, ep);
    fixed_test = episodes_from(splits.test, ep);
  }

  std::vector<SweepCell> cells;
  for (int value : spec.values) {
    for (uint64_t seed : spec.seeds) {
      std::vector<Episode> train_eps, val_eps, test_eps;
      if (by_length) {
        // One slicing draw per (value, seed), shared by every mode so the
        // comparison across modes sees identical data.
        const uint64_t slice_seed = seed * 1000003ull + static_cast<uint64_t>(value);
        train_eps = episodes_from(
            length_sweep_slice(splits.train, value, slice_seed, ep.max_length), ep);
        val_eps = episodes_from(length_sweep_slice(splits.val, value, slice_seed + 1, ep.max_length),
                                ep);
        test_eps = episodes_from(
            length_sweep_slice(splits.test, value, slice_seed + 2, ep.max_length), ep);
      }
      const auto& tr = by_length ? train_eps : fixed_train;
      const auto& va = by_length ? val_eps : fixed_val;
      const auto& te = by_length ? test_eps : fixed_test;

      for (LossStrategy mode : spec.modes) {
        TrainConfig tc = base;
        tc.mode = mode;
        tc.seed = seed;
        if (!by_length) tc.inner_steps = value;
        auto result = train(tr, va, rc, ec, tc);

        EvalOptions opts;
        opts.mode = mode;
        opts.inner_steps = tc.effective_inner_steps();
        opts.inner_lr = tc.inner_lr;
        opts.threads = base.threads;
        opts.dataset_tag = "test";
        opts.seed = seed;
        auto report = evaluate(result.best_theta, result.best_phi, te, rc, ec, opts);
        cells.push_back({spec.protocol, value, seed, strategy_to_string(mode), report.rmse,
                         report.mae, result.best_val_rmse});
      }
    }
  }
  return cells;
}

}  // namespace metarec
