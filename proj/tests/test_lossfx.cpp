#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "metarec/lossfx.hpp"
#include "metarec/rng.hpp"

using namespace metarec;
namespace ad = metarec::ad;

namespace {

SubSequence make_sub(const std::vector<int64_t>& items, const std::vector<int>& levels,
                     int pad_to, int num_levels = 5) {
  REQUIRE(items.size() == levels.size());
  SubSequence sub;
  sub.real_length = static_cast<int64_t>(items.size());
  sub.item_ids.assign(static_cast<size_t>(pad_to), 0);
  sub.rating_levels.assign(static_cast<size_t>(pad_to), 0);
  sub.target_ratings.assign(static_cast<size_t>(pad_to), 0.0);
  sub.loss_mask.assign(static_cast<size_t>(pad_to), 0.0);
  const size_t off = static_cast<size_t>(pad_to) - items.size();
  for (size_t i = 0; i < items.size(); ++i) {
    sub.item_ids[off + i] = items[i];
    sub.rating_levels[off + i] = levels[i];
    sub.target_ratings[off + i] = (levels[i] - 1.0) / (num_levels - 1.0);
    sub.loss_mask[off + i] = 1.0;
  }
  return sub;
}

RecommenderConfig batch_config(int pad_to) {
  RecommenderConfig rc;
  rc.item_vocab = 50;
  rc.max_length = pad_to;
  return rc;
}

Batch one_sub_batch(const SubSequence& sub) {
  return make_batch(std::span<const SubSequence>(&sub, 1), batch_config(7), /*trim=*/false);
}

const double kLn2 = std::log(2.0);

}  // namespace

TEST_CASE("strategy names round-trip") {
  for (auto s : {LossStrategy::kBasic, LossStrategy::kMaml, LossStrategy::kMelo,
                 LossStrategy::kFocal, LossStrategy::kStats})
    CHECK(strategy_from_string(strategy_to_string(s)) == s);
  CHECK_THROWS(strategy_from_string("quadratic"));
}

TEST_CASE("zero encoder parameters emit the softplus-of-zero weight everywhere") {
  EncoderConfig ec;
  auto phi = init_encoder_params(ec, LossStrategy::kMelo, 3);
  for (auto& [name, t] : phi) t.fill(0.0);
  auto sub = make_sub({1, 2, 3}, {5, 1, 4}, 7);
  for (double w : encode_weights(phi, ec, sub)) CHECK(w == doctest::Approx(kLn2).epsilon(1e-15));

  SUBCASE("rectified variant emits zero instead") {
    EncoderConfig rec = ec;
    rec.relu_weights = true;
    for (double w : encode_weights(phi, rec, sub)) CHECK(w == 0.0);
  }
}

TEST_CASE("adaptive weights are never negative") {
  EncoderConfig ec;
  Rng rng(99);
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto phi = init_encoder_params(ec, LossStrategy::kMelo, seed);
    std::vector<int64_t> items;
    std::vector<int> levels;
    const int64_t len = rng.uniform_int(2, 7);
    for (int64_t i = 0; i < len; ++i) {
      items.push_back(rng.uniform_int(1, 40));
      levels.push_back(static_cast<int>(rng.uniform_int(1, 5)));
    }
    for (double w : encode_weights(phi, ec, make_sub(items, levels, 7))) CHECK(w > 0.0);
  }
}

TEST_CASE("weights depend on the order of the ratings") {
  EncoderConfig ec;
  auto phi = init_encoder_params(ec, LossStrategy::kMelo, 42);
  auto up = encode_weights(phi, ec, make_sub({3, 4}, {1, 5}, 7));
  auto down = encode_weights(phi, ec, make_sub({3, 4}, {5, 1}, 7));
  CHECK(up.back() != down.back());
}

TEST_CASE("the amount of left padding does not change the weights") {
  EncoderConfig ec;
  auto phi = init_encoder_params(ec, LossStrategy::kMelo, 17);
  auto narrow = encode_weights(phi, ec, make_sub({3, 4, 9}, {2, 5, 1}, 5));
  auto wide = encode_weights(phi, ec, make_sub({3, 4, 9}, {2, 5, 1}, 11));
  for (size_t i = 0; i < 3; ++i)
    CHECK(narrow[narrow.size() - 1 - i] == wide[wide.size() - 1 - i]);
}

TEST_CASE("weighted episode loss is the mean of weighted per-sequence sums") {
  CHECK(weighted_episode_loss({{2.0, 4.0}}, {{0.1, 0.2}}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(weighted_episode_loss({{1.0, 2.0}, {3.0, 0.0}}, {{0.5, 0.25}, {1.0, 7.0}}) ==
        doctest::Approx(2.0).epsilon(1e-15));
  CHECK(weighted_episode_loss({{5.0, 5.0}}, {{0.0, 0.0}}) == 0.0);
  CHECK_THROWS(weighted_episode_loss({{1.0}}, {{1.0, 2.0}}));
  CHECK_THROWS(weighted_episode_loss({}, {}));

  SUBCASE("graph variant agrees") {
    ad::Graph g;
    auto gm = g.constant(Tensor(4, 1, {1.0, 2.0, 3.0, 0.0}));
    auto ls = g.constant(Tensor(4, 1, {0.5, 0.25, 1.0, 7.0}));
    CHECK(g.value(weighted_episode_loss(g, gm, ls, 2)).scalar() ==
          doctest::Approx(2.0).epsilon(1e-15));
  }
}

TEST_CASE("unit weights recover the unweighted episode loss exactly") {
  auto s1 = make_sub({3, 7, 1}, {5, 1, 3}, 7);
  auto s2 = make_sub({5, 9}, {2, 4}, 7);
  std::vector<SubSequence> subs{s1, s2};
  auto batch = make_batch(subs, batch_config(7));

  ad::Graph g;
  EncoderConfig ec;
  GraphParams no_phi;
  Rng rng(5);
  Tensor preds(batch.count * batch.window, 1);
  for (auto& v : preds.data) v = rng.uniform01();
  auto p = g.constant(preds);

  auto plain = inner_episode_loss(g, LossStrategy::kMaml, no_phi, p, batch, ec);
  Tensor ones(batch.count * batch.window, 1);
  ones.fill(1.0);
  auto weighted =
      inner_episode_loss(g, LossStrategy::kMelo, no_phi, p, batch, ec, g.constant(ones));
  CHECK(g.value(weighted).scalar() == g.value(plain).scalar());
}

TEST_CASE("focal exponent zero reproduces the squared error bit for bit") {
  auto sub = make_sub({3, 7, 1, 2}, {5, 1, 3, 4}, 7);
  Rng rng(8);
  std::vector<double> preds(7);
  for (auto& v : preds) v = rng.uniform01();
  auto plain = itemwise_loss(preds, sub);
  auto focal = focal_regression_loss(preds, sub, 0.0);
  for (size_t t = 0; t < plain.size(); ++t) CHECK(focal[t] == plain[t]);

  SUBCASE("graph variant agrees") {
    ad::Graph g;
    auto batch = one_sub_batch(sub);
    Tensor p(7, 1, std::vector<double>(preds));
    auto pv = g.constant(std::move(p));
    auto a = g.value(itemwise_loss_batch(g, pv, batch));
    auto b = g.value(focal_loss_batch(g, pv, batch, 0.0));
    for (size_t t = 0; t < a.data.size(); ++t) CHECK(a.data[t] == b.data[t]);
  }
}

TEST_CASE("focal weighting matches the definition and shrinks small errors") {
  auto sub = make_sub({3}, {4}, 1);  // target 0.75
  std::vector<double> preds{0.25};   // error -0.5
  auto focal = focal_regression_loss(preds, sub, 1.0);
  CHECK(focal[0] == doctest::Approx(0.125).epsilon(1e-15));

  double previous = focal_regression_loss(preds, sub, 0.0)[0];
  for (double gf : {0.5, 1.0, 2.0, 4.0}) {
    const double current = focal_regression_loss(preds, sub, gf)[0];
    CHECK(current < previous);
    previous = current;
  }
  CHECK_THROWS(focal_regression_loss(preds, sub, -1.0));
}

TEST_CASE("statistics loss with zero parameters is a scaled mean of per-sequence losses") {
  auto s1 = make_sub({3, 7, 1}, {5, 1, 3}, 7);
  auto s2 = make_sub({5, 9}, {2, 4}, 7);
  std::vector<SubSequence> subs{s1, s2};
  auto batch = make_batch(subs, batch_config(7));

  EncoderConfig ec;
  auto phi = init_encoder_params(ec, LossStrategy::kStats, 3);
  for (auto& [name, t] : phi) t.fill(0.0);

  ad::Graph g;
  auto phi_vars = lift_params(g, phi, false);
  Rng rng(12);
  Tensor preds(batch.count * batch.window, 1);
  for (auto& v : preds.data) v = rng.uniform01();
  auto p = g.constant(preds);
  const double loss = g.value(stats_episode_loss(g, phi_vars, p, batch, ec)).scalar();

  double expected = 0.0;
  for (int64_t b = 0; b < batch.count; ++b) {
    double sum = 0.0;
    int64_t n = 0;
    for (int64_t t = 0; t < batch.window; ++t) {
      const size_t r = static_cast<size_t>(b * batch.window + t);
      if (batch.real_mask.data[r] != 1.0) continue;
      const double e = preds.data[r] - batch.targets.data[r];
      sum += e * e;
      ++n;
    }
    expected += kLn2 * (sum / static_cast<double>(n));
  }
  expected /= static_cast<double>(batch.count);
  CHECK(loss == doctest::Approx(expected).epsilon(1e-12));
  CHECK(loss >= 0.0);
}

TEST_CASE("statistics feature toggles control the feature width") {
  EncoderConfig ec;
  CHECK(ec.stats_feature_width() == 13);  // mean + std + 2*levels + mean loss
  ec.stats_use_pred_dist = false;
  CHECK(ec.stats_feature_width() == 8);
  ec.stats_use_label_dist = false;
  CHECK(ec.stats_feature_width() == 3);
  ec.stats_use_std = false;
  ec.stats_use_mean_loss = false;
  CHECK(ec.stats_feature_width() == 1);
  auto phi = init_encoder_params(ec, LossStrategy::kStats, 1);
  CHECK(phi.at("encoder/mlp/w1").rows == 1);

  ec.stats_use_mean = false;
  CHECK_THROWS(ec.validate());

  SUBCASE("a reduced feature set still evaluates") {
    EncoderConfig slim;
    slim.stats_use_pred_dist = false;
    slim.stats_use_std = false;
    auto slim_phi = init_encoder_params(slim, LossStrategy::kStats, 2);
    auto sub = make_sub({3, 7, 1}, {5, 1, 3}, 7);
    auto batch = one_sub_batch(sub);
    ad::Graph g;
    auto vars = lift_params(g, slim_phi, false);
    Tensor preds(batch.count * batch.window, 1);
    preds.fill(0.5);
    auto loss = stats_episode_loss(g, vars, g.constant(std::move(preds)), batch, slim);
    CHECK(std::isfinite(g.value(loss).scalar()));
  }
}

TEST_CASE("encoder gradients agree with finite differences") {
  auto s1 = make_sub({3, 7, 1}, {5, 1, 3}, 7);
  auto s2 = make_sub({5, 9}, {2, 4}, 7);
  std::vector<SubSequence> subs{s1, s2};
  auto batch = make_batch(subs, batch_config(7));
  Rng rng(4);

  SUBCASE("recurrent weight encoder") {
    EncoderConfig ec;
    ec.rating_embed_dim = 4;
    ec.hidden_dim = 4;
    auto phi = init_encoder_params(ec, LossStrategy::kMelo, 6);
    ad::Graph g;
    auto vars = lift_params(g, phi, true);
    Tensor losses(batch.count * batch.window, 1);
    for (auto& v : losses.data) v = rng.uniform01();
    auto gammas = encode_weights_batch(g, vars, batch, ec);
    auto loss = weighted_episode_loss(g, gammas, g.constant(std::move(losses)), batch.count);
    auto wrt = ordered_vars(vars);
    CHECK(g.finite_difference_check(loss, wrt, 1e-5) < 1e-6);
  }

  SUBCASE("statistics perceptron") {
    EncoderConfig ec;
    ec.hidden_dim = 4;
    auto phi = init_encoder_params(ec, LossStrategy::kStats, 6);
    ad::Graph g;
    auto vars = lift_params(g, phi, true);
    Tensor preds(batch.count * batch.window, 1);
    for (auto& v : preds.data) v = 0.2 + 0.6 * rng.uniform01();
    auto loss = stats_episode_loss(g, vars, g.constant(std::move(preds)), batch, ec);
    auto wrt = ordered_vars(vars);
    CHECK(g.finite_difference_check(loss, wrt, 1e-5) < 1e-6);
  }
}

TEST_CASE("encoder initialization freezes the pad rating row") {
  EncoderConfig ec;
  auto phi = init_encoder_params(ec, LossStrategy::kMelo, 11);
  for (int64_t j = 0; j < ec.rating_embed_dim; ++j)
    CHECK(phi.at("encoder/rating_emb").at(0, j) == 0.0);
  CHECK(init_encoder_params(ec, LossStrategy::kMaml, 11).empty());
  CHECK(init_encoder_params(ec, LossStrategy::kBasic, 11).empty());
  CHECK(init_encoder_params(ec, LossStrategy::kFocal, 11).empty());
}
