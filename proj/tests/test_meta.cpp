#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdlib>
#include <vector>

#include "doctest.h"
#include "metarec/eval.hpp"
#include "metarec/meta.hpp"
#include "metarec/rng.hpp"

using namespace metarec;
namespace ad = metarec::ad;

namespace {

RecommenderConfig tiny_rc() {
  RecommenderConfig rc;
  rc.item_vocab = 30;
  rc.embed_dim = 4;
  rc.hidden_dim = 4;
  rc.max_length = 8;
  return rc;
}

EncoderConfig tiny_ec() {
  EncoderConfig ec;
  ec.rating_embed_dim = 3;
  ec.hidden_dim = 3;
  return ec;
}

TrainConfig tiny_tc(LossStrategy mode) {
  TrainConfig tc;
  tc.mode = mode;
  tc.inner_lr = 0.05;
  tc.outer_lr = 0.01;
  tc.inner_steps = 2;
  tc.meta_batch_size = 2;
  tc.episodes_total = 3;
  tc.val_interval = 2;
  tc.seed = 9;
  return tc;
}

UserSequence make_seq(int64_t user, const std::vector<int64_t>& items,
                      const std::vector<int>& ratings) {
  UserSequence s;
  s.user_index = user;
  s.items = items;
  s.ratings = ratings;
  return s;
}

std::vector<Episode> tiny_episodes() {
  std::vector<Episode> eps;
  eps.push_back(build_episode(make_seq(0, {3, 7, 1, 12, 5}, {5, 1, 3, 4, 2}), 3, 2, 8));
  eps.push_back(build_episode(make_seq(1, {9, 2, 14, 6}, {2, 4, 1, 5}), 3, 2, 8));
  eps.push_back(build_episode(make_seq(2, {4, 11, 8, 3, 10, 7}, {3, 3, 5, 2, 1, 4}), 3, 2, 8));
  return eps;
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.data) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace

TEST_CASE("cosine schedule hits both endpoints and decays monotonically") {
  const double beta = 1e-3, beta_min = 1e-5;
  CHECK(cosine_lr(beta, beta_min, 0, 100) == doctest::Approx(beta).epsilon(1e-15));
  CHECK(cosine_lr(beta, beta_min, 100, 100) == doctest::Approx(beta_min).epsilon(1e-12));
  CHECK(cosine_lr(beta, beta_min, 50, 100) ==
        doctest::Approx(0.5 * (beta + beta_min)).epsilon(1e-12));
  double prev = cosine_lr(beta, beta_min, 0, 100);
  for (int s = 1; s <= 100; ++s) {
    const double cur = cosine_lr(beta, beta_min, s, 100);
    CHECK(cur <= prev);
    prev = cur;
  }
}

TEST_CASE("gradient clipping caps the joint norm and reports the raw one") {
  std::map<std::string, Tensor> grads;
  grads.emplace("a", Tensor(1, 2, {3.0, 0.0}));
  grads.emplace("b", Tensor(1, 1, {4.0}));  // joint norm 5

  SUBCASE("norm below the threshold is untouched") {
    CHECK(clip_global_norm(grads, 10.0) == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(grads.at("a").data[0] == 3.0);
    CHECK(grads.at("b").data[0] == 4.0);
  }

  SUBCASE("norm above the threshold is scaled onto it") {
    CHECK(clip_global_norm(grads, 1.0) == doctest::Approx(5.0).epsilon(1e-15));
    double sq = 0.0;
    for (const auto& [name, g] : grads)
      for (double v : g.data) sq += v * v;
    CHECK(std::sqrt(sq) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(grads.at("a").data[0] == doctest::Approx(0.6).epsilon(1e-12));
  }
}

TEST_CASE("the optimizer takes the textbook first step") {
  ParameterSet params;
  params.emplace("p", Tensor(1, 2, {0.0, 1.0}));
  std::map<std::string, Tensor> grads;
  grads.emplace("p", Tensor(1, 2, {0.3, -0.2}));
  OptimizerState opt;
  adam_update(params, grads, opt, 0.1);
  CHECK(opt.step == 1);
  // One step: mhat = g, vhat = g^2, update = -lr * g / (|g| + eps).
  CHECK(params.at("p").data[0] ==
        doctest::Approx(-0.1 * 0.3 / (0.3 + 1e-8)).epsilon(1e-12));
  CHECK(params.at("p").data[1] ==
        doctest::Approx(1.0 - 0.1 * -0.2 / (0.2 + 1e-8)).epsilon(1e-12));
  CHECK_THROWS(adam_update(params, std::map<std::string, Tensor>{}, opt, 0.1));
}

TEST_CASE("unrolled adaptation reproduces the closed-form quadratic meta-gradient") {
  const double a = 0.7, c = -0.4, alpha = 0.15, theta0 = 2.0;
  for (int J : {1, 2, 3}) {
    for (bool first_order : {false, true}) {
      CAPTURE(J);
      CAPTURE(first_order);
      ad::Graph g;
      auto t0 = g.leaf(scalar_tensor(theta0), true, "theta");
      GraphParams start;
      start.vars.emplace("theta", t0);
      InnerLossFn loss_fn = [&](ad::Graph& gg, const GraphParams& cur) {
        auto shifted = gg.affine(cur.at("theta"), 1.0, -c);
        return gg.affine(gg.square(shifted), 0.5 * a, 0.0);
      };
      auto adapted = adapt_by_gradient(g, start, loss_fn, alpha, J, first_order);
      auto meta_loss = loss_fn(g, adapted);
      std::vector<ad::Var> wrt{t0};
      const double got = g.value(g.gradient(meta_loss, wrt)[0]).scalar();
      const int expo = first_order ? J : 2 * J;
      const double want = a * (theta0 - c) * std::pow(1.0 - alpha * a, expo);
      CHECK(got == doctest::Approx(want).epsilon(1e-10));
    }
  }
}

TEST_CASE("one inner step is plain gradient descent on the support loss") {
  auto rc = tiny_rc();
  auto ec = tiny_ec();
  auto theta = init_params(rc, 5);
  auto ep = tiny_episodes()[0];

  // Reference gradient of the plain support loss at theta.
  ParameterSet manual;
  {
    ad::Graph g;
    auto vars = lift_params(g, theta, true);
    auto batch = make_batch(ep.support, rc);
    GraphParams no_phi;
    auto loss = inner_episode_loss(g, LossStrategy::kMaml, no_phi,
                                   forward_batch(g, vars, batch, rc), batch, ec);
    auto wrt = ordered_vars(vars);
    auto grads = g.gradient(loss, wrt);
    size_t k = 0;
    for (const auto& [name, t] : theta) {
      Tensor next = t;
      const Tensor& gv = g.value(grads[k++]);
      for (size_t i = 0; i < next.data.size(); ++i) next.data[i] -= 0.05 * gv.data[i];
      manual.emplace(name, std::move(next));
    }
  }

  ad::Graph g;
  auto vars = lift_params(g, theta, true);
  GraphParams no_phi;
  auto adapted = inner_adapt(g, vars, no_phi, ep.support, LossStrategy::kMaml, rc, ec, 0.05, 1,
                             /*first_order=*/false);
  auto got = materialize(g, adapted);
  for (const auto& [name, t] : manual) {
    const Tensor& gt = got.at(name);
    REQUIRE(gt.same_shape(t));
    for (size_t i = 0; i < t.data.size(); ++i)
      CHECK(gt.data[i] == doctest::Approx(t.data[i]).epsilon(1e-15));
  }
}

TEST_CASE("zero inner steps return the parameters untouched") {
  auto rc = tiny_rc();
  auto theta = init_params(rc, 5);
  auto ep = tiny_episodes()[0];
  ad::Graph g;
  auto vars = lift_params(g, theta, true);
  GraphParams no_phi;
  auto adapted = inner_adapt(g, vars, no_phi, ep.support, LossStrategy::kMaml, tiny_rc(),
                             tiny_ec(), 0.05, 0, false);
  for (const auto& [name, var] : vars.vars) CHECK(adapted.at(name).id == var.id);

  TrainConfig basic = tiny_tc(LossStrategy::kBasic);
  CHECK(basic.effective_inner_steps() == 0);
  TrainConfig melo = tiny_tc(LossStrategy::kMelo);
  CHECK(melo.effective_inner_steps() == 2);
}

TEST_CASE("query loss is the unweighted mean of masked squared errors") {
  auto rc = tiny_rc();
  auto theta = init_params(rc, 5);
  auto ep = tiny_episodes()[2];

  double expected = 0.0;
  for (const auto& q : ep.query) {
    auto preds = forward(theta, rc, q);
    auto losses = itemwise_loss(preds, q);
    for (double v : losses) expected += v;
  }
  expected /= static_cast<double>(ep.query.size());

  ad::Graph g;
  auto vars = lift_params(g, theta, false);
  CHECK(g.value(query_loss(g, vars, ep.query, rc)).scalar() ==
        doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("unit adaptive weights reproduce the plain meta-gradient exactly") {
  auto rc = tiny_rc();
  auto ec = tiny_ec();
  auto theta = init_params(rc, 5);
  auto phi = init_encoder_params(ec, LossStrategy::kMelo, 6);
  auto ep = tiny_episodes()[0];

  auto tc_maml = tiny_tc(LossStrategy::kMaml);
  auto tc_melo = tiny_tc(LossStrategy::kMelo);
  ParameterSet no_phi;
  auto plain = episode_gradients(theta, no_phi, ep, rc, ec, tc_maml);
  auto unit = episode_gradients(theta, phi, ep, rc, ec, tc_melo, /*force_unit_gamma=*/true);

  CHECK(unit.loss == plain.loss);
  for (const auto& [name, g] : plain.theta) {
    const Tensor& u = unit.theta.at(name);
    REQUIRE(u.same_shape(g));
    for (size_t i = 0; i < g.data.size(); ++i) CHECK(u.data[i] == g.data[i]);
  }
  for (const auto& [name, g] : unit.phi) CHECK(max_abs(g) == 0.0);
}

TEST_CASE("first-order adaptation severs the encoder gradient") {
  auto rc = tiny_rc();
  auto ec = tiny_ec();
  auto theta = init_params(rc, 5);
  auto phi = init_encoder_params(ec, LossStrategy::kMelo, 6);
  auto ep = tiny_episodes()[1];

  auto tc = tiny_tc(LossStrategy::kMelo);
  tc.first_order = true;
  auto fo = episode_gradients(theta, phi, ep, rc, ec, tc);
  for (const auto& [name, g] : fo.phi) CHECK(max_abs(g) == 0.0);

  tc.first_order = false;
  auto so = episode_gradients(theta, phi, ep, rc, ec, tc);
  double phi_mag = 0.0;
  for (const auto& [name, g] : so.phi) phi_mag = std::max(phi_mag, max_abs(g));
  CHECK(phi_mag > 0.0);
}

TEST_CASE("episode meta-gradients agree with finite differences") {
  auto rc = tiny_rc();
  auto ec = tiny_ec();
  auto theta = init_params(rc, 5);
  auto ep = tiny_episodes()[0];
  const double eps = 1e-5;

  auto fd_check = [&](const ParameterSet& th, const ParameterSet& ph, const TrainConfig& tc,
                      bool check_phi) {
    auto analytic = episode_gradients(th, ph, ep, rc, ec, tc);
    const auto& side = check_phi ? analytic.phi : analytic.theta;
    for (const auto& [name, grad] : side) {
      // Probe the element with the largest gradient so the relative error is
      // measured where it matters.
      size_t best = 0;
      for (size_t i = 0; i < grad.data.size(); ++i)
        if (std::abs(grad.data[i]) > std::abs(grad.data[best])) best = i;
      if (grad.data[best] == 0.0) continue;

      auto probe = [&](double delta) {
        ParameterSet th2 = th, ph2 = ph;
        auto& target = check_phi ? ph2 : th2;
        target.at(name).data[best] += delta;
        return episode_gradients(th2, ph2, ep, rc, ec, tc).loss;
      };
      const double fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
      const double an = grad.data[best];
      const double rel = std::abs(fd - an) / (std::abs(fd) + std::abs(an) + 1e-12);
      CAPTURE(name);
      CHECK(rel < 1e-4);
    }
  };

  SUBCASE("plain second-order meta-gradient") {
    ParameterSet no_phi;
    fd_check(theta, no_phi, tiny_tc(LossStrategy::kMaml), false);
  }
  SUBCASE("meta-gradient through the adaptive weights") {
    auto phi = init_encoder_params(ec, LossStrategy::kMelo, 6);
    fd_check(theta, phi, tiny_tc(LossStrategy::kMelo), false);
    fd_check(theta, phi, tiny_tc(LossStrategy::kMelo), true);
  }
  SUBCASE("statistics-weighted meta-gradient") {
    auto phi = init_encoder_params(ec, LossStrategy::kStats, 6);
    fd_check(theta, phi, tiny_tc(LossStrategy::kStats), false);
    fd_check(theta, phi, tiny_tc(LossStrategy::kStats), true);
  }
}

TEST_CASE("an outer step is one optimizer update over the episode batch") {
  auto rc = tiny_rc();
  auto ec = tiny_ec();
  auto tc = tiny_tc(LossStrategy::kMelo);
  auto theta = init_params(rc, 5);
  auto phi = init_encoder_params(ec, LossStrategy::kMelo, 6);
  auto before = theta;
  auto eps = tiny_episodes();
  OptimizerState opt;

  auto res = outer_step(theta, phi, std::span<const Episode>(eps.data(), 2), rc, ec, tc, opt,
                        1e-3);
  CHECK(opt.step == 1);
  CHECK(res.grad_norm > 0.0);
  CHECK(std::isfinite(res.mean_query_loss));
  bool changed = false;
  for (const auto& [name, t] : theta)
    if (max_abs(t) != max_abs(before.at(name))) changed = true;
  CHECK(changed);
  for (int64_t j = 0; j < rc.embed_dim; ++j) CHECK(theta.at("model/item_emb").at(0, j) == 0.0);
  for (int64_t j = 0; j < ec.rating_embed_dim; ++j)
    CHECK(phi.at("encoder/rating_emb").at(0, j) == 0.0);

  outer_step(theta, phi, std::span<const Episode>(eps.data(), 2), rc, ec, tc, opt, 1e-3);
  CHECK(opt.step == 2);
}

TEST_CASE("training is reproducible and thread-count invariant") {
  auto rc = tiny_rc();
  auto ec = tiny_ec();
  auto eps = tiny_episodes();
  std::vector<Episode> val(eps.begin(), eps.begin() + 1);

  for (auto mode : {LossStrategy::kMaml, LossStrategy::kMelo}) {
    CAPTURE(strategy_to_string(mode));
    auto tc = tiny_tc(mode);
    auto one = train(eps, val, rc, ec, tc);
    auto two = train(eps, val, rc, ec, tc);
    auto tc_mt = tc;
    tc_mt.threads = 2;
    auto three = train(eps, val, rc, ec, tc_mt);

    REQUIRE(one.log.size() == two.log.size());
    REQUIRE(one.log.size() == three.log.size());
    for (size_t i = 0; i < one.log.size(); ++i) {
      CHECK(one.log[i].split == two.log[i].split);
      const bool nan_ok = std::isnan(one.log[i].loss) && std::isnan(two.log[i].loss) &&
                          std::isnan(three.log[i].loss);
      if (!nan_ok) {
        CHECK(one.log[i].loss == two.log[i].loss);
        CHECK(one.log[i].loss == three.log[i].loss);
      }
      const bool rmse_nan = std::isnan(one.log[i].rmse) && std::isnan(three.log[i].rmse);
      if (!rmse_nan) CHECK(one.log[i].rmse == three.log[i].rmse);
    }
    for (const auto& [name, t] : one.theta) {
      const Tensor& o = three.theta.at(name);
      for (size_t i = 0; i < t.data.size(); ++i) CHECK(t.data[i] == o.data[i]);
    }
  }
}

TEST_CASE("validation keeps the best snapshot it saw") {
  auto rc = tiny_rc();
  auto ec = tiny_ec();
  auto eps = tiny_episodes();
  auto tc = tiny_tc(LossStrategy::kMaml);
  tc.val_interval = 1;
  tc.episodes_total = 4;
  auto result = train(eps, eps, rc, ec, tc);

  double min_rmse = std::numeric_limits<double>::infinity();
  for (const auto& row : result.log)
    if (row.split == "val") min_rmse = std::min(min_rmse, row.rmse);
  CHECK(result.best_val_rmse == min_rmse);

  EvalOptions opts;
  opts.mode = tc.mode;
  opts.inner_steps = tc.effective_inner_steps();
  opts.inner_lr = tc.inner_lr;
  auto report = evaluate(result.best_theta, result.best_phi, eps, rc, ec, opts);
  CHECK(report.rmse == result.best_val_rmse);
}

TEST_CASE("a zero-length run returns the initialization") {
  auto rc = tiny_rc();
  auto ec = tiny_ec();
  auto tc = tiny_tc(LossStrategy::kMaml);
  tc.episodes_total = 0;
  auto result = train({}, {}, rc, ec, tc);
  auto fresh = init_params(rc, tc.seed);
  for (const auto& [name, t] : fresh) {
    const Tensor& o = result.theta.at(name);
    for (size_t i = 0; i < t.data.size(); ++i) CHECK(t.data[i] == o.data[i]);
  }
  CHECK(result.log.empty());
}

TEST_CASE("metric cells format as full-precision decimals with empty gaps") {
  CHECK(format_metric(kNoValue) == "");
  CHECK(format_metric(0.5) == "0.5");
  const double third = 1.0 / 3.0;
  CHECK(std::strtod(format_metric(third).c_str(), nullptr) == third);
  CHECK(format_metric(0.0) == "0");
}

TEST_CASE("training configuration validation rejects nonsense") {
  auto tc = tiny_tc(LossStrategy::kMaml);
  CHECK_NOTHROW(tc.validate());
  auto bad = tc;
  bad.inner_lr = 0.0;
  CHECK_THROWS(bad.validate());
  bad = tc;
  bad.meta_batch_size = 0;
  CHECK_THROWS(bad.validate());
  bad = tc;
  bad.clip_norm = -1.0;
  CHECK_THROWS(bad.validate());
  bad = tc;
  bad.threads = 0;
  CHECK_THROWS(bad.validate());
}
