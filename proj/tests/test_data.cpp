#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "metarec/csv.hpp"
#include "metarec/dataset.hpp"
#include "metarec/episode.hpp"
#include "metarec/rng.hpp"

using namespace metarec;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("metarec_data_test_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_text(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  out << body;
}

}  // namespace

TEST_CASE("csv reader handles quoting, CRLF and embedded separators") {
  std::istringstream in("a,b\r\n\"x,y\",\"he said \"\"hi\"\"\"\r\n\"line\nbreak\",z\r\n");
  auto rows = csv::read(in);
  REQUIRE(rows.size() == 3);
  CHECK(rows[1][0] == "x,y");
  CHECK(rows[1][1] == "he said \"hi\"");
  CHECK(rows[2][0] == "line\nbreak");
  CHECK(csv::escape("plain") == "plain");
  CHECK(csv::escape("a,b") == "\"a,b\"");
  CHECK(csv::escape("q\"q") == "\"q\"\"q\"");
}

TEST_CASE("load_log parses well-formed rows and counts malformed ones") {
  TempDir tmp;
  const std::string path = tmp.file("log.csv");

  SUBCASE("three valid rows") {
    write_text(path,
               "user_id,item_id,rating,timestamp\n"
               "u1,i1,5,100\n"
               "u1,i2,3,200\n"
               "u2,i1,1,50\n");
    auto log = load_log(path);
    REQUIRE(log.rows.size() == 3);
    CHECK(log.malformed == 0);
    CHECK(log.rows[0].user_id == "u1");
    CHECK(log.rows[0].rating == 5);
    CHECK(log.rows[2].timestamp == 50);
  }

  SUBCASE("out-of-range rating is rejected and counted") {
    write_text(path,
               "user_id,item_id,rating,timestamp\n"
               "u1,i1,7,100\n"
               "u1,i2,0,100\n"
               "u1,i3,2,100\n");
    auto log = load_log(path);
    CHECK(log.rows.size() == 1);
    CHECK(log.malformed == 2);
  }

  SUBCASE("garbled fields are rejected and counted") {
    write_text(path,
               "user_id,item_id,rating,timestamp\n"
               "u1,i1,five,100\n"
               "u1,i1,5\n"
               ",i1,5,100\n"
               "u1,i1,5,yesterday\n"
               "u9,i9,4,123\n");
    auto log = load_log(path);
    CHECK(log.rows.size() == 1);
    CHECK(log.malformed == 4);
  }

  SUBCASE("empty file is an error") {
    write_text(path, "");
    CHECK_THROWS_AS(load_log(path), std::runtime_error);
  }

  SUBCASE("header-only file is an error") {
    write_text(path, "user_id,item_id,rating,timestamp\n");
    CHECK_THROWS_AS(load_log(path), std::runtime_error);
  }

  SUBCASE("missing file is an error") {
    CHECK_THROWS_AS(load_log(tmp.file("nope.csv")), std::runtime_error);
  }

  SUBCASE("wrong header is an error") {
    write_text(path, "user,item,score,time\nu1,i1,5,100\n");
    CHECK_THROWS_AS(load_log(path), std::runtime_error);
  }
}

TEST_CASE("preprocess filters sparse items, short users and truncates to most recent") {
  InteractionLog log;
  log.num_levels = 5;
  auto add = [&](const char* u, const char* i, int r, int64_t t) {
    log.rows.push_back({u, i, r, t});
  };

  SUBCASE("item below the rating threshold is removed") {
    for (int n = 0; n < 49; ++n) add(("u" + std::to_string(n)).c_str(), "rare", 3, n);
    for (int n = 0; n < 50; ++n) add("u0", "popular", 4, 100 + n);
    auto pp = preprocess(log, 50, 30, 5);
    CHECK(pp.vocab.index_by_id.count("rare") == 0);
    CHECK(pp.vocab.index_by_id.count("popular") == 1);
    REQUIRE(pp.users.size() == 1);
    CHECK(pp.users[0].items.size() == 30);  // 50 kept interactions truncated to 30
  }

  SUBCASE("user keeps only the most recent max_length interactions") {
    for (int t = 0; t < 40; ++t) add("u1", ("i" + std::to_string(t)).c_str(), 3, t);
    auto pp = preprocess(log, 1, 30, 5);
    REQUIRE(pp.users.size() == 1);
    REQUIRE(pp.users[0].items.size() == 30);
    // Oldest ten dropped: first kept item is i10.
    CHECK(pp.vocab.id_by_index[static_cast<size_t>(pp.users[0].items[0])] == "i10");
    CHECK(pp.vocab.id_by_index[static_cast<size_t>(pp.users[0].items[29])] == "i39");
  }

  SUBCASE("user too short after item filtering is dropped") {
    for (int t = 0; t < 3; ++t) add("short", ("i" + std::to_string(t)).c_str(), 3, t);
    for (int t = 0; t < 6; ++t) add("long", ("j" + std::to_string(t)).c_str(), 3, t);
    auto pp = preprocess(log, 1, 30, 5);
    REQUIRE(pp.users.size() == 1);
    CHECK(pp.users[0].items.size() == 6);
  }

  SUBCASE("indices assigned by first appearance, 0 reserved for padding") {
    add("u1", "b", 3, 0);
    add("u1", "a", 3, 1);
    add("u1", "c", 3, 2);
    add("u1", "a", 3, 3);
    add("u1", "b", 3, 4);
    auto pp = preprocess(log, 1, 30, 5);
    CHECK(pp.vocab.index_by_id.at("b") == 1);
    CHECK(pp.vocab.index_by_id.at("a") == 2);
    CHECK(pp.vocab.index_by_id.at("c") == 3);
    CHECK(pp.vocab.id_by_index[0] == "");
    CHECK(pp.users[0].items == std::vector<int64_t>{1, 2, 3, 2, 1});
  }

  SUBCASE("timestamp ties keep file order") {
    for (int t = 0; t < 5; ++t) add("u1", ("i" + std::to_string(t)).c_str(), t % 5 + 1, 7);
    auto pp = preprocess(log, 1, 30, 5);
    CHECK(pp.users[0].ratings == std::vector<int>{1, 2, 3, 4, 5});
  }

  SUBCASE("everything filtered out is an error") {
    add("u1", "i1", 3, 0);
    CHECK_THROWS_AS(preprocess(log, 50, 30, 5), std::runtime_error);
  }
}

TEST_CASE("balance score matches entropy anchors") {
  CHECK(balance_score({10, 10, 10, 10, 10}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(balance_score({42, 0, 0, 0, 0}) == doctest::Approx(0.0).epsilon(1e-12));
  // Published five-level rating proportions 72.8/13.4/6.7/3.8/3.3 percent.
  CHECK(balance_score({728, 134, 67, 38, 33}) == doctest::Approx(0.57).epsilon(0.005 / 0.57));
  CHECK_THROWS_AS(balance_score({0, 0}), std::invalid_argument);
  CHECK_THROWS_AS(balance_score({5}), std::invalid_argument);
}

TEST_CASE("balance score is permutation invariant and bounded") {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int64_t> counts(5);
    int64_t total = 0;
    for (auto& c : counts) {
      c = rng.uniform_int(0, 40);
      total += c;
    }
    if (total == 0) counts[0] = 1;
    const double score = balance_score(counts);
    CHECK(score >= 0.0);
    CHECK(score <= 1.0 + 1e-12);
    auto shuffled = counts;
    rng.shuffle(shuffled);
    CHECK(balance_score(shuffled) == doctest::Approx(score).epsilon(1e-12));
  }
}

namespace {

UserSequence ramp_user(int64_t L) {
  UserSequence seq;
  seq.user_index = 7;
  for (int64_t t = 1; t <= L; ++t) {
    seq.items.push_back(t);
    seq.ratings.push_back(static_cast<int>((t - 1) % 5) + 1);
  }
  return seq;
}

// Real (non-pad) item ids of a padded slice.
std::vector<int64_t> real_items(const SubSequence& s) {
  std::vector<int64_t> out;
  for (size_t t = 0; t < s.item_ids.size(); ++t)
    if (s.loss_mask[t] == 1.0) out.push_back(s.item_ids[t]);
  return out;
}

}  // namespace

TEST_CASE("episode slicing enumerations match the slicing rule exactly") {
  SUBCASE("L=5") {
    auto ep = build_episode(ramp_user(5));
    REQUIRE(ep.support.size() == 3);
    CHECK(real_items(ep.support[0]) == std::vector<int64_t>{1, 2});
    CHECK(real_items(ep.support[1]) == std::vector<int64_t>{1, 2, 3});
    CHECK(real_items(ep.support[2]) == std::vector<int64_t>{1, 2, 3, 4});
    REQUIRE(ep.query.size() == 3);
    CHECK(real_items(ep.query[0]) == std::vector<int64_t>{4, 5});
    CHECK(real_items(ep.query[1]) == std::vector<int64_t>{3, 4, 5});
    CHECK(real_items(ep.query[2]) == std::vector<int64_t>{2, 3, 4, 5});
  }

  SUBCASE("L=3 minimal") {
    auto ep = build_episode(ramp_user(3));
    REQUIRE(ep.support.size() == 1);
    CHECK(real_items(ep.support[0]) == std::vector<int64_t>{1, 2});
    REQUIRE(ep.query.size() == 2);
    CHECK(real_items(ep.query[0]) == std::vector<int64_t>{2, 3});
    CHECK(real_items(ep.query[1]) == std::vector<int64_t>{1, 2, 3});
  }

  SUBCASE("L=30 caps bind: 25 longest prefixes, 3 shortest suffixes") {
    auto ep = build_episode(ramp_user(30));
    REQUIRE(ep.support.size() == 25);
    CHECK(ep.support.front().real_length == 5);   // lengths 5..29
    CHECK(ep.support.back().real_length == 29);
    REQUIRE(ep.query.size() == 3);
    CHECK(ep.query[0].real_length == 2);
    CHECK(ep.query[1].real_length == 3);
    CHECK(ep.query[2].real_length == 4);
  }

  SUBCASE("exhaustive enumeration oracle for every admissible length") {
    for (int64_t L = 3; L <= 30; ++L) {
      auto seq = ramp_user(L);
      auto ep = build_episode(seq);
      const int64_t expect_support = std::min<int64_t>(L - 2, 25);
      const int64_t expect_query = std::min<int64_t>(L - 1, 3);
      REQUIRE(static_cast<int64_t>(ep.support.size()) == expect_support);
      REQUIRE(static_cast<int64_t>(ep.query.size()) == expect_query);
      for (int64_t s = 0; s < expect_support; ++s) {
        const int64_t len = (L - 1) - (expect_support - 1) + s;  // ascending, longest kept
        std::vector<int64_t> want(seq.items.begin(), seq.items.begin() + len);
        CHECK(real_items(ep.support[static_cast<size_t>(s)]) == want);
      }
      for (int64_t q = 0; q < expect_query; ++q) {
        const int64_t len = 2 + q;  // ascending, shortest kept
        std::vector<int64_t> want(seq.items.end() - len, seq.items.end());
        CHECK(real_items(ep.query[static_cast<size_t>(q)]) == want);
      }
    }
  }
}

TEST_CASE("episode invariants: held-out isolation, padding, normalization, purity") {
  auto seq = ramp_user(17);
  auto ep = build_episode(seq);
  const int64_t held_out = seq.items.back();

  for (const auto& s : ep.support) {
    auto items = real_items(s);
    for (int64_t it : items) CHECK(it != held_out);
  }
  for (const auto& q : ep.query) {
    CHECK(q.item_ids.back() == held_out);
    CHECK(q.loss_mask.back() == 1.0);
  }

  for (const auto& s : ep.support) {
    REQUIRE(s.item_ids.size() == 30);
    int64_t mask_count = 0;
    for (size_t t = 0; t < 30; ++t) {
      if (s.loss_mask[t] == 0.0) {
        CHECK(s.item_ids[t] == 0);
        CHECK(s.rating_levels[t] == 0);
        CHECK(s.target_ratings[t] == 0.0);
      } else {
        ++mask_count;
        CHECK(s.target_ratings[t] ==
              doctest::Approx((s.rating_levels[t] - 1) / 4.0).epsilon(1e-15));
      }
    }
    CHECK(mask_count == s.real_length);
    // Left padding: real data is the trailing block.
    CHECK(s.loss_mask[static_cast<size_t>(30 - s.real_length)] == 1.0);
    if (s.real_length < 30) CHECK(s.loss_mask[static_cast<size_t>(29 - s.real_length)] == 0.0);
  }

  auto again = build_episode(seq);
  REQUIRE(again.support.size() == ep.support.size());
  for (size_t i = 0; i < ep.support.size(); ++i)
    CHECK(again.support[i].item_ids == ep.support[i].item_ids);

  CHECK_THROWS_AS(build_episode(ramp_user(2)), std::invalid_argument);
}

TEST_CASE("synthetic users follow their profiles and are reproducible") {
  SUBCASE("degenerate profile yields constant ratings") {
    RatingProfile p{"ones", {1, 0, 0, 0, 0}, 5, 10, 1.0};
    auto users = synthesize({p}, 50, 100, 11);
    REQUIRE(users.size() == 50);
    for (const auto& u : users) {
      CHECK(u.items.size() >= 5);
      CHECK(u.items.size() <= 10);
      for (int r : u.ratings) CHECK(r == 1);
      // items are distinct and within the vocabulary
      std::vector<int64_t> sorted = u.items;
      std::sort(sorted.begin(), sorted.end());
      CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
      CHECK(sorted.front() >= 1);
      CHECK(sorted.back() <= 100);
    }
  }

  SUBCASE("generous profile empirical proportions within 1%") {
    RatingProfile p{"generous", {0.05, 0.04, 0.04, 0.15, 0.72}, 20, 30, 1.0};
    auto users = synthesize({p}, 5000, 2000, 17);
    std::vector<int64_t> counts(5, 0);
    int64_t total = 0;
    for (const auto& u : users)
      for (int r : u.ratings) {
        counts[static_cast<size_t>(r - 1)]++;
        ++total;
      }
    REQUIRE(total > 100000);
    const double want[5] = {0.05, 0.04, 0.04, 0.15, 0.72};
    for (int k = 0; k < 5; ++k) {
      const double got = static_cast<double>(counts[static_cast<size_t>(k)]) /
                         static_cast<double>(total);
      CHECK(std::abs(got - want[k]) < 0.01);
    }
  }

  SUBCASE("same seed twice gives identical datasets") {
    RatingProfile a{"a", {0.2, 0.2, 0.2, 0.2, 0.2}, 5, 12, 0.5};
    RatingProfile b{"b", {0.6, 0.1, 0.1, 0.1, 0.1}, 6, 9, 0.5};
    auto u1 = synthesize({a, b}, 200, 500, 42);
    auto u2 = synthesize({a, b}, 200, 500, 42);
    REQUIRE(u1.size() == u2.size());
    for (size_t i = 0; i < u1.size(); ++i) {
      CHECK(u1[i].items == u2[i].items);
      CHECK(u1[i].ratings == u2[i].ratings);
    }
    auto u3 = synthesize({a, b}, 200, 500, 43);
    bool differs = false;
    for (size_t i = 0; i < u1.size() && !differs; ++i) differs = u1[i].items != u3[i].items;
    CHECK(differs);
  }

  SUBCASE("inconsistent profiles are rejected") {
    CHECK_THROWS_AS(synthesize({{"bad", {0.5, 0.4}, 5, 10, 1.0}}, 10, 100, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(synthesize({{"ok", {1, 0, 0, 0, 0}, 5, 10, 0.7}}, 10, 100, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(synthesize({{"ok", {1, 0, 0, 0, 0}, 1, 10, 1.0}}, 10, 100, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(synthesize({{"ok", {1, 0, 0, 0, 0}, 5, 10, 1.0}}, 10, 5, 1),
                    std::invalid_argument);
  }
}

TEST_CASE("length sweep slicing") {
  RatingProfile p{"any", {0.2, 0.2, 0.2, 0.2, 0.2}, 12, 30, 1.0};
  auto users = synthesize({p}, 300, 400, 5);

  SUBCASE("T=5 pins every length to 5") {
    for (const auto& u : length_sweep_slice(users, 5, 3)) CHECK(u.items.size() == 5);
  }

  SUBCASE("T=10 keeps lengths within [5,10] and slices are suffixes") {
    auto sliced = length_sweep_slice(users, 10, 3);
    REQUIRE(sliced.size() == users.size());
    for (size_t i = 0; i < sliced.size(); ++i) {
      const auto& cut = sliced[i];
      CHECK(cut.items.size() >= 5);
      CHECK(cut.items.size() <= 10);
      std::vector<int64_t> tail(users[i].items.end() - cut.items.size(), users[i].items.end());
      CHECK(cut.items == tail);
    }
  }

  SUBCASE("determinism and parameter validation") {
    auto s1 = length_sweep_slice(users, 20, 9);
    auto s2 = length_sweep_slice(users, 20, 9);
    for (size_t i = 0; i < s1.size(); ++i) CHECK(s1[i].items == s2[i].items);
    CHECK_THROWS_AS(length_sweep_slice(users, 4, 1), std::invalid_argument);
    CHECK_THROWS_AS(length_sweep_slice(users, 31, 1), std::invalid_argument);
  }
}

TEST_CASE("episode and vocabulary files round-trip") {
  TempDir tmp;
  RatingProfile p{"mix", {0.1, 0.2, 0.3, 0.2, 0.2}, 6, 20, 1.0};
  auto users = synthesize({p}, 25, 300, 77);
  std::vector<Episode> eps;
  for (const auto& u : users) eps.push_back(build_episode(u));

  const std::string path = tmp.file("episodes.jsonl");
  write_episodes_jsonl(path, eps);
  auto back = read_episodes_jsonl(path);
  REQUIRE(back.size() == eps.size());
  for (size_t i = 0; i < eps.size(); ++i) {
    CHECK(back[i].user_index == eps[i].user_index);
    REQUIRE(back[i].support.size() == eps[i].support.size());
    REQUIRE(back[i].query.size() == eps[i].query.size());
    for (size_t s = 0; s < eps[i].support.size(); ++s) {
      CHECK(back[i].support[s].item_ids == eps[i].support[s].item_ids);
      CHECK(back[i].support[s].rating_levels == eps[i].support[s].rating_levels);
      CHECK(back[i].support[s].target_ratings == eps[i].support[s].target_ratings);
      CHECK(back[i].support[s].loss_mask == eps[i].support[s].loss_mask);
    }
  }

  Vocabulary vocab;
  vocab.id_by_index = {"", "apple", "pear", "plum"};
  for (size_t i = 1; i < vocab.id_by_index.size(); ++i)
    vocab.index_by_id[vocab.id_by_index[i]] = static_cast<int64_t>(i);
  const std::string vpath = tmp.file("vocab.json");
  write_vocab(vpath, vocab);
  auto vback = read_vocab(vpath);
  CHECK(vback.id_by_index == vocab.id_by_index);
  CHECK(vback.index_by_id.at("pear") == 2);
}

TEST_CASE("synthetic log written as CSV feeds back through load_log and preprocess") {
  TempDir tmp;
  RatingProfile p{"mix", {0.2, 0.2, 0.2, 0.2, 0.2}, 8, 12, 1.0};
  auto users = synthesize({p}, 40, 60, 3);
  const std::string path = tmp.file("synth.csv");
  write_log_csv(path, users);
  auto log = load_log(path);
  CHECK(log.malformed == 0);
  auto pp = preprocess(log, 1, 30, 5);
  REQUIRE(pp.users.size() == users.size());
  for (size_t i = 0; i < users.size(); ++i)
    CHECK(pp.users[i].ratings == users[i].ratings);
}
