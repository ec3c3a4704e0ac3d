#include "metarec/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "metarec/csv.hpp"
#include "metarec/rng.hpp"

namespace metarec {

namespace {

bool parse_i64(const std::string& s, int64_t& out) {
  if (s.empty()) return false;
  size_t pos = 0;
  try {
    out = std::stoll(s, &pos);
  } catch (const std::exception&) {
    return false;
  }
  return pos == s.size();
}

}  // namespace

InteractionLog load_log(const std::string& path, int num_levels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_log: cannot open '" + path + "'");
  auto rows = csv::read(in);
  if (rows.empty()) throw std::runtime_error("load_log: '" + path + "' is empty");

  const std::vector<std::string> expected = {"user_id", "item_id", "rating", "timestamp"};
  if (rows[0] != expected)
    throw std::runtime_error("load_log: '" + path +
                             "' must start with header user_id,item_id,rating,timestamp");

  InteractionLog log;
  log.num_levels = num_levels;
  for (size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    int64_t rating = 0, ts = 0;
    if (r.size() != 4 || r[0].empty() || r[1].empty() || !parse_i64(r[2], rating) ||
        !parse_i64(r[3], ts) || rating < 1 || rating > num_levels) {
      ++log.malformed;
      continue;
    }
    log.rows.push_back({r[0], r[1], static_cast<int>(rating), ts});
  }
  if (log.rows.empty()) throw std::runtime_error("load_log: '" + path + "' has no valid rows");
  return log;
}

Preprocessed preprocess(const InteractionLog& log, int min_item_ratings, int max_length,
                        int min_length) {
  std::unordered_map<std::string, int64_t> item_counts;
  for (const auto& r : log.rows) ++item_counts[r.item_id];

  // Group per user, preserving file order for stable timestamp ties.
  std::unordered_map<std::string, std::vector<const Interaction*>> by_user;
  std::vector<std::string> user_order;
  for (const auto& r : log.rows) {
    if (item_counts[r.item_id] < min_item_ratings) continue;
    auto [it, inserted] = by_user.try_emplace(r.user_id);
    if (inserted) user_order.push_back(r.user_id);
    it->second.push_back(&r);
  }

  Preprocessed out;
  out.vocab.id_by_index.push_back("");  // padding slot
  int64_t next_user = 0;
  for (const auto& uid : user_order) {
    auto& rows = by_user[uid];
    std::stable_sort(rows.begin(), rows.end(),
                     [](const Interaction* a, const Interaction* b) {
                       return a->timestamp < b->timestamp;
                     });
    if (static_cast<int>(rows.size()) < min_length) continue;
    if (static_cast<int>(rows.size()) > max_length)
      rows.erase(rows.begin(), rows.end() - max_length);

    UserSequence seq;
    seq.user_index = next_user++;
    for (const Interaction* r : rows) {
      auto [it, inserted] =
          out.vocab.index_by_id.try_emplace(r->item_id, out.vocab.size());
      if (inserted) out.vocab.id_by_index.push_back(r->item_id);
      seq.items.push_back(it->second);
      seq.ratings.push_back(r->rating);
    }
    out.users.push_back(std::move(seq));
  }
  if (out.users.empty()) throw std::runtime_error("preprocess: every user was filtered out");
  return out;
}

double balance_score(const std::vector<int64_t>& class_counts) {
  const size_t k = class_counts.size();
  if (k < 2) throw std::invalid_argument("balance_score: need at least two classes");
  int64_t total = 0;
  for (int64_t c : class_counts) {
    if (c < 0) throw std::invalid_argument("balance_score: negative count");
    total += c;
  }
  if (total == 0) throw std::invalid_argument("balance_score: empty histogram");
  double h = 0.0;
  for (int64_t c : class_counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  return h / std::log(static_cast<double>(k));
}

std::vector<UserSequence> synthesize(const std::vector<RatingProfile>& profiles, int64_t n_users,
                                     int64_t n_items, uint64_t seed) {
  if (profiles.empty()) throw std::invalid_argument("synthesize: no profiles");
  if (n_items < 10) throw std::invalid_argument("synthesize: need at least 10 items");
  double wsum = 0.0;
  for (const auto& p : profiles) {
    double psum = 0.0;
    for (double q : p.proportions) {
      if (q < 0.0) throw std::invalid_argument("synthesize: negative proportion in " + p.name);
      psum += q;
    }
    if (std::abs(psum - 1.0) > 1e-9)
      throw std::invalid_argument("synthesize: proportions of '" + p.name + "' do not sum to 1");
    if (p.min_length < 2 || p.max_length < p.min_length)
      throw std::invalid_argument("synthesize: bad length range in '" + p.name + "'");
    if (p.max_length > n_items)
      throw std::invalid_argument("synthesize: '" + p.name + "' needs more items than exist");
    wsum += p.weight;
  }
  if (std::abs(wsum - 1.0) > 1e-9)
    throw std::invalid_argument("synthesize: profile weights do not sum to 1");

  std::vector<double> weights;
  for (const auto& p : profiles) weights.push_back(p.weight);

  Rng rng(seed);
  std::vector<UserSequence> users;
  users.reserve(static_cast<size_t>(n_users));
  for (int64_t u = 0; u < n_users; ++u) {
    const auto& prof = profiles[rng.discrete(weights)];
    const int64_t len = rng.uniform_int(prof.min_length, prof.max_length);
    UserSequence seq;
    seq.user_index = u;
    for (int64_t item : rng.sample_without_replacement(n_items, len))
      seq.items.push_back(item + 1);  // vocabulary indices start at 1
    for (int64_t t = 0; t < len; ++t)
      seq.ratings.push_back(static_cast<int>(rng.discrete(prof.proportions)) + 1);
    users.push_back(std::move(seq));
  }
  return users;
}

std::vector<UserSequence> length_sweep_slice(const std::vector<UserSequence>& seqs, int T,
                                             uint64_t seed, int max_length) {
  if (T < 5 || T > max_length) throw std::invalid_argument("length_sweep_slice: T out of range");
  Rng rng(seed);
  std::vector<UserSequence> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) {
    const int64_t len = static_cast<int64_t>(s.items.size());
    if (len < 5) throw std::invalid_argument("length_sweep_slice: sequence shorter than 5");
    const int64_t l = rng.uniform_int(5, std::min<int64_t>(T, len));
    UserSequence cut;
    cut.user_index = s.user_index;
    cut.items.assign(s.items.end() - l, s.items.end());
    cut.ratings.assign(s.ratings.end() - l, s.ratings.end());
    out.push_back(std::move(cut));
  }
  return out;
}

void write_vocab(const std::string& path, const Vocabulary& vocab) {
  nlohmann::json j;
  j["items"] = nlohmann::json::object();
  for (const auto& [id, idx] : vocab.index_by_id) j["items"][id] = idx;
  j["size"] = vocab.size();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_vocab: cannot open '" + path + "'");
  out << j.dump(2) << "\n";
}

Vocabulary read_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_vocab: cannot open '" + path + "'");
  nlohmann::json j;
  in >> j;
  Vocabulary vocab;
  vocab.id_by_index.resize(j.at("size").get<size_t>());
  for (const auto& [id, idx] : j.at("items").items()) {
    const int64_t i = idx.get<int64_t>();
    vocab.index_by_id[id] = i;
    vocab.id_by_index.at(static_cast<size_t>(i)) = id;
  }
  return vocab;
}

void write_log_csv(const std::string& path, const std::vector<UserSequence>& seqs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_log_csv: cannot open '" + path + "'");
  csv::write_row(out, {"user_id", "item_id", "rating", "timestamp"});
  for (const auto& s : seqs) {
    for (size_t t = 0; t < s.items.size(); ++t) {
      csv::write_row(out, {"u" + std::to_string(s.user_index),
                           "i" + std::to_string(s.items[t]),
                           std::to_string(s.ratings[t]), std::to_string(t)});
    }
  }
}

}  // namespace metarec
