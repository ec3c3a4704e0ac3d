#include "metarec/episode.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace metarec {

namespace {

SubSequence make_slice(const UserSequence& seq, int64_t begin, int64_t end, int max_length,
                       int num_levels) {
  const int64_t len = end - begin;
  const int64_t pad = max_length - len;
  SubSequence s;
  s.real_length = len;
  s.item_ids.assign(static_cast<size_t>(max_length), 0);
  s.rating_levels.assign(static_cast<size_t>(max_length), 0);
  s.target_ratings.assign(static_cast<size_t>(max_length), 0.0);
  s.loss_mask.assign(static_cast<size_t>(max_length), 0.0);
  for (int64_t t = 0; t < len; ++t) {
    const size_t dst = static_cast<size_t>(pad + t);
    const size_t src = static_cast<size_t>(begin + t);
    s.item_ids[dst] = seq.items[src];
    s.rating_levels[dst] = seq.ratings[src];
    s.target_ratings[dst] =
        static_cast<double>(seq.ratings[src] - 1) / static_cast<double>(num_levels - 1);
    s.loss_mask[dst] = 1.0;
  }
  return s;
}

}  // namespace

Episode build_episode(const UserSequence& seq, int n_support, int n_query, int max_length,
                      int num_levels) {
  const int64_t L = static_cast<int64_t>(seq.items.size());
  if (L < 3) throw std::invalid_argument("build_episode: sequence shorter than 3");
  if (L > max_length) throw std::invalid_argument("build_episode: sequence longer than max_length");
  if (seq.ratings.size() != seq.items.size())
    throw std::invalid_argument("build_episode: items/ratings length mismatch");
  if (n_support < 1 || n_query < 1) throw std::invalid_argument("build_episode: empty caps");

  Episode ep;
  ep.user_index = seq.user_index;

  // Prefixes of length 2..L-1; cap keeps the longest, emitted shortest first.
  const int64_t support_lo = std::max<int64_t>(2, (L - 1) - n_support + 1);
  for (int64_t len = support_lo; len <= L - 1; ++len)
    ep.support.push_back(make_slice(seq, 0, len, max_length, num_levels));

  // Suffixes of length 2..L ending at the held-out item; cap keeps the shortest.
  const int64_t query_hi = std::min<int64_t>(L, 2 + n_query - 1);
  for (int64_t len = 2; len <= query_hi; ++len)
    ep.query.push_back(make_slice(seq, L - len, L, max_length, num_levels));

  return ep;
}

namespace {

nlohmann::json slice_to_json(const SubSequence& s) {
  nlohmann::json j;
  j["items"] = s.item_ids;
  j["levels"] = s.rating_levels;
  j["targets"] = s.target_ratings;
  j["mask"] = s.loss_mask;
  j["length"] = s.real_length;
  return j;
}

SubSequence slice_from_json(const nlohmann::json& j) {
  SubSequence s;
  s.item_ids = j.at("items").get<std::vector<int64_t>>();
  s.rating_levels = j.at("levels").get<std::vector<int>>();
  s.target_ratings = j.at("targets").get<std::vector<double>>();
  s.loss_mask = j.at("mask").get<std::vector<double>>();
  s.real_length = j.at("length").get<int64_t>();
  if (s.rating_levels.size() != s.item_ids.size() ||
      s.target_ratings.size() != s.item_ids.size() || s.loss_mask.size() != s.item_ids.size())
    throw std::runtime_error("episode: inconsistent slice arrays");
  return s;
}

}  // namespace

void write_episodes_jsonl(const std::string& path, const std::vector<Episode>& episodes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_episodes_jsonl: cannot open '" + path + "'");
  for (const auto& ep : episodes) {
    nlohmann::json j;
    j["user"] = ep.user_index;
    j["support"] = nlohmann::json::array();
    for (const auto& s : ep.support) j["support"].push_back(slice_to_json(s));
    j["query"] = nlohmann::json::array();
    for (const auto& s : ep.query) j["query"].push_back(slice_to_json(s));
    out << j.dump() << "\n";
  }
}

std::vector<Episode> read_episodes_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_episodes_jsonl: cannot open '" + path + "'");
  std::vector<Episode> episodes;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error("read_episodes_jsonl: bad record at line " +
                               std::to_string(lineno) + ": " + e.what());
    }
    Episode ep;
    ep.user_index = j.at("user").get<int64_t>();
    for (const auto& s : j.at("support")) ep.support.push_back(slice_from_json(s));
    for (const auto& s : j.at("query")) ep.query.push_back(slice_from_json(s));
    episodes.push_back(std::move(ep));
  }
  return episodes;
}

}  // namespace metarec
