#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metarec/dataset.hpp"

namespace metarec {

// A left-padded slice of a user history. All arrays have length max_length;
// real data occupies the trailing positions and the most recent item is always
// last. loss_mask is 1.0 exactly on real positions, targets are ratings
// normalized to [0,1] via (level-1)/(num_levels-1).
struct SubSequence {
  std::vector<int64_t> item_ids;
  std::vector<int> rating_levels;
  std::vector<double> target_ratings;
  std::vector<double> loss_mask;
  int64_t real_length = 0;

  int64_t padded_length() const { return static_cast<int64_t>(item_ids.size()); }
};

struct Episode {
  int64_t user_index = 0;
  std::vector<SubSequence> support;
  std::vector<SubSequence> query;
};

// Support/query slicing around the held-out final interaction. Support
// candidates are the prefixes of length 2..L-1 (the held-out item never
// appears); the n_support longest are kept, shortest first. Query candidates
// are the suffixes of length 2..L ending at the held-out item; the n_query
// shortest are kept, shortest first.
Episode build_episode(const UserSequence& seq, int n_support = 25, int n_query = 3,
                      int max_length = 30, int num_levels = 5);

// One JSON object per line: user index plus per-slice padded arrays.
void write_episodes_jsonl(const std::string& path, const std::vector<Episode>& episodes);
std::vector<Episode> read_episodes_jsonl(const std::string& path);

}  // namespace metarec
