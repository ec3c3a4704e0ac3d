#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace metarec {

struct Interaction {
  std::string user_id;
  std::string item_id;
  int rating = 0;  // integer level in 1..num_levels
  int64_t timestamp = 0;
};

struct InteractionLog {
  std::vector<Interaction> rows;
  int64_t malformed = 0;  // rejected input lines (bad fields or out-of-range rating)
  int num_levels = 5;
};

struct UserSequence {
  int64_t user_index = 0;
  std::vector<int64_t> items;  // vocabulary indices >= 1; 0 is the padding index
  std::vector<int> ratings;    // levels 1..num_levels, aligned with items
};

struct Vocabulary {
  std::vector<std::string> id_by_index;  // index 0 reserved for padding
  std::unordered_map<std::string, int64_t> index_by_id;

  int64_t size() const { return static_cast<int64_t>(id_by_index.size()); }
};

struct Preprocessed {
  std::vector<UserSequence> users;
  Vocabulary vocab;
};

struct RatingProfile {
  std::string name;
  std::vector<double> proportions;  // per rating level, sums to 1
  int min_length = 2;
  int max_length = 2;
  double weight = 0.0;  // mixture weight across users
};

// Parses `user_id,item_id,rating,timestamp` CSV. Malformed rows (wrong field
// count, non-numeric rating/timestamp, rating outside 1..num_levels) are
// counted, not fatal; an unreadable file or zero valid rows is an error.
InteractionLog load_log(const std::string& path, int num_levels = 5);

// Cold-start preprocessing: drop items with fewer than min_item_ratings
// interactions, then drop users shorter than min_length, keep each user's most
// recent max_length interactions in chronological order (stable under
// timestamp ties). Item indices are assigned by first appearance in the
// filtered, time-ordered log.
Preprocessed preprocess(const InteractionLog& log, int min_item_ratings = 50,
                        int max_length = 30, int min_length = 5);

// Normalized Shannon entropy H/log k of the class histogram, in [0,1].
double balance_score(const std::vector<int64_t>& class_counts);

// Synthetic users: each draws a profile by mixture weight, a length uniform in
// the profile's range, distinct items uniformly, and i.i.d. rating levels from
// the profile's proportions. Reproducible from the seed.
std::vector<UserSequence> synthesize(const std::vector<RatingProfile>& profiles, int64_t n_users,
                                     int64_t n_items, uint64_t seed);

// Truncates each sequence to its most recent l interactions, l uniform in
// [5, min(T, length)].
std::vector<UserSequence> length_sweep_slice(const std::vector<UserSequence>& seqs, int T,
                                             uint64_t seed, int max_length = 30);

void write_vocab(const std::string& path, const Vocabulary& vocab);
Vocabulary read_vocab(const std::string& path);

// Writes sequences back out in the standard interaction CSV format with
// synthetic user ids and increasing timestamps.
void write_log_csv(const std::string& path, const std::vector<UserSequence>& seqs);

}  // namespace metarec
