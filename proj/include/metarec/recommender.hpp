#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "metarec/autodiff.hpp"
#include "metarec/episode.hpp"
#include "metarec/tensor.hpp"

namespace metarec {

enum class Arch { kRecurrent, kSelfAttention };

Arch arch_from_string(const std::string& s);
std::string arch_to_string(Arch a);

struct RecommenderConfig {
  Arch architecture = Arch::kRecurrent;
  int64_t item_vocab = 0;  // includes the pad index 0
  int64_t embed_dim = 64;
  int64_t hidden_dim = 64;
  int n_layers = 1;
  int max_length = 30;
  int num_levels = 5;
  bool final_position_only = false;  // supervise only each slice's last position

  void validate() const;
};

// Named parameter tensors; map keys double as checkpoint tensor names.
using ParameterSet = std::map<std::string, Tensor>;

// Glorot-uniform weights, zero biases, zero (frozen) pad embedding row.
// The draw order is the sorted tensor-name order, so layouts are stable.
ParameterSet init_params(const RecommenderConfig& config, uint64_t seed);

// Parameters lifted into a graph as named leaves (sorted order), or an
// already-adapted set of Vars living in the same graph.
struct GraphParams {
  std::map<std::string, ad::Var> vars;

  ad::Var at(const std::string& name) const;
};

GraphParams lift_params(ad::Graph& g, const ParameterSet& params, bool requires_grad,
                        const std::string& name_prefix = {});
ParameterSet materialize(const ad::Graph& g, const GraphParams& params);
std::vector<ad::Var> ordered_vars(const GraphParams& params);

// Several sub-sequences flattened into one sequence-major block: row b*window+t
// holds slice b's padded position t. The window trims the shared all-pad
// prefix: only the last `window` of the padded max_length positions are kept,
// which changes nothing because real data is right-aligned.
struct Batch {
  int64_t count = 0;   // number of sub-sequences
  int64_t window = 0;  // positions kept per sub-sequence
  int max_length = 0;  // original padded length
  std::vector<int64_t> items;   // count*window item ids (0 = pad)
  std::vector<int> levels;      // count*window rating levels (0 = pad)
  Tensor targets;               // [count*window, 1] normalized ratings
  Tensor real_mask;             // [count*window, 1] 1 on real positions
  Tensor supervised_mask;       // [count*window, 1] positions that carry loss
};

Batch make_batch(std::span<const SubSequence> subs, const RecommenderConfig& config,
                 bool trim = true);

// Per-position predictions in (0,1), shape [count*window, 1], causal in the
// sequence order: row (b,t) depends only on slice b's items at positions <= t.
ad::Var forward_batch(ad::Graph& g, const GraphParams& theta, const Batch& batch,
                      const RecommenderConfig& config);

// mask * (prediction - target)^2, shape [count*window, 1].
ad::Var itemwise_loss_batch(ad::Graph& g, ad::Var predictions, const Batch& batch);

// Single sub-sequence convenience wrappers over the batched graph path.
std::vector<double> forward(const ParameterSet& theta, const RecommenderConfig& config,
                            const SubSequence& sub);
std::vector<double> itemwise_loss(const std::vector<double>& predictions, const SubSequence& sub);

}  // namespace metarec
