#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "metarec/tensor.hpp"

// Reverse-mode automatic differentiation over dense real matrices.
//
// A Graph is an eagerly evaluated tape: every emitted operation computes its
// value immediately and the full record can be replayed bit-for-bit with new
// leaf bindings. gradient() builds the backward pass out of ordinary graph
// operations, so the returned gradients are themselves differentiable and
// second-order quantities (gradients of gradients) come out exact.
//
// A Graph and its values are confined to one thread; independent graphs over
// copied parameter snapshots may run concurrently.

namespace metarec::ad {

enum class Op : uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kAffine,  // a*x + b, elementwise
  kSigmoid,
  kTanh,
  kSoftplus,
  kSquare,
  kSqrt,
  kRecip,
  kAbsPow,  // |x|^p
  kSign,
  kStep,  // 1 if x > 0 else 0
  kRelu,
  kMatmul,  // payload: transpose flags for either operand
  kSumAll,
  kRowSum,
  kColSum,
  kBroadcastScalar,
  kBroadcastCol,
  kBroadcastRow,
  kConcatRows,
  kSliceRows,
  kGatherRows,
  kScatterRows,  // scatter-add rows into a zero matrix
  kReshape,
  kMaskedSoftmaxRows,
  kStopGradient,
};

const char* op_name(Op op);

class Graph;

// Lightweight handle to one node of a Graph.
struct Var {
  Graph* graph = nullptr;
  int32_t id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
};

struct Node {
  Op op = Op::kLeaf;
  bool requires_grad = false;
  std::vector<int32_t> inputs;
  double a = 0.0;  // affine scale / abs-pow exponent
  double b = 0.0;  // affine shift
  int64_t i0 = 0;  // slice begin / broadcast dim / scatter out_rows / matmul transpose_a
  int64_t i1 = 0;  // slice end / broadcast dim / matmul transpose_b
  std::shared_ptr<const std::vector<int64_t>> indices;  // gather/scatter row indices
  std::shared_ptr<const std::vector<uint8_t>> mask;     // masked softmax: 1 = allowed
  std::string name;                                     // optional leaf name
  Tensor value;
};

struct GradientOptions {
  // When set, requesting a gradient for a parameter the output does not
  // depend on is an error instead of a zero tensor.
  bool strict = false;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // --- leaves -------------------------------------------------------------
  Var leaf(Tensor v, bool requires_grad, std::string name = {});
  Var constant(Tensor v) { return leaf(std::move(v), false); }
  Var constant_scalar(double v) { return leaf(scalar_tensor(v), false); }

  // --- primitive operations ------------------------------------------------
  Var add(Var x, Var y);
  Var sub(Var x, Var y);
  Var mul(Var x, Var y);
  Var affine(Var x, double a, double b);
  Var sigmoid(Var x);
  Var tanh(Var x);
  Var softplus(Var x);
  Var square(Var x);
  Var sqrt(Var x);
  Var recip(Var x);
  Var abs_pow(Var x, double p);
  Var sign(Var x);
  Var step(Var x);
  Var relu(Var x);
  Var matmul(Var x, Var y, bool trans_x = false, bool trans_y = false);
  Var sum_all(Var x);
  Var row_sum(Var x);
  Var col_sum(Var x);
  Var broadcast_scalar(Var x, int64_t rows, int64_t cols);
  Var broadcast_col(Var x, int64_t cols);
  Var broadcast_row(Var x, int64_t rows);
  Var concat_rows(std::span<const Var> xs);
  Var slice_rows(Var x, int64_t begin, int64_t end);
  Var gather_rows(Var x, std::vector<int64_t> idx);
  Var scatter_rows(Var x, std::vector<int64_t> idx, int64_t out_rows);
  Var reshape(Var x, int64_t rows, int64_t cols);
  Var masked_softmax_rows(Var x, std::vector<uint8_t> allowed);
  Var stop_gradient(Var x);

  // mean over all elements
  Var mean_all(Var x);

  // --- gradients ------------------------------------------------------------
  // Reverse-mode accumulation from a scalar output. The returned handles are
  // ordinary graph nodes, so calling gradient() on them again differentiates
  // through the first backward pass.
  std::vector<Var> gradient(Var output, std::span<const Var> wrt,
                            const GradientOptions& opts = {});

  // Max over all wrt elements of |analytic - central| / (|analytic| + |central| + 1e-12).
  // wrt must be leaves. Leaves all node values as they were on entry.
  double finite_difference_check(Var output, std::span<const Var> wrt, double epsilon);

  // --- record replay ----------------------------------------------------------
  void bind(const std::string& leaf_name, Tensor v);
  void set_value(Var leaf, Tensor v);
  Var find(const std::string& leaf_name) const;
  void recompute();  // replay every node in creation order

  void mark_output(const std::string& name, Var v);
  // Bind the named inputs, replay, and return the marked outputs.
  std::map<std::string, Tensor> run(const std::map<std::string, Tensor>& inputs);

  // Ancestor closure of the requested outputs as a fresh record; replaying it
  // reproduces the same output values. Named leaves keep their names.
  Graph pruned(std::span<const Var> outputs) const;

  // --- access ------------------------------------------------------------------
  const Tensor& value(Var v) const { return node(v.id).value; }
  const Node& node(int32_t id) const { return nodes_[static_cast<size_t>(id)]; }
  size_t size() const { return nodes_.size(); }
  void reserve(size_t n) { nodes_.reserve(n); }

 private:
  Var emit(Node n);
  void compute(Node& n) const;
  void check_finite(const Node& n, int32_t id) const;
  Var zeros_like_of(int32_t id);
  int32_t checked(Var v) const;

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, int32_t>> named_outputs_;
};

// Free-function sugar so model code reads like math.
inline Var operator+(Var x, Var y) { return x.graph->add(x, y); }
inline Var operator-(Var x, Var y) { return x.graph->sub(x, y); }
inline Var operator*(Var x, Var y) { return x.graph->mul(x, y); }

}  // namespace metarec::ad
