#include "metarec/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

namespace metarec::ad {

namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kAffine: return "affine";
    case Op::kSigmoid: return "sigmoid";
    case Op::kTanh: return "tanh";
    case Op::kSoftplus: return "softplus";
    case Op::kSquare: return "square";
    case Op::kSqrt: return "sqrt";
    case Op::kRecip: return "recip";
    case Op::kAbsPow: return "abs_pow";
    case Op::kSign: return "sign";
    case Op::kStep: return "step";
    case Op::kRelu: return "relu";
    case Op::kMatmul: return "matmul";
    case Op::kSumAll: return "sum_all";
    case Op::kRowSum: return "row_sum";
    case Op::kColSum: return "col_sum";
    case Op::kBroadcastScalar: return "broadcast_scalar";
    case Op::kBroadcastCol: return "broadcast_col";
    case Op::kBroadcastRow: return "broadcast_row";
    case Op::kConcatRows: return "concat_rows";
    case Op::kSliceRows: return "slice_rows";
    case Op::kGatherRows: return "gather_rows";
    case Op::kScatterRows: return "scatter_rows";
    case Op::kReshape: return "reshape";
    case Op::kMaskedSoftmaxRows: return "masked_softmax_rows";
    case Op::kStopGradient: return "stop_gradient";
  }
  return "?";
}

int32_t Graph::checked(Var v) const {
  if (v.graph != this || v.id < 0 || static_cast<size_t>(v.id) >= nodes_.size())
    throw std::invalid_argument("autodiff: variable does not belong to this graph");
  return v.id;
}

Var Graph::leaf(Tensor v, bool requires_grad, std::string name) {
  Node n;
  n.op = Op::kLeaf;
  n.requires_grad = requires_grad;
  n.name = std::move(name);
  n.value = std::move(v);
  return emit(std::move(n));
}

Var Graph::emit(Node n) {
  if (n.op != Op::kLeaf) compute(n);
  const int32_t id = static_cast<int32_t>(nodes_.size());
  nodes_.push_back(std::move(n));
  check_finite(nodes_.back(), id);
  return Var{this, id};
}

void Graph::check_finite(const Node& n, int32_t id) const {
  if (!all_finite(n.value))
    throw std::runtime_error("autodiff: non-finite value produced by op '" +
                             std::string(op_name(n.op)) + "' (node " + std::to_string(id) + ")");
}

// ---------------------------------------------------------------------------
// forward computation
// ---------------------------------------------------------------------------

void Graph::compute(Node& n) const {
  auto in = [&](size_t k) -> const Tensor& {
    return nodes_[static_cast<size_t>(n.inputs[k])].value;
  };
  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kAdd: {
      const Tensor &x = in(0), &y = in(1);
      n.value = Tensor(x.rows, x.cols);
      for (size_t i = 0; i < x.data.size(); ++i) n.value.data[i] = x.data[i] + y.data[i];
      break;
    }
    case Op::kSub: {
      const Tensor &x = in(0), &y = in(1);
      n.value = Tensor(x.rows, x.cols);
      for (size_t i = 0; i < x.data.size(); ++i) n.value.data[i] = x.data[i] - y.data[i];
      break;
    }
    case Op::kMul: {
      const Tensor &x = in(0), &y = in(1);
      n.value = Tensor(x.rows, x.cols);
      for (size_t i = 0; i < x.data.size(); ++i) n.value.data[i] = x.data[i] * y.data[i];
      break;
    }
    case Op::kAffine: {
      const Tensor& x = in(0);
      n.value = Tensor(x.rows, x.cols);
      for (size_t i = 0; i < x.data.size(); ++i) n.value.data[i] = n.a * x.data[i] + n.b;
      break;
    }
    case Op::kSigmoid: {
      const Tensor& x = in(0);
      n.value = Tensor(x.rows, x.cols);
      for (size_t i = 0; i < x.data.size(); ++i) n.value.data[i] = stable_sigmoid(x.data[i]);
      break;
    }
    case Op::kTanh: {
      const Tensor& x = in(0);
      n.value = Tensor(x.rows, x.cols);
      for (size_t i = 0; i < x.data.size(); ++i) n.value.data[i] = std::tanh(x.data[i]);
      break;
    }
    case Op::kSoftplus: {
      const Tensor& x = in(0);
      n.value = Tensor(x.rows, x.cols);
      for (size_t i = 0; i < x.data.size(); ++i) n.value.data[i] = stable_softplus(x.data[i]);
      break;
    }
    case Op::kSquare: {
      const Tensor& x = in(0);
      n.value = Tensor(x.rows, x.cols);
      for (size_t i = 0; i < x.data.size(); ++i) n.value.data[i] = x.data[i] * x.data[i];
      break;
    }
    case Op::kSqrt: {
      const Tensor& x = in(0);
      n.value = Tensor(x.rows, x.cols);
      for (size_t i = 0; i < x.data.size(); ++i) n.value.data[i] = std::sqrt(x.data[i]);
      break;
    }
    case Op::kRecip: {
      const Tensor& x = in(0);
      n.value = Tensor(x.rows, x.cols);
      for (size_t i = 0; i < x.data.size(); ++i) n.value.data[i] = 1.0 / x.data[i];
      break;
    }
    case Op::kAbsPow: {
      const Tensor& x = in(0);
      n.value = Tensor(x.rows, x.cols);
      for (size_t i = 0; i < x.data.size(); ++i)
        n.value.data[i] = std::pow(std::abs(x.data[i]), n.a);
      break;
    }
    case Op::kSign: {
      const Tensor& x = in(0);
      n.value = Tensor(x.rows, x.cols);
      for (size_t i = 0; i < x.data.size(); ++i)
        n.value.data[i] = x.data[i] > 0.0 ? 1.0 : (x.data[i] < 0.0 ? -1.0 : 0.0);
      break;
    }
    case Op::kStep: {
      const Tensor& x = in(0);
      n.value = Tensor(x.rows, x.cols);
      for (size_t i = 0; i < x.data.size(); ++i) n.value.data[i] = x.data[i] > 0.0 ? 1.0 : 0.0;
      break;
    }
    case Op::kRelu: {
      const Tensor& x = in(0);
      n.value = Tensor(x.rows, x.cols);
      for (size_t i = 0; i < x.data.size(); ++i) n.value.data[i] = std::max(0.0, x.data[i]);
      break;
    }
    case Op::kMatmul: {
      const Tensor &x = in(0), &y = in(1);
      const bool tx = n.i0 != 0, ty = n.i1 != 0;
      const int64_t m = tx ? x.cols : x.rows;
      const int64_t k = tx ? x.rows : x.cols;
      const int64_t c = ty ? y.rows : y.cols;
      Tensor out(m, c);
      if (!tx && !ty) {
        for (int64_t i = 0; i < m; ++i) {
          double* orow = &out.data[static_cast<size_t>(i * c)];
          const double* xrow = &x.data[static_cast<size_t>(i * k)];
          for (int64_t p = 0; p < k; ++p) {
            const double xv = xrow[p];
            if (xv == 0.0) continue;
            const double* yrow = &y.data[static_cast<size_t>(p * c)];
            for (int64_t j = 0; j < c; ++j) orow[j] += xv * yrow[j];
          }
        }
      } else if (!tx && ty) {
        for (int64_t i = 0; i < m; ++i) {
          const double* xrow = &x.data[static_cast<size_t>(i * k)];
          double* orow = &out.data[static_cast<size_t>(i * c)];
          for (int64_t j = 0; j < c; ++j) {
            const double* yrow = &y.data[static_cast<size_t>(j * k)];
            double acc = 0.0;
            for (int64_t p = 0; p < k; ++p) acc += xrow[p] * yrow[p];
            orow[j] = acc;
          }
        }
      } else if (tx && !ty) {
        for (int64_t p = 0; p < k; ++p) {
          const double* xrow = &x.data[static_cast<size_t>(p * m)];
          const double* yrow = &y.data[static_cast<size_t>(p * c)];
          for (int64_t i = 0; i < m; ++i) {
            const double xv = xrow[i];
            if (xv == 0.0) continue;
            double* orow = &out.data[static_cast<size_t>(i * c)];
            for (int64_t j = 0; j < c; ++j) orow[j] += xv * yrow[j];
          }
        }
      } else {
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < c; ++j) {
            double acc = 0.0;
            for (int64_t p = 0; p < k; ++p)
              acc += x.data[static_cast<size_t>(p * m + i)] * y.data[static_cast<size_t>(j * k + p)];
            out.data[static_cast<size_t>(i * c + j)] = acc;
          }
      }
      n.value = std::move(out);
      break;
    }
    case Op::kSumAll: {
      const Tensor& x = in(0);
      double acc = 0.0;
      for (double v : x.data) acc += v;
      n.value = scalar_tensor(acc);
      break;
    }
    case Op::kRowSum: {
      const Tensor& x = in(0);
      n.value = Tensor(x.rows, 1);
      for (int64_t i = 0; i < x.rows; ++i) {
        double acc = 0.0;
        const double* row = &x.data[static_cast<size_t>(i * x.cols)];
        for (int64_t j = 0; j < x.cols; ++j) acc += row[j];
        n.value.data[static_cast<size_t>(i)] = acc;
      }
      break;
    }
    case Op::kColSum: {
      const Tensor& x = in(0);
      n.value = Tensor(1, x.cols);
      for (int64_t i = 0; i < x.rows; ++i) {
        const double* row = &x.data[static_cast<size_t>(i * x.cols)];
        for (int64_t j = 0; j < x.cols; ++j) n.value.data[static_cast<size_t>(j)] += row[j];
      }
      break;
    }
    case Op::kBroadcastScalar: {
      const double v = in(0).data[0];
      n.value = Tensor(n.i0, n.i1);
      n.value.fill(v);
      break;
    }
    case Op::kBroadcastCol: {
      const Tensor& x = in(0);
      n.value = Tensor(x.rows, n.i0);
      for (int64_t i = 0; i < x.rows; ++i) {
        const double v = x.data[static_cast<size_t>(i)];
        double* row = &n.value.data[static_cast<size_t>(i * n.i0)];
        for (int64_t j = 0; j < n.i0; ++j) row[j] = v;
      }
      break;
    }
    case Op::kBroadcastRow: {
      const Tensor& x = in(0);
      n.value = Tensor(n.i0, x.cols);
      for (int64_t i = 0; i < n.i0; ++i)
        std::memcpy(&n.value.data[static_cast<size_t>(i * x.cols)], x.data.data(),
                    sizeof(double) * static_cast<size_t>(x.cols));
      break;
    }
    case Op::kConcatRows: {
      const int64_t cols = in(0).cols;
      int64_t rows = 0;
      for (size_t k2 = 0; k2 < n.inputs.size(); ++k2) rows += in(k2).rows;
      n.value = Tensor(rows, cols);
      int64_t off = 0;
      for (size_t k2 = 0; k2 < n.inputs.size(); ++k2) {
        const Tensor& x = in(k2);
        std::memcpy(&n.value.data[static_cast<size_t>(off * cols)], x.data.data(),
                    sizeof(double) * x.data.size());
        off += x.rows;
      }
      break;
    }
    case Op::kSliceRows: {
      const Tensor& x = in(0);
      const int64_t rows = n.i1 - n.i0;
      n.value = Tensor(rows, x.cols);
      std::memcpy(n.value.data.data(), &x.data[static_cast<size_t>(n.i0 * x.cols)],
                  sizeof(double) * static_cast<size_t>(rows * x.cols));
      break;
    }
    case Op::kGatherRows: {
      const Tensor& x = in(0);
      const auto& idx = *n.indices;
      n.value = Tensor(static_cast<int64_t>(idx.size()), x.cols);
      for (size_t i = 0; i < idx.size(); ++i)
        std::memcpy(&n.value.data[i * static_cast<size_t>(x.cols)],
                    &x.data[static_cast<size_t>(idx[i] * x.cols)],
                    sizeof(double) * static_cast<size_t>(x.cols));
      break;
    }
    case Op::kScatterRows: {
      const Tensor& x = in(0);
      const auto& idx = *n.indices;
      n.value = Tensor(n.i0, x.cols);
      for (size_t i = 0; i < idx.size(); ++i) {
        double* dst = &n.value.data[static_cast<size_t>(idx[i] * x.cols)];
        const double* src = &x.data[i * static_cast<size_t>(x.cols)];
        for (int64_t j = 0; j < x.cols; ++j) dst[j] += src[j];
      }
      break;
    }
    case Op::kReshape: {
      const Tensor& x = in(0);
      n.value = Tensor(n.i0, n.i1, x.data);
      break;
    }
    case Op::kMaskedSoftmaxRows: {
      const Tensor& x = in(0);
      const auto& allowed = *n.mask;
      n.value = Tensor(x.rows, x.cols);
      for (int64_t i = 0; i < x.rows; ++i) {
        const double* row = &x.data[static_cast<size_t>(i * x.cols)];
        const uint8_t* arow = &allowed[static_cast<size_t>(i * x.cols)];
        double* orow = &n.value.data[static_cast<size_t>(i * x.cols)];
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < x.cols; ++j)
          if (arow[j]) mx = std::max(mx, row[j]);
        if (!std::isfinite(mx)) continue;  // fully masked row stays zero
        double sum = 0.0;
        for (int64_t j = 0; j < x.cols; ++j) {
          if (arow[j]) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
          }
        }
        const double inv = 1.0 / sum;
        for (int64_t j = 0; j < x.cols; ++j) orow[j] *= inv;
      }
      break;
    }
    case Op::kStopGradient:
      n.value = in(0);
      break;
  }
}

// ---------------------------------------------------------------------------
// op emitters (shape validation lives here)
// ---------------------------------------------------------------------------

namespace {
[[noreturn]] void shape_error(const char* what, const Tensor& x) {
  throw std::invalid_argument(std::string("autodiff: ") + what + ", got " + shape_str(x));
}
}  // namespace

Var Graph::add(Var x, Var y) {
  Node n;
  n.op = Op::kAdd;
  n.inputs = {checked(x), checked(y)};
  if (!value(x).same_shape(value(y)))
    throw std::invalid_argument("autodiff: add shape mismatch " + shape_str(value(x)) + " vs " +
                                shape_str(value(y)));
  n.requires_grad = node(x.id).requires_grad || node(y.id).requires_grad;
  return emit(std::move(n));
}

Var Graph::sub(Var x, Var y) {
  Node n;
  n.op = Op::kSub;
  n.inputs = {checked(x), checked(y)};
  if (!value(x).same_shape(value(y)))
    throw std::invalid_argument("autodiff: sub shape mismatch " + shape_str(value(x)) + " vs " +
                                shape_str(value(y)));
  n.requires_grad = node(x.id).requires_grad || node(y.id).requires_grad;
  return emit(std::move(n));
}

Var Graph::mul(Var x, Var y) {
  Node n;
  n.op = Op::kMul;
  n.inputs = {checked(x), checked(y)};
  if (!value(x).same_shape(value(y)))
    throw std::invalid_argument("autodiff: mul shape mismatch " + shape_str(value(x)) + " vs " +
                                shape_str(value(y)));
  n.requires_grad = node(x.id).requires_grad || node(y.id).requires_grad;
  return emit(std::move(n));
}

#define METAREC_UNARY(method, opcode)                       \
  Var Graph::method(Var x) {                                \
    Node n;                                                 \
    n.op = opcode;                                          \
    n.inputs = {checked(x)};                                \
    n.requires_grad = node(x.id).requires_grad;             \
    return emit(std::move(n));                              \
  }

METAREC_UNARY(sigmoid, Op::kSigmoid)
METAREC_UNARY(tanh, Op::kTanh)
METAREC_UNARY(softplus, Op::kSoftplus)
METAREC_UNARY(square, Op::kSquare)
METAREC_UNARY(sqrt, Op::kSqrt)
METAREC_UNARY(recip, Op::kRecip)
METAREC_UNARY(relu, Op::kRelu)
#undef METAREC_UNARY

Var Graph::affine(Var x, double a, double b) {
  Node n;
  n.op = Op::kAffine;
  n.inputs = {checked(x)};
  n.a = a;
  n.b = b;
  n.requires_grad = node(x.id).requires_grad;
  return emit(std::move(n));
}

Var Graph::abs_pow(Var x, double p) {
  Node n;
  n.op = Op::kAbsPow;
  n.inputs = {checked(x)};
  n.a = p;
  n.requires_grad = node(x.id).requires_grad;
  return emit(std::move(n));
}

Var Graph::sign(Var x) {
  Node n;
  n.op = Op::kSign;
  n.inputs = {checked(x)};
  n.requires_grad = false;  // subgradient 0 everywhere
  return emit(std::move(n));
}

Var Graph::step(Var x) {
  Node n;
  n.op = Op::kStep;
  n.inputs = {checked(x)};
  n.requires_grad = false;
  return emit(std::move(n));
}

Var Graph::matmul(Var x, Var y, bool tx, bool ty) {
  Node n;
  n.op = Op::kMatmul;
  n.inputs = {checked(x), checked(y)};
  n.i0 = tx ? 1 : 0;
  n.i1 = ty ? 1 : 0;
  const Tensor &xv = value(x), &yv = value(y);
  const int64_t kx = tx ? xv.rows : xv.cols;
  const int64_t ky = ty ? yv.cols : yv.rows;
  if (kx != ky)
    throw std::invalid_argument("autodiff: matmul inner dims differ, " + shape_str(xv) + " vs " +
                                shape_str(yv));
  n.requires_grad = node(x.id).requires_grad || node(y.id).requires_grad;
  return emit(std::move(n));
}

Var Graph::sum_all(Var x) {
  Node n;
  n.op = Op::kSumAll;
  n.inputs = {checked(x)};
  n.requires_grad = node(x.id).requires_grad;
  return emit(std::move(n));
}

Var Graph::mean_all(Var x) {
  const int64_t count = value(x).numel();
  return affine(sum_all(x), 1.0 / static_cast<double>(count), 0.0);
}

Var Graph::row_sum(Var x) {
  Node n;
  n.op = Op::kRowSum;
  n.inputs = {checked(x)};
  n.requires_grad = node(x.id).requires_grad;
  return emit(std::move(n));
}

Var Graph::col_sum(Var x) {
  Node n;
  n.op = Op::kColSum;
  n.inputs = {checked(x)};
  n.requires_grad = node(x.id).requires_grad;
  return emit(std::move(n));
}

Var Graph::broadcast_scalar(Var x, int64_t rows, int64_t cols) {
  if (value(x).numel() != 1) shape_error("broadcast_scalar needs a scalar", value(x));
  Node n;
  n.op = Op::kBroadcastScalar;
  n.inputs = {checked(x)};
  n.i0 = rows;
  n.i1 = cols;
  n.requires_grad = node(x.id).requires_grad;
  return emit(std::move(n));
}

Var Graph::broadcast_col(Var x, int64_t cols) {
  if (value(x).cols != 1) shape_error("broadcast_col needs a column vector", value(x));
  Node n;
  n.op = Op::kBroadcastCol;
  n.inputs = {checked(x)};
  n.i0 = cols;
  n.requires_grad = node(x.id).requires_grad;
  return emit(std::move(n));
}

Var Graph::broadcast_row(Var x, int64_t rows) {
  if (value(x).rows != 1) shape_error("broadcast_row needs a row vector", value(x));
  Node n;
  n.op = Op::kBroadcastRow;
  n.inputs = {checked(x)};
  n.i0 = rows;
  n.requires_grad = node(x.id).requires_grad;
  return emit(std::move(n));
}

Var Graph::concat_rows(std::span<const Var> xs) {
  if (xs.empty()) throw std::invalid_argument("autodiff: concat_rows of nothing");
  Node n;
  n.op = Op::kConcatRows;
  for (Var v : xs) {
    n.inputs.push_back(checked(v));
    if (value(v).cols != value(xs[0]).cols)
      throw std::invalid_argument("autodiff: concat_rows column mismatch");
    n.requires_grad = n.requires_grad || node(v.id).requires_grad;
  }
  return emit(std::move(n));
}

Var Graph::slice_rows(Var x, int64_t begin, int64_t end) {
  const Tensor& xv = value(x);
  if (begin < 0 || end > xv.rows || begin >= end)
    throw std::invalid_argument("autodiff: slice_rows bounds [" + std::to_string(begin) + "," +
                                std::to_string(end) + ") out of range for " + shape_str(xv));
  Node n;
  n.op = Op::kSliceRows;
  n.inputs = {checked(x)};
  n.i0 = begin;
  n.i1 = end;
  n.requires_grad = node(x.id).requires_grad;
  return emit(std::move(n));
}

Var Graph::gather_rows(Var x, std::vector<int64_t> idx) {
  const Tensor& xv = value(x);
  for (int64_t i : idx)
    if (i < 0 || i >= xv.rows)
      throw std::invalid_argument("autodiff: gather_rows index " + std::to_string(i) +
                                  " out of range for " + shape_str(xv));
  Node n;
  n.op = Op::kGatherRows;
  n.inputs = {checked(x)};
  n.indices = std::make_shared<const std::vector<int64_t>>(std::move(idx));
  n.requires_grad = node(x.id).requires_grad;
  return emit(std::move(n));
}

Var Graph::scatter_rows(Var x, std::vector<int64_t> idx, int64_t out_rows) {
  const Tensor& xv = value(x);
  if (static_cast<int64_t>(idx.size()) != xv.rows)
    throw std::invalid_argument("autodiff: scatter_rows index count mismatch");
  for (int64_t i : idx)
    if (i < 0 || i >= out_rows) throw std::invalid_argument("autodiff: scatter_rows index out of range");
  Node n;
  n.op = Op::kScatterRows;
  n.inputs = {checked(x)};
  n.indices = std::make_shared<const std::vector<int64_t>>(std::move(idx));
  n.i0 = out_rows;
  n.requires_grad = node(x.id).requires_grad;
  return emit(std::move(n));
}

Var Graph::reshape(Var x, int64_t rows, int64_t cols) {
  const Tensor& xv = value(x);
  if (rows * cols != xv.numel())
    throw std::invalid_argument("autodiff: reshape to [" + std::to_string(rows) + "," +
                                std::to_string(cols) + "] from " + shape_str(xv));
  Node n;
  n.op = Op::kReshape;
  n.inputs = {checked(x)};
  n.i0 = rows;
  n.i1 = cols;
  n.requires_grad = node(x.id).requires_grad;
  return emit(std::move(n));
}

Var Graph::masked_softmax_rows(Var x, std::vector<uint8_t> allowed) {
  const Tensor& xv = value(x);
  if (static_cast<int64_t>(allowed.size()) != xv.numel())
    throw std::invalid_argument("autodiff: masked_softmax_rows mask size mismatch");
  Node n;
  n.op = Op::kMaskedSoftmaxRows;
  n.inputs = {checked(x)};
  n.mask = std::make_shared<const std::vector<uint8_t>>(std::move(allowed));
  n.requires_grad = node(x.id).requires_grad;
  return emit(std::move(n));
}

Var Graph::stop_gradient(Var x) {
  Node n;
  n.op = Op::kStopGradient;
  n.inputs = {checked(x)};
  n.requires_grad = false;
  return emit(std::move(n));
}

// ---------------------------------------------------------------------------
// reverse-mode gradient construction
// ---------------------------------------------------------------------------

Var Graph::zeros_like_of(int32_t id) {
  const Tensor& v = nodes_[static_cast<size_t>(id)].value;
  return constant(Tensor(v.rows, v.cols));
}

std::vector<Var> Graph::gradient(Var output, std::span<const Var> wrt,
                                 const GradientOptions& opts) {
  const int32_t out_id = checked(output);
  if (node(out_id).value.numel() != 1)
    throw std::invalid_argument("autodiff: gradient output must be scalar, got " +
                                shape_str(node(out_id).value));

  const size_t frozen = nodes_.size();  // only pre-existing nodes participate

  // desc[i]: node i depends (differentiably) on at least one wrt node.
  std::vector<uint8_t> desc(frozen, 0);
  for (Var w : wrt) desc[static_cast<size_t>(checked(w))] = 1;
  for (size_t i = 0; i < frozen; ++i) {
    if (desc[i]) continue;
    const Node& n = nodes_[i];
    if (!n.requires_grad) continue;
    for (int32_t j : n.inputs)
      if (desc[static_cast<size_t>(j)]) {
        desc[i] = 1;
        break;
      }
  }

  // anc[i]: output depends on node i (any path).
  std::vector<uint8_t> anc(frozen, 0);
  anc[static_cast<size_t>(out_id)] = 1;
  for (int32_t i = out_id; i >= 0; --i) {
    if (!anc[static_cast<size_t>(i)]) continue;
    for (int32_t j : nodes_[static_cast<size_t>(i)].inputs) anc[static_cast<size_t>(j)] = 1;
  }

  std::vector<int32_t> adj(frozen, -1);
  if (desc[static_cast<size_t>(out_id)])
    adj[static_cast<size_t>(out_id)] = constant_scalar(1.0).id;

  auto accumulate = [&](int32_t target, Var contrib) {
    int32_t& slot = adj[static_cast<size_t>(target)];
    slot = slot < 0 ? contrib.id : add(Var{this, slot}, contrib).id;
  };

  for (int32_t i = out_id; i >= 0; --i) {
    const size_t si = static_cast<size_t>(i);
    if (adj[si] < 0 || !anc[si] || !desc[si]) continue;
    // Snapshot: the node's input list may move if nodes_ reallocates while
    // emitting backward ops, so copy what we need first.
    const Node& n = nodes_[si];
    if (n.op == Op::kLeaf) continue;
    const std::vector<int32_t> ins = n.inputs;
    const Var g{this, adj[si]};
    const Var self{this, i};
    auto want = [&](size_t k) { return desc[static_cast<size_t>(ins[k])] != 0; };
    auto input = [&](size_t k) { return Var{this, ins[k]}; };

    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kAdd:
        if (want(0)) accumulate(ins[0], g);
        if (want(1)) accumulate(ins[1], g);
        break;
      case Op::kSub:
        if (want(0)) accumulate(ins[0], g);
        if (want(1)) accumulate(ins[1], affine(g, -1.0, 0.0));
        break;
      case Op::kMul:
        if (want(0)) accumulate(ins[0], mul(g, input(1)));
        if (want(1)) accumulate(ins[1], mul(g, input(0)));
        break;
      case Op::kAffine:
        if (want(0)) accumulate(ins[0], affine(g, n.a, 0.0));
        break;
      case Op::kSigmoid:
        if (want(0)) accumulate(ins[0], mul(g, mul(self, affine(self, -1.0, 1.0))));
        break;
      case Op::kTanh:
        if (want(0)) accumulate(ins[0], mul(g, affine(square(self), -1.0, 1.0)));
        break;
      case Op::kSoftplus:
        if (want(0)) accumulate(ins[0], mul(g, sigmoid(input(0))));
        break;
      case Op::kSquare:
        if (want(0)) accumulate(ins[0], mul(g, affine(input(0), 2.0, 0.0)));
        break;
      case Op::kSqrt:
        if (want(0)) accumulate(ins[0], mul(g, recip(affine(self, 2.0, 0.0))));
        break;
      case Op::kRecip:
        if (want(0)) accumulate(ins[0], affine(mul(g, square(self)), -1.0, 0.0));
        break;
      case Op::kAbsPow: {
        // d|x|^p/dx = p * |x|^(p-1) * sign(x); subgradient 0 at x = 0, and the
        // p = 0 case is the constant 1 with derivative 0 everywhere.
        if (want(0) && n.a != 0.0) {
          const double p = n.a;
          Var d = mul(abs_pow(input(0), p - 1.0), sign(input(0)));
          accumulate(ins[0], mul(g, affine(d, p, 0.0)));
        }
        break;
      }
      case Op::kSign:
      case Op::kStep:
      case Op::kStopGradient:
        break;
      case Op::kRelu:
        if (want(0)) accumulate(ins[0], mul(g, step(input(0))));
        break;
      case Op::kMatmul: {
        const bool tx = n.i0 != 0, ty = n.i1 != 0;
        if (want(0)) {
          Var dx = tx ? matmul(input(1), g, ty, true) : matmul(g, input(1), false, !ty);
          accumulate(ins[0], dx);
        }
        if (want(1)) {
          Var dy = ty ? matmul(g, input(0), true, tx) : matmul(input(0), g, !tx, false);
          accumulate(ins[1], dy);
        }
        break;
      }
      case Op::kSumAll:
        if (want(0)) {
          const Tensor& xv = value(input(0));
          accumulate(ins[0], broadcast_scalar(g, xv.rows, xv.cols));
        }
        break;
      case Op::kRowSum:
        if (want(0)) accumulate(ins[0], broadcast_col(g, value(input(0)).cols));
        break;
      case Op::kColSum:
        if (want(0)) accumulate(ins[0], broadcast_row(g, value(input(0)).rows));
        break;
      case Op::kBroadcastScalar:
        if (want(0)) accumulate(ins[0], sum_all(g));
        break;
      case Op::kBroadcastCol:
        if (want(0)) accumulate(ins[0], row_sum(g));
        break;
      case Op::kBroadcastRow:
        if (want(0)) accumulate(ins[0], col_sum(g));
        break;
      case Op::kConcatRows: {
        int64_t off = 0;
        for (size_t k = 0; k < ins.size(); ++k) {
          const int64_t rows = value(input(k)).rows;
          if (want(k)) accumulate(ins[k], slice_rows(g, off, off + rows));
          off += rows;
        }
        break;
      }
      case Op::kSliceRows:
        if (want(0)) {
          std::vector<int64_t> idx(static_cast<size_t>(n.i1 - n.i0));
          for (size_t k = 0; k < idx.size(); ++k) idx[k] = n.i0 + static_cast<int64_t>(k);
          accumulate(ins[0], scatter_rows(g, std::move(idx), value(input(0)).rows));
        }
        break;
      case Op::kGatherRows:
        if (want(0)) accumulate(ins[0], scatter_rows(g, *n.indices, value(input(0)).rows));
        break;
      case Op::kScatterRows:
        if (want(0)) accumulate(ins[0], gather_rows(g, *n.indices));
        break;
      case Op::kReshape:
        if (want(0)) {
          const Tensor& xv = value(input(0));
          accumulate(ins[0], reshape(g, xv.rows, xv.cols));
        }
        break;
      case Op::kMaskedSoftmaxRows: {
        // dS = y * (g - rowsum(g*y) broadcast); masked entries have y = 0.
        if (want(0)) {
          Var gy = mul(g, self);
          Var corr = broadcast_col(row_sum(gy), value(self).cols);
          accumulate(ins[0], mul(self, sub(g, corr)));
        }
        break;
      }
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (Var w : wrt) {
    const int32_t a = adj[static_cast<size_t>(w.id)];
    if (a >= 0) {
      out.push_back(Var{this, a});
    } else {
      if (opts.strict)
        throw std::invalid_argument(
            "autodiff: strict gradient requested for a parameter the output does not depend on");
      out.push_back(zeros_like_of(w.id));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// replay / finite differences / pruning
// ---------------------------------------------------------------------------

void Graph::recompute() {
  for (size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.op == Op::kLeaf) continue;
    compute(n);
    check_finite(n, static_cast<int32_t>(i));
  }
}

void Graph::set_value(Var leaf, Tensor v) {
  Node& n = nodes_[static_cast<size_t>(checked(leaf))];
  if (n.op != Op::kLeaf) throw std::invalid_argument("autodiff: set_value target is not a leaf");
  if (!n.value.same_shape(v))
    throw std::invalid_argument("autodiff: set_value shape mismatch, expected " +
                                shape_str(n.value) + " got " + shape_str(v));
  n.value = std::move(v);
  check_finite(n, leaf.id);
}

Var Graph::find(const std::string& leaf_name) const {
  for (size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].op == Op::kLeaf && nodes_[i].name == leaf_name)
      return Var{const_cast<Graph*>(this), static_cast<int32_t>(i)};
  throw std::invalid_argument("autodiff: no leaf named '" + leaf_name + "'");
}

void Graph::bind(const std::string& leaf_name, Tensor v) { set_value(find(leaf_name), std::move(v)); }

void Graph::mark_output(const std::string& name, Var v) {
  named_outputs_.emplace_back(name, checked(v));
}

std::map<std::string, Tensor> Graph::run(const std::map<std::string, Tensor>& inputs) {
  for (const auto& [name, tensor] : inputs) bind(name, tensor);
  recompute();
  std::map<std::string, Tensor> out;
  for (const auto& [name, id] : named_outputs_) out[name] = nodes_[static_cast<size_t>(id)].value;
  return out;
}

double Graph::finite_difference_check(Var output, std::span<const Var> wrt, double epsilon) {
  if (epsilon <= 0.0) throw std::invalid_argument("autodiff: epsilon must be positive");
  for (Var w : wrt)
    if (node(checked(w)).op != Op::kLeaf)
      throw std::invalid_argument("autodiff: finite differences need leaf parameters");

  std::vector<Var> grads = gradient(output, wrt);
  std::vector<Tensor> analytic;
  analytic.reserve(grads.size());
  for (Var g : grads) analytic.push_back(value(g));

  double worst = 0.0;
  for (size_t w = 0; w < wrt.size(); ++w) {
    Node& leaf_node = nodes_[static_cast<size_t>(wrt[w].id)];
    for (size_t e = 0; e < leaf_node.value.data.size(); ++e) {
      const double orig = leaf_node.value.data[e];
      leaf_node.value.data[e] = orig + epsilon;
      recompute();
      const double f_plus = node(output.id).value.scalar();
      leaf_node.value.data[e] = orig - epsilon;
      recompute();
      const double f_minus = node(output.id).value.scalar();
      leaf_node.value.data[e] = orig;
      const double central = (f_plus - f_minus) / (2.0 * epsilon);
      const double a = analytic[w].data[e];
      const double rel = std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12);
      worst = std::max(worst, rel);
    }
  }
  recompute();  // restore every node value
  return worst;
}

Graph Graph::pruned(std::span<const Var> outputs) const {
  std::vector<uint8_t> keep(nodes_.size(), 0);
  for (Var v : outputs) keep[static_cast<size_t>(checked(v))] = 1;
  for (int32_t i = static_cast<int32_t>(nodes_.size()) - 1; i >= 0; --i) {
    if (!keep[static_cast<size_t>(i)]) continue;
    for (int32_t j : nodes_[static_cast<size_t>(i)].inputs) keep[static_cast<size_t>(j)] = 1;
  }
  Graph out;
  std::vector<int32_t> remap(nodes_.size(), -1);
  for (size_t i = 0; i < nodes_.size(); ++i) {
    if (!keep[i]) continue;
    Node copy = nodes_[i];
    for (int32_t& j : copy.inputs) j = remap[static_cast<size_t>(j)];
    remap[i] = static_cast<int32_t>(out.nodes_.size());
    out.nodes_.push_back(std::move(copy));
  }
  for (const auto& [name, id] : named_outputs_)
    if (remap[static_cast<size_t>(id)] >= 0)
      out.named_outputs_.emplace_back(name, remap[static_cast<size_t>(id)]);
  return out;
}

}  // namespace metarec::ad
