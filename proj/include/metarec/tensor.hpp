#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace metarec {

// Dense row-major matrix of 64-bit reals. Scalars are [1,1], column vectors [n,1].
struct Tensor {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int64_t r, int64_t c) : rows(r), cols(c), data(static_cast<size_t>(r * c), 0.0) {
    if (r < 0 || c < 0) throw std::invalid_argument("Tensor: negative dimension");
  }
  Tensor(int64_t r, int64_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
    if (static_cast<int64_t>(data.size()) != r * c)
      throw std::invalid_argument("Tensor: value count does not match shape");
  }

  int64_t numel() const { return rows * cols; }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

  double& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols + c)]; }
  double at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols + c)]; }

  double scalar() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::scalar: not a scalar");
    return data[0];
  }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

inline Tensor scalar_tensor(double v) { return Tensor(1, 1, {v}); }

inline bool all_finite(const Tensor& t) {
  for (double v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

inline std::string shape_str(const Tensor& t) {
  return "[" + std::to_string(t.rows) + "," + std::to_string(t.cols) + "]";
}

}  // namespace metarec
