#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mtpd/error.hpp"
#include "mtpd/rng.hpp"

namespace mtpd {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array of doubles.
///
/// Holds product(shape) values; every extent is positive. Values are plain
/// data, so copies are deep and comparisons are bit-level on the payload.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError("tensor shape " + shape_string(shape_) + " needs " +
                           std::to_string(shape_size(shape_)) + " values, got " +
                           std::to_string(data_.size()));
    }
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(m * n);
    for (const auto& row : rows) {
      if (row.size() != n) throw DimensionError("ragged rows in Tensor::from_rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({m, n}, std::move(data));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const noexcept {
    return data_[i * shape_[1] + j];
  }
  double& operator()(std::size_t i, std::size_t j, std::size_t k) noexcept {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const noexcept {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_extents() const {
    for (std::size_t extent : shape_) {
      if (extent == 0) throw DimensionError("zero extent in shape " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_string(t.shape()));
  }
}

inline void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string(what) + " produced a non-finite value");
}

}  // namespace detail

// c = a * b
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner extents differ for " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      const double* brow = pb + p * n;
      double* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  detail::require_finite(c, "matmul");
  return c;
}

// c = a * b^T; each output row depends only on the matching row of a.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul_nt");
  detail::require_rank(b, 2, "matmul_nt");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_nt: inner extents differ for " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()) + "^T");
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b.data() + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c(i, j) = acc;
    }
  }
  detail::require_finite(c, "matmul_nt");
  return c;
}

// c = a^T * b
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul_tn");
  detail::require_rank(b, 2, "matmul_tn");
  if (a.dim(0) != b.dim(0)) {
    throw DimensionError("matmul_tn: inner extents differ for " + shape_string(a.shape()) +
                         "^T and " + shape_string(b.shape()));
  }
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a.data() + p * m;
    const double* brow = b.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = arow[i];
      double* crow = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
  detail::require_finite(c, "matmul_tn");
  return c;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  Tensor t({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) t(j, i) = a(i, j);
  return t;
}

/// Nearest-neighbour resampling along the last axis between position counts
/// where one divides the other. Output position p reads input position
/// floor(p * in / out), which covers both upsampling (repeat) and strided
/// subsampling.
inline Tensor nearest_resample(const Tensor& f, std::size_t out_positions) {
  if (f.rank() == 0) throw DimensionError("nearest_resample: scalar input");
  const std::size_t in_positions = f.shape().back();
  if (out_positions == 0 ||
      (out_positions % in_positions != 0 && in_positions % out_positions != 0)) {
    throw ArgumentError("nearest_resample: " + std::to_string(in_positions) + " -> " +
                        std::to_string(out_positions) + " positions is not an integer ratio");
  }
  Shape shape = f.shape();
  shape.back() = out_positions;
  Tensor out(shape);
  const std::size_t rows = f.size() / in_positions;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = f.data() + r * in_positions;
    double* dst = out.data() + r * out_positions;
    for (std::size_t p = 0; p < out_positions; ++p) dst[p] = src[p * in_positions / out_positions];
  }
  return out;
}

// Column j of the result is column floor(j / factor) of f.
inline Tensor nearest_upsample(const Tensor& f, std::size_t factor) {
  if (factor == 0) throw ArgumentError("nearest_upsample: factor must be >= 1");
  if (f.rank() == 0) throw DimensionError("nearest_upsample: scalar input");
  return nearest_resample(f, f.shape().back() * factor);
}

// Keeps every `stride`-th column; left inverse of nearest_upsample.
inline Tensor stride_subsample(const Tensor& f, std::size_t stride) {
  if (stride == 0) throw ArgumentError("stride_subsample: stride must be >= 1");
  if (f.shape().back() % stride != 0) {
    throw DimensionError("stride_subsample: " + std::to_string(f.shape().back()) +
                         " positions not divisible by " + std::to_string(stride));
  }
  return nearest_resample(f, f.shape().back() / stride);
}

struct LossAndGrad {
  double loss = 0.0;
  Tensor grad;
};

/// Mean softmax cross-entropy over rows of `logits` [B x K] and its gradient
/// with respect to the logits.
inline LossAndGrad softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  detail::require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + shape_string(logits.shape()));
  }
  LossAndGrad out{0.0, Tensor(logits.shape())};
  const double inv_batch = 1.0 / static_cast<double>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= classes) {
      throw ArgumentError("softmax_cross_entropy: label " + std::to_string(labels[b]) +
                          " outside [0, " + std::to_string(classes) + ")");
    }
    const double* row = logits.data() + b * classes;
    double* grow = out.grad.data() + b * classes;
    const double peak = *std::max_element(row, row + classes);
    double denom = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
      grow[k] = std::exp(row[k] - peak);
      denom += grow[k];
    }
    // Running mean: a batch of identical rows yields exactly the per-row loss.
    const double row_loss = std::log(denom) - (row[labels[b]] - peak);
    out.loss += (row_loss - out.loss) / static_cast<double>(b + 1);
    for (std::size_t k = 0; k < classes; ++k) grow[k] = grow[k] / denom * inv_batch;
    grow[labels[b]] -= inv_batch;
  }
  if (!std::isfinite(out.loss)) throw NumericError("softmax_cross_entropy: non-finite loss");
  return out;
}

enum class Normalization { kSum, kMean };

// Sum of squared differences, optionally divided by the element count.
inline double sse(const Tensor& a, const Tensor& b, Normalization normalization) {
  if (a.shape() != b.shape()) {
    throw DimensionError("sse: shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  if (normalization == Normalization::kMean) acc /= static_cast<double>(a.size());
  if (!std::isfinite(acc)) throw NumericError("sse: non-finite result");
  return acc;
}

inline Tensor random_uniform(Shape shape, double lo, double hi, RngStream& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

inline Tensor random_normal(Shape shape, double stddev, RngStream& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = stddev * rng.normal();
  return t;
}

inline double squared_norm(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.values()) acc += v * v;
  return acc;
}

// y += alpha * x
inline void axpy(double alpha, const Tensor& x, Tensor& y) {
  if (x.shape() != y.shape()) {
    throw DimensionError("axpy: shapes " + shape_string(x.shape()) + " and " +
                         shape_string(y.shape()) + " differ");
  }
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline Tensor scaled(const Tensor& t, double alpha) {
  Tensor out = t;
  for (double& v : out.values()) v *= alpha;
  return out;
}

}  // namespace mtpd
