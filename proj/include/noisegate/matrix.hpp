#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace noisegate {

// Dense row-major matrix of doubles. Vectors are 1 x n matrices.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// C = A * B
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  assert(a.cols() == b.rows());
  Matrix c(a.rows(), b.cols());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  const double* bp = b.data().data();
  double* cp = c.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* ar = a.data().data() + i * k;
    double* cr = cp + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      if (av == 0.0) continue;
      const double* br = bp + p * m;
      for (std::size_t j = 0; j < m; ++j) cr[j] += av * br[j];
    }
  }
  return c;
}

// C = A * B^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  assert(a.cols() == b.cols());
  Matrix c(a.rows(), b.rows());
  const std::size_t k = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ar = a.data().data() + i * k;
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* br = b.data().data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      c(i, j) = s;
    }
  }
  return c;
}

// acc += A^T * B
inline void add_matmul_tn(Matrix& acc, const Matrix& a, const Matrix& b) {
  assert(a.rows() == b.rows() && acc.rows() == a.cols() && acc.cols() == b.cols());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  double* cp = acc.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* ar = a.data().data() + i * k;
    const double* br = b.data().data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      if (av == 0.0) continue;
      double* cr = cp + p * m;
      for (std::size_t j = 0; j < m; ++j) cr[j] += av * br[j];
    }
  }
}

inline void add_inplace(Matrix& acc, const Matrix& x) {
  assert(acc.rows() == x.rows() && acc.cols() == x.cols());
  auto& a = acc.data();
  const auto& b = x.data();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

// Numerically stable in-place softmax of one row; -inf entries become exactly 0.
inline void softmax_inplace(std::span<double> row) {
  double mx = -INFINITY;
  for (double v : row) mx = std::max(mx, v);
  if (!std::isfinite(mx)) {
    // Fully masked row: uniform is as good as anything and keeps values finite.
    for (double& v : row) v = 1.0 / static_cast<double>(row.size());
    return;
  }
  double sum = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : row) v /= sum;
}

// log-softmax of one row, returned as a new vector.
inline std::vector<double> log_softmax(std::span<const double> row) {
  double mx = -INFINITY;
  for (double v : row) mx = std::max(mx, v);
  std::vector<double> out(row.size());
  if (!std::isfinite(mx)) {
    out.assign(row.size(), -INFINITY);
    return out;
  }
  double sum = 0.0;
  for (double v : row) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = row[i] - lse;
  return out;
}

}  // namespace noisegate
