#include "astra/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "astra/error.hpp"

namespace astra {

Tensor::Tensor(std::size_t rows, std::size_t cols, Precision precision)
    : rows_(rows), cols_(cols), precision_(precision), data_(rows * cols, 0.0) {
  if (rows == 0 || cols == 0) {
    throw DimensionError("tensor dimensions must be positive");
  }
}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> values, Precision precision)
    : rows_(rows), cols_(cols), precision_(precision), data_(std::move(values)) {
  if (rows == 0 || cols == 0) {
    throw DimensionError("tensor dimensions must be positive");
  }
  if (data_.size() != rows * cols) {
    throw DimensionError("value count " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string());
  }
  round();
}

Tensor Tensor::identity(std::size_t n, Precision p) {
  Tensor t(n, n, p);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on non-scalar tensor " + shape_string());
  return data_[0];
}

Tensor& Tensor::round() {
  if (precision_ == Precision::f32) {
    for (double& v : data_) v = static_cast<double>(static_cast<float>(v));
  }
  return *this;
}

Tensor Tensor::with_precision(Precision p) const {
  Tensor out = *this;
  out.precision_ = p;
  out.round();
  return out;
}

Tensor Tensor::rows_slice(std::size_t start, std::size_t count) const {
  if (start + count > rows_ || count == 0) throw DimensionError("row slice out of range");
  std::vector<double> v(data_.begin() + static_cast<std::ptrdiff_t>(start * cols_),
                        data_.begin() + static_cast<std::ptrdiff_t>((start + count) * cols_));
  return Tensor(count, cols_, std::move(v), precision_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const {
  return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw DimensionError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  }
  return m;
}

std::size_t BoolMatrix::row_count(std::size_t r) const {
  std::size_t n = 0;
  for (std::size_t c = 0; c < cols_; ++c) n += bits_[r * cols_ + c];
  return n;
}

}  // namespace astra
