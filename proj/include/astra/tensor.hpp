#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace astra {

enum class Precision { f32, f64 };

inline Precision widest(Precision a, Precision b) {
  return (a == Precision::f64 || b == Precision::f64) ? Precision::f64 : Precision::f32;
}

// Dense row-major matrix. Vectors are 1 x n. Values are held in doubles and
// rounded to the storage precision after every producing operation, so an f32
// tensor only ever contains values representable as float.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, Precision precision = Precision::f32);
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> values,
         Precision precision = Precision::f32);

  static Tensor zeros(std::size_t rows, std::size_t cols, Precision p = Precision::f32) {
    return Tensor(rows, cols, p);
  }
  static Tensor identity(std::size_t n, Precision p = Precision::f32);
  static Tensor scalar(double v, Precision p = Precision::f32) { return Tensor(1, 1, {v}, p); }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  Precision precision() const { return precision_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double item() const;

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  // Re-applies the storage precision to every element.
  Tensor& round();
  Tensor with_precision(Precision p) const;
  Tensor rows_slice(std::size_t start, std::size_t count) const;

  bool same_shape(const Tensor& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  bool all_finite() const;
  std::string shape_string() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Precision precision_ = Precision::f32;
  std::vector<double> data_;
};

inline double round_to(double v, Precision p) {
  return p == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

double max_abs_diff(const Tensor& a, const Tensor& b);

// Boolean matrix used for attention masks.
class BoolMatrix {
 public:
  BoolMatrix() = default;
  BoolMatrix(std::size_t rows, std::size_t cols, bool fill = false)
      : rows_(rows), cols_(cols), bits_(rows * cols, fill ? 1 : 0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool operator()(std::size_t r, std::size_t c) const { return bits_[r * cols_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { bits_[r * cols_ + c] = v ? 1 : 0; }
  std::size_t row_count(std::size_t r) const;

  friend bool operator==(const BoolMatrix&, const BoolMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

}  // namespace astra
