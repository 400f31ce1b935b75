#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tctrack {

/// Raised when operand shapes are incompatible.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised on NaN/Inf inputs where finite values are required.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Raised for invalid layer or schedule configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

/// Dense row-major float64 tensor. Rank-3 tensors are (channels, height, width);
/// rank-2 tensors are (rows, cols), used for token sequences (tokens, channels).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(numel(shape_)), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != numel(shape_))
      throw DimensionError("tensor data size " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s), 0.0); }
  static Tensor ones(Shape s) { return Tensor(std::move(s), 1.0); }
  static Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }

  const Shape& shape() const { return shape_; }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::int64_t i, std::int64_t j) { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
  double at(std::int64_t i, std::int64_t j) const {
    return data_[static_cast<std::size_t>(i * shape_[1] + j)];
  }
  double& at(std::int64_t c, std::int64_t y, std::int64_t x) {
    return data_[static_cast<std::size_t>((c * shape_[1] + y) * shape_[2] + x)];
  }
  double at(std::int64_t c, std::int64_t y, std::int64_t x) const {
    return data_[static_cast<std::size_t>((c * shape_[1] + y) * shape_[2] + x)];
  }

  Tensor reshaped(Shape s) const {
    if (numel(s) != numel(shape_))
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Deterministic generator used for all parameter init and synthetic data.
using Rng = std::mt19937_64;

inline Tensor random_uniform(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(s);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

inline Tensor random_normal(const Shape& s, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(s);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace tctrack
